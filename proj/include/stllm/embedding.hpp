#pragma once

#include <cstddef>
#include <random>
#include <span>
#include <string>

#include "stllm/autodiff.hpp"
#include "stllm/parameter.hpp"

namespace stllm {

enum class Activation { Relu, Gelu, Identity };

Activation activation_from_string(const std::string& name);
std::string to_string(Activation a);
ad::Var apply_activation(const ad::Var& x, Activation a);

struct EmbeddingConfig {
  std::size_t d_model = 16;  // D
  std::size_t input_steps = 12;  // P
  std::size_t channels = 1;  // C
  std::size_t steps_per_day = 48;
  std::size_t days_per_week = 7;
  Activation spatial_activation = Activation::Relu;

  void validate() const;
};

/// Which embedding branches feed the fusion layer. A disabled branch is
/// replaced by zeros of the same shape, so the fused width never changes.
struct BranchMask {
  bool temporal = true;
  bool spatial = true;
};

/// [P, N, C] -> [N, P*C] with feature index p*C + c (one token per station).
Tensor to_token_layout(const Tensor& x_pnc);

/// Token, temporal and spatial embeddings plus the fusion layer.
///
/// Inputs are token-major: `x` is [..., N, P*C] (see to_token_layout), with any
/// number of leading batch axes. Outputs keep the leading axes.
///
/// Parameters (prefix `embed.` / `fusion.`):
///   embed.token.{w,b}          (P*C) x D, D        pointwise token projection
///   embed.day, embed.week      T_d x D, T_w x D    calendar lookup tables
///   embed.spatial.proj_{w,b}   (P*C) x D, D        history -> D pre-projection
///   embed.spatial.{w,b}        D x D, D            adaptive spatial map
///   fusion.{w,b}               3D x 3D, 3D         pointwise fusion
class StEmbedding {
 public:
  StEmbedding(const EmbeddingConfig& config, ParameterSet& params, std::mt19937_64& rng);

  [[nodiscard]] const EmbeddingConfig& config() const noexcept { return config_; }
  [[nodiscard]] std::size_t fused_width() const noexcept { return 3 * config_.d_model; }

  [[nodiscard]] ad::Var embed_tokens(const ad::Var& x) const;
  /// One (day, week) pair per sample, broadcast over `stations`. Result is
  /// [B, N, D] for B = day.size() (or [N, D] when `batched` is false and B == 1).
  [[nodiscard]] ad::Var embed_temporal(std::span<const std::size_t> day, std::span<const std::size_t> week,
                                       std::size_t stations, bool batched = true) const;
  [[nodiscard]] ad::Var embed_spatial(const ad::Var& x) const;
  [[nodiscard]] ad::Var fuse(const ad::Var& e_token, const ad::Var& e_spatial, const ad::Var& e_temporal) const;

  /// Full branch: [B, N, P*C] -> [B, N, 3D].
  [[nodiscard]] ad::Var forward(const ad::Var& x, std::span<const std::size_t> day,
                                std::span<const std::size_t> week, BranchMask mask = {}) const;

 private:
  void check_input(const ad::Var& x, const char* op) const;

  EmbeddingConfig config_;
  const Parameter* token_w_;
  const Parameter* token_b_;
  const Parameter* day_;
  const Parameter* week_;
  const Parameter* spatial_proj_w_;
  const Parameter* spatial_proj_b_;
  const Parameter* spatial_w_;
  const Parameter* spatial_b_;
  const Parameter* fusion_w_;
  const Parameter* fusion_b_;
};

/// Seeded N(0, std^2) tensor.
Tensor random_normal(const Shape& shape, double std, std::mt19937_64& rng);

}  // namespace stllm
