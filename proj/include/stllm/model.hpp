#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "stllm/checkpoint.hpp"
#include "stllm/data.hpp"
#include "stllm/embedding.hpp"
#include "stllm/head.hpp"
#include "stllm/parameter.hpp"
#include "stllm/transformer.hpp"

namespace stllm {

struct ModelConfig {
  std::size_t d_model = 16;  // D; the transformer runs at width 3D
  std::size_t heads = 4;
  std::size_t layers = 6;  // L = F + U
  std::size_t unfrozen_layers = 2;  // U
  FreezeMode freeze_mode = FreezeMode::PFA;
  std::size_t ffn_width = 0;  // 0 selects 4 * 3D
  double dropout = 0.1;
  std::size_t max_tokens = 512;  // N_max
  std::size_t input_steps = 12;  // P
  std::size_t output_steps = 12;  // S
  std::size_t channels = 1;  // C
  std::size_t steps_per_day = 48;
  std::size_t days_per_week = 7;
  bool causal = false;
  Activation spatial_activation = Activation::Relu;
  Activation ffn_activation = Activation::Relu;
  /// false replaces the transformer stack with the identity.
  bool use_llm = true;
  BranchMask branches;
  std::uint64_t seed = 1;

  [[nodiscard]] std::size_t frozen_layers() const noexcept { return layers - unfrozen_layers; }
  [[nodiscard]] std::size_t width() const noexcept { return 3 * d_model; }
  void validate() const;

  [[nodiscard]] nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

/// One mini-batch in model layout.
struct Batch {
  Tensor x;  // [B, N, P*C], token-major
  Tensor y;  // [B, S, N, C]
  std::vector<std::size_t> day;
  std::vector<std::size_t> week;

  [[nodiscard]] std::size_t size() const noexcept { return day.size(); }
};

/// Builds a batch from `windows[order[begin..end)]`, reading values from
/// `series` (which must have the windows' source shape, e.g. its normalized copy).
Batch make_batch(std::span<const data::WindowSample> windows, std::span<const std::size_t> order, std::size_t begin,
                 std::size_t end, const data::TrafficTensor& series);

/// Embedding -> fusion -> partially frozen transformer -> regression head.
class StLlm {
 public:
  explicit StLlm(const ModelConfig& config);

  StLlm(const StLlm&) = delete;
  StLlm& operator=(const StLlm&) = delete;

  [[nodiscard]] const ModelConfig& config() const noexcept { return config_; }
  [[nodiscard]] ParameterSet& parameters() noexcept { return params_; }
  [[nodiscard]] const ParameterSet& parameters() const noexcept { return params_; }
  [[nodiscard]] const StEmbedding& embedding() const noexcept { return embedding_; }
  [[nodiscard]] const PfaTransformer& transformer() const noexcept { return llm_; }
  [[nodiscard]] const RegressionHead& head() const noexcept { return head_; }

  /// x: [B, N, P*C] -> predictions [B, S, N, C].
  [[nodiscard]] ad::Var forward(const Tensor& x, std::span<const std::size_t> day, std::span<const std::size_t> week,
                                const ForwardContext& ctx = {}) const;
  [[nodiscard]] ad::Var forward(const Batch& batch, const ForwardContext& ctx = {}) const;

  /// Applies the configured freeze mode; returns the frozen parameter names.
  std::vector<std::string> apply_freeze_policy();

  /// Parameters that can influence the output under the configured ablation
  /// (excludes the transformer when use_llm is false and disabled branches).
  [[nodiscard]] std::vector<const Parameter*> active_parameters() const;
  [[nodiscard]] std::vector<Parameter*> active_parameters();
  [[nodiscard]] std::vector<std::string> inert_parameter_names() const;

  [[nodiscard]] Checkpoint to_checkpoint(nlohmann::json extra_meta = nlohmann::json::object()) const;
  void save(const std::filesystem::path& path, nlohmann::json extra_meta = nlohmann::json::object()) const;
  /// Rebuilds the model from a checkpoint, restoring values and frozen flags.
  static std::unique_ptr<StLlm> from_checkpoint(const Checkpoint& ckpt);
  static std::unique_ptr<StLlm> load(const std::filesystem::path& path);

 private:
  [[nodiscard]] bool is_active(const std::string& name) const;

  ModelConfig config_;
  ParameterSet params_;
  std::mt19937_64 init_rng_;
  StEmbedding embedding_;
  PfaTransformer llm_;
  RegressionHead head_;
};

}  // namespace stllm
