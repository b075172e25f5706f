#pragma once

#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "stllm/autodiff.hpp"
#include "stllm/embedding.hpp"
#include "stllm/parameter.hpp"

namespace stllm {

enum class FreezeMode { PFA, FPT, FullTuning, NoPretrain, FullLayer };

FreezeMode freeze_mode_from_string(const std::string& name);
std::string to_string(FreezeMode mode);
/// Modes whose transformer weights come from a pretraining checkpoint.
bool requires_pretrained(FreezeMode mode);
/// Default depth for a mode: 12 for FullLayer, 6 otherwise.
std::size_t default_layers(FreezeMode mode);

struct TransformerConfig {
  std::size_t width = 48;  // 3D
  std::size_t heads = 4;
  std::size_t layers = 6;
  std::size_t ffn_width = 0;  // 0 selects 4 * width
  double dropout = 0.1;
  std::size_t max_tokens = 512;  // rows of the positional encoding
  bool causal = false;
  Activation ffn_activation = Activation::Relu;
  double ln_eps = 1e-5;

  [[nodiscard]] std::size_t resolved_ffn_width() const noexcept { return ffn_width ? ffn_width : 4 * width; }
  [[nodiscard]] std::size_t head_width() const noexcept { return width / heads; }
  void validate() const;
};

/// Per-call forward state. Dropout only runs when `training` is set and an
/// rng is supplied. When `attention_trace` is non-null every softmax output
/// ([B, h, N, N]) is appended to it.
struct ForwardContext {
  bool training = false;
  std::mt19937_64* rng = nullptr;
  std::vector<Tensor>* attention_trace = nullptr;
};

/// GPT2-style pre-LN stack over station tokens with a learnable positional
/// encoding and a final layer norm.
///
/// Per block i:  h = h + MHA(LN1(h));  h = h + FFN(LN2(h)).
/// Parameter names: block.<i>.{ln1,ln2}.{gamma,beta}, block.<i>.mha.{wq,wk,wv,wo},
/// block.<i>.ffn.{w1,b1,w2,b2}, pe, final_ln.{gamma,beta}.
class PfaTransformer {
 public:
  PfaTransformer(const TransformerConfig& config, ParameterSet& params, std::mt19937_64& rng);

  [[nodiscard]] const TransformerConfig& config() const noexcept { return config_; }

  /// [B, N, W] or [N, W] -> same shape. Throws if N > max_tokens.
  [[nodiscard]] ad::Var forward(const ad::Var& h, const ForwardContext& ctx = {}) const;

 private:
  struct Block {
    const Parameter* ln1_gamma;
    const Parameter* ln1_beta;
    const Parameter* wq;
    const Parameter* wk;
    const Parameter* wv;
    const Parameter* wo;
    const Parameter* ln2_gamma;
    const Parameter* ln2_beta;
    const Parameter* w1;
    const Parameter* b1;
    const Parameter* w2;
    const Parameter* b2;
  };

  [[nodiscard]] ad::Var attention(const Block& b, const ad::Var& x, const ForwardContext& ctx) const;
  [[nodiscard]] ad::Var feed_forward(const Block& b, const ad::Var& x, const ForwardContext& ctx) const;

  TransformerConfig config_;
  std::vector<Block> blocks_;
  const Parameter* pe_;
  const Parameter* final_gamma_;
  const Parameter* final_beta_;
};

/// Applies a freeze policy to the `block.*` parameters of a model with
/// `layers` blocks and returns the names of every frozen parameter.
///
///   PFA / FullLayer: blocks [0, F) freeze MHA + FFN; blocks [F, L) freeze FFN only.
///   FPT:             every block freezes MHA + FFN.
///   FullTuning / NoPretrain: nothing frozen.
/// Layer norms, positional encoding, embeddings and head always stay trainable.
/// Throws ConfigError unless frozen_layers + unfrozen_layers == layers and
/// unfrozen_layers >= 1.
std::vector<std::string> apply_freeze_policy(ParameterSet& params, FreezeMode mode, std::size_t layers,
                                             std::size_t frozen_layers, std::size_t unfrozen_layers);

}  // namespace stllm
