#include "stllm/transformer.hpp"

#include <cmath>
#include <limits>

#include "stllm/error.hpp"

namespace stllm {

using ad::Var;

FreezeMode freeze_mode_from_string(const std::string& name) {
  if (name == "pfa" || name == "PFA") return FreezeMode::PFA;
  if (name == "fpt" || name == "FPT") return FreezeMode::FPT;
  if (name == "full_tuning" || name == "FullTuning") return FreezeMode::FullTuning;
  if (name == "no_pretrain" || name == "NoPretrain") return FreezeMode::NoPretrain;
  if (name == "full_layer" || name == "FullLayer") return FreezeMode::FullLayer;
  throw ConfigError("unknown freeze mode: " + name);
}

std::string to_string(FreezeMode mode) {
  switch (mode) {
    case FreezeMode::PFA: return "pfa";
    case FreezeMode::FPT: return "fpt";
    case FreezeMode::FullTuning: return "full_tuning";
    case FreezeMode::NoPretrain: return "no_pretrain";
    case FreezeMode::FullLayer: return "full_layer";
  }
  return "pfa";
}

bool requires_pretrained(FreezeMode mode) {
  return mode == FreezeMode::PFA || mode == FreezeMode::FPT || mode == FreezeMode::FullLayer;
}

std::size_t default_layers(FreezeMode mode) { return mode == FreezeMode::FullLayer ? 12 : 6; }

void TransformerConfig::validate() const {
  if (width == 0 || heads == 0 || layers == 0) throw ConfigError("transformer: width, heads, layers must be >= 1");
  if (width % heads != 0) {
    throw ConfigError("transformer: width " + std::to_string(width) + " not divisible by " + std::to_string(heads) +
                      " heads");
  }
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("transformer: dropout must be in [0, 1)");
  if (max_tokens == 0) throw ConfigError("transformer: max_tokens must be >= 1");
}

PfaTransformer::PfaTransformer(const TransformerConfig& config, ParameterSet& params, std::mt19937_64& rng)
    : config_(config) {
  config_.validate();
  const std::size_t w = config_.width;
  const std::size_t f = config_.resolved_ffn_width();
  constexpr double kInitStd = 0.02;
  const double proj_std = kInitStd / std::sqrt(2.0 * static_cast<double>(config_.layers));
  for (std::size_t i = 0; i < config_.layers; ++i) {
    const std::string p = "block." + std::to_string(i) + ".";
    Block b{};
    b.ln1_gamma = &params.add(p + "ln1.gamma", Tensor({w}, 1.0));
    b.ln1_beta = &params.add(p + "ln1.beta", Tensor({w}));
    b.wq = &params.add(p + "mha.wq", random_normal({w, w}, kInitStd, rng));
    b.wk = &params.add(p + "mha.wk", random_normal({w, w}, kInitStd, rng));
    b.wv = &params.add(p + "mha.wv", random_normal({w, w}, kInitStd, rng));
    b.wo = &params.add(p + "mha.wo", random_normal({w, w}, proj_std, rng));
    b.ln2_gamma = &params.add(p + "ln2.gamma", Tensor({w}, 1.0));
    b.ln2_beta = &params.add(p + "ln2.beta", Tensor({w}));
    b.w1 = &params.add(p + "ffn.w1", random_normal({w, f}, kInitStd, rng));
    b.b1 = &params.add(p + "ffn.b1", Tensor({f}));
    b.w2 = &params.add(p + "ffn.w2", random_normal({f, w}, proj_std, rng));
    b.b2 = &params.add(p + "ffn.b2", Tensor({w}));
    blocks_.push_back(b);
  }
  // Zero rows stay zero until a station at that position is trained.
  pe_ = &params.add("pe", Tensor({config_.max_tokens, w}));
  final_gamma_ = &params.add("final_ln.gamma", Tensor({w}, 1.0));
  final_beta_ = &params.add("final_ln.beta", Tensor({w}));
}

Var PfaTransformer::attention(const Block& b, const Var& x, const ForwardContext& ctx) const {
  const std::size_t batch = x.shape()[0];
  const std::size_t n = x.shape()[1];
  const std::size_t h = config_.heads;
  const std::size_t dk = config_.head_width();
  auto split_heads = [&](const Var& t) { return ad::permute(ad::reshape(t, {batch, n, h, dk}), {0, 2, 1, 3}); };

  Var q = split_heads(ad::matmul(x, b.wq->var()));
  Var k = split_heads(ad::matmul(x, b.wk->var()));
  Var v = split_heads(ad::matmul(x, b.wv->var()));
  Var scores = ad::scale(ad::matmul(q, ad::transpose(k)), 1.0 / std::sqrt(static_cast<double>(dk)));
  if (config_.causal) {
    Tensor mask({n, n});
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) mask[i * n + j] = -std::numeric_limits<double>::infinity();
    }
    scores = ad::add(scores, Var(std::move(mask)));
  }
  Var probs = ad::softmax(scores);
  if (ctx.attention_trace != nullptr) ctx.attention_trace->push_back(probs.value());
  if (ctx.training && ctx.rng != nullptr) probs = ad::dropout(probs, config_.dropout, *ctx.rng);
  Var context = ad::reshape(ad::permute(ad::matmul(probs, v), {0, 2, 1, 3}), {batch, n, config_.width});
  return ad::matmul(context, b.wo->var());
}

Var PfaTransformer::feed_forward(const Block& b, const Var& x, const ForwardContext& ctx) const {
  Var hidden = apply_activation(ad::add(ad::matmul(x, b.w1->var()), b.b1->var()), config_.ffn_activation);
  Var out = ad::add(ad::matmul(hidden, b.w2->var()), b.b2->var());
  if (ctx.training && ctx.rng != nullptr) out = ad::dropout(out, config_.dropout, *ctx.rng);
  return out;
}

Var PfaTransformer::forward(const Var& h, const ForwardContext& ctx) const {
  const Shape& s = h.shape();
  const bool unbatched = s.size() == 2;
  if ((s.size() != 2 && s.size() != 3) || s.back() != config_.width) {
    throw ShapeError("transformer: expected [B, N, " + std::to_string(config_.width) + "], got " + shape_str(s));
  }
  const std::size_t n = s[s.size() - 2];
  if (n > config_.max_tokens) {
    throw ShapeError("transformer: " + std::to_string(n) + " tokens exceed positional encoding capacity " +
                     std::to_string(config_.max_tokens));
  }
  Var x = unbatched ? ad::reshape(h, {1, s[0], s[1]}) : h;
  x = ad::add(x, ad::slice(pe_->var(), 0, 0, n));
  for (const Block& b : blocks_) {
    x = ad::add(x, attention(b, ad::layernorm(x, b.ln1_gamma->var(), b.ln1_beta->var(), config_.ln_eps), ctx));
    x = ad::add(x, feed_forward(b, ad::layernorm(x, b.ln2_gamma->var(), b.ln2_beta->var(), config_.ln_eps), ctx));
  }
  x = ad::layernorm(x, final_gamma_->var(), final_beta_->var(), config_.ln_eps);
  return unbatched ? ad::reshape(x, s) : x;
}

std::vector<std::string> apply_freeze_policy(ParameterSet& params, FreezeMode mode, std::size_t layers,
                                             std::size_t frozen_layers, std::size_t unfrozen_layers) {
  if (unfrozen_layers < 1) throw ConfigError("freeze policy: U must be >= 1");
  if (frozen_layers + unfrozen_layers != layers) {
    throw ConfigError("freeze policy: F (" + std::to_string(frozen_layers) + ") + U (" +
                      std::to_string(unfrozen_layers) + ") != L (" + std::to_string(layers) + ")");
  }
  params.set_frozen("*", false);
  for (std::size_t i = 0; i < layers; ++i) {
    const std::string p = "block." + std::to_string(i) + ".";
    switch (mode) {
      case FreezeMode::PFA:
      case FreezeMode::FullLayer:
        params.set_frozen(p + "ffn.*", true);
        if (i < frozen_layers) params.set_frozen(p + "mha.*", true);
        break;
      case FreezeMode::FPT:
        params.set_frozen(p + "ffn.*", true);
        params.set_frozen(p + "mha.*", true);
        break;
      case FreezeMode::FullTuning:
      case FreezeMode::NoPretrain:
        break;
    }
  }
  return params.frozen_names();
}

}  // namespace stllm
