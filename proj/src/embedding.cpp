#include "stllm/embedding.hpp"

#include <cmath>

#include "stllm/error.hpp"

namespace stllm {

using ad::Var;

Activation activation_from_string(const std::string& name) {
  if (name == "relu") return Activation::Relu;
  if (name == "gelu") return Activation::Gelu;
  if (name == "identity") return Activation::Identity;
  throw ConfigError("unknown activation: " + name);
}

std::string to_string(Activation a) {
  switch (a) {
    case Activation::Relu: return "relu";
    case Activation::Gelu: return "gelu";
    case Activation::Identity: return "identity";
  }
  return "relu";
}

Var apply_activation(const Var& x, Activation a) {
  switch (a) {
    case Activation::Relu: return ad::relu(x);
    case Activation::Gelu: return ad::gelu(x);
    case Activation::Identity: return x;
  }
  return x;
}

void EmbeddingConfig::validate() const {
  if (d_model == 0 || input_steps == 0 || channels == 0) throw ConfigError("embedding: D, P, C must be >= 1");
  if (steps_per_day == 0 || days_per_week == 0) throw ConfigError("embedding: calendar sizes must be >= 1");
}

Tensor random_normal(const Shape& shape, double std, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, std);
  Tensor t(shape);
  for (double& v : t.data()) v = dist(rng);
  return t;
}

Tensor to_token_layout(const Tensor& x_pnc) {
  if (x_pnc.rank() != 3) throw ShapeError("to_token_layout: expected [P, N, C], got " + shape_str(x_pnc.shape()));
  const std::size_t p = x_pnc.dim(0), n = x_pnc.dim(1), c = x_pnc.dim(2);
  Tensor out({n, p * c});
  for (std::size_t i = 0; i < p; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      for (std::size_t k = 0; k < c; ++k) out[j * p * c + i * c + k] = x_pnc[(i * n + j) * c + k];
    }
  }
  return out;
}

StEmbedding::StEmbedding(const EmbeddingConfig& config, ParameterSet& params, std::mt19937_64& rng)
    : config_(config) {
  config_.validate();
  const std::size_t in = config_.input_steps * config_.channels;
  const std::size_t d = config_.d_model;
  const double in_std = 1.0 / std::sqrt(static_cast<double>(in));
  const double d_std = 1.0 / std::sqrt(static_cast<double>(d));
  const double f_std = 1.0 / std::sqrt(static_cast<double>(3 * d));
  token_w_ = &params.add("embed.token.w", random_normal({in, d}, in_std, rng));
  token_b_ = &params.add("embed.token.b", Tensor({d}));
  day_ = &params.add("embed.day", random_normal({config_.steps_per_day, d}, 0.02, rng));
  week_ = &params.add("embed.week", random_normal({config_.days_per_week, d}, 0.02, rng));
  spatial_proj_w_ = &params.add("embed.spatial.proj_w", random_normal({in, d}, in_std, rng));
  spatial_proj_b_ = &params.add("embed.spatial.proj_b", Tensor({d}));
  spatial_w_ = &params.add("embed.spatial.w", random_normal({d, d}, d_std, rng));
  spatial_b_ = &params.add("embed.spatial.b", Tensor({d}));
  fusion_w_ = &params.add("fusion.w", random_normal({3 * d, 3 * d}, f_std, rng));
  fusion_b_ = &params.add("fusion.b", Tensor({3 * d}));
}

void StEmbedding::check_input(const Var& x, const char* op) const {
  const Shape& s = x.shape();
  const std::size_t in = config_.input_steps * config_.channels;
  if (s.size() < 2 || s.back() != in) {
    throw ShapeError(std::string(op) + ": expected [..., N, " + std::to_string(in) + "], got " + shape_str(s));
  }
}

Var StEmbedding::embed_tokens(const Var& x) const {
  check_input(x, "embed_tokens");
  return ad::add(ad::matmul(x, token_w_->var()), token_b_->var());
}

Var StEmbedding::embed_temporal(std::span<const std::size_t> day, std::span<const std::size_t> week,
                                std::size_t stations, bool batched) const {
  if (day.size() != week.size() || day.empty()) throw ShapeError("embed_temporal: need one (day, week) per sample");
  if (!batched && day.size() != 1) throw ShapeError("embed_temporal: unbatched form takes a single sample");
  for (std::size_t i = 0; i < day.size(); ++i) {
    if (day[i] >= config_.steps_per_day) {
      throw ShapeError("embed_temporal: day index " + std::to_string(day[i]) + " outside [0, " +
                       std::to_string(config_.steps_per_day) + ")");
    }
    if (week[i] >= config_.days_per_week) {
      throw ShapeError("embed_temporal: week index " + std::to_string(week[i]) + " outside [0, " +
                       std::to_string(config_.days_per_week) + ")");
    }
  }
  // Repeat each sample's index once per station, then gather rows.
  std::vector<std::size_t> day_rows, week_rows;
  day_rows.reserve(day.size() * stations);
  week_rows.reserve(day.size() * stations);
  for (std::size_t b = 0; b < day.size(); ++b) {
    day_rows.insert(day_rows.end(), stations, day[b]);
    week_rows.insert(week_rows.end(), stations, week[b]);
  }
  Var e = ad::add(ad::row_lookup(day_->var(), day_rows), ad::row_lookup(week_->var(), week_rows));
  Shape shape = batched ? Shape{day.size(), stations, config_.d_model} : Shape{stations, config_.d_model};
  return ad::reshape(e, shape);
}

Var StEmbedding::embed_spatial(const Var& x) const {
  check_input(x, "embed_spatial");
  Var projected = ad::add(ad::matmul(x, spatial_proj_w_->var()), spatial_proj_b_->var());
  return apply_activation(ad::add(ad::matmul(projected, spatial_w_->var()), spatial_b_->var()),
                          config_.spatial_activation);
}

Var StEmbedding::fuse(const Var& e_token, const Var& e_spatial, const Var& e_temporal) const {
  const std::size_t d = config_.d_model;
  for (const Var* v : {&e_token, &e_spatial, &e_temporal}) {
    if (v->shape().empty() || v->shape().back() != d) {
      throw ShapeError("fuse: every branch must have width " + std::to_string(d) + ", got " + shape_str(v->shape()));
    }
  }
  return ad::add(ad::matmul(ad::concat({e_token, e_spatial, e_temporal}), fusion_w_->var()), fusion_b_->var());
}

Var StEmbedding::forward(const Var& x, std::span<const std::size_t> day, std::span<const std::size_t> week,
                         BranchMask mask) const {
  check_input(x, "embedding");
  if (x.shape().size() != 3) throw ShapeError("embedding: expected [B, N, P*C], got " + shape_str(x.shape()));
  const std::size_t batch = x.shape()[0];
  const std::size_t stations = x.shape()[1];
  if (day.size() != batch) throw ShapeError("embedding: calendar indices do not match batch size");
  const Shape branch_shape{batch, stations, config_.d_model};

  Var e_token = embed_tokens(x);
  Var e_spatial = mask.spatial ? embed_spatial(x) : Var(Tensor(branch_shape));
  Var e_temporal = mask.temporal ? embed_temporal(day, week, stations) : Var(Tensor(branch_shape));
  return fuse(e_token, e_spatial, e_temporal);
}

}  // namespace stllm
