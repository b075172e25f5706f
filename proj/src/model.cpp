#include "stllm/model.hpp"

#include <algorithm>

#include "stllm/error.hpp"

namespace stllm {

using ad::Var;

void ModelConfig::validate() const {
  if (d_model == 0 || heads == 0 || layers == 0) throw ConfigError("model: D, heads, layers must be >= 1");
  if (width() % heads != 0) {
    throw ConfigError("model: 3D = " + std::to_string(width()) + " is not divisible by " + std::to_string(heads) +
                      " heads");
  }
  if (unfrozen_layers < 1 || unfrozen_layers > layers) {
    throw ConfigError("model: U must be in [1, L], got U=" + std::to_string(unfrozen_layers) +
                      ", L=" + std::to_string(layers));
  }
  if (input_steps == 0 || output_steps == 0 || channels == 0) throw ConfigError("model: P, S, C must be >= 1");
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("model: dropout must be in [0, 1)");
  if (max_tokens == 0) throw ConfigError("model: max_tokens must be >= 1");
}

nlohmann::json ModelConfig::to_json() const {
  return {{"d_model", d_model},
          {"heads", heads},
          {"layers", layers},
          {"unfrozen_layers", unfrozen_layers},
          {"freeze_mode", to_string(freeze_mode)},
          {"ffn_width", ffn_width},
          {"dropout", dropout},
          {"max_tokens", max_tokens},
          {"input_steps", input_steps},
          {"output_steps", output_steps},
          {"channels", channels},
          {"steps_per_day", steps_per_day},
          {"days_per_week", days_per_week},
          {"causal", causal},
          {"spatial_activation", to_string(spatial_activation)},
          {"ffn_activation", to_string(ffn_activation)},
          {"use_llm", use_llm},
          {"temporal_branch", branches.temporal},
          {"spatial_branch", branches.spatial},
          {"seed", seed}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.d_model = j.value("d_model", c.d_model);
    c.heads = j.value("heads", c.heads);
    c.layers = j.value("layers", c.layers);
    c.unfrozen_layers = j.value("unfrozen_layers", c.unfrozen_layers);
    c.freeze_mode = freeze_mode_from_string(j.value("freeze_mode", to_string(c.freeze_mode)));
    c.ffn_width = j.value("ffn_width", c.ffn_width);
    c.dropout = j.value("dropout", c.dropout);
    c.max_tokens = j.value("max_tokens", c.max_tokens);
    c.input_steps = j.value("input_steps", c.input_steps);
    c.output_steps = j.value("output_steps", c.output_steps);
    c.channels = j.value("channels", c.channels);
    c.steps_per_day = j.value("steps_per_day", c.steps_per_day);
    c.days_per_week = j.value("days_per_week", c.days_per_week);
    c.causal = j.value("causal", c.causal);
    c.spatial_activation = activation_from_string(j.value("spatial_activation", to_string(c.spatial_activation)));
    c.ffn_activation = activation_from_string(j.value("ffn_activation", to_string(c.ffn_activation)));
    c.use_llm = j.value("use_llm", c.use_llm);
    c.branches.temporal = j.value("temporal_branch", c.branches.temporal);
    c.branches.spatial = j.value("spatial_branch", c.branches.spatial);
    c.seed = j.value("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  return c;
}

namespace {

EmbeddingConfig embedding_config(const ModelConfig& c) {
  c.validate();
  EmbeddingConfig e;
  e.d_model = c.d_model;
  e.input_steps = c.input_steps;
  e.channels = c.channels;
  e.steps_per_day = c.steps_per_day;
  e.days_per_week = c.days_per_week;
  e.spatial_activation = c.spatial_activation;
  return e;
}

TransformerConfig transformer_config(const ModelConfig& c) {
  TransformerConfig t;
  t.width = c.width();
  t.heads = c.heads;
  t.layers = c.layers;
  t.ffn_width = c.ffn_width;
  t.dropout = c.dropout;
  t.max_tokens = c.max_tokens;
  t.causal = c.causal;
  t.ffn_activation = c.ffn_activation;
  return t;
}

}  // namespace

StLlm::StLlm(const ModelConfig& config)
    : config_(config),
      init_rng_(config.seed),
      embedding_(embedding_config(config), params_, init_rng_),
      llm_(transformer_config(config), params_, init_rng_),
      head_(config.width(), config.output_steps, config.channels, params_, init_rng_) {}

Var StLlm::forward(const Tensor& x, std::span<const std::size_t> day, std::span<const std::size_t> week,
                   const ForwardContext& ctx) const {
  Var fused = embedding_.forward(Var(x), day, week, config_.branches);
  Var hidden = config_.use_llm ? llm_.forward(fused, ctx) : fused;
  return head_.regress(hidden);
}

Var StLlm::forward(const Batch& batch, const ForwardContext& ctx) const {
  return forward(batch.x, batch.day, batch.week, ctx);
}

std::vector<std::string> StLlm::apply_freeze_policy() {
  return stllm::apply_freeze_policy(params_, config_.freeze_mode, config_.layers, config_.frozen_layers(),
                                    config_.unfrozen_layers);
}

bool StLlm::is_active(const std::string& name) const {
  if (!config_.use_llm && (name.starts_with("block.") || name == "pe" || name.starts_with("final_ln."))) return false;
  if (!config_.branches.spatial && name.starts_with("embed.spatial.")) return false;
  if (!config_.branches.temporal && (name == "embed.day" || name == "embed.week")) return false;
  return true;
}

std::vector<const Parameter*> StLlm::active_parameters() const {
  std::vector<const Parameter*> out;
  for (const Parameter* p : params_.all()) {
    if (is_active(p->name())) out.push_back(p);
  }
  return out;
}

std::vector<Parameter*> StLlm::active_parameters() {
  std::vector<Parameter*> out;
  for (Parameter* p : params_.all()) {
    if (is_active(p->name())) out.push_back(p);
  }
  return out;
}

std::vector<std::string> StLlm::inert_parameter_names() const {
  std::vector<std::string> out;
  for (const Parameter* p : params_.all()) {
    if (!is_active(p->name())) out.push_back(p->name());
  }
  return out;
}

Checkpoint StLlm::to_checkpoint(nlohmann::json extra_meta) const {
  nlohmann::json meta = std::move(extra_meta);
  meta["model"] = config_.to_json();
  meta["frozen"] = params_.frozen_names();
  return make_checkpoint(params_, std::move(meta));
}

void StLlm::save(const std::filesystem::path& path, nlohmann::json extra_meta) const {
  save_checkpoint(path, to_checkpoint(std::move(extra_meta)));
}

std::unique_ptr<StLlm> StLlm::from_checkpoint(const Checkpoint& ckpt) {
  if (!ckpt.meta.contains("model")) throw DataError("checkpoint: header has no model config");
  auto model = std::make_unique<StLlm>(ModelConfig::from_json(ckpt.meta.at("model")));
  load_into(model->parameters(), ckpt, "*", true);
  return model;
}

std::unique_ptr<StLlm> StLlm::load(const std::filesystem::path& path) { return from_checkpoint(load_checkpoint(path)); }

Batch make_batch(std::span<const data::WindowSample> windows, std::span<const std::size_t> order, std::size_t begin,
                 std::size_t end, const data::TrafficTensor& series) {
  if (begin >= end || end > order.size()) throw ShapeError("make_batch: empty or out-of-range batch");
  const std::size_t b = end - begin;
  const auto& first = windows[order[begin]];
  const std::size_t p = first.input_steps, s = first.output_steps;
  const std::size_t n = series.stations(), c = series.channels();
  if (first.source && (first.source->stations() != n || first.source->channels() != c ||
                       first.source->timesteps() != series.timesteps())) {
    throw ShapeError("make_batch: series shape differs from the windows' source");
  }
  Batch batch;
  batch.x = Tensor({b, n, p * c});
  batch.y = Tensor({b, s, n, c});
  batch.day.resize(b);
  batch.week.resize(b);
  const auto& v = series.values;
  for (std::size_t i = 0; i < b; ++i) {
    const auto& w = windows[order[begin + i]];
    batch.day[i] = w.day_index;
    batch.week[i] = w.week_index;
    double* xo = batch.x.data().data() + i * n * p * c;
    for (std::size_t t = 0; t < p; ++t) {
      for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t k = 0; k < c; ++k) xo[j * p * c + t * c + k] = v[((w.start + t) * n + j) * c + k];
      }
    }
    const auto y_begin = v.data().begin() + static_cast<long>((w.start + p) * n * c);
    std::copy(y_begin, y_begin + static_cast<long>(s * n * c), batch.y.data().begin() + static_cast<long>(i * s * n * c));
  }
  return batch;
}

}  // namespace stllm
