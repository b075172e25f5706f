#include "stllm/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

#include "stllm/error.hpp"
#include "stllm/optimizer.hpp"

namespace stllm::harness {
namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

class Fnv1a {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      hash_ ^= b[i];
      hash_ *= 0x100000001b3ULL;
    }
  }
  template <typename T>
  void value(const T& v) {
    bytes(&v, sizeof(T));
  }
  [[nodiscard]] std::string hex() const {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << hash_;
    return os.str();
  }

 private:
  std::uint64_t hash_ = 0xcbf29ce484222325ULL;
};

void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

std::string format_name(data::FileFormat f) { return f == data::FileFormat::Csv ? "csv" : "binary"; }

data::FileFormat format_from_name(const std::string& s) {
  if (s == "csv") return data::FileFormat::Csv;
  if (s == "binary" || s == "bin") return data::FileFormat::Binary;
  throw ConfigError("unknown data format: " + s);
}

std::string loss_name(LossKind k) { return k == LossKind::MeanAbsolute ? "mae" : "mse"; }

LossKind loss_from_name(const std::string& s) {
  if (s == "mae") return LossKind::MeanAbsolute;
  if (s == "mse") return LossKind::MeanSquared;
  throw ConfigError("unknown loss: " + s);
}

// Separate streams so that changing one consumer never shifts another.
std::mt19937_64 stream(std::uint64_t seed, std::uint64_t salt) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(salt)};
  return std::mt19937_64(seq);
}

TrainResult fit_model(std::unique_ptr<StLlm> model, const ExperimentConfig& config, const PreparedData& data,
                      const data::WindowSplit& train_windows) {
  if (train_windows.kind != data::SplitKind::Train) throw ConfigError("fit: training requires the training split");
  if (train_windows.empty()) throw DataError("fit: no training windows");
  const auto start = Clock::now();

  std::vector<Parameter*> active = model->active_parameters();
  const std::vector<const Parameter*> active_const(active.begin(), active.end());
  const std::size_t n_train = train_windows.size();
  const std::size_t batches = (n_train + config.batch_size - 1) / config.batch_size;

  AdamWConfig opt_cfg;
  opt_cfg.learning_rate = config.learning_rate;
  opt_cfg.weight_decay = config.weight_decay;
  opt_cfg.warmup_fraction = config.warmup_fraction;
  opt_cfg.total_steps = batches * config.epochs;
  AdamW optimizer(active, opt_cfg);
  const LossConfig loss_cfg{config.lambda, config.loss};

  auto shuffle_rng = stream(config.seed, 1);
  auto dropout_rng = stream(config.seed, 2);
  std::vector<std::size_t> order(n_train);
  std::iota(order.begin(), order.end(), std::size_t{0});

  TrainResult result;
  RunRecord& rec = result.record;
  rec.config = config.to_json();
  rec.split_hash = data.split_hash;
  rec.train_windows = n_train;

  double best_val = std::numeric_limits<double>::infinity();
  auto best = model->parameters().snapshot();
  std::size_t since_best = 0;
  try {
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double loss_sum = 0.0;
    for (std::size_t b = 0; b < n_train; b += config.batch_size) {
      const std::size_t e = std::min(n_train, b + config.batch_size);
      const Batch batch = make_batch(train_windows.windows, order, b, e, *data.normalized);
      const ForwardContext ctx{true, &dropout_rng, nullptr};
      ad::Var loss = training_loss(model->forward(batch, ctx), batch.y, loss_cfg, active_const);
      const double value = loss.value().item();
      if (!std::isfinite(value)) {
        throw NumericalError("training diverged: loss is " + std::to_string(value) + " at epoch " +
                             std::to_string(epoch));
      }
      optimizer.step(ad::backward(loss));
      loss_sum += value * static_cast<double>(e - b);
    }
    const double val_mae = evaluate(*model, data, data.splits.validation, config.batch_size).mae;
    if (!std::isfinite(val_mae)) throw NumericalError("validation MAE is not finite at epoch " + std::to_string(epoch));
    rec.epochs.push_back({epoch, loss_sum / static_cast<double>(n_train), val_mae});
    if (val_mae < best_val) {
      best_val = val_mae;
      best = model->parameters().snapshot();
      rec.best_epoch = epoch;
      since_best = 0;
    } else if (++since_best >= config.patience) {
      break;
    }
  }
  } catch (const NumericalError& e) {
    if (!config.output_dir.empty()) {
      std::filesystem::create_directories(config.output_dir);
      nlohmann::json j = rec.to_json();
      j["aborted"] = e.what();
      write_json(config.output_dir / "run.json", j);
    }
    throw;
  }
  model->parameters().restore(best);
  rec.train_seconds = seconds_since(start);
  rec.test = evaluate(*model, data, data.splits.test, config.batch_size);
  rec.counts = count_parameters(model->parameters());
  rec.frozen = model->parameters().frozen_names();
  rec.inert = model->inert_parameter_names();
  result.model = std::move(model);
  return result;
}

void write_outputs(const ExperimentConfig& config, RunRecord& rec, const StLlm& model, const PreparedData& data) {
  if (config.output_dir.empty()) return;
  std::filesystem::create_directories(config.output_dir);
  rec.checkpoint = config.output_dir / "model.ckpt";
  model.save(rec.checkpoint, {{"norm", data.stats.to_json()}, {"experiment", rec.config}});
  write_json(config.output_dir / "run.json", rec.to_json());
  write_json(config.output_dir / "metrics.json", rec.test.to_json());
}

}  // namespace

// ---- config ---------------------------------------------------------------

data::TrafficTensor DataSource::load() const {
  if (generator) return data::synth_generate(*generator);
  if (path.empty()) throw ConfigError("data source: neither a generator nor a path was given");
  return data::load_traffic(path, schema);
}

nlohmann::json DataSource::to_json() const {
  if (generator) return {{"generator", generator->to_json()}};
  std::vector<std::string> extra;
  for (const auto& p : schema.extra_channel_files) extra.push_back(p.string());
  return {{"path", path.string()},
          {"format", format_name(schema.format)},
          {"extra_channel_files", extra},
          {"interval_minutes", schema.interval_minutes},
          {"start_epoch", schema.start_epoch}};
}

DataSource DataSource::from_json(const nlohmann::json& j) {
  DataSource d;
  try {
    if (j.contains("generator")) {
      d.generator = data::GeneratorConfig::from_json(j.at("generator"));
      return d;
    }
    d.path = j.at("path").get<std::string>();
    d.schema.format = format_from_name(j.value("format", std::string("csv")));
    for (const auto& p : j.value("extra_channel_files", std::vector<std::string>{})) {
      d.schema.extra_channel_files.emplace_back(p);
    }
    d.schema.interval_minutes = j.value("interval_minutes", d.schema.interval_minutes);
    d.schema.start_epoch = j.value("start_epoch", d.schema.start_epoch);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("data source: ") + e.what());
  }
  return d;
}

data::GeneratorConfig PretrainConfig::default_source() {
  data::GeneratorConfig g;
  g.stations = 24;
  g.timesteps = 2016;
  g.seed = 9001;
  g.base_level = 25.0;
  g.daily_amp = 0.5;
  g.weekly_amp = 0.3;
  g.noise_std = 3.0;
  g.noise_ar = 0.75;
  g.spatial_corr = 0.5;
  return g;
}

std::size_t ExperimentConfig::resolved_layers() const { return layers ? layers : default_layers(freeze_mode); }

ModelConfig ExperimentConfig::model_config(std::size_t stations, std::size_t channels) const {
  ModelConfig m;
  m.d_model = d_model;
  m.heads = heads;
  m.layers = resolved_layers();
  m.unfrozen_layers = unfrozen_layers;
  m.freeze_mode = freeze_mode;
  m.ffn_width = ffn_width;
  m.dropout = dropout;
  m.max_tokens = max_tokens ? max_tokens : stations;
  m.input_steps = input_steps;
  m.output_steps = output_steps;
  m.channels = channels;
  m.causal = causal;
  m.use_llm = !ablation.wo_llm;
  m.branches.temporal = !(ablation.wo_t || ablation.wo_st);
  m.branches.spatial = !(ablation.wo_s || ablation.wo_st);
  m.seed = seed;
  m.validate();
  return m;
}

void ExperimentConfig::validate() const {
  if (input_steps == 0 || output_steps == 0) throw ConfigError("experiment: P and S must be >= 1");
  if (batch_size == 0 || epochs == 0) throw ConfigError("experiment: batch size and epochs must be >= 1");
  if (!(learning_rate > 0.0)) throw ConfigError("experiment: learning rate must be positive");
  if (!(lambda >= 0.0)) throw ConfigError("experiment: lambda must be >= 0");
  if (!(few_shot_fraction > 0.0) || few_shot_fraction > 1.0) {
    throw ConfigError("experiment: few_shot_fraction must be in (0, 1]");
  }
  if (unfrozen_layers < 1 || unfrozen_layers > resolved_layers()) {
    throw ConfigError("experiment: U must be in [1, L]");
  }
  if ((d_model * 3) % heads != 0) throw ConfigError("experiment: 3D must be divisible by heads");
}

nlohmann::json ExperimentConfig::to_json() const {
  return {{"data", data.to_json()},
          {"input_steps", input_steps},
          {"output_steps", output_steps},
          {"d_model", d_model},
          {"heads", heads},
          {"layers", layers},
          {"unfrozen_layers", unfrozen_layers},
          {"freeze_mode", to_string(freeze_mode)},
          {"ffn_width", ffn_width},
          {"dropout", dropout},
          {"causal", causal},
          {"max_tokens", max_tokens},
          {"lambda", lambda},
          {"loss", loss_name(loss)},
          {"learning_rate", learning_rate},
          {"weight_decay", weight_decay},
          {"warmup_fraction", warmup_fraction},
          {"batch_size", batch_size},
          {"epochs", epochs},
          {"patience", patience},
          {"seed", seed},
          {"few_shot_fraction", few_shot_fraction},
          {"wo_llm", ablation.wo_llm},
          {"wo_st", ablation.wo_st},
          {"wo_t", ablation.wo_t},
          {"wo_s", ablation.wo_s},
          {"zero_pe_on_transfer", zero_pe_on_transfer},
          {"pretrained_checkpoint", pretrained_checkpoint.string()},
          {"output_dir", output_dir.string()},
          {"pretrain",
           {{"source", pretrain.source.to_json()},
            {"epochs", pretrain.epochs},
            {"horizon", pretrain.horizon},
            {"batch_size", pretrain.batch_size}}}};
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  try {
    if (j.contains("data")) c.data = DataSource::from_json(j.at("data"));
    c.input_steps = j.value("input_steps", c.input_steps);
    c.output_steps = j.value("output_steps", c.output_steps);
    c.d_model = j.value("d_model", c.d_model);
    c.heads = j.value("heads", c.heads);
    c.layers = j.value("layers", c.layers);
    c.unfrozen_layers = j.value("unfrozen_layers", c.unfrozen_layers);
    c.freeze_mode = freeze_mode_from_string(j.value("freeze_mode", to_string(c.freeze_mode)));
    c.ffn_width = j.value("ffn_width", c.ffn_width);
    c.dropout = j.value("dropout", c.dropout);
    c.causal = j.value("causal", c.causal);
    c.max_tokens = j.value("max_tokens", c.max_tokens);
    c.lambda = j.value("lambda", c.lambda);
    c.loss = loss_from_name(j.value("loss", loss_name(c.loss)));
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.warmup_fraction = j.value("warmup_fraction", c.warmup_fraction);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.epochs = j.value("epochs", c.epochs);
    c.patience = j.value("patience", c.patience);
    c.seed = j.value("seed", c.seed);
    c.few_shot_fraction = j.value("few_shot_fraction", c.few_shot_fraction);
    c.ablation.wo_llm = j.value("wo_llm", false);
    c.ablation.wo_st = j.value("wo_st", false);
    c.ablation.wo_t = j.value("wo_t", false);
    c.ablation.wo_s = j.value("wo_s", false);
    c.zero_pe_on_transfer = j.value("zero_pe_on_transfer", false);
    c.pretrained_checkpoint = j.value("pretrained_checkpoint", std::string());
    c.output_dir = j.value("output_dir", std::string());
    if (j.contains("pretrain")) {
      const auto& p = j.at("pretrain");
      if (p.contains("source")) c.pretrain.source = data::GeneratorConfig::from_json(p.at("source"));
      c.pretrain.epochs = p.value("epochs", c.pretrain.epochs);
      c.pretrain.horizon = p.value("horizon", c.pretrain.horizon);
      c.pretrain.batch_size = p.value("batch_size", c.pretrain.batch_size);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("experiment config: ") + e.what());
  }
  c.validate();
  return c;
}

nlohmann::json RunRecord::to_json() const {
  nlohmann::json epochs_json = nlohmann::json::array();
  for (const auto& e : epochs) {
    epochs_json.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_mae", e.val_mae}});
  }
  return {{"config", config},
          {"epochs", epochs_json},
          {"test", test.to_json()},
          {"checkpoint", checkpoint.string()},
          {"best_epoch", best_epoch},
          {"train_windows", train_windows},
          {"params", {{"total", counts.total}, {"frozen", counts.frozen}, {"trainable", counts.trainable}}},
          {"frozen", frozen},
          {"inert", inert},
          {"split_hash", split_hash},
          {"train_seconds", train_seconds}};
}

// ---- data -----------------------------------------------------------------

PreparedData prepare_data(data::TrafficTensor tt, std::size_t input_steps, std::size_t output_steps,
                          std::size_t steps_per_day) {
  tt.validate();
  auto raw = std::make_shared<const data::TrafficTensor>(std::move(tt));
  auto windows = data::make_windows(raw, input_steps, output_steps, steps_per_day);
  data::Splits splits = data::split_chronological(windows);
  data::NormStats stats = data::NormStats::fit(splits.train);
  auto normalized = std::make_shared<const data::TrafficTensor>(stats.normalize(*raw));

  Fnv1a h;
  h.bytes(raw->values.data().data(), raw->values.size() * sizeof(double));
  for (const auto* split : {&splits.train, &splits.validation, &splits.test}) {
    h.value(split->size());
    for (const auto& w : split->windows) h.value(w.start);
  }
  return PreparedData{std::move(raw), std::move(normalized), std::move(splits), std::move(stats), h.hex()};
}

// ---- model construction ---------------------------------------------------

std::unique_ptr<StLlm> build_model(const ExperimentConfig& config, std::size_t stations, std::size_t channels) {
  auto model = std::make_unique<StLlm>(config.model_config(stations, channels));
  const ModelConfig& mc = model->config();
  const bool wants_pretrained =
      mc.use_llm && (requires_pretrained(mc.freeze_mode) ||
                     (mc.freeze_mode == FreezeMode::FullTuning && !config.pretrained_checkpoint.empty()));
  if (wants_pretrained) {
    if (config.pretrained_checkpoint.empty() || !std::filesystem::exists(config.pretrained_checkpoint)) {
      throw ConfigError("mode " + to_string(mc.freeze_mode) + " needs a pretraining checkpoint (got '" +
                        config.pretrained_checkpoint.string() + "')");
    }
    const Checkpoint ckpt = load_checkpoint(config.pretrained_checkpoint);
    const ModelConfig src = ModelConfig::from_json(ckpt.meta.at("model"));
    if (src.d_model != mc.d_model || src.heads != mc.heads || src.layers != mc.layers ||
        src.ffn_width != mc.ffn_width || src.ffn_activation != mc.ffn_activation) {
      throw ConfigError("pretraining checkpoint architecture (D=" + std::to_string(src.d_model) +
                        ", L=" + std::to_string(src.layers) + ") does not match the model (D=" +
                        std::to_string(mc.d_model) + ", L=" + std::to_string(mc.layers) + ")");
    }
    load_into(model->parameters(), ckpt, "block.*", false);
    load_into(model->parameters(), ckpt, "final_ln.*", false);
  }
  model->apply_freeze_policy();
  return model;
}

PretrainResult pretrain_source(const ExperimentConfig& config) {
  const auto& pc = config.pretrain;
  if (pc.horizon == 0 || pc.epochs == 0 || pc.batch_size == 0) throw ConfigError("pretrain: invalid settings");
  PreparedData source = prepare_data(data::synth_generate(pc.source), config.input_steps, pc.horizon);

  ExperimentConfig pre = config;
  pre.output_steps = pc.horizon;
  pre.freeze_mode = FreezeMode::NoPretrain;
  pre.layers = config.resolved_layers();
  pre.unfrozen_layers = std::min(config.unfrozen_layers, pre.layers);
  pre.ablation = {};
  pre.max_tokens = 0;
  pre.epochs = pc.epochs;
  pre.batch_size = pc.batch_size;
  pre.patience = pc.epochs;
  pre.pretrained_checkpoint.clear();
  pre.output_dir.clear();

  auto model = build_model(pre, source.raw->stations(), source.raw->channels());
  PretrainResult result;
  result.initial_val_loss = evaluate(*model, source, source.splits.validation, pc.batch_size).mae;
  TrainResult trained = fit_model(std::move(model), pre, source, source.splits.train);
  double best = std::numeric_limits<double>::infinity();
  for (const auto& e : trained.record.epochs) best = std::min(best, e.val_mae);
  result.final_val_loss = best;
  result.checkpoint = trained.model->to_checkpoint({{"pretrain", {{"initial_val_mae", result.initial_val_loss},
                                                                 {"final_val_mae", result.final_val_loss},
                                                                 {"source", pc.source.to_json()}}}});
  if (!config.output_dir.empty()) {
    std::filesystem::create_directories(config.output_dir);
    result.path = config.output_dir / "pretrain.ckpt";
  } else if (!config.pretrained_checkpoint.empty()) {
    result.path = config.pretrained_checkpoint;
  }
  if (!result.path.empty()) save_checkpoint(result.path, result.checkpoint);
  return result;
}

// ---- training -------------------------------------------------------------

TrainResult fit(const ExperimentConfig& config, const PreparedData& data, const data::WindowSplit& train_windows) {
  config.validate();
  auto model = build_model(config, data.raw->stations(), data.raw->channels());
  return fit_model(std::move(model), config, data, train_windows);
}

RunRecord train(const ExperimentConfig& config) {
  config.validate();
  const PreparedData data = prepare_data(config.data.load(), config.input_steps, config.output_steps);
  TrainResult r = fit(config, data, data.splits.train);
  write_outputs(config, r.record, *r.model, data);
  return r.record;
}

RunRecord few_shot(const ExperimentConfig& config) {
  config.validate();
  const PreparedData data = prepare_data(config.data.load(), config.input_steps, config.output_steps);
  const data::WindowSplit subset = data::chronological_prefix(data.splits.train, config.few_shot_fraction);
  TrainResult r = fit(config, data, subset);
  write_outputs(config, r.record, *r.model, data);
  return r.record;
}

// ---- evaluation -----------------------------------------------------------

MetricsReport evaluate(const StLlm& model, const PreparedData& data, const data::WindowSplit& split,
                       std::size_t batch_size) {
  if (split.empty()) throw DataError("evaluate: empty split");
  if (batch_size == 0) throw ConfigError("evaluate: batch size must be >= 1");
  const ModelConfig& mc = model.config();
  if (data.raw->stations() > mc.max_tokens) {
    throw DataError("evaluate: " + std::to_string(data.raw->stations()) + " stations exceed model capacity " +
                    std::to_string(mc.max_tokens));
  }
  if (data.raw->channels() != mc.channels) throw DataError("evaluate: channel count differs from the model");
  const auto& first = split.windows.front();
  if (first.input_steps != mc.input_steps || first.output_steps != mc.output_steps) {
    throw DataError("evaluate: window P/S differ from the model");
  }

  ad::NoGradGuard no_grad;
  MetricsAccumulator acc;
  std::vector<std::size_t> order(split.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  double elapsed = 0.0;
  std::size_t batches = 0;
  for (std::size_t b = 0; b < split.size(); b += batch_size) {
    const std::size_t e = std::min(split.size(), b + batch_size);
    const auto t0 = Clock::now();
    const Batch batch = make_batch(split.windows, order, b, e, *data.normalized);
    const Tensor pred = data.stats.denormalize(model.forward(batch).value());
    elapsed += seconds_since(t0);
    ++batches;
    // Ground truth in raw units straight from the source series.
    const Batch truth = make_batch(split.windows, order, b, e, *data.raw);
    acc.add(pred.data(), truth.y.data());
  }
  MetricsReport r = acc.report();
  r.seconds_per_batch = elapsed / static_cast<double>(batches);
  return r;
}

MetricsReport evaluate(const std::filesystem::path& checkpoint, const ExperimentConfig& config) {
  auto model = StLlm::load(checkpoint);
  const ModelConfig& mc = model->config();
  const PreparedData data = prepare_data(config.data.load(), mc.input_steps, mc.output_steps, mc.steps_per_day);
  return evaluate(*model, data, data.splits.test, config.batch_size);
}

MetricsReport zero_shot(const StLlm& model, const data::TrafficTensor& target, std::size_t batch_size,
                        bool zero_positional_encoding) {
  const ModelConfig& mc = model.config();
  if (target.stations() > mc.max_tokens) {
    throw DataError("zero-shot: target has " + std::to_string(target.stations()) +
                    " stations, model positional encoding holds " + std::to_string(mc.max_tokens));
  }
  const PreparedData data = prepare_data(target, mc.input_steps, mc.output_steps, mc.steps_per_day);
  if (!zero_positional_encoding) return evaluate(model, data, data.splits.test, batch_size);
  auto copy = StLlm::from_checkpoint(model.to_checkpoint());
  copy->parameters().at("pe").mutable_value().fill(0.0);
  return evaluate(*copy, data, data.splits.test, batch_size);
}

MetricsReport zero_shot(const std::filesystem::path& source_checkpoint, const ExperimentConfig& target) {
  auto model = StLlm::load(source_checkpoint);
  return zero_shot(*model, target.data.load(), target.batch_size, target.zero_pe_on_transfer);
}

MetricsReport historical_average(const PreparedData& data, const data::WindowSplit& split) {
  const auto& raw = *data.raw;
  const auto& train = data.splits.train.windows;
  const std::size_t n = raw.stations(), c = raw.channels();
  const std::size_t steps_per_day = 1440 / static_cast<std::size_t>(raw.interval_minutes);
  const std::size_t t_begin = train.front().start;
  const std::size_t t_end = train.back().start + train.back().input_steps + train.back().output_steps;
  auto day_of = [&](std::size_t t) {
    return data::calendar_indices(t, raw.start_epoch, raw.interval_minutes, steps_per_day).day_index;
  };

  std::vector<double> sums(steps_per_day * n * c, 0.0);
  std::vector<std::size_t> counts(steps_per_day, 0);
  for (std::size_t t = t_begin; t < t_end; ++t) {
    const std::size_t d = day_of(t);
    ++counts[d];
    for (std::size_t i = 0; i < n * c; ++i) sums[d * n * c + i] += raw.values[t * n * c + i];
  }
  const double overall = std::accumulate(sums.begin(), sums.end(), 0.0) /
                         static_cast<double>((t_end - t_begin) * n * c);
  MetricsAccumulator acc;
  std::vector<double> pred(n * c);
  for (const auto& w : split.windows) {
    for (std::size_t s = 0; s < w.output_steps; ++s) {
      const std::size_t t = w.start + w.input_steps + s;
      const std::size_t d = day_of(t);
      for (std::size_t i = 0; i < n * c; ++i) {
        pred[i] = counts[d] ? sums[d * n * c + i] / static_cast<double>(counts[d]) : overall;
      }
      acc.add(pred, std::span<const double>(raw.values.data().data() + t * n * c, n * c));
    }
  }
  return acc.report();
}

// ---- ablations ------------------------------------------------------------

ExperimentConfig apply_variant(const ExperimentConfig& base, std::string_view tag) {
  ExperimentConfig c = base;
  std::size_t pos = 0;
  while (pos <= tag.size()) {
    const std::size_t next = std::min(tag.find('+', pos), tag.size());
    const std::string part(tag.substr(pos, next - pos));
    if (part == "full") {
    } else if (part == "wo_llm") {
      c.ablation.wo_llm = true;
    } else if (part == "wo_st") {
      c.ablation.wo_st = true;
    } else if (part == "wo_t") {
      c.ablation.wo_t = true;
    } else if (part == "wo_s") {
      c.ablation.wo_s = true;
    } else if (part == "pfa" || part == "fpt" || part == "full_tuning" || part == "no_pretrain" ||
               part == "full_layer") {
      const FreezeMode previous = c.freeze_mode;
      c.freeze_mode = freeze_mode_from_string(part);
      if (c.layers == default_layers(previous) || c.layers == 0) c.layers = default_layers(c.freeze_mode);
    } else if (part.size() > 1 && part[0] == 'u' &&
               std::all_of(part.begin() + 1, part.end(), [](char ch) { return ch >= '0' && ch <= '9'; })) {
      c.unfrozen_layers = static_cast<std::size_t>(std::stoul(part.substr(1)));
    } else {
      throw ConfigError("unknown variant tag '" + part + "' in '" + std::string(tag) + "'");
    }
    pos = next + 1;
  }
  c.validate();
  return c;
}

std::vector<std::string> u_sweep_variants(std::size_t layers) {
  std::vector<std::string> out;
  for (std::size_t u = 1; u < layers; ++u) out.push_back("u" + std::to_string(u));
  return out;
}

std::vector<AblationRow> ablate(const ExperimentConfig& base, const std::vector<std::string>& variants) {
  std::vector<ExperimentConfig> configs;
  for (const auto& tag : variants) configs.push_back(apply_variant(base, tag));
  const PreparedData data = prepare_data(base.data.load(), base.input_steps, base.output_steps);

  std::map<std::size_t, std::filesystem::path> pretrained;  // depth -> checkpoint
  const std::filesystem::path scratch =
      base.output_dir.empty() ? std::filesystem::temp_directory_path() / ("stllm_ablate_" + data.split_hash)
                              : base.output_dir;
  std::vector<AblationRow> rows;
  for (std::size_t i = 0; i < variants.size(); ++i) {
    ExperimentConfig cfg = configs[i];
    const bool needs = !cfg.ablation.wo_llm && requires_pretrained(cfg.freeze_mode);
    if (needs && base.pretrained_checkpoint.empty()) {
      const std::size_t depth = cfg.resolved_layers();
      if (!pretrained.contains(depth)) {
        ExperimentConfig pre = cfg;
        pre.output_dir = scratch / ("pretrain_L" + std::to_string(depth));
        pretrained[depth] = pretrain_source(pre).path;
      }
      cfg.pretrained_checkpoint = pretrained[depth];
    }
    cfg.output_dir = base.output_dir.empty() ? std::filesystem::path() : base.output_dir / variants[i];
    TrainResult r = fit(cfg, data, data.splits.train);
    write_outputs(cfg, r.record, *r.model, data);
    rows.push_back({variants[i], std::move(r.record)});
  }
  if (!base.output_dir.empty()) {
    std::filesystem::create_directories(base.output_dir);
    std::ofstream out(base.output_dir / "ablation.csv", std::ios::trunc);
    out << ablation_csv(rows);
  }
  return rows;
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << "tag,mae,rmse,mape_pct,wape_pct,trainable_params,frozen_params,sec_per_batch\n";
  os << std::setprecision(10);
  for (const auto& r : rows) {
    const auto& t = r.record.test;
    os << r.tag << ',' << t.mae << ',' << t.rmse << ',' << t.mape_percent << ',' << t.wape_percent << ','
       << r.record.counts.trainable << ',' << r.record.counts.frozen << ',' << t.seconds_per_batch << '\n';
  }
  return os.str();
}

}  // namespace stllm::harness
