#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "stllm/checkpoint.hpp"
#include "stllm/data.hpp"
#include "stllm/head.hpp"
#include "stllm/model.hpp"

namespace stllm::harness {

/// Either a generator config or a file on disk.
struct DataSource {
  std::optional<data::GeneratorConfig> generator;
  std::filesystem::path path;
  data::LoadSchema schema;

  [[nodiscard]] data::TrafficTensor load() const;
  [[nodiscard]] nlohmann::json to_json() const;
  static DataSource from_json(const nlohmann::json& j);
};

struct Ablation {
  bool wo_llm = false;
  bool wo_st = false;
  bool wo_t = false;
  bool wo_s = false;
};

/// Desk-scale stand-in for a pretrained backbone: the full model is trained on
/// next-step prediction over a synthetic source corpus and only the
/// transformer blocks and final layer norm are kept.
struct PretrainConfig {
  data::GeneratorConfig source = default_source();
  std::size_t epochs = 12;
  std::size_t horizon = 1;
  std::size_t batch_size = 64;

  static data::GeneratorConfig default_source();
};

struct ExperimentConfig {
  DataSource data;
  std::size_t input_steps = 12;
  std::size_t output_steps = 12;
  std::size_t d_model = 16;
  std::size_t heads = 4;
  std::size_t layers = 0;  // 0 selects 12 for full_layer, else 6
  std::size_t unfrozen_layers = 2;
  FreezeMode freeze_mode = FreezeMode::PFA;
  std::size_t ffn_width = 0;
  double dropout = 0.1;
  bool causal = false;
  std::size_t max_tokens = 0;  // 0 selects the station count of the data
  double lambda = 1e-4;
  LossKind loss = LossKind::MeanAbsolute;
  double learning_rate = 1e-3;
  double weight_decay = 0.0;
  double warmup_fraction = 0.05;
  std::size_t batch_size = 64;
  std::size_t epochs = 100;
  std::size_t patience = 15;
  std::uint64_t seed = 1;
  double few_shot_fraction = 0.10;
  Ablation ablation;
  bool zero_pe_on_transfer = false;
  std::filesystem::path pretrained_checkpoint;
  std::filesystem::path output_dir;
  PretrainConfig pretrain;

  [[nodiscard]] std::size_t resolved_layers() const;
  [[nodiscard]] ModelConfig model_config(std::size_t stations, std::size_t channels) const;
  void validate() const;

  [[nodiscard]] nlohmann::json to_json() const;
  static ExperimentConfig from_json(const nlohmann::json& j);
};

/// Raw and normalized series, chronological splits and train-only statistics.
struct PreparedData {
  std::shared_ptr<const data::TrafficTensor> raw;
  std::shared_ptr<const data::TrafficTensor> normalized;
  data::Splits splits;
  data::NormStats stats;
  std::string split_hash;  // FNV-1a over the raw values and every split's window starts
};

PreparedData prepare_data(data::TrafficTensor tt, std::size_t input_steps, std::size_t output_steps,
                          std::size_t steps_per_day = 48);

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_mae = 0.0;
};

struct RunRecord {
  nlohmann::json config;  // ExperimentConfig snapshot
  std::vector<EpochLog> epochs;
  MetricsReport test;
  std::filesystem::path checkpoint;
  std::size_t best_epoch = 0;
  std::size_t train_windows = 0;
  ParameterCounts counts;
  std::vector<std::string> frozen;
  std::vector<std::string> inert;  // parameters the ablation cuts off from the output
  std::string split_hash;
  double train_seconds = 0.0;

  [[nodiscard]] nlohmann::json to_json() const;
};

struct TrainResult {
  RunRecord record;
  std::unique_ptr<StLlm> model;
};

struct PretrainResult {
  Checkpoint checkpoint;
  std::filesystem::path path;
  double initial_val_loss = 0.0;
  double final_val_loss = 0.0;
};

PretrainResult pretrain_source(const ExperimentConfig& config);

/// Builds the model for `config`, loading pretrained blocks when the mode needs
/// them, and applies the freeze policy.
std::unique_ptr<StLlm> build_model(const ExperimentConfig& config, std::size_t stations, std::size_t channels);

/// Supervised training with early stopping on validation MAE. The returned model
/// holds the best-validation parameters.
TrainResult fit(const ExperimentConfig& config, const PreparedData& data, const data::WindowSplit& train_windows);

RunRecord train(const ExperimentConfig& config);
/// Trains on the first ceil(few_shot_fraction * |train|) windows.
RunRecord few_shot(const ExperimentConfig& config);

/// Denormalized metrics plus mean wall-clock seconds per batch.
MetricsReport evaluate(const StLlm& model, const PreparedData& data, const data::WindowSplit& split,
                       std::size_t batch_size = 64);
MetricsReport evaluate(const std::filesystem::path& checkpoint, const ExperimentConfig& config);

/// Evaluates a trained model on another dataset's test split without any
/// parameter update. Target statistics come from the target's train split.
MetricsReport zero_shot(const StLlm& model, const data::TrafficTensor& target, std::size_t batch_size = 64,
                        bool zero_positional_encoding = false);
MetricsReport zero_shot(const std::filesystem::path& source_checkpoint, const ExperimentConfig& target);

/// Predicts each future value as the train-split mean at the same day index.
MetricsReport historical_average(const PreparedData& data, const data::WindowSplit& split);

/// Variant tags: full, wo_llm, wo_st, wo_t, wo_s, pfa, fpt, full_tuning,
/// no_pretrain, full_layer, u<k>; combine with '+' (e.g. "fpt+wo_t").
ExperimentConfig apply_variant(const ExperimentConfig& base, std::string_view tag);
std::vector<std::string> u_sweep_variants(std::size_t layers);

struct AblationRow {
  std::string tag;
  RunRecord record;
};

/// Runs every variant on identical data. Pretraining checkpoints are created on
/// demand (one per depth) when the base config does not name one.
std::vector<AblationRow> ablate(const ExperimentConfig& base, const std::vector<std::string>& variants);

/// Header: tag,mae,rmse,mape_pct,wape_pct,trainable_params,frozen_params,sec_per_batch
std::string ablation_csv(const std::vector<AblationRow>& rows);

}  // namespace stllm::harness
