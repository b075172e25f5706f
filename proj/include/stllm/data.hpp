#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "stllm/tensor.hpp"

namespace stllm::data {

/// Raw series of shape T x N x C with calendar metadata.
struct TrafficTensor {
  Tensor values;  // [T, N, C]
  int interval_minutes = 30;
  std::int64_t start_epoch = 0;  // UTC seconds of timestep 0
  std::vector<std::string> station_ids;

  [[nodiscard]] std::size_t timesteps() const { return values.dim(0); }
  [[nodiscard]] std::size_t stations() const { return values.dim(1); }
  [[nodiscard]] std::size_t channels() const { return values.dim(2); }

  /// Throws DataError unless T, N, C >= 1, values are finite and >= 0, and
  /// there is one station id per station.
  void validate() const;
};

enum class FileFormat { Csv, Binary };

struct LoadSchema {
  FileFormat format = FileFormat::Csv;
  /// CSV only: one file per additional channel (the primary path is channel 0).
  std::vector<std::filesystem::path> extra_channel_files;
  /// CSV only; binary files carry their own.
  int interval_minutes = 30;
  std::int64_t start_epoch = 0;
};

/// Loads and validates a series. CSV: header row of station ids, one row per
/// timestep. Binary: see write_binary.
TrafficTensor load_traffic(const std::filesystem::path& path, const LoadSchema& schema);

/// Binary layout: "STLL", u32 version (1), u32 T, u32 N, u32 C, u32 interval,
/// i64 start_epoch, then T*N*C little-endian float64 in T,N,C order.
void write_binary(const std::filesystem::path& path, const TrafficTensor& tt);
/// One CSV per channel: `<stem>.csv` for C == 1, else `<stem>_c<k>.csv`.
std::vector<std::filesystem::path> write_csv(const std::filesystem::path& stem, const TrafficTensor& tt);

// ---- calendar -------------------------------------------------------------

struct CalendarIndex {
  std::size_t day_index = 0;   // slot within the day, [0, steps_per_day)
  std::size_t week_index = 0;  // weekday, Monday = 0
  friend bool operator==(const CalendarIndex&, const CalendarIndex&) = default;
};

/// Calendar position of timestep `t_index`. Requires steps_per_day *
/// interval_minutes == 1440 and days_per_week == 7 (ConfigError otherwise).
CalendarIndex calendar_indices(std::size_t t_index, std::int64_t start_epoch, int interval_minutes,
                               std::size_t steps_per_day = 48, std::size_t days_per_week = 7);

// ---- windows --------------------------------------------------------------

/// One (input, target) pair. Values are views into the source series; the
/// calendar position is that of the last input step.
struct WindowSample {
  std::shared_ptr<const TrafficTensor> source;
  std::size_t start = 0;  // first input timestep
  std::size_t input_steps = 0;
  std::size_t output_steps = 0;
  std::size_t day_index = 0;
  std::size_t week_index = 0;

  [[nodiscard]] std::size_t last_input_step() const noexcept { return start + input_steps - 1; }
  /// [P, N, C] slice.
  [[nodiscard]] Tensor x() const;
  /// [S, N, C] slice immediately following x.
  [[nodiscard]] Tensor y() const;
};

/// All T - P - S + 1 windows in chronological order.
std::vector<WindowSample> make_windows(std::shared_ptr<const TrafficTensor> tt, std::size_t input_steps,
                                       std::size_t output_steps, std::size_t steps_per_day = 48,
                                       std::size_t days_per_week = 7);

enum class SplitKind { Train, Validation, Test };

struct WindowSplit {
  SplitKind kind = SplitKind::Train;
  std::vector<WindowSample> windows;

  [[nodiscard]] std::size_t size() const noexcept { return windows.size(); }
  [[nodiscard]] bool empty() const noexcept { return windows.empty(); }
};

struct Splits {
  WindowSplit train;
  WindowSplit validation;
  WindowSplit test;
};

/// Contiguous chronological partition. Validation and test receive
/// floor(n * ratio / sum) windows each (at least one); train gets the rest.
Splits split_chronological(const std::vector<WindowSample>& windows,
                           std::array<double, 3> ratios = {6.0, 2.0, 2.0});

/// First ceil(fraction * |split|) windows of a training split.
WindowSplit chronological_prefix(const WindowSplit& train, double fraction);

// ---- normalization --------------------------------------------------------

/// Per-channel z-score statistics. Only constructible from a training split.
class NormStats {
 public:
  /// Population mean/std per channel over the distinct timesteps spanned by
  /// the training windows. Throws DataError for a non-training split or zero std.
  static NormStats fit(const WindowSplit& train);
  /// Rebuilds stats persisted alongside a model (e.g. from a checkpoint header).
  static NormStats from_values(std::vector<double> mean, std::vector<double> std);

  [[nodiscard]] const std::vector<double>& mean() const noexcept { return mean_; }
  [[nodiscard]] const std::vector<double>& stddev() const noexcept { return std_; }
  [[nodiscard]] std::size_t channels() const noexcept { return mean_.size(); }

  /// Any tensor whose last axis is the channel axis.
  [[nodiscard]] Tensor normalize(const Tensor& x) const;
  [[nodiscard]] Tensor denormalize(const Tensor& z) const;
  [[nodiscard]] TrafficTensor normalize(const TrafficTensor& tt) const;

  [[nodiscard]] nlohmann::json to_json() const;
  static NormStats from_json(const nlohmann::json& j);

 private:
  NormStats(std::vector<double> mean, std::vector<double> std);
  void check_channels(const Tensor& x) const;

  std::vector<double> mean_;
  std::vector<double> std_;
};

// ---- synthetic generator --------------------------------------------------

struct GeneratorConfig {
  std::size_t stations = 20;
  std::size_t timesteps = 2016;
  std::uint64_t seed = 1;
  double base_level = 40.0;
  double daily_amp = 0.6;   // relative amplitude of the daily cycle
  double weekly_amp = 0.2;  // relative amplitude of the weekly cycle
  double noise_std = 3.0;   // stationary std of the additive noise
  double noise_ar = 0.8;    // AR(1) coefficient of the noise
  double spatial_corr = 0.5;  // share of the noise innovation common to all stations
  std::size_t channels = 1;
  int interval_minutes = 30;
  std::int64_t start_epoch = 1459468800;  // 2016-04-01 00:00 UTC
  std::size_t steps_per_day = 48;

  /// High volume, strong daily cycle.
  static GeneratorConfig taxi_like(std::size_t stations = 20, std::size_t timesteps = 2016, std::uint64_t seed = 1);
  /// Low counts, noisier.
  static GeneratorConfig bike_like(std::size_t stations = 16, std::size_t timesteps = 2016, std::uint64_t seed = 1);

  [[nodiscard]] nlohmann::json to_json() const;
  static GeneratorConfig from_json(const nlohmann::json& j);
};

/// Seeded series: per-station scaled daily + weekly sinusoids with a
/// per-station phase shift, plus AR(1) noise, clipped at zero.
TrafficTensor synth_generate(const GeneratorConfig& config);

}  // namespace stllm::data
