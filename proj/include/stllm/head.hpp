#pragma once

#include <cstddef>
#include <random>
#include <span>
#include <vector>

#include "json.hpp"
#include "stllm/autodiff.hpp"
#include "stllm/parameter.hpp"

namespace stllm {

/// Pointwise regression from the transformer output to S steps x C channels.
/// Parameters: head.w (W x S*C), head.b (S*C).
class RegressionHead {
 public:
  RegressionHead(std::size_t width, std::size_t output_steps, std::size_t channels, ParameterSet& params,
                 std::mt19937_64& rng);

  /// [B, N, W] -> [B, S, N, C]; an unbatched [N, W] input gives [S, N, C].
  /// Token n's predictions depend only on input row n.
  [[nodiscard]] ad::Var regress(const ad::Var& h) const;

  [[nodiscard]] std::size_t output_steps() const noexcept { return steps_; }
  [[nodiscard]] std::size_t channels() const noexcept { return channels_; }

 private:
  std::size_t width_;
  std::size_t steps_;
  std::size_t channels_;
  const Parameter* w_;
  const Parameter* b_;
};

enum class LossKind { MeanAbsolute, MeanSquared };

struct LossConfig {
  double lambda = 1e-4;  // L2 weight, applied to trainable parameters only
  LossKind kind = LossKind::MeanAbsolute;
};

/// mean |pred - target| (or mean squared) + lambda * sum of squares of every
/// non-frozen parameter in `params`.
ad::Var training_loss(const ad::Var& prediction, const Tensor& target, const LossConfig& config,
                      std::span<const Parameter* const> params);

struct MetricsReport {
  double mae = 0.0;
  double rmse = 0.0;
  double mape_percent = 0.0;
  double wape_percent = 0.0;
  std::size_t m = 0;
  double seconds_per_batch = 0.0;

  /// Keys: mae, rmse, mape_pct, wape_pct, m, sec_per_batch.
  [[nodiscard]] nlohmann::json to_json() const;
  static MetricsReport from_json(const nlohmann::json& j);
};

/// Default MAPE mask: entries with |truth| <= this are skipped.
inline constexpr double kMapeEpsilon = 1e-3;

/// Point metrics over flattened arrays. Throws DataError when shapes differ,
/// the arrays are empty, sum |truth| == 0 (WAPE), or every entry is masked (MAPE).
MetricsReport compute_metrics(std::span<const double> prediction, std::span<const double> truth,
                              double mape_epsilon = kMapeEpsilon);

/// Streaming form used by evaluation to avoid materializing every prediction.
class MetricsAccumulator {
 public:
  explicit MetricsAccumulator(double mape_epsilon = kMapeEpsilon) : mape_epsilon_(mape_epsilon) {}
  void add(std::span<const double> prediction, std::span<const double> truth);
  [[nodiscard]] MetricsReport report() const;

 private:
  double mape_epsilon_;
  double abs_sum_ = 0.0;
  double sq_sum_ = 0.0;
  double ape_sum_ = 0.0;
  double truth_abs_sum_ = 0.0;
  std::size_t count_ = 0;
  std::size_t mape_count_ = 0;
};

}  // namespace stllm
