#include "stllm/head.hpp"

#include <cmath>

#include "stllm/embedding.hpp"
#include "stllm/error.hpp"

namespace stllm {

using ad::Var;

RegressionHead::RegressionHead(std::size_t width, std::size_t output_steps, std::size_t channels,
                               ParameterSet& params, std::mt19937_64& rng)
    : width_(width), steps_(output_steps), channels_(channels) {
  if (width == 0 || output_steps == 0 || channels == 0) throw ConfigError("regression head: sizes must be >= 1");
  w_ = &params.add("head.w", random_normal({width, output_steps * channels}, 1.0 / std::sqrt(static_cast<double>(width)), rng));
  b_ = &params.add("head.b", Tensor({output_steps * channels}));
}

Var RegressionHead::regress(const Var& h) const {
  const Shape& s = h.shape();
  if ((s.size() != 2 && s.size() != 3) || s.back() != width_) {
    throw ShapeError("regress: expected [B, N, " + std::to_string(width_) + "], got " + shape_str(s));
  }
  const bool unbatched = s.size() == 2;
  const std::size_t batch = unbatched ? 1 : s[0];
  const std::size_t n = s[s.size() - 2];
  Var flat = ad::add(ad::matmul(h, w_->var()), b_->var());
  Var out = ad::permute(ad::reshape(flat, {batch, n, steps_, channels_}), {0, 2, 1, 3});
  return unbatched ? ad::reshape(out, {steps_, n, channels_}) : out;
}

Var training_loss(const Var& prediction, const Tensor& target, const LossConfig& config,
                  std::span<const Parameter* const> params) {
  if (prediction.shape() != target.shape()) {
    throw ShapeError("loss: prediction " + shape_str(prediction.shape()) + " vs target " + shape_str(target.shape()));
  }
  if (!(config.lambda >= 0.0) || !std::isfinite(config.lambda)) throw ConfigError("loss: lambda must be finite and >= 0");
  Var diff = ad::sub(prediction, Var(target));
  Var loss = ad::mean_all(config.kind == LossKind::MeanAbsolute ? ad::abs(diff) : ad::square(diff));
  if (config.lambda > 0.0) {
    for (const Parameter* p : params) {
      if (!p->frozen()) loss = ad::add(loss, ad::scale(ad::sum_all(ad::square(p->var())), config.lambda));
    }
  }
  return loss;
}

nlohmann::json MetricsReport::to_json() const {
  return {{"mae", mae},       {"rmse", rmse}, {"mape_pct", mape_percent}, {"wape_pct", wape_percent},
          {"m", m},           {"sec_per_batch", seconds_per_batch}};
}

MetricsReport MetricsReport::from_json(const nlohmann::json& j) {
  MetricsReport r;
  r.mae = j.at("mae").get<double>();
  r.rmse = j.at("rmse").get<double>();
  r.mape_percent = j.at("mape_pct").get<double>();
  r.wape_percent = j.at("wape_pct").get<double>();
  r.m = j.at("m").get<std::size_t>();
  r.seconds_per_batch = j.at("sec_per_batch").get<double>();
  return r;
}

void MetricsAccumulator::add(std::span<const double> prediction, std::span<const double> truth) {
  if (prediction.size() != truth.size()) {
    throw DataError("metrics: " + std::to_string(prediction.size()) + " predictions for " +
                    std::to_string(truth.size()) + " targets");
  }
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const double err = prediction[i] - truth[i];
    const double a = std::fabs(err);
    abs_sum_ += a;
    sq_sum_ += err * err;
    truth_abs_sum_ += std::fabs(truth[i]);
    if (std::fabs(truth[i]) > mape_epsilon_) {
      ape_sum_ += a / std::fabs(truth[i]);
      ++mape_count_;
    }
  }
  count_ += truth.size();
}

MetricsReport MetricsAccumulator::report() const {
  if (count_ == 0) throw DataError("metrics: no values");
  if (truth_abs_sum_ == 0.0) throw DataError("metrics: WAPE undefined, sum |truth| == 0");
  if (mape_count_ == 0) throw DataError("metrics: MAPE undefined, every target is masked");
  MetricsReport r;
  const auto m = static_cast<double>(count_);
  r.m = count_;
  r.mae = abs_sum_ / m;
  r.rmse = std::sqrt(sq_sum_ / m);
  r.mape_percent = 100.0 * ape_sum_ / static_cast<double>(mape_count_);
  r.wape_percent = 100.0 * abs_sum_ / truth_abs_sum_;
  return r;
}

MetricsReport compute_metrics(std::span<const double> prediction, std::span<const double> truth,
                              double mape_epsilon) {
  MetricsAccumulator acc(mape_epsilon);
  acc.add(prediction, truth);
  return acc.report();
}

}  // namespace stllm
