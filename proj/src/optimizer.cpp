#include "stllm/optimizer.hpp"

#include <algorithm>
#include <cmath>

#include "stllm/error.hpp"

namespace stllm {

AdamW::AdamW(std::vector<Parameter*> params, AdamWConfig config) : params_(std::move(params)), config_(config) {
  if (!(config_.learning_rate > 0.0) || config_.beta1 < 0.0 || config_.beta1 >= 1.0 || config_.beta2 < 0.0 ||
      config_.beta2 >= 1.0 || !(config_.epsilon > 0.0) || config_.weight_decay < 0.0 ||
      config_.warmup_fraction < 0.0 || config_.warmup_fraction > 1.0) {
    throw ConfigError("adamw: invalid hyperparameters");
  }
}

double AdamW::current_learning_rate() const noexcept {
  if (config_.total_steps == 0 || config_.warmup_fraction <= 0.0) return config_.learning_rate;
  const auto warmup = static_cast<std::size_t>(
      std::max(1.0, std::ceil(config_.warmup_fraction * static_cast<double>(config_.total_steps))));
  const std::size_t next = step_count_ + 1;
  if (next >= warmup) return config_.learning_rate;
  return config_.learning_rate * static_cast<double>(next) / static_cast<double>(warmup);
}

void AdamW::step(const ad::GradientMap& grads) {
  for (const Parameter* p : params_) {
    if (!p->frozen() && !grads.contains(p->name())) {
      throw Error("adamw: missing gradient for trainable parameter " + p->name());
    }
  }
  const double lr = current_learning_rate();
  ++step_count_;
  const double t = static_cast<double>(step_count_);
  const double bias1 = 1.0 - std::pow(config_.beta1, t);
  const double bias2 = 1.0 - std::pow(config_.beta2, t);

  for (Parameter* p : params_) {
    if (p->frozen()) {
      moments_.erase(p->name());
      continue;
    }
    const Tensor& g = grads.find(p->name())->second;
    Tensor& theta = p->mutable_value();
    if (g.shape() != theta.shape()) {
      throw ShapeError("adamw: gradient " + shape_str(g.shape()) + " for " + p->name() + " of shape " +
                       shape_str(theta.shape()));
    }
    auto [it, inserted] = moments_.try_emplace(p->name());
    Moments& m = it->second;
    if (inserted) {
      m.first.assign(theta.size(), 0.0);
      m.second.assign(theta.size(), 0.0);
    }
    for (std::size_t i = 0; i < theta.size(); ++i) {
      m.first[i] = config_.beta1 * m.first[i] + (1.0 - config_.beta1) * g[i];
      m.second[i] = config_.beta2 * m.second[i] + (1.0 - config_.beta2) * g[i] * g[i];
      const double mhat = m.first[i] / bias1;
      const double vhat = m.second[i] / bias2;
      theta[i] -= lr * (mhat / (std::sqrt(vhat) + config_.epsilon) + config_.weight_decay * theta[i]);
    }
  }
}

}  // namespace stllm
