#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "stllm/autodiff.hpp"
#include "stllm/parameter.hpp"

namespace stllm {

struct AdamWConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.0;
  /// Fraction of `total_steps` over which the rate ramps linearly from lr/w to lr.
  double warmup_fraction = 0.05;
  /// Planned number of steps; 0 disables warmup.
  std::size_t total_steps = 0;
};

/// Adaptive-moment optimizer with decoupled weight decay and linear warmup.
/// Moment buffers exist only for parameters that are trainable at step time.
class AdamW {
 public:
  AdamW(std::vector<Parameter*> params, AdamWConfig config);

  /// Updates every managed non-frozen parameter. Frozen parameters are not
  /// touched. Throws if a managed trainable parameter has no gradient.
  void step(const ad::GradientMap& grads);

  [[nodiscard]] std::size_t step_count() const noexcept { return step_count_; }
  /// Learning rate that the next step will use.
  [[nodiscard]] double current_learning_rate() const noexcept;
  [[nodiscard]] const AdamWConfig& config() const noexcept { return config_; }
  [[nodiscard]] bool has_moments(const std::string& name) const { return moments_.contains(name); }
  [[nodiscard]] std::size_t moment_count() const noexcept { return moments_.size(); }

 private:
  struct Moments {
    std::vector<double> first;
    std::vector<double> second;
  };

  std::vector<Parameter*> params_;
  AdamWConfig config_;
  std::size_t step_count_ = 0;
  std::map<std::string, Moments, std::less<>> moments_;
};

}  // namespace stllm
