#pragma once

#include <cstddef>
#include <map>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "stllm/autodiff.hpp"
#include "stllm/tensor.hpp"

namespace stllm {

/// Named learnable tensor with a frozen flag. The value lives on a persistent
/// autodiff leaf so forward passes can reference it without copying.
class Parameter {
 public:
  Parameter(std::string name, Tensor init);

  Parameter(const Parameter&) = delete;
  Parameter& operator=(const Parameter&) = delete;

  [[nodiscard]] const std::string& name() const noexcept { return node_->leaf_name; }
  [[nodiscard]] bool frozen() const noexcept { return !node_->requires_grad; }
  void set_frozen(bool frozen) noexcept { node_->requires_grad = !frozen; }

  [[nodiscard]] const Tensor& value() const noexcept { return node_->value; }
  [[nodiscard]] Tensor& mutable_value() noexcept { return node_->value; }
  void assign(const Tensor& value);

  /// Leaf for use in a forward pass. Does not mutate the parameter, so
  /// concurrent no-grad forwards over a shared model are safe.
  [[nodiscard]] ad::Var var() const { return ad::Var::from_node(node_); }

 private:
  std::shared_ptr<ad::Node> node_;
};

/// Ordered registry of uniquely named parameters.
class ParameterSet {
 public:
  ParameterSet() = default;
  ParameterSet(const ParameterSet&) = delete;
  ParameterSet& operator=(const ParameterSet&) = delete;
  ParameterSet(ParameterSet&&) noexcept = default;
  ParameterSet& operator=(ParameterSet&&) noexcept = default;

  /// Registers a parameter; throws ConfigError on a duplicate name.
  Parameter& add(std::string name, Tensor init);

  [[nodiscard]] Parameter& at(std::string_view name);
  [[nodiscard]] const Parameter& at(std::string_view name) const;
  [[nodiscard]] Parameter* find(std::string_view name) noexcept;
  [[nodiscard]] const Parameter* find(std::string_view name) const noexcept;

  [[nodiscard]] std::size_t size() const noexcept { return params_.size(); }
  [[nodiscard]] std::vector<Parameter*> all();
  [[nodiscard]] std::vector<const Parameter*> all() const;
  /// Parameters whose names match a shell-style glob (`*`, `?`, `[...]`).
  [[nodiscard]] std::vector<Parameter*> matching(std::string_view pattern);

  /// Sets the frozen flag on every parameter matching `pattern` and returns
  /// how many matched. Zero matches is not an error.
  std::size_t set_frozen(std::string_view pattern, bool frozen);

  [[nodiscard]] std::vector<std::string> frozen_names() const;

  /// Name -> value copy of every parameter.
  [[nodiscard]] std::map<std::string, Tensor, std::less<>> snapshot() const;
  /// Restores values for every name present in `values` (shapes must match).
  void restore(const std::map<std::string, Tensor, std::less<>>& values);

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
  std::map<std::string, std::size_t, std::less<>> index_;
};

bool glob_match(std::string_view pattern, std::string_view name);

struct ParameterCounts {
  std::size_t total = 0;
  std::size_t frozen = 0;
  std::size_t trainable = 0;
};

/// Scalar counts (not tensor counts) across a parameter set.
ParameterCounts count_parameters(const ParameterSet& params);

}  // namespace stllm
