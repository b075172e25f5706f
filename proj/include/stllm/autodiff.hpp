#pragma once

// Reverse-mode automatic differentiation over Tensor values.
//
// Every op returns a Var that owns a graph node. When at least one input
// requires a gradient (and grad mode is on), the node keeps its parents and a
// backward closure; otherwise it is a detached constant. Leaf nodes created
// for frozen parameters never require a gradient, so no gradient is ever
// accumulated for them.

#include <cstddef>
#include <functional>
#include <map>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "stllm/tensor.hpp"

namespace stllm::ad {

struct Node {
  Tensor value;
  Tensor grad;  // empty until something flows back
  bool requires_grad = false;
  bool consumed = false;
  std::string leaf_name;  // non-empty for named parameter leaves
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;
};

class Var {
 public:
  Var() = default;
  /// Constant (never requires a gradient).
  explicit Var(Tensor value);

  /// Leaf that may require a gradient. `name` keys it in the gradient map.
  static Var leaf(Tensor value, bool requires_grad, std::string name = {});
  static Var from_node(std::shared_ptr<Node> node);

  [[nodiscard]] bool defined() const noexcept { return node_ != nullptr; }
  [[nodiscard]] const Tensor& value() const;
  [[nodiscard]] const Shape& shape() const { return value().shape(); }
  [[nodiscard]] bool requires_grad() const noexcept { return node_ && node_->requires_grad; }
  [[nodiscard]] const std::shared_ptr<Node>& node() const noexcept { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Gradients keyed by parameter name.
using GradientMap = std::map<std::string, Tensor, std::less<>>;

/// Runs reverse accumulation from a scalar loss. Returns the gradient of every
/// named leaf that requires a gradient and was reached. The graph behind the
/// loss is released; calling backward on it again throws.
GradientMap backward(const Var& loss);

bool grad_enabled() noexcept;

/// Disables graph construction on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() noexcept;
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// ---- primitives ---------------------------------------------------------
//
// Binary elementwise ops accept either equal shapes or a right operand whose
// shape is a suffix of the left operand's shape (broadcast over leading axes).

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double factor);

/// a[..., K] x b[K, M] -> [..., M], or batched a[B..., M, K] x b[B..., K, N]
/// when both operands have rank >= 3 and identical leading axes.
Var matmul(const Var& a, const Var& b);
/// Swaps the last two axes.
Var transpose(const Var& a);
Var reshape(const Var& a, Shape shape);
Var permute(const Var& a, std::span<const std::size_t> axes);
Var permute(const Var& a, std::initializer_list<std::size_t> axes);
/// Concatenates along the last axis; all other extents must agree.
Var concat(std::span<const Var> parts);
Var concat(std::initializer_list<Var> parts);
/// Half-open range [begin, end) along `axis`.
Var slice(const Var& a, std::size_t axis, std::size_t begin, std::size_t end);

/// Reductions over the last axis (the axis is dropped).
Var mean(const Var& a);
/// Population variance over the last axis.
Var variance(const Var& a);
Var sum_all(const Var& a);
Var mean_all(const Var& a);

Var softmax(const Var& a);
Var layernorm(const Var& x, const Var& gamma, const Var& beta, double eps);
Var relu(const Var& a);
/// tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
Var gelu(const Var& a);
Var abs(const Var& a);
Var square(const Var& a);

/// Gathers rows of `table` [V, D] -> [indices.size(), D].
Var row_lookup(const Var& table, std::span<const std::size_t> indices);
/// One-hot rows [indices.size(), depth] (constant).
Tensor one_hot(std::span<const std::size_t> indices, std::size_t depth);

/// Inverted dropout. Identity when rate == 0.
Var dropout(const Var& a, double rate, std::mt19937_64& rng);

}  // namespace stllm::ad
