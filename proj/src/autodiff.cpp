#include "stllm/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <unordered_set>

#include "stllm/error.hpp"

namespace stllm::ad {
namespace {

thread_local bool t_grad_enabled = true;

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMajor>;
using MutMap = Eigen::Map<RowMajor>;

ConstMap cmap(const double* p, std::size_t r, std::size_t c) {
  return ConstMap(p, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}
MutMap mmap(double* p, std::size_t r, std::size_t c) {
  return MutMap(p, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

const Tensor& val(const Var& v, const char* op) {
  if (!v.defined()) throw Error(std::string(op) + ": undefined operand");
  return v.value();
}

void accumulate(const std::shared_ptr<Node>& node, Tensor g) {
  if (!node->requires_grad) return;
  if (node->grad.size() == 0 && node->grad.shape().empty()) {
    node->grad = std::move(g);
  } else {
    node->grad += g;
  }
}

Var make_result(Tensor value, std::initializer_list<const Var*> inputs, std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (t_grad_enabled) {
    bool any = false;
    for (const Var* in : inputs) any = any || in->requires_grad();
    if (any) {
      node->requires_grad = true;
      for (const Var* in : inputs) node->parents.push_back(in->node());
      node->backward = std::move(backward);
    }
  }
  return Var::from_node(std::move(node));
}

Var make_result_n(Tensor value, std::span<const Var> inputs, std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (t_grad_enabled) {
    bool any = std::any_of(inputs.begin(), inputs.end(), [](const Var& v) { return v.requires_grad(); });
    if (any) {
      node->requires_grad = true;
      for (const Var& in : inputs) node->parents.push_back(in.node());
      node->backward = std::move(backward);
    }
  }
  return Var::from_node(std::move(node));
}

// Number of times `b` repeats over `a` when `b`'s shape is a suffix of `a`'s.
std::size_t broadcast_outer(const Shape& a, const Shape& b, const char* op) {
  bool ok = b.size() <= a.size() && std::equal(b.rbegin(), b.rend(), a.rbegin());
  if (!ok) throw ShapeError(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) + " do not broadcast");
  return shape_numel(b) == 0 ? 0 : shape_numel(a) / shape_numel(b);
}

Tensor reduce_outer(const Tensor& g, const Shape& inner_shape) {
  Tensor out(inner_shape);
  const std::size_t n = out.size();
  if (n == 0) return out;
  for (std::size_t i = 0; i < g.size(); ++i) out[i % n] += g[i];
  return out;
}

std::size_t last_dim(const Tensor& t, const char* op) {
  if (t.rank() == 0) throw ShapeError(std::string(op) + ": needs rank >= 1, got scalar");
  return t.shape().back();
}

Shape drop_last(const Shape& s) { return Shape(s.begin(), s.end() - 1); }

}  // namespace

Var::Var(Tensor value) : node_(std::make_shared<Node>()) { node_->value = std::move(value); }

Var Var::leaf(Tensor value, bool requires_grad, std::string name) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = requires_grad;
  node->leaf_name = std::move(name);
  return from_node(std::move(node));
}

Var Var::from_node(std::shared_ptr<Node> node) {
  Var v;
  v.node_ = std::move(node);
  return v;
}

const Tensor& Var::value() const {
  if (!node_) throw Error("var: undefined");
  return node_->value;
}

bool grad_enabled() noexcept { return t_grad_enabled; }

NoGradGuard::NoGradGuard() noexcept : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

GradientMap backward(const Var& loss) {
  if (!loss.defined()) throw Error("backward: no forward graph (undefined loss)");
  const auto& root = loss.node();
  if (root->consumed) throw Error("backward: graph already consumed by a previous backward pass");
  if (root->value.size() != 1) throw ShapeError("backward: loss must be scalar, got " + shape_str(root->value.shape()));
  if (!root->requires_grad) throw Error("backward: loss is not connected to any trainable parameter");

  // Iterative post-order DFS for a topological order. Owning pointers keep
  // parents alive while earlier nodes release their edges.
  std::vector<std::shared_ptr<Node>> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<std::shared_ptr<Node>, std::size_t>> stack{{root, 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      std::shared_ptr<Node> parent = node->parents[next++];
      if (parent->requires_grad && !seen.contains(parent.get())) {
        seen.insert(parent.get());
        stack.emplace_back(std::move(parent), 0);
      }
    } else {
      order.push_back(std::move(node));
      stack.pop_back();
    }
  }

  root->grad = Tensor(root->value.shape(), 1.0);
  GradientMap grads;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = it->get();
    const bool has_grad = node->grad.size() != 0 || !node->grad.shape().empty();
    if (node->backward) {
      if (has_grad) node->backward(*node);
      node->backward = nullptr;
      node->parents.clear();
      node->grad = Tensor();
      node->consumed = true;
    } else if (!node->leaf_name.empty()) {
      if (has_grad) grads[node->leaf_name] = std::move(node->grad);
      node->grad = Tensor();
    } else {
      node->grad = Tensor();
    }
  }
  return grads;
}

// ---- elementwise ---------------------------------------------------------

Var add(const Var& a, const Var& b) {
  const Tensor& av = val(a, "add");
  const Tensor& bv = val(b, "add");
  broadcast_outer(av.shape(), bv.shape(), "add");
  Tensor out = av;
  const std::size_t nb = bv.size();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i % nb];
  return make_result(std::move(out), {&a, &b}, [](Node& self) {
    accumulate(self.parents[0], self.grad);
    accumulate(self.parents[1], reduce_outer(self.grad, self.parents[1]->value.shape()));
  });
}

Var sub(const Var& a, const Var& b) {
  const Tensor& av = val(a, "sub");
  const Tensor& bv = val(b, "sub");
  broadcast_outer(av.shape(), bv.shape(), "sub");
  Tensor out = av;
  const std::size_t nb = bv.size();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i % nb];
  return make_result(std::move(out), {&a, &b}, [](Node& self) {
    accumulate(self.parents[0], self.grad);
    Tensor gb = reduce_outer(self.grad, self.parents[1]->value.shape());
    for (double& v : gb.data()) v = -v;
    accumulate(self.parents[1], std::move(gb));
  });
}

Var mul(const Var& a, const Var& b) {
  const Tensor& av = val(a, "mul");
  const Tensor& bv = val(b, "mul");
  broadcast_outer(av.shape(), bv.shape(), "mul");
  Tensor out = av;
  const std::size_t nb = bv.size();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i % nb];
  return make_result(std::move(out), {&a, &b}, [](Node& self) {
    const Tensor& x = self.parents[0]->value;
    const Tensor& y = self.parents[1]->value;
    const std::size_t ny = y.size();
    if (self.parents[0]->requires_grad) {
      Tensor ga = self.grad;
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] *= y[i % ny];
      accumulate(self.parents[0], std::move(ga));
    }
    if (self.parents[1]->requires_grad) {
      Tensor gb(y.shape());
      for (std::size_t i = 0; i < x.size(); ++i) gb[i % ny] += self.grad[i] * x[i];
      accumulate(self.parents[1], std::move(gb));
    }
  });
}

Var scale(const Var& a, double factor) {
  Tensor out = val(a, "scale");
  for (double& v : out.data()) v *= factor;
  return make_result(std::move(out), {&a}, [factor](Node& self) {
    Tensor g = self.grad;
    for (double& v : g.data()) v *= factor;
    accumulate(self.parents[0], std::move(g));
  });
}

Var relu(const Var& a) {
  Tensor out = val(a, "relu");
  for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
  return make_result(std::move(out), {&a}, [](Node& self) {
    const Tensor& x = self.parents[0]->value;
    Tensor g = self.grad;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = x[i] > 0.0 ? g[i] : 0.0;
    accumulate(self.parents[0], std::move(g));
  });
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluA = 0.044715;
}  // namespace

Var gelu(const Var& a) {
  Tensor out = val(a, "gelu");
  for (double& x : out.data()) x = 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x)));
  return make_result(std::move(out), {&a}, [](Node& self) {
    const Tensor& x = self.parents[0]->value;
    Tensor g = self.grad;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double xi = x[i];
      const double t = std::tanh(kGeluC * (xi + kGeluA * xi * xi * xi));
      const double dinner = kGeluC * (1.0 + 3.0 * kGeluA * xi * xi);
      g[i] *= 0.5 * (1.0 + t) + 0.5 * xi * (1.0 - t * t) * dinner;
    }
    accumulate(self.parents[0], std::move(g));
  });
}

Var abs(const Var& a) {
  Tensor out = val(a, "abs");
  for (double& v : out.data()) v = std::fabs(v);
  return make_result(std::move(out), {&a}, [](Node& self) {
    const Tensor& x = self.parents[0]->value;
    Tensor g = self.grad;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] *= x[i] > 0.0 ? 1.0 : (x[i] < 0.0 ? -1.0 : 0.0);
    accumulate(self.parents[0], std::move(g));
  });
}

Var square(const Var& a) {
  Tensor out = val(a, "square");
  for (double& v : out.data()) v *= v;
  return make_result(std::move(out), {&a}, [](Node& self) {
    const Tensor& x = self.parents[0]->value;
    Tensor g = self.grad;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] *= 2.0 * x[i];
    accumulate(self.parents[0], std::move(g));
  });
}

// ---- contraction and layout ---------------------------------------------

Var matmul(const Var& a, const Var& b) {
  const Tensor& av = val(a, "matmul");
  const Tensor& bv = val(b, "matmul");
  auto mismatch = [&] {
    return ShapeError("matmul: cannot contract " + shape_str(av.shape()) + " with " + shape_str(bv.shape()));
  };
  if (av.rank() == 0 || bv.rank() < 2) throw mismatch();

  if (bv.rank() == 2) {
    const std::size_t k = av.shape().back();
    if (k != bv.dim(0)) throw mismatch();
    const std::size_t m = bv.dim(1);
    const std::size_t rows = k == 0 ? shape_numel(drop_last(av.shape())) : av.size() / k;
    Shape out_shape = drop_last(av.shape());
    out_shape.push_back(m);
    Tensor out(out_shape);
    mmap(out.data().data(), rows, m).noalias() = cmap(av.data().data(), rows, k) * cmap(bv.data().data(), k, m);
    return make_result(std::move(out), {&a, &b}, [rows, k, m](Node& self) {
      const auto& pa = self.parents[0];
      const auto& pb = self.parents[1];
      auto g = cmap(self.grad.data().data(), rows, m);
      if (pa->requires_grad) {
        Tensor ga(pa->value.shape());
        mmap(ga.data().data(), rows, k).noalias() = g * cmap(pb->value.data().data(), k, m).transpose();
        accumulate(pa, std::move(ga));
      }
      if (pb->requires_grad) {
        Tensor gb(pb->value.shape());
        mmap(gb.data().data(), k, m).noalias() = cmap(pa->value.data().data(), rows, k).transpose() * g;
        accumulate(pb, std::move(gb));
      }
    });
  }

  // Batched.
  if (av.rank() < 3 || av.rank() != bv.rank()) throw mismatch();
  const Shape lead_a(av.shape().begin(), av.shape().end() - 2);
  const Shape lead_b(bv.shape().begin(), bv.shape().end() - 2);
  if (lead_a != lead_b) throw mismatch();
  const std::size_t batch = shape_numel(lead_a);
  const std::size_t m = av.shape()[av.rank() - 2];
  const std::size_t k = av.shape().back();
  const std::size_t n = bv.shape().back();
  if (bv.shape()[bv.rank() - 2] != k) throw mismatch();
  Shape out_shape = lead_a;
  out_shape.push_back(m);
  out_shape.push_back(n);
  Tensor out(out_shape);
  for (std::size_t i = 0; i < batch; ++i) {
    mmap(out.data().data() + i * m * n, m, n).noalias() =
        cmap(av.data().data() + i * m * k, m, k) * cmap(bv.data().data() + i * k * n, k, n);
  }
  return make_result(std::move(out), {&a, &b}, [batch, m, k, n](Node& self) {
    const auto& pa = self.parents[0];
    const auto& pb = self.parents[1];
    Tensor ga, gb;
    if (pa->requires_grad) ga = Tensor(pa->value.shape());
    if (pb->requires_grad) gb = Tensor(pb->value.shape());
    for (std::size_t i = 0; i < batch; ++i) {
      auto g = cmap(self.grad.data().data() + i * m * n, m, n);
      if (pa->requires_grad) {
        mmap(ga.data().data() + i * m * k, m, k).noalias() =
            g * cmap(pb->value.data().data() + i * k * n, k, n).transpose();
      }
      if (pb->requires_grad) {
        mmap(gb.data().data() + i * k * n, k, n).noalias() =
            cmap(pa->value.data().data() + i * m * k, m, k).transpose() * g;
      }
    }
    if (pa->requires_grad) accumulate(pa, std::move(ga));
    if (pb->requires_grad) accumulate(pb, std::move(gb));
  });
}

Var transpose(const Var& a) {
  const Tensor& av = val(a, "transpose");
  if (av.rank() < 2) throw ShapeError("transpose: needs rank >= 2, got " + shape_str(av.shape()));
  std::vector<std::size_t> axes(av.rank());
  for (std::size_t i = 0; i < axes.size(); ++i) axes[i] = i;
  std::swap(axes[axes.size() - 1], axes[axes.size() - 2]);
  return permute(a, axes);
}

Var reshape(const Var& a, Shape shape) {
  const Tensor& av = val(a, "reshape");
  Tensor out = av.reshaped(std::move(shape));
  return make_result(std::move(out), {&a}, [](Node& self) {
    accumulate(self.parents[0], self.grad.reshaped(self.parents[0]->value.shape()));
  });
}

namespace {

// For each output linear index, the corresponding input linear index.
std::vector<std::size_t> permutation_map(const Shape& in_shape, std::span<const std::size_t> axes) {
  const std::size_t rank = in_shape.size();
  std::vector<std::size_t> in_strides(rank, 1);
  for (std::size_t i = rank; i-- > 1;) in_strides[i - 1] = in_strides[i] * in_shape[i];
  Shape out_shape(rank);
  std::vector<std::size_t> stride(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    out_shape[i] = in_shape[axes[i]];
    stride[i] = in_strides[axes[i]];
  }
  const std::size_t total = shape_numel(in_shape);
  std::vector<std::size_t> map(total);
  std::vector<std::size_t> idx(rank, 0);
  std::size_t src = 0;
  for (std::size_t o = 0; o < total; ++o) {
    map[o] = src;
    for (std::size_t ax = rank; ax-- > 0;) {
      if (++idx[ax] < out_shape[ax]) {
        src += stride[ax];
        break;
      }
      src -= stride[ax] * (out_shape[ax] - 1);
      idx[ax] = 0;
    }
  }
  return map;
}

}  // namespace

Var permute(const Var& a, std::span<const std::size_t> axes) {
  const Tensor& av = val(a, "permute");
  const std::size_t rank = av.rank();
  std::vector<bool> used(rank, false);
  bool valid = axes.size() == rank;
  for (std::size_t ax : axes) {
    if (!valid) break;
    valid = ax < rank && !used[ax];
    if (valid) used[ax] = true;
  }
  if (!valid) throw ShapeError("permute: invalid axis permutation for " + shape_str(av.shape()));
  Shape out_shape(rank);
  for (std::size_t i = 0; i < rank; ++i) out_shape[i] = av.shape()[axes[i]];
  auto map = std::make_shared<std::vector<std::size_t>>(permutation_map(av.shape(), axes));
  Tensor out(out_shape);
  for (std::size_t o = 0; o < out.size(); ++o) out[o] = av[(*map)[o]];
  return make_result(std::move(out), {&a}, [map](Node& self) {
    Tensor g(self.parents[0]->value.shape());
    for (std::size_t o = 0; o < map->size(); ++o) g[(*map)[o]] = self.grad[o];
    accumulate(self.parents[0], std::move(g));
  });
}

Var permute(const Var& a, std::initializer_list<std::size_t> axes) {
  return permute(a, std::span<const std::size_t>(axes.begin(), axes.size()));
}

Var concat(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat: no operands");
  const Tensor& first = val(parts[0], "concat");
  if (first.rank() == 0) throw ShapeError("concat: scalar operand");
  const Shape lead = drop_last(first.shape());
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const Var& p : parts) {
    const Tensor& t = val(p, "concat");
    if (t.rank() != first.rank() || drop_last(t.shape()) != lead) {
      throw ShapeError("concat: " + shape_str(first.shape()) + " vs " + shape_str(t.shape()));
    }
    widths.push_back(t.shape().back());
    total += t.shape().back();
  }
  const std::size_t rows = shape_numel(lead);
  Shape out_shape = lead;
  out_shape.push_back(total);
  Tensor out(out_shape);
  std::size_t col = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const Tensor& t = parts[p].value();
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(t.data().data() + r * widths[p], widths[p], out.data().data() + r * total + col);
    }
    col += widths[p];
  }
  return make_result_n(std::move(out), parts, [widths, rows, total](Node& self) {
    std::size_t c = 0;
    for (std::size_t p = 0; p < self.parents.size(); ++p) {
      if (self.parents[p]->requires_grad) {
        Tensor g(self.parents[p]->value.shape());
        for (std::size_t r = 0; r < rows; ++r) {
          std::copy_n(self.grad.data().data() + r * total + c, widths[p], g.data().data() + r * widths[p]);
        }
        accumulate(self.parents[p], std::move(g));
      }
      c += widths[p];
    }
  });
}

Var concat(std::initializer_list<Var> parts) { return concat(std::span<const Var>(parts.begin(), parts.size())); }

Var slice(const Var& a, std::size_t axis, std::size_t begin, std::size_t end) {
  const Tensor& av = val(a, "slice");
  if (axis >= av.rank() || begin > end || end > av.shape()[axis]) {
    throw ShapeError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) + ") on axis " +
                     std::to_string(axis) + " invalid for " + shape_str(av.shape()));
  }
  const std::size_t outer = shape_numel(Shape(av.shape().begin(), av.shape().begin() + static_cast<long>(axis)));
  const std::size_t inner = shape_numel(Shape(av.shape().begin() + static_cast<long>(axis) + 1, av.shape().end()));
  const std::size_t extent = av.shape()[axis];
  const std::size_t len = end - begin;
  Shape out_shape = av.shape();
  out_shape[axis] = len;
  Tensor out(out_shape);
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(av.data().data() + (o * extent + begin) * inner, len * inner, out.data().data() + o * len * inner);
  }
  return make_result(std::move(out), {&a}, [outer, inner, extent, begin, len](Node& self) {
    Tensor g(self.parents[0]->value.shape());
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(self.grad.data().data() + o * len * inner, len * inner,
                  g.data().data() + (o * extent + begin) * inner);
    }
    accumulate(self.parents[0], std::move(g));
  });
}

// ---- reductions ----------------------------------------------------------

Var mean(const Var& a) {
  const Tensor& av = val(a, "mean");
  const std::size_t w = last_dim(av, "mean");
  if (w == 0) throw ShapeError("mean: empty last axis");
  const std::size_t rows = av.size() / w;
  Tensor out(drop_last(av.shape()));
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < w; ++j) s += av[r * w + j];
    out[r] = s / static_cast<double>(w);
  }
  return make_result(std::move(out), {&a}, [w, rows](Node& self) {
    Tensor g(self.parents[0]->value.shape());
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < w; ++j) g[r * w + j] = self.grad[r] / static_cast<double>(w);
    }
    accumulate(self.parents[0], std::move(g));
  });
}

Var variance(const Var& a) {
  const Tensor& av = val(a, "variance");
  const std::size_t w = last_dim(av, "variance");
  if (w == 0) throw ShapeError("variance: empty last axis");
  const std::size_t rows = av.size() / w;
  auto means = std::make_shared<std::vector<double>>(rows);
  Tensor out(drop_last(av.shape()));
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < w; ++j) s += av[r * w + j];
    const double mu = s / static_cast<double>(w);
    double ss = 0.0;
    for (std::size_t j = 0; j < w; ++j) ss += (av[r * w + j] - mu) * (av[r * w + j] - mu);
    (*means)[r] = mu;
    out[r] = ss / static_cast<double>(w);
  }
  return make_result(std::move(out), {&a}, [w, rows, means](Node& self) {
    const Tensor& x = self.parents[0]->value;
    Tensor g(x.shape());
    for (std::size_t r = 0; r < rows; ++r) {
      const double coef = 2.0 * self.grad[r] / static_cast<double>(w);
      for (std::size_t j = 0; j < w; ++j) g[r * w + j] = coef * (x[r * w + j] - (*means)[r]);
    }
    accumulate(self.parents[0], std::move(g));
  });
}

Var sum_all(const Var& a) {
  const Tensor& av = val(a, "sum_all");
  double s = 0.0;
  for (double v : av.data()) s += v;
  return make_result(Tensor::scalar(s), {&a}, [](Node& self) {
    accumulate(self.parents[0], Tensor(self.parents[0]->value.shape(), self.grad.item()));
  });
}

Var mean_all(const Var& a) {
  const Tensor& av = val(a, "mean_all");
  if (av.size() == 0) throw ShapeError("mean_all: empty tensor");
  const double n = static_cast<double>(av.size());
  double s = 0.0;
  for (double v : av.data()) s += v;
  return make_result(Tensor::scalar(s / n), {&a}, [n](Node& self) {
    accumulate(self.parents[0], Tensor(self.parents[0]->value.shape(), self.grad.item() / n));
  });
}

// ---- normalization -------------------------------------------------------

Var softmax(const Var& a) {
  const Tensor& av = val(a, "softmax");
  const std::size_t w = last_dim(av, "softmax");
  if (w == 0) throw ShapeError("softmax: empty axis in " + shape_str(av.shape()));
  const std::size_t rows = av.size() / w;
  Tensor out(av.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = av.data().data() + r * w;
    double* y = out.data().data() + r * w;
    const double mx = *std::max_element(x, x + w);
    double s = 0.0;
    for (std::size_t j = 0; j < w; ++j) {
      y[j] = std::exp(x[j] - mx);
      s += y[j];
    }
    for (std::size_t j = 0; j < w; ++j) y[j] /= s;
  }
  return make_result(std::move(out), {&a}, [w, rows](Node& self) {
    const Tensor& y = self.value;
    Tensor g(y.shape());
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < w; ++j) dot += self.grad[r * w + j] * y[r * w + j];
      for (std::size_t j = 0; j < w; ++j) g[r * w + j] = y[r * w + j] * (self.grad[r * w + j] - dot);
    }
    accumulate(self.parents[0], std::move(g));
  });
}

Var layernorm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const Tensor& xv = val(x, "layernorm");
  const Tensor& gv = val(gamma, "layernorm");
  const Tensor& bv = val(beta, "layernorm");
  const std::size_t w = last_dim(xv, "layernorm");
  if (w == 0) throw ShapeError("layernorm: empty last axis");
  if (gv.shape() != Shape{w} || bv.shape() != Shape{w}) {
    throw ShapeError("layernorm: input " + shape_str(xv.shape()) + " with gamma " + shape_str(gv.shape()) +
                     " and beta " + shape_str(bv.shape()));
  }
  const std::size_t rows = xv.size() / w;
  auto xhat = std::make_shared<Tensor>(xv.shape());
  auto rstd = std::make_shared<std::vector<double>>(rows);
  Tensor out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv.data().data() + r * w;
    double s = 0.0;
    for (std::size_t j = 0; j < w; ++j) s += xr[j];
    const double mu = s / static_cast<double>(w);
    double ss = 0.0;
    for (std::size_t j = 0; j < w; ++j) ss += (xr[j] - mu) * (xr[j] - mu);
    const double inv = 1.0 / std::sqrt(ss / static_cast<double>(w) + eps);
    (*rstd)[r] = inv;
    for (std::size_t j = 0; j < w; ++j) {
      const double h = (xr[j] - mu) * inv;
      (*xhat)[r * w + j] = h;
      out[r * w + j] = gv[j] * h + bv[j];
    }
  }
  return make_result(std::move(out), {&x, &gamma, &beta}, [w, rows, xhat, rstd](Node& self) {
    const auto& px = self.parents[0];
    const auto& pg = self.parents[1];
    const auto& pb = self.parents[2];
    const Tensor& gam = pg->value;
    const Tensor& g = self.grad;
    if (px->requires_grad) {
      Tensor gx(px->value.shape());
      std::vector<double> dh(w);
      for (std::size_t r = 0; r < rows; ++r) {
        double m1 = 0.0, m2 = 0.0;
        for (std::size_t j = 0; j < w; ++j) {
          dh[j] = g[r * w + j] * gam[j];
          m1 += dh[j];
          m2 += dh[j] * (*xhat)[r * w + j];
        }
        m1 /= static_cast<double>(w);
        m2 /= static_cast<double>(w);
        for (std::size_t j = 0; j < w; ++j) {
          gx[r * w + j] = (*rstd)[r] * (dh[j] - m1 - (*xhat)[r * w + j] * m2);
        }
      }
      accumulate(px, std::move(gx));
    }
    if (pg->requires_grad || pb->requires_grad) {
      Tensor gg({w}), gb({w});
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < w; ++j) {
          gg[j] += g[r * w + j] * (*xhat)[r * w + j];
          gb[j] += g[r * w + j];
        }
      }
      accumulate(pg, std::move(gg));
      accumulate(pb, std::move(gb));
    }
  });
}

// ---- lookup / misc -------------------------------------------------------

Var row_lookup(const Var& table, std::span<const std::size_t> indices) {
  const Tensor& tv = val(table, "row_lookup");
  if (tv.rank() != 2) throw ShapeError("row_lookup: table must be 2-D, got " + shape_str(tv.shape()));
  const std::size_t vocab = tv.dim(0);
  const std::size_t d = tv.dim(1);
  auto idx = std::make_shared<std::vector<std::size_t>>(indices.begin(), indices.end());
  Tensor out({idx->size(), d});
  for (std::size_t i = 0; i < idx->size(); ++i) {
    if ((*idx)[i] >= vocab) {
      throw ShapeError("row_lookup: index " + std::to_string((*idx)[i]) + " out of range [0, " +
                       std::to_string(vocab) + ")");
    }
    std::copy_n(tv.data().data() + (*idx)[i] * d, d, out.data().data() + i * d);
  }
  return make_result(std::move(out), {&table}, [idx, d](Node& self) {
    Tensor g(self.parents[0]->value.shape());
    for (std::size_t i = 0; i < idx->size(); ++i) {
      for (std::size_t j = 0; j < d; ++j) g[(*idx)[i] * d + j] += self.grad[i * d + j];
    }
    accumulate(self.parents[0], std::move(g));
  });
}

Tensor one_hot(std::span<const std::size_t> indices, std::size_t depth) {
  Tensor out({indices.size(), depth});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= depth) throw ShapeError("one_hot: index " + std::to_string(indices[i]) + " >= depth");
    out[i * depth + indices[i]] = 1.0;
  }
  return out;
}

Var dropout(const Var& a, double rate, std::mt19937_64& rng) {
  if (rate <= 0.0) return a;
  if (rate >= 1.0) throw Error("dropout: rate must be < 1");
  const Tensor& av = val(a, "dropout");
  auto mask = std::make_shared<std::vector<double>>(av.size());
  const double keep_scale = 1.0 / (1.0 - rate);
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    (*mask)[i] = u < rate ? 0.0 : keep_scale;
    out[i] *= (*mask)[i];
  }
  return make_result(std::move(out), {&a}, [mask](Node& self) {
    Tensor g = self.grad;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] *= (*mask)[i];
    accumulate(self.parents[0], std::move(g));
  });
}

}  // namespace stllm::ad
