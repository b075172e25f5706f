#include <cmath>
#include <random>

#include "doctest.h"
#include "stllm/autodiff.hpp"
#include "stllm/embedding.hpp"
#include "stllm/error.hpp"
#include "stllm/parameter.hpp"
#include "support/gradcheck.hpp"

using namespace stllm;
using ad::Var;

namespace {

Tensor randn(const Shape& s, std::mt19937_64& rng) { return random_normal(s, 1.0, rng); }

std::size_t extent(std::mt19937_64& rng) { return std::uniform_int_distribution<std::size_t>(1, 4)(rng); }

}  // namespace

TEST_CASE("tensor construction validates size") {
  CHECK_THROWS_AS(Tensor({2, 3}, std::vector<double>(5)), ShapeError);
  const Tensor t({2, 3}, 1.5);
  CHECK(t.size() == 6);
  CHECK(t.rank() == 2);
  CHECK(shape_numel({4, 0, 2}) == 0);
  CHECK(Tensor::scalar(3.0).item() == 3.0);
}

TEST_CASE("matmul with identity returns the input") {
  const Tensor a = Tensor::matrix({{1, 2}, {3, 4}});
  const Tensor out = ad::matmul(Var(a), Var(Tensor::identity(2))).value();
  CHECK(out == a);
}

TEST_CASE("softmax of equal logits is uniform") {
  const Tensor out = ad::softmax(Var(Tensor::vector({0, 0}))).value();
  CHECK(out[0] == doctest::Approx(0.5));
  CHECK(out[1] == doctest::Approx(0.5));
}

TEST_CASE("layernorm uses population variance") {
  const Tensor out = ad::layernorm(Var(Tensor::vector({1, 2, 3})), Var(Tensor::vector({1, 1, 1})),
                                   Var(Tensor::vector({0, 0, 0})), 0.0)
                         .value();
  const double s = std::sqrt(2.0 / 3.0);
  CHECK(out[0] == doctest::Approx(-1.0 / s).epsilon(1e-12));
  CHECK(out[1] == doctest::Approx(0.0));
  CHECK(out[2] == doctest::Approx(1.0 / s).epsilon(1e-12));
  CHECK(out[0] == doctest::Approx(-1.22474).epsilon(1e-5));
}

TEST_CASE("gelu uses the tanh approximation") {
  const double x = 0.7;
  const double expected = 0.5 * x * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (x + 0.044715 * x * x * x)));
  CHECK(ad::gelu(Var(Tensor::vector({x}))).value()[0] == doctest::Approx(expected).epsilon(1e-15));
}

TEST_CASE("backward of x*x at 3 is 6") {
  const Var x = Var::leaf(Tensor::scalar(3.0), true, "x");
  const auto grads = ad::backward(ad::mul(x, x));
  CHECK(grads.at("x").item() == doctest::Approx(6.0));
}

TEST_CASE("backward error paths") {
  const Var x = Var::leaf(Tensor::vector({1, 2}), true, "x");
  SUBCASE("non-scalar loss") { CHECK_THROWS_AS(ad::backward(ad::square(x)), ShapeError); }
  SUBCASE("undefined loss") { CHECK_THROWS_AS(ad::backward(Var()), Error); }
  SUBCASE("graph consumed") {
    const Var loss = ad::sum_all(ad::square(x));
    (void)ad::backward(loss);
    CHECK_THROWS_AS(ad::backward(loss), Error);
  }
  SUBCASE("constant loss") { CHECK_THROWS_AS(ad::backward(ad::sum_all(Var(Tensor::vector({1, 2})))), Error); }
}

TEST_CASE("shape errors name the op and shapes") {
  const Var a(Tensor({2, 3}));
  const Var b(Tensor({4, 5}));
  try {
    (void)ad::matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("matmul") != std::string::npos);
    CHECK(msg.find("[2, 3]") != std::string::npos);
  }
  CHECK_THROWS_AS(ad::add(a, b), ShapeError);
  CHECK_THROWS_AS(ad::softmax(Var(Tensor({3, 0}))), Error);
}

TEST_CASE("frozen leaves receive no gradient") {
  Parameter w("w", Tensor::vector({1, 2}));
  Parameter v("v", Tensor::vector({3, 4}));
  w.set_frozen(true);
  const auto grads = ad::backward(ad::sum_all(ad::mul(w.var(), v.var())));
  CHECK_FALSE(grads.contains("w"));
  CHECK(grads.at("v")[0] == 1.0);
  CHECK(grads.at("v")[1] == 2.0);
}

TEST_CASE("no-grad guard builds no graph") {
  const Var x = Var::leaf(Tensor::vector({1, 2}), true, "x");
  {
    ad::NoGradGuard guard;
    CHECK_FALSE(ad::grad_enabled());
    CHECK_FALSE(ad::square(x).requires_grad());
  }
  CHECK(ad::grad_enabled());
  CHECK(ad::square(x).requires_grad());
}

TEST_CASE("one-hot rows") {
  const std::vector<std::size_t> idx = {2, 0};
  const Tensor h = ad::one_hot(idx, 3);
  CHECK(h == Tensor::matrix({{0, 0, 1}, {1, 0, 0}}));
}

TEST_CASE("dropout is identity at rate zero and preserves expectation") {
  std::mt19937_64 rng(1);
  const Tensor x({10000}, 1.0);
  CHECK(ad::dropout(Var(x), 0.0, rng).value() == x);
  const Tensor d = ad::dropout(Var(x), 0.25, rng).value();
  double sum = 0.0;
  for (double v : d.data()) {
    CHECK((v == 0.0 || std::abs(v - 1.0 / 0.75) < 1e-12));
    sum += v;
  }
  CHECK(sum / 10000.0 == doctest::Approx(1.0).epsilon(0.03));
}

// Property: every primitive passes a finite-difference check on 100 random
// small tensors of random shape.
TEST_CASE("finite-difference gradients of every primitive on random tensors") {
  using In = const std::vector<Var>&;
  std::mt19937_64 rng(7);
  struct Case {
    const char* name;
    std::function<std::vector<Shape>(std::mt19937_64&)> shapes;
    std::function<Var(In)> body;
    bool off_zero = false;
  };
  const std::vector<std::size_t> lookup = {1, 0, 1, 1};
  const std::vector<Case> cases = {
      {"add", [](auto& r) { Shape s{extent(r), extent(r)}; return std::vector<Shape>{s, s}; },
       [](In v) { return ad::add(v[0], v[1]); }},
      {"add_bcast", [](auto& r) { const std::size_t k = extent(r); return std::vector<Shape>{{extent(r), extent(r), k}, {k}}; },
       [](In v) { return ad::add(v[0], v[1]); }},
      {"sub", [](auto& r) { const std::size_t k = extent(r), j = extent(r); return std::vector<Shape>{{extent(r), j, k}, {j, k}}; },
       [](In v) { return ad::sub(v[0], v[1]); }},
      {"mul", [](auto& r) { const std::size_t k = extent(r); return std::vector<Shape>{{extent(r), k}, {k}}; },
       [](In v) { return ad::mul(v[0], v[1]); }},
      {"scale", [](auto& r) { return std::vector<Shape>{{extent(r), extent(r)}}; },
       [](In v) { return ad::scale(v[0], 0.37); }},
      {"matmul", [](auto& r) { const std::size_t k = extent(r); return std::vector<Shape>{{extent(r), extent(r), k}, {k, extent(r)}}; },
       [](In v) { return ad::matmul(v[0], v[1]); }},
      {"matmul_batched", [](auto& r) { const std::size_t b = extent(r), k = extent(r); return std::vector<Shape>{{b, extent(r), k}, {b, k, extent(r)}}; },
       [](In v) { return ad::matmul(v[0], v[1]); }},
      {"transpose", [](auto& r) { return std::vector<Shape>{{extent(r), extent(r), extent(r)}}; },
       [](In v) { return ad::transpose(v[0]); }},
      {"reshape", [](auto& r) { return std::vector<Shape>{{extent(r), extent(r), 2}}; },
       [](In v) { const auto& s = v[0].shape(); return ad::reshape(v[0], {2, s[0] * s[1]}); }},
      {"permute", [](auto& r) { return std::vector<Shape>{{extent(r), extent(r), extent(r)}}; },
       [](In v) { return ad::permute(v[0], {1, 2, 0}); }},
      {"concat", [](auto& r) { const std::size_t n = extent(r); return std::vector<Shape>{{n, extent(r)}, {n, extent(r)}}; },
       [](In v) { return ad::concat({v[0], v[1]}); }},
      {"slice", [](auto& r) { return std::vector<Shape>{{extent(r), extent(r) + 1}}; },
       [](In v) { return ad::slice(v[0], 1, 1, v[0].shape()[1]); }},
      {"mean", [](auto& r) { return std::vector<Shape>{{extent(r), extent(r)}}; }, [](In v) { return ad::mean(v[0]); }},
      {"variance", [](auto& r) { return std::vector<Shape>{{extent(r), extent(r) + 1}}; },
       [](In v) { return ad::variance(v[0]); }},
      {"sum_all", [](auto& r) { return std::vector<Shape>{{extent(r), extent(r)}}; },
       [](In v) { return ad::sum_all(v[0]); }},
      {"mean_all", [](auto& r) { return std::vector<Shape>{{extent(r), extent(r)}}; },
       [](In v) { return ad::mean_all(v[0]); }},
      {"softmax", [](auto& r) { return std::vector<Shape>{{extent(r), extent(r), extent(r)}}; },
       [](In v) { return ad::softmax(v[0]); }},
      {"layernorm", [](auto& r) { const std::size_t k = extent(r) + 1; return std::vector<Shape>{{extent(r), k}, {k}, {k}}; },
       [](In v) { return ad::layernorm(v[0], v[1], v[2], 1e-5); }},
      {"relu", [](auto& r) { return std::vector<Shape>{{extent(r), extent(r)}}; }, [](In v) { return ad::relu(v[0]); }, true},
      {"gelu", [](auto& r) { return std::vector<Shape>{{extent(r), extent(r)}}; }, [](In v) { return ad::gelu(v[0]); }},
      {"abs", [](auto& r) { return std::vector<Shape>{{extent(r), extent(r)}}; }, [](In v) { return ad::abs(v[0]); }, true},
      {"square", [](auto& r) { return std::vector<Shape>{{extent(r), extent(r)}}; },
       [](In v) { return ad::square(v[0]); }},
      {"row_lookup", [](auto& r) { return std::vector<Shape>{{2, extent(r)}}; },
       [lookup](In v) { return ad::row_lookup(v[0], lookup); }},
      {"dropout", [](auto& r) { return std::vector<Shape>{{extent(r), extent(r)}}; },
       [](In v) { std::mt19937_64 r(3); return ad::dropout(v[0], 0.4, r); }},
  };
  for (const auto& c : cases) {
    CAPTURE(c.name);
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
      std::vector<Tensor> inputs;
      for (const auto& s : c.shapes(rng)) {
        Tensor t = randn(s, rng);
        if (c.off_zero) {
          for (double& v : t.data()) v += v >= 0 ? 0.1 : -0.1;
        }
        inputs.push_back(std::move(t));
      }
      const Shape out_shape = c.body([&] {
        std::vector<Var> vs;
        for (const auto& t : inputs) vs.emplace_back(t);
        return vs;
      }()).shape();
      const Var w(randn(out_shape, rng));
      const auto r = testing::check_inputs([&](In v) { return ad::sum_all(ad::mul(c.body(v), w)); }, inputs, 1e-5);
      worst = std::max(worst, r.max_rel_error);
    }
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("finite-difference gradients of a two-layer MLP") {
  std::mt19937_64 rng(3);
  ParameterSet ps;
  ps.add("w1", random_normal({5, 7}, 0.5, rng));
  ps.add("b1", random_normal({7}, 0.1, rng));
  ps.add("w2", random_normal({7, 2}, 0.5, rng));
  ps.add("b2", random_normal({2}, 0.1, rng));
  const Tensor x = randn({6, 5}, rng);
  const Tensor y = randn({6, 2}, rng);
  auto loss = [&] {
    const Var h = ad::gelu(ad::add(ad::matmul(Var(x), ps.at("w1").var()), ps.at("b1").var()));
    const Var out = ad::add(ad::matmul(h, ps.at("w2").var()), ps.at("b2").var());
    return ad::mean_all(ad::square(ad::sub(out, Var(y))));
  };
  const auto r = testing::check_parameters(ps, loss, 1e-5);
  CHECK(r.checked == 5 * 7 + 7 + 7 * 2 + 2);
  CHECK(r.max_rel_error < 1e-4);
}

TEST_CASE("tape completeness: parameters without a gradient do not influence the loss") {
  std::mt19937_64 rng(4);
  ParameterSet ps;
  ps.add("used", random_normal({3}, 1.0, rng));
  ps.add("unused", random_normal({3}, 1.0, rng));
  ps.add("masked", random_normal({3}, 1.0, rng));
  auto loss = [&] {
    // `masked` enters the graph multiplied by zero.
    return ad::add(ad::sum_all(ad::square(ps.at("used").var())),
                   ad::sum_all(ad::scale(ps.at("masked").var(), 0.0)));
  };
  const auto grads = ad::backward(loss());
  const double base = loss().value().item();
  for (Parameter* p : ps.all()) {
    const auto it = grads.find(p->name());
    const bool zero_grad =
        it == grads.end() || std::all_of(it->second.data().begin(), it->second.data().end(), [](double g) { return g == 0.0; });
    if (!zero_grad) continue;
    for (double& v : p->mutable_value().data()) v += 0.5;
    CHECK(loss().value().item() == base);
  }
  CHECK(grads.contains("used"));
  CHECK_FALSE(grads.contains("unused"));
}
