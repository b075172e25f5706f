#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "doctest.h"
#include "stllm/embedding.hpp"
#include "stllm/error.hpp"
#include "stllm/head.hpp"

using namespace stllm;
using ad::Var;

namespace {

MetricsReport naive_metrics(const std::vector<double>& p, const std::vector<double>& y, double eps) {
  MetricsReport r;
  double abs_sum = 0, sq = 0, ape = 0, ysum = 0;
  std::size_t kept = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double e = p[i] - y[i];
    abs_sum += std::abs(e);
    sq += e * e;
    ysum += std::abs(y[i]);
    if (std::abs(y[i]) > eps) {
      ape += std::abs(e) / std::abs(y[i]);
      ++kept;
    }
  }
  const double m = static_cast<double>(p.size());
  r.mae = abs_sum / m;
  r.rmse = std::sqrt(sq / m);
  r.mape_percent = 100.0 * ape / static_cast<double>(kept);
  r.wape_percent = 100.0 * abs_sum / ysum;
  r.m = p.size();
  return r;
}

}  // namespace

TEST_CASE("regression head") {
  ParameterSet ps;
  std::mt19937_64 rng(3);
  RegressionHead head(6, 12, 1, ps, rng);
  SUBCASE("zero input and bias give zero") {
    ps.at("head.b").mutable_value().fill(0.0);
    const Tensor out = head.regress(Var(Tensor({8, 6}))).value();
    for (double v : out.data()) CHECK(v == 0.0);
  }
  SUBCASE("shape") {
    CHECK(head.regress(Var(Tensor({8, 6}))).shape() == Shape{12, 8, 1});
    CHECK(head.regress(Var(Tensor({2, 8, 6}))).shape() == Shape{2, 12, 8, 1});
  }
  SUBCASE("each station's prediction depends only on its own row") {
    const Tensor h = random_normal({8, 6}, 1.0, rng);
    Tensor h2 = h;
    for (std::size_t j = 0; j < 6; ++j) h2[3 * 6 + j] += 1.0;
    const Tensor a = head.regress(Var(h)).value(), b = head.regress(Var(h2)).value();
    for (std::size_t s = 0; s < 12; ++s) {
      for (std::size_t n = 0; n < 8; ++n) {
        if (n == 3) {
          CHECK(a[s * 8 + n] != b[s * 8 + n]);
        } else {
          CHECK(a[s * 8 + n] == b[s * 8 + n]);
        }
      }
    }
  }
  SUBCASE("matches the affine map per station") {
    const Tensor h = random_normal({4, 6}, 1.0, rng);
    const Tensor out = head.regress(Var(h)).value();
    const Tensor& w = ps.at("head.w").value();
    const Tensor& b = ps.at("head.b").value();
    for (std::size_t n = 0; n < 4; ++n) {
      for (std::size_t s = 0; s < 12; ++s) {
        double acc = b[s];
        for (std::size_t k = 0; k < 6; ++k) acc += h[n * 6 + k] * w[k * 12 + s];
        CHECK(out[s * 4 + n] == doctest::Approx(acc).epsilon(1e-12));
      }
    }
  }
  CHECK_THROWS_AS(head.regress(Var(Tensor({4, 5}))), ShapeError);
}

TEST_CASE("training loss") {
  ParameterSet ps;
  ps.add("w", Tensor::vector({1.0, 1.0}));
  ps.add("frozen", Tensor::vector({10.0}));
  ps.at("frozen").set_frozen(true);
  const auto all = ps.all();
  const std::vector<const Parameter*> params(all.begin(), all.end());
  const Tensor y({2, 2}, 1.0);
  SUBCASE("exact prediction without regularization is zero") {
    CHECK(training_loss(Var(y), y, {0.0}, params).value().item() == 0.0);
  }
  SUBCASE("unit error") {
    CHECK(training_loss(Var(Tensor({2, 2}, 2.0)), y, {0.0}, params).value().item() == 1.0);
    CHECK(training_loss(Var(Tensor({2, 2}, 3.0)), y, {0.0, LossKind::MeanSquared}, params).value().item() == 4.0);
  }
  SUBCASE("L2 sees trainable parameters only") {
    const double l = training_loss(Var(y), y, {0.5}, params).value().item();
    CHECK(l == doctest::Approx(0.5 * 2.0));
  }
  SUBCASE("lambda zero reduces to the mean absolute error") {
    std::mt19937_64 rng(1);
    const Tensor p = random_normal({3, 4}, 1.0, rng), t = random_normal({3, 4}, 1.0, rng);
    const double loss = training_loss(Var(p), t, {0.0}, params).value().item();
    CHECK(loss == doctest::Approx(compute_metrics(p.data(), t.data(), 0.0).mae).epsilon(1e-14));
  }
  CHECK_THROWS_AS(training_loss(Var(Tensor({2, 3})), y, {}, params), ShapeError);
  CHECK_THROWS_AS(training_loss(Var(y), y, {-1.0}, params), ConfigError);
}

TEST_CASE("metrics worked example") {
  const std::vector<double> p = {1.0, 2.0, 5.0, 0.0}, y = {2.0, 2.0, 3.0, 4.0};
  const MetricsReport r = compute_metrics(p, y);
  // errors -1, 0, 2, -4
  CHECK(r.mae == doctest::Approx(7.0 / 4.0));
  CHECK(r.rmse == doctest::Approx(std::sqrt(21.0 / 4.0)));
  CHECK(r.mape_percent == doctest::Approx(100.0 * (0.5 + 0.0 + 2.0 / 3.0 + 1.0) / 4.0));
  CHECK(r.wape_percent == doctest::Approx(100.0 * 7.0 / 11.0));
  CHECK(r.m == 4);
}

TEST_CASE("metrics mask small targets for percentage error only") {
  const std::vector<double> p = {1.0, 3.0}, y = {0.0, 2.0};
  const MetricsReport r = compute_metrics(p, y);
  CHECK(r.mape_percent == doctest::Approx(50.0));
  CHECK(r.mae == doctest::Approx(1.0));
  CHECK(r.m == 2);
}

TEST_CASE("perfect prediction") {
  const std::vector<double> y = {1.0, 7.5, 3.0};
  const MetricsReport r = compute_metrics(y, y);
  CHECK(r.mae == 0.0);
  CHECK(r.rmse == 0.0);
  CHECK(r.mape_percent == 0.0);
  CHECK(r.wape_percent == 0.0);
}

TEST_CASE("metric error cases") {
  const std::vector<double> a = {1.0, 2.0}, b = {1.0}, zeros = {0.0, 0.0}, empty;
  CHECK_THROWS_AS(compute_metrics(a, b), DataError);
  CHECK_THROWS_AS(compute_metrics(empty, empty), DataError);
  CHECK_THROWS_AS(compute_metrics(a, zeros), DataError);
  const std::vector<double> tiny = {1e-4, 2.0};
  CHECK_NOTHROW(compute_metrics(a, tiny));
  const std::vector<double> all_tiny = {1e-4, -1e-4};
  CHECK_THROWS_AS(compute_metrics(a, all_tiny), DataError);
}

TEST_CASE("metric properties on random data") {
  std::mt19937_64 rng(77);
  std::normal_distribution<double> nd(10.0, 6.0);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 5 + static_cast<std::size_t>(trial) * 7;
    std::vector<double> p(n), y(n);
    for (std::size_t i = 0; i < n; ++i) {
      p[i] = nd(rng);
      y[i] = nd(rng);
    }
    const MetricsReport r = compute_metrics(p, y);
    const MetricsReport ref = naive_metrics(p, y, kMapeEpsilon);
    CHECK(r.rmse >= r.mae);
    CHECK(r.mae == doctest::Approx(ref.mae).epsilon(1e-12));
    CHECK(r.rmse == doctest::Approx(ref.rmse).epsilon(1e-12));
    CHECK(r.mape_percent == doctest::Approx(ref.mape_percent).epsilon(1e-12));
    CHECK(r.wape_percent == doctest::Approx(ref.wape_percent).epsilon(1e-12));
    double mean_abs = 0.0;
    for (double v : y) mean_abs += std::abs(v);
    mean_abs /= static_cast<double>(n);
    CHECK(r.wape_percent == doctest::Approx(100.0 * r.mae / mean_abs).epsilon(1e-12));

    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<double> pp(n), yp(n);
    for (std::size_t i = 0; i < n; ++i) {
      pp[i] = p[perm[i]];
      yp[i] = y[perm[i]];
    }
    const MetricsReport rp = compute_metrics(pp, yp);
    CHECK(rp.mae == doctest::Approx(r.mae).epsilon(1e-12));
    CHECK(rp.rmse == doctest::Approx(r.rmse).epsilon(1e-12));

    MetricsAccumulator acc;
    const std::size_t cut = n / 3;
    acc.add(std::span(p).first(cut), std::span(y).first(cut));
    acc.add(std::span(p).subspan(cut), std::span(y).subspan(cut));
    const MetricsReport ra = acc.report();
    CHECK(ra.mae == doctest::Approx(r.mae).epsilon(1e-12));
    CHECK(ra.mape_percent == doctest::Approx(r.mape_percent).epsilon(1e-12));
    CHECK(ra.m == n);
  }
}

TEST_CASE("metrics JSON keys and round trip") {
  const std::vector<double> p = {1.0, 2.0}, y = {2.0, 2.0};
  const MetricsReport r = compute_metrics(p, y);
  const auto j = r.to_json();
  for (const char* key : {"mae", "rmse", "mape_pct", "wape_pct", "m", "sec_per_batch"}) CHECK(j.contains(key));
  const MetricsReport back = MetricsReport::from_json(j);
  CHECK(back.mae == r.mae);
  CHECK(back.m == r.m);
}
