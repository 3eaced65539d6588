#include <doctest.h>

#include <algorithm>
#include <random>

#include "gradmerge/curvature.hpp"
#include "gradmerge/errors.hpp"
#include "test_util.hpp"

using namespace gradmerge;

namespace {

const ModelSpec kLin1{ModelKind::linear_regression, 1, std::nullopt, Activation::tanh};
const ModelSpec kLog1{ModelKind::logistic, 1, std::nullopt, Activation::tanh};

FisherConfig cfg(FisherMode mode, double floor, std::optional<std::size_t> max = std::nullopt) {
  FisherConfig c;
  c.mode = mode;
  c.delta_floor = floor;
  c.max_examples = max;
  return c;
}

TaskDataset random_rows(std::mt19937_64& gen, std::size_t n, std::size_t d, bool classify) {
  auto x = testutil::uniform(gen, n * d, -2, 2);
  std::vector<double> y(n);
  for (std::size_t i = 0; i < n; ++i) y[i] = classify ? static_cast<double>(gen() % 2) : testutil::uniform(gen, 1, -3, 3)[0];
  return TaskDataset("r", d, std::move(x), std::move(y), 0);
}

}  // namespace

TEST_CASE("fisher examples") {
  const auto data = TaskDataset("t", 1, {1, 1}, {2, 4}, 0);
  const auto theta = testutil::vec({2.0});
  CHECK(fisher_diag(kLin1, LossKind::squared_error, theta, data, cfg(FisherMode::sum, 0.0))[0] == 4.0);

  SUBCASE("single example is its squared gradient plus floor") {
    const auto one = data.slice(1, 2);
    const auto g = grad(kLin1, LossKind::squared_error, theta, one, Reduce::sum);
    CHECK(fisher_diag(kLin1, LossKind::squared_error, theta, one, cfg(FisherMode::sum, 1e-3))[0] ==
          g[0] * g[0] + 1e-3);
  }
}

TEST_CASE("avg mode is sum divided by n") {
  std::mt19937_64 gen(41);
  const ModelSpec net{ModelKind::mlp, 3, 4, Activation::tanh};
  for (int trial = 0; trial < 10; ++trial) {
    const auto data = random_rows(gen, 23, 3, true);
    const auto layout = canonical_layout(net);
    const ParamVector theta(layout, testutil::uniform(gen, layout->total_len(), -1, 1));
    const auto s = fisher_diag(net, LossKind::logistic_nll, theta, data, cfg(FisherMode::sum, 0.0));
    const auto a = fisher_diag(net, LossKind::logistic_nll, theta, data, cfg(FisherMode::avg, 0.0));
    for (std::size_t i = 0; i < s.size(); ++i) CHECK(std::abs(a[i] - s[i] / 23.0) <= 1e-12 * (1.0 + s[i]));
  }
}

TEST_CASE("fisher respects the floor, order and truncation") {
  std::mt19937_64 gen(42);
  const ModelSpec lg{ModelKind::logistic, 4, std::nullopt, Activation::tanh};
  const auto data = random_rows(gen, 40, 4, true);
  const auto theta = testutil::vec({0.3, -0.2, 0.0, 1.0});

  const auto f = fisher_diag(lg, LossKind::logistic_nll, theta, data, cfg(FisherMode::sum, 1e-10));
  for (double v : f.values()) CHECK(v >= 1e-10);

  // Zero feature column: only the floor remains.
  TaskDataset zero_col("z", 2, {0, 1, 0, 2}, {1, 0}, 0);
  const ModelSpec lg2{ModelKind::logistic, 2, std::nullopt, Activation::tanh};
  CHECK(fisher_diag(lg2, LossKind::logistic_nll, testutil::vec({0, 0}), zero_col, cfg(FisherMode::sum, 1e-10))[0] ==
        1e-10);

  std::vector<std::size_t> order(40);
  for (std::size_t i = 0; i < 40; ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), gen);
  std::vector<double> x, y;
  for (std::size_t i : order) {
    const auto r = data.row(i);
    x.insert(x.end(), r.begin(), r.end());
    y.push_back(data.target(i));
  }
  const TaskDataset shuffled("s", 4, x, y, 0);
  const auto fs = fisher_diag(lg, LossKind::logistic_nll, theta, shuffled, cfg(FisherMode::sum, 1e-10));
  CHECK(max_abs_difference(f.values(), fs.values()) <= 1e-12 * (1.0 + linf_norm(f.values())));

  const auto trunc = fisher_diag(lg, LossKind::logistic_nll, theta, data, cfg(FisherMode::sum, 0.0, 10));
  const auto first = fisher_diag(lg, LossKind::logistic_nll, theta, data.slice(0, 10), cfg(FisherMode::sum, 0.0));
  CHECK(trunc == first);
  const auto avg_trunc = fisher_diag(lg, LossKind::logistic_nll, theta, data, cfg(FisherMode::avg, 0.0, 10));
  CHECK(avg_trunc[0] == doctest::Approx(first[0] / 10.0).epsilon(1e-14));
}

TEST_CASE("fisher errors and config validation") {
  const TaskDataset empty("e", 1, {}, {}, 0);
  CHECK_THROWS_AS(fisher_diag(kLin1, LossKind::squared_error, testutil::vec({0}), empty, FisherConfig{}),
                  EmptyDataError);
  FisherConfig bad;
  bad.delta_floor = -1.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = {};
  bad.max_examples = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("exact hessian examples") {
  CHECK(exact_hessian_diag(kLin1, LossKind::squared_error, testutil::vec({0.0}),
                           TaskDataset("t", 1, {1, 1}, {0, 0}, 0))[0] == 2.0);
  CHECK(exact_hessian_diag(kLog1, LossKind::logistic_nll, testutil::vec({0.0}), TaskDataset("t", 1, {1}, {1}, 0))[0] ==
        0.25);

  std::mt19937_64 gen(43);
  const ModelSpec lin{ModelKind::linear_regression, 3, std::nullopt, Activation::tanh};
  const auto data = random_rows(gen, 10, 3, false);
  CHECK(exact_hessian_diag(lin, LossKind::squared_error, testutil::vec({0, 0, 0}), data) ==
        exact_hessian_diag(lin, LossKind::squared_error, testutil::vec({5, -1, 2}), data));

  const ModelSpec net{ModelKind::mlp, 1, 2, Activation::tanh};
  CHECK_THROWS_AS(exact_hessian_diag(net, LossKind::squared_error, ParamVector::zeros(canonical_layout(net)),
                                     TaskDataset("t", 1, {1}, {1}, 0)),
                  UnsupportedModelError);
}

TEST_CASE("exact hessian agrees with differences of analytic gradients") {
  std::mt19937_64 gen(44);
  const ModelSpec lg{ModelKind::logistic, 3, std::nullopt, Activation::tanh};
  for (int trial = 0; trial < 10; ++trial) {
    const auto data = random_rows(gen, 15, 3, true);
    const std::vector<double> th = testutil::uniform(gen, 3, -1, 1);
    const auto h = exact_hessian_diag(lg, LossKind::logistic_nll, testutil::vec(th), data);
    for (std::size_t j = 0; j < 3; ++j) {
      auto plus = th, minus = th;
      plus[j] += 1e-5;
      minus[j] -= 1e-5;
      const double gp = grad(lg, LossKind::logistic_nll, testutil::vec(plus), data, Reduce::sum)[j];
      const double gm = grad(lg, LossKind::logistic_nll, testutil::vec(minus), data, Reduce::sum)[j];
      CHECK(h[j] == doctest::Approx((gp - gm) / 2e-5).epsilon(1e-6));
    }
  }
}

TEST_CASE("single-example fisher is the hessian scaled by the squared residual") {
  std::mt19937_64 gen(45);
  const ModelSpec lin{ModelKind::linear_regression, 4, std::nullopt, Activation::tanh};
  for (int trial = 0; trial < 20; ++trial) {
    const auto one = random_rows(gen, 1, 4, false);
    const auto th = testutil::uniform(gen, 4, -1, 1);
    double r = -one.target(0);
    for (std::size_t j = 0; j < 4; ++j) r += one.row(0)[j] * th[j];
    const auto f = fisher_diag(lin, LossKind::squared_error, testutil::vec(th), one, cfg(FisherMode::sum, 0.0));
    const auto h = exact_hessian_diag(lin, LossKind::squared_error, testutil::vec(th), one);
    for (std::size_t j = 0; j < 4; ++j) CHECK(f[j] == doctest::Approx(h[j] * r * r).epsilon(1e-13));
  }
}

TEST_CASE("anchor curvature sources") {
  const auto layout = testutil::flat_layout(3);
  const ModelSpec lin{ModelKind::linear_regression, 3, std::nullopt, Activation::tanh};
  const auto id = anchor_curvature(lin, LossKind::squared_error, h0_source::Identity{1.0});
  CHECK(std::vector<double>(id.values().begin(), id.values().end()) == std::vector<double>{1, 1, 1});
  CHECK_THROWS_AS(anchor_curvature(lin, LossKind::squared_error, h0_source::Identity{0.0}), ConfigError);

  std::mt19937_64 gen(46);
  const auto data = random_rows(gen, 8, 3, false);
  const auto theta = testutil::vec({0.1, 0.2, 0.3});
  const FisherConfig fc = cfg(FisherMode::avg, 1e-6);
  CHECK(anchor_curvature(lin, LossKind::squared_error, h0_source::Fisher{&theta, &data, fc}) ==
        fisher_diag(lin, LossKind::squared_error, theta, data, fc));
  CHECK(anchor_curvature(lin, LossKind::squared_error, h0_source::Exact{&theta, &data}) ==
        exact_hessian_diag(lin, LossKind::squared_error, theta, data));
}
