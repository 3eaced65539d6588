#include <doctest.h>

#include <cmath>
#include <random>

#include "gradmerge/curvature.hpp"
#include "gradmerge/errors.hpp"
#include "gradmerge/training.hpp"
#include "test_util.hpp"

using namespace gradmerge;

namespace {

const ModelSpec kLin1{ModelKind::linear_regression, 1, std::nullopt, Activation::tanh};

ModelSpec linear(std::size_t d) { return {ModelKind::linear_regression, d, std::nullopt, Activation::tanh}; }

TaskDataset one_d(std::vector<double> x, std::vector<double> y) {
  return TaskDataset("t", 1, std::move(x), std::move(y), 0);
}

TaskDataset gaussian_data(std::mt19937_64& gen, std::size_t n, std::size_t d, double offset = 0.0) {
  std::normal_distribution<double> normal;
  std::vector<double> x(n * d), y(n);
  for (auto& v : x) v = normal(gen);
  for (std::size_t i = 0; i < n; ++i) {
    double s = offset;
    for (std::size_t j = 0; j < d; ++j) s += (0.5 + 0.25 * static_cast<double>(j)) * x[i * d + j];
    y[i] = s + 0.1 * normal(gen);
  }
  return TaskDataset("g", d, std::move(x), std::move(y), 0);
}

TaskDataset labelled(std::mt19937_64& gen, std::size_t n, double shift) {
  std::normal_distribution<double> normal;
  std::vector<double> x, y;
  for (std::size_t i = 0; i < n; ++i) {
    const double label = static_cast<double>(i % 2);
    x.push_back(normal(gen) + (label > 0 ? 1.0 : -1.0) + shift);
    x.push_back(normal(gen));
    x.push_back(1.0);
    y.push_back(label);
  }
  return TaskDataset("c", 3, std::move(x), std::move(y), 0);
}

double scalar(const ParamVector& v) { return v[0]; }

}  // namespace

TEST_CASE("config validation") {
  TrainConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.lr = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.beta1 = 1.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.epochs = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  CHECK_THROWS_AS(QuadraticAnchor(testutil::vec({0}), testutil::curv({1}), -1.0), ConfigError);
}

TEST_CASE("closed-form examples") {
  const auto ridge1 = QuadraticAnchor(testutil::vec({0.0}), testutil::curv({1.0}), 0.0);
  {
    const TaskDataset d[] = {one_d({1}, {2})};
    const double a[] = {1.0};
    CHECK(scalar(closed_form_solve(d, a, ridge1)) == doctest::Approx(1.0).epsilon(1e-15));
  }
  {
    const TaskDataset d[] = {one_d({1}, {2}), one_d({1}, {4})};
    const double a[] = {1.0, 1.0};
    CHECK(scalar(closed_form_solve(d, a, ridge1)) == doctest::Approx(2.0).epsilon(1e-15));
  }
  {
    const auto anchored = QuadraticAnchor(testutil::vec({0.7, -3.0}), testutil::curv({1.0, 2.0}), 0.0);
    const TaskDataset d[] = {TaskDataset("empty", 2, {}, {}, 0)};
    const double a[] = {1.0};
    CHECK(closed_form_solve(d, a, anchored) == anchored.anchor);
    CHECK(closed_form_solve({}, {}, anchored) == anchored.anchor);
  }
}

TEST_CASE("closed-form singular system") {
  // Duplicate columns with no penalty: X^T X has rank 1.
  const auto zero = QuadraticAnchor(testutil::vec({0.0, 0.0}), testutil::curv({0.0, 0.0}), 0.0);
  const TaskDataset d[] = {TaskDataset("s", 2, {1, 1, 2, 2, 3, 3}, {1, 2, 3}, 0)};
  const double a[] = {1.0};
  CHECK_THROWS_AS(closed_form_solve(d, a, zero), SingularSystemError);
}

TEST_CASE("closed-form satisfies the normal equations") {
  std::mt19937_64 gen(31);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t d = 1 + trial % 6;
    const TaskDataset data[] = {gaussian_data(gen, 12, d), gaussian_data(gen, 7, d, 1.0)};
    const double alphas[] = {1.0, 0.3 + 0.1 * trial};
    const auto layout = testutil::flat_layout(d);
    const QuadraticAnchor anchor(ParamVector(layout, testutil::uniform(gen, d, -1, 1)),
                                 DiagCurvature(layout, testutil::uniform(gen, d, 0, 2)), 0.1);
    const auto theta = closed_form_solve(data, alphas, anchor);
    // Residual of (sum a X^T X + P) theta = sum a X^T y + P anchor.
    std::vector<double> lhs(d, 0.0), rhs(d, 0.0);
    const auto p = anchor.precision();
    for (std::size_t j = 0; j < d; ++j) {
      lhs[j] += p[j] * theta[j];
      rhs[j] += p[j] * anchor.anchor[j];
    }
    for (std::size_t t = 0; t < 2; ++t) {
      for (std::size_t i = 0; i < data[t].n_examples(); ++i) {
        const auto x = data[t].row(i);
        double xt = 0.0;
        for (std::size_t j = 0; j < d; ++j) xt += x[j] * theta[j];
        for (std::size_t j = 0; j < d; ++j) {
          lhs[j] += alphas[t] * x[j] * xt;
          rhs[j] += alphas[t] * x[j] * data[t].target(i);
        }
      }
    }
    CHECK(max_abs_difference(lhs, rhs) <= 1e-9 * (1.0 + l2_norm(rhs)));
  }
}

TEST_CASE("train_anchor matches the closed form on linear regression") {
  std::mt19937_64 gen(32);
  for (int trial = 0; trial < 5; ++trial) {
    const std::size_t d = 2 + trial;
    const auto data = gaussian_data(gen, 40, d);
    const auto ck = train_anchor(linear(d), LossKind::squared_error, data, 0.5, TrainConfig{});
    const TaskDataset ds[] = {data};
    const double a[] = {1.0};
    const auto exact = closed_form_solve(ds, a, QuadraticAnchor::ridge(canonical_layout(linear(d)), 0.5));
    CHECK(max_abs_difference(ck.params().values(), exact.values()) <= 1e-5);
    CHECK(ck.meta().at("converged") == "true");
    CHECK(ck.meta().at("delta") == "0.5");
    CHECK(ck.meta().count("seed") == 1);
    CHECK(ck.meta().count("epochs") == 1);
  }
}

TEST_CASE("train_anchor: strong ridge, determinism, stationarity") {
  std::mt19937_64 gen(33);
  const auto data = labelled(gen, 60, 0.0);
  const ModelSpec lg{ModelKind::logistic, 3, std::nullopt, Activation::tanh};
  const auto big = train_anchor(lg, LossKind::logistic_nll, data, 1e6, TrainConfig{});
  CHECK(l2_norm(big.params().values()) < 1e-3);

  TrainConfig cfg;
  cfg.seed = 5;
  const ModelSpec net{ModelKind::mlp, 3, 4, Activation::tanh};
  const auto a = train_anchor(net, LossKind::logistic_nll, data, 1e-2, cfg);
  const auto b = train_anchor(net, LossKind::logistic_nll, data, 1e-2, cfg);
  CHECK(a == b);

  for (const auto* ck : {&a}) {
    const TaskDataset ds[] = {data};
    const double al[] = {1.0};
    const double r = stationarity_residual(net, LossKind::logistic_nll, ds, al,
                                           QuadraticAnchor::ridge(canonical_layout(net), 1e-2), ck->params());
    CHECK(r <= 1e-4 * (1.0 + l2_norm(ck->params().values())));
  }
}

TEST_CASE("minibatch training is seeded") {
  std::mt19937_64 gen(34);
  const auto data = gaussian_data(gen, 30, 3);
  TrainConfig cfg;
  cfg.batch_size = 7;
  cfg.epochs = 50;
  cfg.seed = 11;
  const auto a = train_anchor(linear(3), LossKind::squared_error, data, 0.1, cfg);
  const auto b = train_anchor(linear(3), LossKind::squared_error, data, 0.1, cfg);
  CHECK(a == b);
  cfg.seed = 12;
  const auto c = train_anchor(linear(3), LossKind::squared_error, data, 0.1, cfg);
  CHECK_FALSE(a == c);
}

TEST_CASE("divergence is reported") {
  const auto data = one_d({1e200}, {1e200});
  TrainConfig cfg;
  cfg.lr = 1e300;
  CHECK_THROWS_AS(train_anchor(kLin1, LossKind::squared_error, data, 0.0, cfg), DivergenceError);
}

TEST_CASE("finetune examples") {
  SUBCASE("1-D removal fixture") {
    const QuadraticAnchor anchor(testutil::vec({2.0}), testutil::curv({3.0}), 0.0);
    const auto ck = finetune_task(kLin1, LossKind::squared_error, one_d({1}, {4}), anchor, TrainConfig{});
    CHECK(scalar(ck.params()) == doctest::Approx(2.5).epsilon(1e-6));
  }
  SUBCASE("huge anchor curvature pins the task model") {
    std::mt19937_64 gen(35);
    const auto data = gaussian_data(gen, 20, 3);
    const auto layout = canonical_layout(linear(3));
    const QuadraticAnchor anchor(ParamVector(layout, {0.1, 0.2, 0.3}), DiagCurvature::identity(layout, 1e6), 0.0);
    const auto ck = finetune_task(linear(3), LossKind::squared_error, data, anchor, TrainConfig{});
    CHECK(l2_distance(ck.params(), anchor.anchor) < 1e-3);
  }
  SUBCASE("same-distribution data stays close and stationary") {
    std::mt19937_64 gen(36);
    const ModelSpec lg{ModelKind::logistic, 3, std::nullopt, Activation::tanh};
    const auto large = labelled(gen, 400, 0.0);
    const auto base = train_anchor(lg, LossKind::logistic_nll, large, 1e-2, TrainConfig{});
    const auto h0 = fisher_diag(lg, LossKind::logistic_nll, base.params(), large, FisherConfig{});
    const QuadraticAnchor anchor(base.params(), h0, 1e-2);
    const auto task = labelled(gen, 100, 0.0);
    const auto ck = finetune_task(lg, LossKind::logistic_nll, task, anchor, TrainConfig{});
    CHECK(l2_distance(ck.params(), base.params()) < 0.2 * (1.0 + l2_norm(base.params().values())));
    const TaskDataset ds[] = {task};
    const double al[] = {1.0};
    CHECK(stationarity_residual(lg, LossKind::logistic_nll, ds, al, anchor, ck.params()) <=
          1e-4 * (1.0 + l2_norm(ck.params().values())));
  }
}

TEST_CASE("joint target examples") {
  std::mt19937_64 gen(37);
  const auto layout = canonical_layout(linear(3));
  const auto d1 = gaussian_data(gen, 25, 3);
  const auto d2 = gaussian_data(gen, 15, 3, 2.0);
  const QuadraticAnchor anchor(ParamVector(layout, {0.3, -0.2, 0.1}), DiagCurvature(layout, {1.0, 2.0, 0.5}), 0.01);

  SUBCASE("single dataset equals finetune") {
    const TaskDataset ds[] = {d1};
    const double a[] = {1.0};
    const auto joint = train_joint_target(linear(3), LossKind::squared_error, ds, a, anchor, TrainConfig{});
    const auto ft = finetune_task(linear(3), LossKind::squared_error, d1, anchor, TrainConfig{});
    CHECK(max_abs_difference(joint.params().values(), ft.params().values()) <= 1e-5);
  }
  SUBCASE("zero anchor and identity prior match the closed form") {
    const QuadraticAnchor plain(ParamVector::zeros(layout), DiagCurvature::identity(layout), 0.0);
    const TaskDataset ds[] = {d1, d2};
    const double a[] = {1.0, 0.5};
    const auto joint = train_joint_target(linear(3), LossKind::squared_error, ds, a, plain, TrainConfig{});
    CHECK(max_abs_difference(joint.params().values(), closed_form_solve(ds, a, plain).values()) <= 1e-5);
  }
  SUBCASE("all-zero weights return the anchor") {
    const TaskDataset ds[] = {d1, d2};
    const double a[] = {0.0, 0.0};
    const auto joint = train_joint_target(linear(3), LossKind::squared_error, ds, a, anchor, TrainConfig{});
    CHECK(max_abs_difference(joint.params().values(), anchor.anchor.values()) <= 1e-5);
  }
  SUBCASE("negative weights are rejected") {
    const TaskDataset ds[] = {d1};
    const double a[] = {-1.0};
    CHECK_THROWS_AS(train_joint_target(linear(3), LossKind::squared_error, ds, a, anchor, TrainConfig{}),
                    ConfigError);
  }
  SUBCASE("length mismatch is rejected") {
    const TaskDataset ds[] = {d1, d2};
    const double a[] = {1.0};
    CHECK_THROWS_AS(train_joint_target(linear(3), LossKind::squared_error, ds, a, anchor, TrainConfig{}),
                    ConfigError);
  }
}

TEST_CASE("joint objective beats trivial candidates") {
  std::mt19937_64 gen(38);
  const ModelSpec lg{ModelKind::logistic, 3, std::nullopt, Activation::tanh};
  const ModelSpec net{ModelKind::mlp, 3, 3, Activation::tanh};
  for (const auto& spec : {lg, net}) {
    const auto large = labelled(gen, 200, 0.0);
    TrainConfig cfg;
    const auto base = train_anchor(spec, LossKind::logistic_nll, large, 1e-2, cfg);
    const auto h0 = fisher_diag(spec, LossKind::logistic_nll, base.params(), large, FisherConfig{});
    const QuadraticAnchor anchor(base.params(), h0, 1e-2);
    std::vector<TaskDataset> tasks{labelled(gen, 60, 0.8), labelled(gen, 60, -0.8)};
    std::vector<Checkpoint> thetas;
    for (const auto& t : tasks) thetas.push_back(finetune_task(spec, LossKind::logistic_nll, t, anchor, cfg));
    const double alphas[] = {1.0, 0.7};
    const auto joint = train_joint_target(spec, LossKind::logistic_nll, tasks, alphas, anchor, cfg);
    const double j = joint_objective(spec, LossKind::logistic_nll, tasks, alphas, anchor, joint.params());
    CHECK(j <= joint_objective(spec, LossKind::logistic_nll, tasks, alphas, anchor, anchor.anchor));
    for (const auto& th : thetas) {
      CHECK(j <= joint_objective(spec, LossKind::logistic_nll, tasks, alphas, anchor, th.params()));
    }
  }
}

TEST_CASE("one step on a pure penalty moves toward the anchor") {
  // The MLP starts from a seeded random point; with no data the only force is
  // the ridge pull toward zero.
  const ModelSpec net{ModelKind::mlp, 3, 4, Activation::tanh};
  const TaskDataset empty("empty", 3, {}, {}, 0);
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.lr = 1e-3;
  cfg.seed = 3;
  TrainConfig none = cfg;
  none.epochs = 1;
  none.lr = 1e-300;  // effectively no movement: recovers the start point
  const auto start = train_anchor(net, LossKind::squared_error, empty, 1.0, none);
  const auto step = train_anchor(net, LossKind::squared_error, empty, 1.0, cfg);
  for (std::size_t i = 0; i < start.params().size(); ++i) {
    const double before = std::abs(start.params()[i]);
    const double after = std::abs(step.params()[i]);
    CHECK(after < before);
  }
}

TEST_CASE("joint gradient includes the anchor penalty") {
  const QuadraticAnchor anchor(testutil::vec({1.0}), testutil::curv({2.0}), 0.5);
  const TaskDataset ds[] = {one_d({1}, {3})};
  const double a[] = {2.0};
  // 2 * (theta - 3) + 2.5 * (theta - 1) at theta = 0.
  CHECK(joint_gradient(kLin1, LossKind::squared_error, ds, a, anchor, testutil::vec({0.0}))[0] ==
        doctest::Approx(-8.5));
  // 2 * 4.5 + 1.25
  CHECK(joint_objective(kLin1, LossKind::squared_error, ds, a, anchor, testutil::vec({0.0})) ==
        doctest::Approx(10.25));
}
