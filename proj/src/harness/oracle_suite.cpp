#include <algorithm>
#include <cmath>
#include <numeric>

#include <fmt/format.h>
#include <fmt/ostream.h>

#include "gradmerge/errors.hpp"
#include "gradmerge/harness.hpp"
#include "gradmerge/rng.hpp"

namespace gradmerge::harness {

namespace {

std::uint64_t fixture_seed(std::uint64_t seed, std::size_t k) { return seed * 1000003ULL + k; }

LayoutPtr vector_layout(std::size_t d) { return make_layout({{"w", {d}}}); }

ModelSpec linear_spec(std::size_t d) {
  return ModelSpec{ModelKind::linear_regression, d, std::nullopt, Activation::tanh};
}

double pick_delta(Rng& rng) {
  static const double deltas[] = {0.1, 1.0, 10.0};
  return deltas[rng.below(3)];
}

ParamVector scalar(double v) { return ParamVector(vector_layout(1), {v}); }
DiagCurvature scalar_curv(double v) { return DiagCurvature(vector_layout(1), {v}); }
TaskDataset rows_1d(std::string id, std::vector<double> x, std::vector<double> y) {
  return TaskDataset(std::move(id), 1, std::move(x), std::move(y));
}

// Closed-form linear merge problem: anchor fit on its own data, H0 its exact
// Hessian, tasks fine-tuned in closed form around it.
struct LinearMergeCase {
  LinearFixture fx;
  std::vector<double> alphas;
  double delta;
  Checkpoint anchor;
  QuadraticAnchor quad;
  std::vector<Checkpoint> tasks;
};

LinearMergeCase make_linear_merge_case(std::uint64_t seed) {
  Rng rng(seed ^ 0xabcdefULL);
  const std::size_t n_tasks = 2 + rng.below(4);
  const std::size_t d = 1 + rng.below(10);
  const std::size_t rows = 5 + rng.below(30);
  const double delta = pick_delta(rng);
  LinearFixture fx = random_linear_fixture(seed, n_tasks, d, rows, LinearDesign::axis);
  const ModelSpec spec = linear_spec(d);
  const LayoutPtr layout = vector_layout(d);
  const double one = 1.0;
  const ParamVector a = closed_form_solve(std::span<const TaskDataset>(&fx.anchor_data, 1),
                                          std::span<const double>(&one, 1), QuadraticAnchor::ridge(layout, delta));
  const DiagCurvature h0 = exact_hessian_diag(spec, LossKind::squared_error, a, fx.anchor_data);
  QuadraticAnchor quad(a, h0, delta);
  std::vector<Checkpoint> tasks;
  std::vector<double> alphas;
  for (const auto& d_t : fx.tasks) {
    const ParamVector th = closed_form_solve(std::span<const TaskDataset>(&d_t, 1),
                                             std::span<const double>(&one, 1), quad);
    tasks.emplace_back(th, exact_hessian_diag(spec, LossKind::squared_error, th, d_t));
    alphas.push_back(0.2 + 1.3 * rng.uniform());
  }
  Checkpoint anchor(a, h0);
  return {std::move(fx), std::move(alphas), delta, std::move(anchor), std::move(quad), std::move(tasks)};
}

OracleResult bound_check(std::string name, double value, double bound) {
  OracleResult r;
  r.name = std::move(name);
  r.reference = {bound};
  r.produced = {value};
  r.abs_err = value;
  r.rel_err = bound > 0.0 ? value / bound : INFINITY;
  r.tolerance = bound;
  r.pass = value <= bound;
  return r;
}

}  // namespace

std::vector<OracleResult> oracle_hand_fixtures() {
  std::vector<OracleResult> out;
  const ModelSpec spec = linear_spec(1);
  const TaskDataset d1 = rows_1d("d1", {1.0}, {2.0});
  const TaskDataset d2 = rows_1d("d2", {1.0}, {4.0});
  const std::vector<TaskDataset> both{d1, d2};
  const std::vector<double> ones{1.0, 1.0};
  const QuadraticAnchor unit(scalar(0.0), scalar_curv(1.0), 0.0);

  out.push_back(OracleResult::compare("joint_closed_form_1d", 2.0,
                                      joint_closed_form_oracle(both, ones, unit)[0], 1e-12));

  // Merge of the two 1-D task models around anchor 0 with H0 = 1, H_t = 1.
  MergeInputs in{Checkpoint(scalar(0.0), scalar_curv(1.0)),
                 {{1.0, Checkpoint(scalar(1.0), scalar_curv(1.0))}, {1.0, Checkpoint(scalar(2.0), scalar_curv(1.0))}},
                 0.0, 1.0};
  out.push_back(OracleResult::compare("ours_1d_equals_joint", 2.0, merge_uncertainty(in)[0], 1e-12));
  out.push_back(OracleResult::compare("ta_1d", 3.0, merge_task_arithmetic(in)[0], 1e-12));

  // Removal: anchor fit on {(1,2),(1,4)} with delta 1, remove (1,4).
  const TaskDataset large = rows_1d("large", {1.0, 1.0}, {2.0, 4.0});
  const std::size_t removed_row = 1;
  const InfluenceOutcome inf = influence_oracle_detail(large, std::span<const std::size_t>(&removed_row, 1), 1.0);
  out.push_back(OracleResult::compare("influence_1d_anchor", 2.0, inf.full[0], 1e-12));
  out.push_back(OracleResult::compare("influence_1d_retrain", 1.0, inf.retrain[0], 1e-12));
  const double one = 1.0;
  const ParamVector theta_t = closed_form_solve(std::span<const TaskDataset>(&d2, 1), std::span<const double>(&one, 1),
                                                QuadraticAnchor(scalar(2.0), scalar_curv(2.0), 1.0));
  out.push_back(OracleResult::compare("finetune_1d", 2.5, theta_t[0], 1e-12));
  const ParamVector removed = remove_task(Checkpoint(scalar(2.0)), {1.0, Checkpoint(theta_t, scalar_curv(1.0))},
                                          scalar_curv(1.0), scalar_curv(3.0), 1.0);
  out.push_back(OracleResult::compare("remove_ours_1d", 1.0, removed[0], 1e-12));
  const ParamVector alt = alt_removal_oracle(spec, LossKind::squared_error, scalar(2.0), d2, 1.0, scalar_curv(1.0));
  out.push_back(OracleResult::compare("alt_removal_1d", 1.0, alt[0], 1e-12));

  MergeInputs fa{Checkpoint(scalar(0.0)),
                 {{1.0, Checkpoint(scalar(1.0), scalar_curv(3.0))}, {1.0, Checkpoint(scalar(3.0), scalar_curv(1.0))}},
                 0.0, 1.0};
  out.push_back(OracleResult::compare("fisher_average_1d", 1.5, merge_fisher(fa, false)[0], 1e-12));
  MergeInputs fa1{Checkpoint(scalar(2.0), scalar_curv(1.0)), {{1.0, Checkpoint(scalar(2.5), scalar_curv(1.0))}}, 0.0, 1.0};
  out.push_back(OracleResult::compare("fa1_1d", 1.25, merge_fa1(fa1)[0], 1e-12));
  return out;
}

std::vector<OracleResult> oracle_linear_merge(std::uint64_t seed, std::size_t n_fixtures) {
  std::vector<OracleResult> out;
  for (std::size_t k = 0; k < n_fixtures; ++k) {
    const LinearMergeCase c = make_linear_merge_case(fixture_seed(seed, k));
    MergeInputs in{c.anchor, {}, c.delta, 1.0};
    for (std::size_t t = 0; t < c.tasks.size(); ++t) in.tasks.push_back({c.alphas[t], c.tasks[t]});
    const ParamVector merged = merge_uncertainty(in);
    const ParamVector ref = joint_closed_form_oracle(c.fx.tasks, c.alphas, c.quad);
    out.push_back(OracleResult::compare(fmt::format("linear_merge_exactness[{}]", k), ref.values(),
                                        merged.values(), 1e-9));
  }
  return out;
}

std::vector<OracleResult> oracle_removal(std::uint64_t seed, std::size_t n_fixtures) {
  std::vector<OracleResult> out;
  for (std::size_t k = 0; k < n_fixtures; ++k) {
    const std::uint64_t s = fixture_seed(seed, k);
    Rng rng(s ^ 0x7777ULL);
    const std::size_t d = 1 + rng.below(10);
    const double delta = pick_delta(rng);

    // Dense design: Cook's formula against a full retrain.
    {
      const std::size_t n = 2 + rng.below(99);
      const LinearFixture fx = random_linear_fixture(s, 0, d, n, LinearDesign::dense);
      std::vector<std::size_t> rows;
      for (std::size_t i = 0; i < n; ++i) {
        if (rng.uniform() < 0.3) rows.push_back(i);
      }
      const InfluenceOutcome inf = influence_oracle_detail(fx.anchor_data, rows, delta);
      out.push_back(OracleResult::compare(fmt::format("cook_vs_retrain[{}]", k), inf.retrain.values(),
                                          inf.cook.values(), 1e-9));
    }

    // Axis design: the diagonal removal update is exact.
    const std::size_t rows_each = 3 + rng.below(40);
    const LinearFixture fx = random_linear_fixture(s + 1, 1, d, rows_each, LinearDesign::axis);
    const std::vector<TaskDataset> parts{fx.anchor_data, fx.tasks[0]};
    const TaskDataset full = concat(parts, "full");
    std::vector<std::size_t> removed_rows(rows_each);
    std::iota(removed_rows.begin(), removed_rows.end(), rows_each);
    const ParamVector retrain = influence_oracle(full, removed_rows, delta);

    const ModelSpec spec = linear_spec(d);
    const LayoutPtr layout = vector_layout(d);
    const double one = 1.0;
    const ParamVector a = closed_form_solve(std::span<const TaskDataset>(&full, 1), std::span<const double>(&one, 1),
                                            QuadraticAnchor::ridge(layout, delta));
    const DiagCurvature h0 = exact_hessian_diag(spec, LossKind::squared_error, a, full);
    const QuadraticAnchor quad(a, h0, delta);
    const ParamVector th = closed_form_solve(std::span<const TaskDataset>(&fx.tasks[0], 1),
                                             std::span<const double>(&one, 1), quad);
    const Checkpoint task(th, exact_hessian_diag(spec, LossKind::squared_error, th, fx.tasks[0]));
    const DiagCurvature hbar_minus = exact_hessian_diag(spec, LossKind::squared_error, a, fx.anchor_data);
    const ParamVector ours = remove_task(Checkpoint(a), {1.0, task}, hbar_minus, h0.plus(delta), delta);
    out.push_back(OracleResult::compare(fmt::format("remove_task_vs_retrain[{}]", k), retrain.values(),
                                        ours.values(), 1e-9));
    const ParamVector alt = alt_removal_oracle(spec, LossKind::squared_error, a, fx.tasks[0], delta, hbar_minus);
    out.push_back(OracleResult::compare(fmt::format("alt_removal_vs_retrain[{}]", k), retrain.values(),
                                        alt.values(), 1e-9));
  }
  return out;
}

std::vector<OracleResult> oracle_identity(std::uint64_t seed, std::size_t n_fixtures) {
  std::vector<OracleResult> out;
  for (std::size_t k = 0; k < n_fixtures; ++k) {
    const LinearMergeCase c = make_linear_merge_case(fixture_seed(seed, k) ^ 0x1d1dULL);
    const ParamVector target = closed_form_solve(c.fx.tasks, c.alphas, c.quad);
    std::vector<IdentityTask> tasks;
    for (std::size_t t = 0; t < c.tasks.size(); ++t) {
      tasks.push_back({c.alphas[t], std::cref(c.tasks[t].params()), std::cref(c.fx.tasks[t])});
    }
    const double r = verify_identity(c.quad, target, tasks, linear_spec(c.quad.anchor.size()), LossKind::squared_error);
    out.push_back(OracleResult::compare(fmt::format("identity_closed_form[{}]", k), 0.0, r, 1e-8));
  }
  return out;
}

std::vector<OracleResult> oracle_identity_trained(std::uint64_t seed, std::size_t n_fixtures) {
  std::vector<OracleResult> out;
  for (std::size_t k = 0; k < n_fixtures; ++k) {
    ExperimentSpec spec;
    spec.seed = fixture_seed(seed, k);
    spec.n_tasks = 3;
    spec.data.n_train = 100;
    spec.data.n_test = 10;
    const TrainedSetup setup = train_setup(spec);
    std::vector<TaskDataset> train;
    std::vector<double> alphas;
    for (std::size_t t = 1; t < setup.data.size(); ++t) {
      train.push_back(setup.data[t].train);
      alphas.push_back(1.0);
    }
    const Checkpoint target = train_joint_target(spec.model, spec.loss, train, alphas, setup.quad, spec.train);
    const double target_res = stationarity_residual(spec.model, spec.loss, train, alphas, setup.quad, target.params());
    std::vector<IdentityTask> tasks;
    for (std::size_t t = 0; t < train.size(); ++t) {
      tasks.push_back({alphas[t], std::cref(setup.tasks[t].params()), std::cref(train[t])});
    }
    const double r = verify_identity(setup.quad, target.params(), tasks, spec.model, spec.loss);
    const double bound = identity_residual_bound(setup.quad, target_res, alphas, setup.task_residuals);
    out.push_back(bound_check(fmt::format("identity_trained_bound[{}]", k), r, bound));
  }
  return out;
}

std::vector<OracleResult> oracle_map(std::uint64_t seed, std::size_t n_fixtures) {
  std::vector<OracleResult> out;
  for (std::size_t k = 0; k < n_fixtures; ++k) {
    Rng rng(fixture_seed(seed, k) ^ 0x3a3aULL);
    const std::size_t d = 1 + rng.below(20);
    const std::size_t n_tasks = 1 + rng.below(5);
    const LayoutPtr layout = vector_layout(d);
    auto vec = [&](double scale) {
      std::vector<double> v(d);
      for (double& x : v) x = scale * rng.normal();
      return v;
    };
    auto pos = [&](double lo, double hi) {
      std::vector<double> v(d);
      for (double& x : v) x = lo + (hi - lo) * rng.uniform();
      return v;
    };
    const Checkpoint anchor(ParamVector(layout, vec(1.0)), DiagCurvature(layout, pos(0.1, 10.0)));
    MergeInputs in{anchor, {}, 0.0, 1.0};
    for (std::size_t t = 0; t < n_tasks; ++t) {
      in.tasks.push_back({0.1 + 1.9 * rng.uniform(),
                          Checkpoint(ParamVector(layout, vec(2.0)), DiagCurvature(layout, pos(0.0, 10.0)))});
    }
    const ParamVector merged = merge_uncertainty(in);
    std::vector<SurrogateTask> st;
    for (const auto& t : in.tasks) st.push_back({t.alpha, std::cref(t.ckpt.params()), std::cref(*t.ckpt.curvature())});
    const double g = map_surrogate_check(anchor.params(), *anchor.curvature(), st, merged);
    out.push_back(bound_check(fmt::format("map_stationarity[{}]", k), g, 1e-9 * (1.0 + l2_norm(merged.values()))));
  }
  return out;
}

std::vector<OracleResult> oracle_reductions(std::uint64_t seed, std::size_t n_fixtures) {
  std::vector<OracleResult> out;
  for (std::size_t k = 0; k < n_fixtures; ++k) {
    Rng rng(fixture_seed(seed, k) ^ 0x7ab1eULL);
    const std::size_t d = 1 + rng.below(50);
    const std::size_t n_tasks = 1 + rng.below(6);
    const LayoutPtr layout = vector_layout(d);
    auto vec = [&] {
      std::vector<double> v(d);
      for (double& x : v) x = rng.normal();
      return ParamVector(layout, std::move(v));
    };
    const Checkpoint anchor(vec(), DiagCurvature::identity(layout));
    MergeInputs in{anchor, {}, 0.0, 1.0};
    std::vector<double> alphas;
    for (std::size_t t = 0; t < n_tasks; ++t) {
      const double a = -0.5 + 2.0 * rng.uniform();
      alphas.push_back(a);
      in.tasks.push_back({a, Checkpoint(vec(), DiagCurvature::zeros(layout))});
    }
    out.push_back(OracleResult::compare(fmt::format("reduction_ta[{}]", k), merge_task_arithmetic(in).values(),
                                        merge_uncertainty(in).values(), 1e-12));
    for (auto& t : in.tasks) t.alpha = 1.0 / static_cast<double>(n_tasks);
    out.push_back(OracleResult::compare(fmt::format("reduction_am[{}]", k), merge_average(in, false).values(),
                                        merge_uncertainty(in).values(), 1e-12));
  }
  return out;
}

bool OracleSuiteResult::all_pass() const {
  return std::all_of(results.begin(), results.end(), [](const OracleResult& r) { return r.pass; });
}

OracleSuiteResult run_oracle_suite(std::uint64_t seed, std::size_t n_fixtures) {
  OracleSuiteResult res;
  auto append = [&](std::vector<OracleResult> v) {
    for (auto& r : v) res.results.push_back(std::move(r));
  };
  append(oracle_hand_fixtures());
  append(oracle_linear_merge(seed, n_fixtures));
  append(oracle_removal(seed, n_fixtures));
  append(oracle_identity(seed, n_fixtures));
  append(oracle_map(seed, n_fixtures));
  append(oracle_reductions(seed, n_fixtures));
  return res;
}

void write_oracle_csv(const OracleSuiteResult& result, std::ostream& out) {
  out << "name,abs_err,rel_err,tolerance,pass\n";
  for (const auto& r : result.results) {
    fmt::print(out, "{},{},{},{},{}\n", r.name, r.abs_err, r.rel_err, r.tolerance, r.pass ? "true" : "false");
  }
}

void print_oracle_summary(const OracleSuiteResult& result, std::ostream& out) {
  std::size_t passed = 0;
  double worst = 0.0;
  for (const auto& r : result.results) {
    if (r.pass) ++passed;
    worst = std::max(worst, std::min(r.abs_err, r.rel_err));
    if (!r.pass) {
      fmt::print(out, "FAIL {:<32} abs_err={:.3e} rel_err={:.3e} tol={:.1e}\n", r.name, r.abs_err, r.rel_err,
                 r.tolerance);
    }
  }
  fmt::print(out, "{}/{} oracle checks passed (worst error {:.3e})\n", passed, result.results.size(), worst);
}

}  // namespace gradmerge::harness
