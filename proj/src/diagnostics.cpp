#include "gradmerge/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <fmt/format.h>
#include <fmt/ostream.h>

#include "gradmerge/errors.hpp"
#include "gradmerge/simd/kernels.hpp"

namespace gradmerge {

ParamVector gradient_mismatch(const ModelSpec& spec, LossKind loss_kind, const ParamVector& target,
                              const ParamVector& task_theta, const TaskDataset& data) {
  require_same_layout(target.layout_ptr(), task_theta.layout_ptr(), "gradient_mismatch");
  const ParamVector gt = grad(spec, loss_kind, target, data, Reduce::sum);
  const ParamVector gs = grad(spec, loss_kind, task_theta, data, Reduce::sum);
  return ParamVector(target.layout_ptr(), difference(gt, gs));
}

double verify_identity(const QuadraticAnchor& anchor, const ParamVector& target,
                       std::span<const IdentityTask> tasks, const ModelSpec& spec,
                       LossKind loss_kind) {
  if (tasks.empty()) throw ConfigError("verify_identity needs at least one task");
  const ParamVector& a = anchor.anchor;
  require_same_layout(a.layout_ptr(), target.layout_ptr(), "verify_identity (target)");
  const DiagCurvature h0 = anchor.precision();
  for (std::size_t i = 0; i < h0.size(); ++i) {
    if (!(h0[i] > 0.0)) {
      throw SingularCurvatureError(fmt::format("H0 + delta is not positive at index {}", i));
    }
  }
  const std::size_t d = a.size();
  // r = (target - a) - sum alpha (theta - a) + H0^-1 sum alpha mismatch
  std::vector<double> step(d, 0.0), inc(d);
  std::vector<double> mism(d, 0.0);
  for (const auto& t : tasks) {
    require_same_layout(a.layout_ptr(), t.theta.get().layout_ptr(), "verify_identity (task)");
    simd::subtract(t.theta.get().values(), a.values(), inc);
    simd::axpy(t.alpha, inc, step);
    const ParamVector m = gradient_mismatch(spec, loss_kind, target, t.theta.get(), t.data.get());
    simd::axpy(t.alpha, m.values(), mism);
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    const double r = (target[i] - a[i]) - step[i] + mism[i] / h0[i];
    worst = std::max(worst, std::abs(r));
  }
  return worst;
}

double identity_residual_bound(const QuadraticAnchor& anchor, double target_residual,
                               std::span<const double> alphas,
                               std::span<const double> task_residuals) {
  if (alphas.size() != task_residuals.size()) {
    throw ConfigError("identity_residual_bound: alphas and residuals differ in length");
  }
  const DiagCurvature h0 = anchor.precision();
  double min_h = std::numeric_limits<double>::infinity();
  for (double h : h0.values()) min_h = std::min(min_h, h);
  if (!(min_h > 0.0)) throw SingularCurvatureError("H0 + delta is not positive");
  double s = target_residual;
  for (std::size_t t = 0; t < alphas.size(); ++t) s += std::abs(alphas[t]) * task_residuals[t];
  return s / min_h;
}

LossDelta test_loss_delta(const ModelSpec& spec, LossKind loss_kind, const ParamVector& target,
                          const ParamVector& merged, const TaskDataset& test_data, Reduce reduce) {
  require_same_layout(target.layout_ptr(), merged.layout_ptr(), "test_loss_delta");
  const double lt = loss(spec, loss_kind, target, test_data, reduce);
  const double lm = loss(spec, loss_kind, merged, test_data, reduce);
  const ParamVector g = grad(spec, loss_kind, merged, test_data, reduce);
  const auto diff = difference(target, merged);
  return {lt - lm, simd::dot(g.values(), diff)};
}

MismatchReport mismatch_report(const DiagnosticFixture& fx, const ParamVector& merged) {
  if (fx.thetas.size() != fx.alphas.size() || fx.train.size() != fx.alphas.size()) {
    throw ConfigError(fmt::format("fixture '{}': tasks, alphas and data differ in count", fx.name));
  }
  MismatchReport rep;
  std::vector<double> total(merged.size(), 0.0);
  for (std::size_t t = 0; t < fx.train.size(); ++t) {
    const ParamVector m = gradient_mismatch(fx.spec, fx.loss_kind, fx.target, merged, fx.train[t]);
    rep.per_task.push_back({fx.train[t].task_id(), l2_norm(m.values())});
    simd::axpy(fx.alphas[t], m.values(), total);
  }
  rep.total_weighted_norm = l2_norm(total);
  rep.error_norm = l2_distance(fx.target, merged);
  if (!fx.thetas.empty()) {
    std::vector<IdentityTask> tasks;
    for (std::size_t t = 0; t < fx.thetas.size(); ++t) {
      tasks.push_back({fx.alphas[t], std::cref(fx.thetas[t]), std::cref(fx.train[t])});
    }
    rep.identity_residual = verify_identity(fx.anchor, fx.target, tasks, fx.spec, fx.loss_kind);
  }
  return rep;
}

std::vector<MismatchRow> mismatch_vs_error_table(std::span<const NamedMerge> methods,
                                                 std::span<const DiagnosticFixture> fixtures) {
  std::vector<MismatchRow> rows;
  for (const auto& fx : fixtures) {
    for (const auto& method : methods) {
      const ParamVector merged = method.merge(fx);
      const MismatchReport rep = mismatch_report(fx, merged);
      for (std::size_t t = 0; t < rep.per_task.size(); ++t) {
        LossDelta ld{0.0, 0.0};
        if (t < fx.test.size()) {
          ld = test_loss_delta(fx.spec, fx.loss_kind, fx.target, merged, fx.test[t]);
        }
        rows.push_back({method.name, fx.name, rep.per_task[t].task_id, rep.per_task[t].mismatch_norm,
                        rep.error_norm, rep.identity_residual, ld.exact, ld.first_order});
      }
      LossDelta all{0.0, 0.0};
      if (!fx.test.empty()) {
        const TaskDataset pooled = concat(fx.test, "all");
        all = test_loss_delta(fx.spec, fx.loss_kind, fx.target, merged, pooled);
      }
      rows.push_back({method.name, fx.name, "all", rep.total_weighted_norm, rep.error_norm,
                      rep.identity_residual, all.exact, all.first_order});
    }
  }
  return rows;
}

void write_mismatch_csv(std::span<const MismatchRow> rows, std::ostream& out) {
  out << "method,fixture,task_id,mismatch_l2,error_l2,identity_residual,test_loss_delta_exact,"
         "test_loss_delta_fo\n";
  for (const auto& r : rows) {
    fmt::print(out, "{},{},{},{},{},{},{},{}\n", r.method, r.fixture, r.task_id, r.mismatch_l2,
               r.error_l2, r.identity_residual, r.test_loss_delta_exact, r.test_loss_delta_fo);
  }
}

namespace {

std::vector<double> average_ranks(std::span<const double> x) {
  std::vector<std::size_t> idx(x.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> rank(x.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && x[idx[j + 1]] == x[idx[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[idx[k]] = r;
    i = j + 1;
  }
  return rank;
}

}  // namespace

double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw ConfigError("spearman: inputs differ in length");
  const std::size_t n = x.size();
  if (n < 2) return 0.0;
  const auto rx = average_ranks(x);
  const auto ry = average_ranks(y);
  const double mean = 0.5 * static_cast<double>(n + 1);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sxy += (rx[i] - mean) * (ry[i] - mean);
    sxx += (rx[i] - mean) * (rx[i] - mean);
    syy += (ry[i] - mean) * (ry[i] - mean);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

}  // namespace gradmerge
