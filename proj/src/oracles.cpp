#include "gradmerge/oracles.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include <Eigen/Dense>
#include <fmt/format.h>

#include "gradmerge/errors.hpp"
#include "gradmerge/rng.hpp"

namespace gradmerge {

OracleResult OracleResult::compare(std::string name, std::span<const double> reference,
                                   std::span<const double> produced, double tolerance) {
  if (reference.size() != produced.size()) {
    throw LayoutError(fmt::format("oracle '{}': reference has {} values, produced {}", name,
                                  reference.size(), produced.size()));
  }
  OracleResult r;
  r.name = std::move(name);
  r.reference.assign(reference.begin(), reference.end());
  r.produced.assign(produced.begin(), produced.end());
  r.tolerance = tolerance;
  double ref_scale = 0.0;
  for (std::size_t i = 0; i < reference.size(); ++i) {
    r.abs_err = std::max(r.abs_err, std::abs(reference[i] - produced[i]));
    ref_scale = std::max(ref_scale, std::abs(reference[i]));
  }
  r.rel_err = ref_scale > 0.0 ? r.abs_err / ref_scale : (r.abs_err > 0.0 ? INFINITY : 0.0);
  r.pass = r.abs_err <= tolerance || r.rel_err <= tolerance;
  return r;
}

OracleResult OracleResult::compare(std::string name, double reference, double produced,
                                   double tolerance) {
  return compare(std::move(name), std::span<const double>(&reference, 1),
                 std::span<const double>(&produced, 1), tolerance);
}

namespace {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

Mat design_matrix(const TaskDataset& d) {
  Mat x(static_cast<Eigen::Index>(d.n_examples()), static_cast<Eigen::Index>(d.n_features()));
  for (std::size_t i = 0; i < d.n_examples(); ++i) {
    const auto row = d.row(i);
    for (std::size_t j = 0; j < d.n_features(); ++j) x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = row[j];
  }
  return x;
}

Vec target_vector(const TaskDataset& d) {
  Vec y(static_cast<Eigen::Index>(d.n_examples()));
  for (std::size_t i = 0; i < d.n_examples(); ++i) y(static_cast<Eigen::Index>(i)) = d.target(i);
  return y;
}

Vec to_eigen(std::span<const double> v) {
  Vec out(static_cast<Eigen::Index>(v.size()));
  for (std::size_t i = 0; i < v.size(); ++i) out(static_cast<Eigen::Index>(i)) = v[i];
  return out;
}

std::vector<double> from_eigen(const Vec& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

Vec solve_dense(const Mat& a, const Vec& b, std::string_view what) {
  Eigen::FullPivLU<Mat> lu(a);
  lu.setThreshold(1e-13);
  if (lu.rank() < a.rows()) {
    throw SingularSystemError(fmt::format("{}: system matrix has rank {} < {}", what, lu.rank(), a.rows()));
  }
  Vec x = lu.solve(b);
  if (!x.allFinite()) throw SingularSystemError(fmt::format("{}: non-finite solution", what));
  return x;
}

Vec ridge_fit(const Mat& x, const Vec& y, double delta) {
  const auto d = x.cols();
  Mat a = x.transpose() * x + delta * Mat::Identity(d, d);
  return solve_dense(a, x.transpose() * y, "ridge");
}

}  // namespace

ParamVector joint_closed_form_oracle(std::span<const TaskDataset> datasets,
                                     std::span<const double> alphas,
                                     const QuadraticAnchor& anchor) {
  if (datasets.size() != alphas.size()) {
    throw ConfigError(fmt::format("{} datasets but {} alphas", datasets.size(), alphas.size()));
  }
  const auto d = static_cast<Eigen::Index>(anchor.anchor.size());
  const Vec p = to_eigen(anchor.h0.values()).array() + anchor.delta;
  Mat a = p.asDiagonal();
  Vec b = p.cwiseProduct(to_eigen(anchor.anchor.values()));
  for (std::size_t t = 0; t < datasets.size(); ++t) {
    if (static_cast<Eigen::Index>(datasets[t].n_features()) != d) {
      throw LayoutError(fmt::format("dataset '{}' feature count does not match the anchor",
                                    datasets[t].task_id()));
    }
    if (datasets[t].empty()) continue;
    const Mat x = design_matrix(datasets[t]);
    a += alphas[t] * (x.transpose() * x);
    b += alphas[t] * (x.transpose() * target_vector(datasets[t]));
  }
  return ParamVector(anchor.anchor.layout_ptr(), from_eigen(solve_dense(a, b, "joint closed form")));
}

InfluenceOutcome influence_oracle_detail(const TaskDataset& full_data,
                                         std::span<const std::size_t> removed_rows, double delta) {
  if (!(delta >= 0.0)) throw ConfigError("delta must be >= 0");
  const std::set<std::size_t> removed(removed_rows.begin(), removed_rows.end());
  for (std::size_t r : removed) {
    if (r >= full_data.n_examples()) {
      throw ConfigError(fmt::format("removed row {} out of range", r));
    }
  }
  const Mat x = design_matrix(full_data);
  const Vec y = target_vector(full_data);
  const auto n_keep = static_cast<Eigen::Index>(full_data.n_examples() - removed.size());
  const auto n_rem = static_cast<Eigen::Index>(removed.size());
  Mat xk(n_keep, x.cols()), xr(n_rem, x.cols());
  Vec yk(n_keep), yr(n_rem);
  Eigen::Index ik = 0, ir = 0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    if (removed.count(static_cast<std::size_t>(i))) {
      xr.row(ir) = x.row(i);
      yr(ir++) = y(i);
    } else {
      xk.row(ik) = x.row(i);
      yk(ik++) = y(i);
    }
  }
  const Vec full = ridge_fit(x, y, delta);
  const Vec retrain = ridge_fit(xk, yk, delta);
  const auto d = x.cols();
  const Mat hbar_minus = xk.transpose() * xk + delta * Mat::Identity(d, d);
  const Vec cook = full + solve_dense(hbar_minus, xr.transpose() * (xr * full - yr), "Cook");
  const double tol = 1e-9 * (1.0 + retrain.cwiseAbs().maxCoeff());
  const double err = (cook - retrain).cwiseAbs().maxCoeff();
  if (!(err <= tol)) {
    throw NumericError(fmt::format("Cook's formula and retrain disagree by {} (tolerance {})", err, tol));
  }
  const LayoutPtr layout = make_layout({{"w", {full_data.n_features()}}});
  return {ParamVector(layout, from_eigen(full)), ParamVector(layout, from_eigen(cook)),
          ParamVector(layout, from_eigen(retrain))};
}

ParamVector influence_oracle(const TaskDataset& full_data,
                             std::span<const std::size_t> removed_rows, double delta) {
  return influence_oracle_detail(full_data, removed_rows, delta).retrain;
}

double map_surrogate_check(const ParamVector& anchor, const DiagCurvature& h0,
                           std::span<const SurrogateTask> tasks, const ParamVector& candidate) {
  require_same_layout(anchor.layout_ptr(), candidate.layout_ptr(), "map_surrogate_check");
  require_same_layout(anchor.layout_ptr(), h0.layout_ptr(), "map_surrogate_check (h0)");
  double sq = 0.0;
  for (std::size_t i = 0; i < anchor.size(); ++i) {
    const double x = candidate[i];
    double g = h0[i] * (x - anchor[i]);
    for (const auto& t : tasks) {
      g += t.alpha * (h0[i] + t.ht.get()[i]) * (x - t.theta.get()[i]);
      g -= t.alpha * h0[i] * (x - anchor[i]);
    }
    sq += g * g;
  }
  return std::sqrt(sq);
}

std::vector<double> grid_argmin_oracle(const std::function<double(std::span<const double>)>& objective,
                                       std::span<const std::pair<double, double>> box,
                                       std::size_t resolution) {
  if (box.empty()) throw ConfigError("grid_argmin_oracle: empty box");
  if (box.size() > 2) {
    throw UnsupportedError(fmt::format("grid search supports at most 2 dimensions, got {}", box.size()));
  }
  if (resolution < 100) throw ConfigError("grid resolution must be at least 100 points per axis");
  for (const auto& [lo, hi] : box) {
    if (!(lo <= hi)) throw ConfigError("grid box has lo > hi");
  }
  auto coord = [&](std::size_t axis, std::size_t k) {
    const auto [lo, hi] = box[axis];
    return lo + (hi - lo) * static_cast<double>(k) / static_cast<double>(resolution - 1);
  };
  const std::size_t n1 = box.size() == 2 ? resolution : 1;
  std::vector<double> point(box.size()), best;
  double best_value = INFINITY;
  for (std::size_t i = 0; i < resolution; ++i) {
    point[0] = coord(0, i);
    for (std::size_t j = 0; j < n1; ++j) {
      if (box.size() == 2) point[1] = coord(1, j);
      const double v = objective(point);
      if (best.empty() || v < best_value) {
        best_value = v;
        best = point;
      }
    }
  }
  return best;
}

ParamVector alt_removal_oracle(const ModelSpec& spec, LossKind loss_kind, const ParamVector& anchor,
                               const TaskDataset& task_data, double delta,
                               const DiagCurvature& hbar_minus) {
  require_same_layout(anchor.layout_ptr(), hbar_minus.layout_ptr(), "alt_removal_oracle");
  for (std::size_t i = 0; i < hbar_minus.size(); ++i) {
    if (!(hbar_minus[i] + delta > 0.0)) {
      throw SingularCurvatureError(fmt::format("leave-out curvature is not positive at index {}", i));
    }
  }
  std::vector<double> g;
  if (spec.kind == ModelKind::linear_regression && !task_data.empty()) {
    check_compatible(spec, loss_kind, anchor, task_data);
    const Mat x = design_matrix(task_data);
    g = from_eigen(x.transpose() * (x * to_eigen(anchor.values()) - target_vector(task_data)));
  } else {
    const ParamVector gv = grad(spec, loss_kind, anchor, task_data, Reduce::sum);
    g.assign(gv.values().begin(), gv.values().end());
  }
  std::vector<double> out(anchor.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = anchor[i] + g[i] / (hbar_minus[i] + delta);
  return ParamVector(anchor.layout_ptr(), std::move(out));
}

LinearFixture random_linear_fixture(std::uint64_t seed, std::size_t n_tasks, std::size_t n_features,
                                    std::size_t rows_per_task, LinearDesign design, double noise) {
  if (n_features == 0) throw ConfigError("fixture needs at least one feature");
  Rng rng(seed);
  std::vector<double> planted(n_features);
  for (double& v : planted) v = rng.normal();
  auto make = [&](std::string id) {
    std::vector<double> x(rows_per_task * n_features, 0.0), y(rows_per_task);
    for (std::size_t i = 0; i < rows_per_task; ++i) {
      double* row = x.data() + i * n_features;
      if (design == LinearDesign::axis) {
        row[rng.below(n_features)] = rng.normal();
      } else {
        for (std::size_t j = 0; j < n_features; ++j) row[j] = rng.normal();
      }
      double f = 0.0;
      for (std::size_t j = 0; j < n_features; ++j) f += row[j] * planted[j];
      y[i] = f + noise * rng.normal();
    }
    return TaskDataset(std::move(id), n_features, std::move(x), std::move(y), seed);
  };
  TaskDataset anchor_data = make("anchor");
  std::vector<TaskDataset> tasks;
  for (std::size_t t = 0; t < n_tasks; ++t) tasks.push_back(make(fmt::format("task{}", t + 1)));
  return {seed, std::move(planted), std::move(anchor_data), std::move(tasks)};
}

}  // namespace gradmerge
