#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "gradmerge/models.hpp"
#include "gradmerge/param_space.hpp"
#include "gradmerge/training.hpp"

namespace gradmerge {

/// Comparison of a produced value against an independent reference.
/// pass holds when abs_err <= tolerance or rel_err <= tolerance.
struct OracleResult {
  std::string name;
  std::vector<double> reference;
  std::vector<double> produced;
  double abs_err = 0.0;
  double rel_err = 0.0;
  double tolerance = 0.0;
  bool pass = false;

  static OracleResult compare(std::string name, std::span<const double> reference,
                              std::span<const double> produced, double tolerance);
  static OracleResult compare(std::string name, double reference, double produced,
                              double tolerance);
};

// ---------------------------------------------------------------------------
// Linear-regression ground truth. These use dense Eigen solves and never touch
// the training module's solver or the SIMD kernels.

/// Solves (sum_t alpha_t X_t^T X_t + diag(h0 + delta)) theta
///        = sum_t alpha_t X_t^T y_t + (h0 + delta) anchor.
ParamVector joint_closed_form_oracle(std::span<const TaskDataset> datasets,
                                     std::span<const double> alphas,
                                     const QuadraticAnchor& anchor);

struct InfluenceOutcome {
  ParamVector full;     // ridge fit on all rows
  ParamVector cook;     // one-shot leave-subset-out update from `full`
  ParamVector retrain;  // ridge fit on the remaining rows
};

/// Ridge regression (penalty delta/2 ||theta||^2) on `full_data` with the rows
/// in `removed_rows` taken out, computed two ways. Throws NumericError when
/// Cook's formula and the retrain disagree by more than 1e-9 (1 + |theta|).
InfluenceOutcome influence_oracle_detail(const TaskDataset& full_data,
                                         std::span<const std::size_t> removed_rows, double delta);

/// The retrained solution from influence_oracle_detail.
ParamVector influence_oracle(const TaskDataset& full_data,
                             std::span<const std::size_t> removed_rows, double delta);

struct SurrogateTask {
  double alpha;
  std::reference_wrapper<const ParamVector> theta;
  std::reference_wrapper<const DiagCurvature> ht;
};

/// ||grad|| of the Laplace surrogate
///   1/2 |theta - a|^2_{H0} + sum_t alpha_t 1/2 |theta - theta_t|^2_{H0+H_t}
///   - sum_t alpha_t 1/2 |theta - a|^2_{H0}
/// at `candidate`; h0 is the full anchor precision (delta included).
double map_surrogate_check(const ParamVector& anchor, const DiagCurvature& h0,
                           std::span<const SurrogateTask> tasks, const ParamVector& candidate);

/// Brute-force minimizer over a grid with `resolution` points per axis
/// (endpoints included). At most two dimensions; ties go to the first grid
/// point in lexicographic order.
std::vector<double> grid_argmin_oracle(const std::function<double(std::span<const double>)>& objective,
                                       std::span<const std::pair<double, double>> box,
                                       std::size_t resolution);

/// Gradient-at-anchor removal: anchor + (hbar_minus + delta)^-1 grad lbar_t(anchor).
ParamVector alt_removal_oracle(const ModelSpec& spec, LossKind loss_kind, const ParamVector& anchor,
                               const TaskDataset& task_data, double delta,
                               const DiagCurvature& hbar_minus);

// ---------------------------------------------------------------------------
// Random fixtures

enum class LinearDesign {
  dense,  // every feature standard normal
  axis,   // each row has a single standard-normal feature, so X^T X is diagonal
};

struct LinearFixture {
  std::uint64_t seed;
  std::vector<double> planted;
  TaskDataset anchor_data;
  std::vector<TaskDataset> tasks;
};

/// Targets are X theta* + N(0, noise^2) with theta* standard normal.
LinearFixture random_linear_fixture(std::uint64_t seed, std::size_t n_tasks, std::size_t n_features,
                                    std::size_t rows_per_task, LinearDesign design,
                                    double noise = 0.1);

}  // namespace gradmerge
