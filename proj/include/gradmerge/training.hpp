#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "gradmerge/models.hpp"
#include "gradmerge/param_space.hpp"

namespace gradmerge {

/// Adam hyperparameters. Training stops once the relative stationarity
/// residual ||grad J|| / (1 + ||theta||) drops below tol, or after `epochs`
/// passes over the data, whichever comes first.
struct TrainConfig {
  double lr = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t epochs = 20000;
  std::size_t batch_size = 0;  // 0 means full batch
  std::optional<double> grad_clip_norm;
  std::uint64_t seed = 0;
  double tol = 1e-8;

  void validate() const;
};

/// The penalty 1/2 ||theta - anchor||^2 with weights (h0 + delta).
struct QuadraticAnchor {
  ParamVector anchor;
  DiagCurvature h0;
  double delta = 0.0;

  QuadraticAnchor(ParamVector anchor, DiagCurvature h0, double delta);

  /// Zero anchor, zero h0: the plain ridge penalty delta/2 ||theta||^2.
  static QuadraticAnchor ridge(LayoutPtr layout, double delta);

  /// Elementwise h0 + delta.
  DiagCurvature precision() const;
};

/// Objective sum_t alpha_t * lbar_t(theta) + penalty, with lbar_t summed over examples.
double joint_objective(const ModelSpec& spec, LossKind loss_kind,
                       std::span<const TaskDataset> datasets, std::span<const double> alphas,
                       const QuadraticAnchor& anchor, const ParamVector& theta);

/// Gradient of joint_objective.
ParamVector joint_gradient(const ModelSpec& spec, LossKind loss_kind,
                           std::span<const TaskDataset> datasets, std::span<const double> alphas,
                           const QuadraticAnchor& anchor, const ParamVector& theta);

/// ||joint_gradient||_2 at theta.
double stationarity_residual(const ModelSpec& spec, LossKind loss_kind,
                             std::span<const TaskDataset> datasets, std::span<const double> alphas,
                             const QuadraticAnchor& anchor, const ParamVector& theta);

/// Minimizes lbar(theta) + delta/2 ||theta||^2 from zero (small seeded random
/// weights for the MLP, whose all-zero point is a saddle).
Checkpoint train_anchor(const ModelSpec& spec, LossKind loss_kind, const TaskDataset& data,
                        double delta, const TrainConfig& cfg);

/// Minimizes lbar_t(theta) + 1/2 ||theta - anchor||^2_{h0 + delta}, starting at the anchor.
Checkpoint finetune_task(const ModelSpec& spec, LossKind loss_kind, const TaskDataset& data,
                         const QuadraticAnchor& anchor, const TrainConfig& cfg);

/// Minimizes sum_t alpha_t lbar_t(theta) + 1/2 ||theta - anchor||^2_{h0 + delta}.
Checkpoint train_joint_target(const ModelSpec& spec, LossKind loss_kind,
                              std::span<const TaskDataset> datasets,
                              std::span<const double> alphas, const QuadraticAnchor& anchor,
                              const TrainConfig& cfg);

/// Direct solve of the linear-regression normal equations
/// (sum_t alpha_t X_t^T X_t + diag(h0 + delta)) theta = sum_t alpha_t X_t^T y_t + (h0 + delta) anchor.
/// Uses Gaussian elimination with partial pivoting; SingularSystemError when
/// the system is (numerically) singular.
ParamVector closed_form_solve(std::span<const TaskDataset> datasets,
                              std::span<const double> alphas, const QuadraticAnchor& anchor);

}  // namespace gradmerge
