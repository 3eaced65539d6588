#pragma once

#include <functional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "gradmerge/models.hpp"
#include "gradmerge/param_space.hpp"
#include "gradmerge/training.hpp"

namespace gradmerge {

/// grad lbar_t(target) - grad lbar_t(task_theta), with lbar_t summed over data.
ParamVector gradient_mismatch(const ModelSpec& spec, LossKind loss_kind, const ParamVector& target,
                              const ParamVector& task_theta, const TaskDataset& data);

struct IdentityTask {
  double alpha;
  std::reference_wrapper<const ParamVector> theta;
  std::reference_wrapper<const TaskDataset> data;
};

/// L-infinity norm of
///   target - TA + sum_t alpha_t H0^-1 [grad lbar_t(target) - grad lbar_t(theta_t)]
/// with TA the task-arithmetic merge and H0 = h0 + delta. Zero when every
/// model sits exactly at its stationary point. ConfigError for no tasks.
double verify_identity(const QuadraticAnchor& anchor, const ParamVector& target,
                       std::span<const IdentityTask> tasks, const ModelSpec& spec,
                       LossKind loss_kind);

/// Upper bound on verify_identity for inexact stationary points. The residual
/// equals H0^-1 (s_target - sum_t alpha_t s_t) where s are the objective
/// gradients, so it is at most max(1/H0) (||s_target|| + sum_t |alpha_t| ||s_t||).
double identity_residual_bound(const QuadraticAnchor& anchor, double target_residual,
                               std::span<const double> alphas,
                               std::span<const double> task_residuals);

struct LossDelta {
  double exact;
  double first_order;
};

/// exact = L(target) - L(merged); first_order = grad L(merged) . (target - merged),
/// with L the test loss under `reduce`.
LossDelta test_loss_delta(const ModelSpec& spec, LossKind loss_kind, const ParamVector& target,
                          const ParamVector& merged, const TaskDataset& test_data,
                          Reduce reduce = Reduce::mean);

struct TaskMismatch {
  std::string task_id;
  double mismatch_norm;
};

struct MismatchReport {
  std::vector<TaskMismatch> per_task;
  double total_weighted_norm = 0.0;
  double error_norm = 0.0;
  double identity_residual = 0.0;
};

/// A merging problem with a known target: per-task training data, task models
/// and weights, plus test sets for loss deltas.
struct DiagnosticFixture {
  std::string name;
  ModelSpec spec;
  LossKind loss_kind;
  QuadraticAnchor anchor;
  ParamVector target;
  std::vector<double> alphas;
  std::vector<ParamVector> thetas;
  std::vector<TaskDataset> train;
  std::vector<TaskDataset> test;
};

struct NamedMerge {
  std::string name;
  std::function<ParamVector(const DiagnosticFixture&)> merge;
};

/// Mismatch of a merged model against the target on each task's training data.
/// total_weighted_norm = || sum_t alpha_t (grad lbar_t(target) - grad lbar_t(merged)) ||.
MismatchReport mismatch_report(const DiagnosticFixture& fx, const ParamVector& merged);

struct MismatchRow {
  std::string method;
  std::string fixture;
  std::string task_id;  // "all" for the aggregate row
  double mismatch_l2;
  double error_l2;
  double identity_residual;
  double test_loss_delta_exact;
  double test_loss_delta_fo;
};

/// One row per (fixture, method, task) followed by an "all" row per
/// (fixture, method), in fixture-major then method order.
std::vector<MismatchRow> mismatch_vs_error_table(std::span<const NamedMerge> methods,
                                                 std::span<const DiagnosticFixture> fixtures);

void write_mismatch_csv(std::span<const MismatchRow> rows, std::ostream& out);

/// Spearman rank correlation with average ranks for ties; 0 when either side is constant.
double spearman(std::span<const double> x, std::span<const double> y);

}  // namespace gradmerge
