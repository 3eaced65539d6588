#pragma once

#include <vector>

#include "gradmerge/param_space.hpp"

namespace gradmerge {

struct TaskInput {
  double alpha;
  Checkpoint ckpt;
};

/// Everything a merge needs. `delta` is added to the anchor curvature to form
/// H0; `anchor_alpha` is the anchor's own weight in the weighted average.
struct MergeInputs {
  Checkpoint anchor;
  std::vector<TaskInput> tasks;
  double delta = 0.0;
  double anchor_alpha = 1.0;

  /// Layouts agree, alphas finite, delta finite and >= 0.
  void validate() const;
};

struct MaskConfig {
  double keep_fraction = 0.2;
  bool elect_sign = false;
};

/// Unweighted: mean of the task parameters (alphas ignored).
/// Weighted: anchor_alpha * anchor + sum_t alpha_t theta_t.
ParamVector merge_average(const MergeInputs& in, bool weighted);

/// Fisher averaging: Fbar^-1 sum_t alpha_t F_t theta_t with Fbar = sum_t alpha_t F_t.
/// With include_anchor the anchor joins the sum with weight 1 and its own curvature.
ParamVector merge_fisher(const MergeInputs& in, bool include_anchor);

/// anchor + sum_t alpha_t (theta_t - anchor). Negative alphas allowed.
ParamVector merge_task_arithmetic(const MergeInputs& in);

/// Fbar^-1 (F_anchor anchor + sum_t alpha_t Fhat_t (theta_t - anchor)) with
/// Fbar = F_anchor + sum_t alpha_t Fhat_t. Task curvatures must hold the
/// Fishers evaluated at the increments. Kept as a comparison baseline.
ParamVector merge_fa1(const MergeInputs& in);

/// anchor + sum_t alpha_t Hbar^-1 (H0 + H_t)(theta_t - anchor), where
/// H0 = anchor curvature + delta and Hbar = H0 + sum_t alpha_t H_t.
/// Without anchor curvature H0 falls back to the identity (with a warning).
ParamVector merge_uncertainty(const MergeInputs& in);

/// Task arithmetic restricted, per task, to the ceil(keep_fraction * d)
/// largest-magnitude increments (ties go to the lower index). With
/// elect_sign, each coordinate keeps only contributions whose sign matches the
/// sign of the summed contributions there.
ParamVector merge_masked(const MergeInputs& in, const MaskConfig& cfg);

/// anchor - alpha * (hbar_minus + delta)^-1 (h0 + H_t)(theta_t - anchor).
/// h0 is the anchor's full curvature (including its own delta).
ParamVector remove_task(const Checkpoint& anchor, const TaskInput& task,
                        const DiagCurvature& hbar_minus, const DiagCurvature& h0, double delta);

/// The per-task keep masks used by merge_masked (1 = kept).
std::vector<std::vector<bool>> top_magnitude_masks(const MergeInputs& in, double keep_fraction);

}  // namespace gradmerge
