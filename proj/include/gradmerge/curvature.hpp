#pragma once

#include <cstddef>
#include <optional>
#include <variant>

#include "gradmerge/models.hpp"
#include "gradmerge/param_space.hpp"

namespace gradmerge {

enum class FisherMode { sum, avg };

struct FisherConfig {
  FisherMode mode = FisherMode::sum;
  double delta_floor = 1e-10;
  std::optional<std::size_t> max_examples = 100000;

  void validate() const;
};

/// Empirical diagonal Fisher: sum (or mean) over the first
/// min(n, max_examples) examples of the squared per-example gradients, plus
/// delta_floor. Throws EmptyDataError for an empty dataset.
DiagCurvature fisher_diag(const ModelSpec& spec, LossKind loss_kind, const ParamVector& theta,
                          const TaskDataset& data, const FisherConfig& cfg);

/// Exact Hessian diagonal of the summed loss for linear and logistic models:
/// sum_i w_i x_ij^2 with w_i = 1 (squared error) or s_i (1 - s_i) (logistic).
/// Throws UnsupportedModelError for the MLP.
DiagCurvature exact_hessian_diag(const ModelSpec& spec, LossKind loss_kind,
                                 const ParamVector& theta, const TaskDataset& data);

namespace h0_source {
struct Identity {
  double scale = 1.0;
};
struct Fisher {
  const ParamVector* theta;
  const TaskDataset* data;
  FisherConfig cfg;
};
struct Exact {
  const ParamVector* theta;
  const TaskDataset* data;
};
}  // namespace h0_source

using H0Source = std::variant<h0_source::Identity, h0_source::Fisher, h0_source::Exact>;

/// Anchor curvature from the chosen source. Identity needs a positive scale.
DiagCurvature anchor_curvature(const ModelSpec& spec, LossKind loss_kind, const H0Source& source);

}  // namespace gradmerge
