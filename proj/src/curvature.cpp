#include "gradmerge/curvature.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>

#include "gradmerge/errors.hpp"
#include "gradmerge/simd/kernels.hpp"

namespace gradmerge {

void FisherConfig::validate() const {
  if (!(delta_floor >= 0.0) || !std::isfinite(delta_floor)) {
    throw ConfigError(fmt::format("delta_floor must be finite and >= 0, got {}", delta_floor));
  }
  if (max_examples && *max_examples == 0) throw ConfigError("max_examples must be positive");
}

DiagCurvature fisher_diag(const ModelSpec& spec, LossKind loss_kind, const ParamVector& theta,
                          const TaskDataset& data, const FisherConfig& cfg) {
  cfg.validate();
  if (data.empty()) {
    throw EmptyDataError(fmt::format("Fisher of empty dataset '{}'", data.task_id()));
  }
  const std::size_t n = std::min(data.n_examples(), cfg.max_examples.value_or(data.n_examples()));
  const TaskDataset used = n == data.n_examples() ? data : data.slice(0, n);
  const auto grads = per_example_grads(spec, loss_kind, theta, used);
  std::vector<double> f(theta.size(), 0.0);
  for (const auto& g : grads) simd::square_accumulate(1.0, g.values(), f);
  if (cfg.mode == FisherMode::avg) {
    const double inv = 1.0 / static_cast<double>(n);
    for (double& x : f) x *= inv;
  }
  for (double& x : f) x += cfg.delta_floor;
  return DiagCurvature(theta.layout_ptr(), std::move(f));
}

DiagCurvature exact_hessian_diag(const ModelSpec& spec, LossKind loss_kind,
                                 const ParamVector& theta, const TaskDataset& data) {
  if (spec.kind == ModelKind::mlp) {
    throw UnsupportedModelError("exact Hessian diagonal is available for linear and logistic models only");
  }
  check_compatible(spec, loss_kind, theta, data);
  std::vector<double> out = data.empty() ? std::vector<double>{} : predict(spec, theta, data);
  std::vector<double> h(theta.size(), 0.0);
  for (std::size_t i = 0; i < data.n_examples(); ++i) {
    double w = 1.0;
    if (loss_kind == LossKind::logistic_nll) {
      const double s = sigmoid(out[i]);
      w = s * (1.0 - s);
    }
    simd::square_accumulate(w, data.row(i), h);
  }
  return DiagCurvature(theta.layout_ptr(), std::move(h));
}

DiagCurvature anchor_curvature(const ModelSpec& spec, LossKind loss_kind, const H0Source& source) {
  return std::visit(
      [&](const auto& s) -> DiagCurvature {
        using T = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<T, h0_source::Identity>) {
          if (!(s.scale > 0.0) || !std::isfinite(s.scale)) {
            throw ConfigError(fmt::format("identity H0 scale must be positive, got {}", s.scale));
          }
          return DiagCurvature::identity(canonical_layout(spec), s.scale);
        } else if constexpr (std::is_same_v<T, h0_source::Fisher>) {
          return fisher_diag(spec, loss_kind, *s.theta, *s.data, s.cfg);
        } else {
          return exact_hessian_diag(spec, loss_kind, *s.theta, *s.data);
        }
      },
      source);
}

}  // namespace gradmerge
