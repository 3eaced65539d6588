#include "gradmerge/merging.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <fmt/format.h>

#include "gradmerge/errors.hpp"
#include "gradmerge/simd/kernels.hpp"

namespace gradmerge {

void MergeInputs::validate() const {
  for (const auto& t : tasks) {
    require_same_layout(anchor.params().layout_ptr(), t.ckpt.params().layout_ptr(),
                        fmt::format("merge input '{}'", t.ckpt.name()));
    if (!std::isfinite(t.alpha)) {
      throw ConfigError(fmt::format("alpha for '{}' is not finite", t.ckpt.name()));
    }
  }
  if (!std::isfinite(anchor_alpha)) throw ConfigError("anchor alpha is not finite");
  if (!(delta >= 0.0) || !std::isfinite(delta)) {
    throw ConfigError(fmt::format("delta must be finite and >= 0, got {}", delta));
  }
}

namespace {

void require_tasks(const MergeInputs& in, std::string_view method) {
  if (in.tasks.empty()) throw EmptyMergeError(fmt::format("{} needs at least one task", method));
}

void reject_negative(const MergeInputs& in, std::string_view method) {
  for (const auto& t : in.tasks) {
    if (t.alpha < 0.0) {
      throw ConfigError(
          fmt::format("{} does not accept negative alpha ({} for '{}')", method, t.alpha, t.ckpt.name()));
    }
  }
}

const DiagCurvature& curvature_of(const Checkpoint& ckpt, std::string_view method) {
  if (!ckpt.curvature()) {
    throw MissingCurvatureError(
        fmt::format("{} needs curvature but checkpoint '{}' has none", method, ckpt.name()));
  }
  return *ckpt.curvature();
}

ParamVector finish(const LayoutPtr& layout, std::vector<double> values, std::string_view method) {
  for (double v : values) {
    if (!std::isfinite(v)) throw NumericError(fmt::format("{} produced non-finite parameters", method));
  }
  return ParamVector(layout, std::move(values));
}

void require_positive(std::span<const double> x, std::string_view what) {
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!(x[i] > 0.0)) {
      throw SingularCurvatureError(fmt::format("{} is not positive at index {}", what, i));
    }
  }
}

}  // namespace

ParamVector merge_average(const MergeInputs& in, bool weighted) {
  in.validate();
  require_tasks(in, weighted ? "wam" : "am");
  std::vector<WeightedTerm> terms;
  if (weighted) {
    reject_negative(in, "wam");
    if (in.anchor_alpha < 0.0) throw ConfigError("wam does not accept a negative anchor alpha");
    terms.push_back({in.anchor_alpha, std::cref(in.anchor.params())});
    for (const auto& t : in.tasks) terms.push_back({t.alpha, std::cref(t.ckpt.params())});
  } else {
    const double w = 1.0 / static_cast<double>(in.tasks.size());
    for (const auto& t : in.tasks) terms.push_back({w, std::cref(t.ckpt.params())});
  }
  return combine(terms);
}

ParamVector merge_fisher(const MergeInputs& in, bool include_anchor) {
  in.validate();
  require_tasks(in, "fa");
  reject_negative(in, "fa");
  const LayoutPtr& layout = in.anchor.params().layout_ptr();
  const std::size_t d = layout->total_len();
  std::vector<double> num(d, 0.0), den(d, 0.0);
  auto add = [&](double w, const Checkpoint& c) {
    const DiagCurvature& f = curvature_of(c, "fa");
    simd::product_accumulate(w, f.values(), c.params().values(), num);
    simd::axpy(w, f.values(), den);
  };
  if (include_anchor) add(1.0, in.anchor);
  for (const auto& t : in.tasks) add(t.alpha, t.ckpt);
  require_positive(den, "summed Fisher");
  std::vector<double> zero(d, 0.0), out(d);
  simd::add_quotient(zero, num, den, out);
  return finish(layout, std::move(out), "fa");
}

ParamVector merge_task_arithmetic(const MergeInputs& in) {
  in.validate();
  const ParamVector& a = in.anchor.params();
  std::vector<double> acc(a.size(), 0.0), inc(a.size()), out(a.size());
  for (const auto& t : in.tasks) {
    simd::subtract(t.ckpt.params().values(), a.values(), inc);
    simd::axpy(t.alpha, inc, acc);
  }
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + acc[i];
  return finish(a.layout_ptr(), std::move(out), "ta");
}

ParamVector merge_fa1(const MergeInputs& in) {
  in.validate();
  require_tasks(in, "fa1");
  reject_negative(in, "fa1");
  const ParamVector& a = in.anchor.params();
  const DiagCurvature& f0 = curvature_of(in.anchor, "fa1");
  const std::size_t d = a.size();
  // Fbar^-1 (F0 a + sum alpha F_t (theta_t - a)) rewritten as
  // a + Fbar^-1 sum alpha F_t (theta_t - 2a), which returns a exactly at alpha = 0.
  std::vector<double> num(d, 0.0), den(f0.values().begin(), f0.values().end()), inc(d);
  for (const auto& t : in.tasks) {
    const DiagCurvature& ft = curvature_of(t.ckpt, "fa1");
    simd::subtract(t.ckpt.params().values(), a.values(), inc);
    simd::subtract(inc, a.values(), inc);
    simd::product_accumulate(t.alpha, ft.values(), inc, num);
    simd::axpy(t.alpha, ft.values(), den);
  }
  require_positive(den, "summed Fisher");
  std::vector<double> out(d);
  simd::add_quotient(a.values(), num, den, out);
  return finish(a.layout_ptr(), std::move(out), "fa1");
}

ParamVector merge_uncertainty(const MergeInputs& in) {
  in.validate();
  const ParamVector& a = in.anchor.params();
  DiagCurvature h0 = [&] {
    if (in.anchor.curvature()) return in.anchor.curvature()->plus(in.delta);
    fmt::print(stderr, "warning: anchor '{}' has no curvature; using identity H0\n", in.anchor.name());
    return DiagCurvature::identity(a.layout_ptr()).plus(in.delta);
  }();
  std::vector<double> hbar(h0.values().begin(), h0.values().end());
  std::vector<PreconditionTerm> terms;
  for (const auto& t : in.tasks) {
    const DiagCurvature& ht = curvature_of(t.ckpt, "ours");
    simd::axpy(t.alpha, ht.values(), hbar);
    terms.push_back({t.alpha, std::cref(h0), std::cref(ht), std::cref(t.ckpt.params())});
  }
  // Negative alphas can push the accumulated curvature below zero, which the
  // DiagCurvature invariant would reject as a NumericError; report it as singular.
  require_positive(hbar, "accumulated curvature");
  return precondition_combine(a, terms, DiagCurvature(a.layout_ptr(), std::move(hbar)));
}

std::vector<std::vector<bool>> top_magnitude_masks(const MergeInputs& in, double keep_fraction) {
  if (!(keep_fraction > 0.0 && keep_fraction <= 1.0)) {
    throw ConfigError(fmt::format("keep_fraction must lie in (0, 1], got {}", keep_fraction));
  }
  const ParamVector& a = in.anchor.params();
  const std::size_t d = a.size();
  const auto k = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::ceil(keep_fraction * static_cast<double>(d) - 1e-9)), 1, d);
  std::vector<std::vector<bool>> masks;
  std::vector<double> inc(d);
  std::vector<std::size_t> order(d);
  for (const auto& t : in.tasks) {
    simd::subtract(t.ckpt.params().values(), a.values(), inc);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) {
      return std::abs(inc[i]) > std::abs(inc[j]);
    });
    std::vector<bool> m(d, false);
    for (std::size_t r = 0; r < k; ++r) m[order[r]] = true;
    masks.push_back(std::move(m));
  }
  return masks;
}

ParamVector merge_masked(const MergeInputs& in, const MaskConfig& cfg) {
  in.validate();
  require_tasks(in, "ties");
  reject_negative(in, "ties");
  const auto masks = top_magnitude_masks(in, cfg.keep_fraction);
  const ParamVector& a = in.anchor.params();
  const std::size_t d = a.size();
  // contributions[t][j] = alpha_t * mask_tj * (theta_tj - a_j)
  std::vector<std::vector<double>> contrib(in.tasks.size(), std::vector<double>(d, 0.0));
  for (std::size_t t = 0; t < in.tasks.size(); ++t) {
    const auto theta = in.tasks[t].ckpt.params().values();
    for (std::size_t j = 0; j < d; ++j) {
      if (masks[t][j]) contrib[t][j] = in.tasks[t].alpha * (theta[j] - a[j]);
    }
  }
  std::vector<double> out(a.values().begin(), a.values().end());
  for (std::size_t j = 0; j < d; ++j) {
    double elected = 0.0;
    if (cfg.elect_sign) {
      for (const auto& c : contrib) elected += c[j];
      elected = (elected > 0.0) - (elected < 0.0);
    }
    double acc = 0.0;
    for (const auto& c : contrib) {
      if (cfg.elect_sign && !(c[j] * elected > 0.0)) continue;
      acc += c[j];
    }
    out[j] += acc;
  }
  return finish(a.layout_ptr(), std::move(out), "ties");
}

ParamVector remove_task(const Checkpoint& anchor, const TaskInput& task,
                        const DiagCurvature& hbar_minus, const DiagCurvature& h0, double delta) {
  if (!(delta >= 0.0) || !std::isfinite(delta)) {
    throw ConfigError(fmt::format("delta must be finite and >= 0, got {}", delta));
  }
  if (!std::isfinite(task.alpha)) throw ConfigError("removal alpha is not finite");
  const ParamVector& a = anchor.params();
  require_same_layout(a.layout_ptr(), task.ckpt.params().layout_ptr(), "remove_task (task)");
  require_same_layout(a.layout_ptr(), hbar_minus.layout_ptr(), "remove_task (hbar_minus)");
  require_same_layout(a.layout_ptr(), h0.layout_ptr(), "remove_task (h0)");
  const DiagCurvature& ht = curvature_of(task.ckpt, "remove-ours");
  const DiagCurvature hbar = hbar_minus.plus(delta);
  require_positive(hbar.values(), "leave-out curvature");
  const PreconditionTerm term{-task.alpha, std::cref(h0), std::cref(ht), std::cref(task.ckpt.params())};
  return precondition_combine(a, std::span<const PreconditionTerm>(&term, 1), hbar);
}

}  // namespace gradmerge
