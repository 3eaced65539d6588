#include "gradmerge/training.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <fmt/format.h>

#include "gradmerge/errors.hpp"
#include "gradmerge/rng.hpp"
#include "gradmerge/simd/kernels.hpp"

namespace gradmerge {

void TrainConfig::validate() const {
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("lr must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("beta1 must lie in [0, 1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("beta2 must lie in [0, 1)");
  if (!(eps > 0.0)) throw ConfigError("eps must be positive");
  if (epochs == 0) throw ConfigError("epochs must be positive");
  if (grad_clip_norm && !(*grad_clip_norm > 0.0)) throw ConfigError("grad_clip_norm must be positive");
  if (!(tol >= 0.0)) throw ConfigError("tol must be nonnegative");
}

QuadraticAnchor::QuadraticAnchor(ParamVector anchor_, DiagCurvature h0_, double delta_)
    : anchor(std::move(anchor_)), h0(std::move(h0_)), delta(delta_) {
  require_same_layout(anchor.layout_ptr(), h0.layout_ptr(), "quadratic anchor");
  if (!(delta >= 0.0) || !std::isfinite(delta)) {
    throw ConfigError(fmt::format("delta must be finite and >= 0, got {}", delta));
  }
}

QuadraticAnchor QuadraticAnchor::ridge(LayoutPtr layout, double delta) {
  return QuadraticAnchor(ParamVector::zeros(layout), DiagCurvature::zeros(layout), delta);
}

DiagCurvature QuadraticAnchor::precision() const { return h0.plus(delta); }

namespace {

void check_weights(std::span<const TaskDataset> datasets, std::span<const double> alphas) {
  if (datasets.size() != alphas.size()) {
    throw ConfigError(fmt::format("{} datasets but {} alphas", datasets.size(), alphas.size()));
  }
  for (double a : alphas) {
    if (!std::isfinite(a)) throw ConfigError("alpha must be finite");
  }
}

// out += P (theta - anchor)
void add_penalty_gradient(const QuadraticAnchor& anchor, std::span<const double> theta,
                          std::span<double> out) {
  const auto a = anchor.anchor.values();
  const auto h = anchor.h0.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += (h[i] + anchor.delta) * (theta[i] - a[i]);
}

// Gradient of the data term over a subset of (dataset, example) pairs, scaled.
struct ExampleRef {
  std::size_t task;
  std::size_t index;
};

std::string fmt_double(double v) { return fmt::format("{}", v); }

std::string objective_name(std::size_t n_tasks, bool anchor_run) {
  if (anchor_run) return "anchor";
  return n_tasks == 1 ? "finetune" : "joint";
}

Checkpoint run_adam(const ModelSpec& spec, LossKind loss_kind,
                    std::span<const TaskDataset> datasets, std::span<const double> alphas,
                    const QuadraticAnchor& anchor, ParamVector start, const TrainConfig& cfg,
                    const std::string& objective) {
  cfg.validate();
  check_weights(datasets, alphas);
  const LayoutPtr layout = anchor.anchor.layout_ptr();
  require_same_layout(layout, start.layout_ptr(), "training start point");
  for (const auto& d : datasets) check_compatible(spec, loss_kind, start, d);

  std::vector<ExampleRef> examples;
  for (std::size_t t = 0; t < datasets.size(); ++t) {
    for (std::size_t i = 0; i < datasets[t].n_examples(); ++i) examples.push_back({t, i});
  }
  const std::size_t n_total = examples.size();
  const bool full = cfg.batch_size == 0 || cfg.batch_size >= n_total;
  const std::size_t batch = full ? n_total : cfg.batch_size;
  Rng rng(cfg.seed);

  const std::size_t d = start.size();
  std::vector<double> theta(start.values().begin(), start.values().end());
  std::vector<double> m(d, 0.0), v(d, 0.0), g(d);
  double b1_pow = 1.0, b2_pow = 1.0;
  std::size_t epoch = 0;
  double residual = 0.0;
  // Fixed-step Adam can settle into a limit cycle around a sharp minimum.
  // When neither the residual nor the objective has improved for kPatience
  // epochs the step is halved and the moment estimates restart.
  constexpr std::size_t kPatience = 500;
  constexpr double kMinProgress = 1e-6;
  double lr = cfg.lr;
  double best = std::numeric_limits<double>::infinity();
  double best_objective = std::numeric_limits<double>::infinity();
  std::size_t best_epoch = 0;
  std::size_t backoffs = 0;

  auto full_gradient = [&](const std::vector<double>& th) {
    return joint_gradient(spec, loss_kind, datasets, alphas, anchor, ParamVector(layout, th));
  };

  auto adam_step = [&](std::span<const double> grad_vec) {
    std::copy(grad_vec.begin(), grad_vec.end(), g.begin());
    if (cfg.grad_clip_norm) {
      const double norm = l2_norm(g);
      if (norm > *cfg.grad_clip_norm) {
        const double s = *cfg.grad_clip_norm / norm;
        for (double& x : g) x *= s;
      }
    }
    b1_pow *= cfg.beta1;
    b2_pow *= cfg.beta2;
    for (std::size_t i = 0; i < d; ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double mhat = m[i] / (1.0 - b1_pow);
      const double vhat = v[i] / (1.0 - b2_pow);
      theta[i] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
    for (double x : theta) {
      if (!std::isfinite(x)) {
        throw DivergenceError(fmt::format("{} training diverged at epoch {}", objective, epoch));
      }
    }
  };

  for (epoch = 0; epoch < cfg.epochs; ++epoch) {
    ParamVector gfull = [&] {
      try {
        return full_gradient(theta);
      } catch (const NumericError&) {
        throw DivergenceError(fmt::format("{} training diverged at epoch {}", objective, epoch));
      }
    }();
    residual = l2_norm(gfull.values());
    if (residual <= cfg.tol * (1.0 + l2_norm(theta))) break;
    const double objective_value =
        joint_objective(spec, loss_kind, datasets, alphas, anchor, ParamVector(layout, theta));
    if (epoch == 0 ||
        objective_value < best_objective - kMinProgress * (1.0 + std::abs(best_objective))) {
      best_objective = objective_value;
      best_epoch = epoch;
    }
    if (residual < 0.9 * best) {
      best = residual;
      best_epoch = epoch;
    } else if (epoch - best_epoch >= kPatience) {
      lr *= 0.5;
      ++backoffs;
      std::fill(m.begin(), m.end(), 0.0);
      std::fill(v.begin(), v.end(), 0.0);
      b1_pow = b2_pow = 1.0;
      best = residual;
      best_epoch = epoch;
    }
    if (full) {
      adam_step(gfull.values());
      continue;
    }
    // Shuffled minibatches; each batch gradient is rescaled to estimate the full sum.
    for (std::size_t i = n_total; i > 1; --i) {
      std::swap(examples[i - 1], examples[rng.below(i)]);
    }
    for (std::size_t start_i = 0; start_i < n_total; start_i += batch) {
      const std::size_t end_i = std::min(n_total, start_i + batch);
      const double scale = static_cast<double>(n_total) / static_cast<double>(end_i - start_i);
      std::vector<double> gb(d, 0.0);
      const ParamVector th(layout, theta);
      for (std::size_t k = start_i; k < end_i; ++k) {
        const auto& ref = examples[k];
        const auto& ds = datasets[ref.task];
        const TaskDataset one = ds.slice(ref.index, ref.index + 1);
        const ParamVector ge = grad(spec, loss_kind, th, one, Reduce::sum);
        simd::axpy(alphas[ref.task] * scale, ge.values(), gb);
      }
      add_penalty_gradient(anchor, theta, gb);
      adam_step(gb);
    }
  }
  if (epoch == cfg.epochs) {
    residual = l2_norm(full_gradient(theta).values());
  }

  std::map<std::string, std::string> meta{
      {"objective", objective},
      {"seed", std::to_string(cfg.seed)},
      {"epochs", std::to_string(epoch)},
      {"delta", fmt_double(anchor.delta)},
      {"stationarity_residual", fmt_double(residual)},
      {"lr_backoffs", std::to_string(backoffs)},
      {"converged", residual <= 1e-4 * (1.0 + l2_norm(theta)) ? "true" : "false"},
  };
  return Checkpoint(ParamVector(layout, std::move(theta)), std::nullopt, std::nullopt,
                    std::move(meta));
}

}  // namespace

double joint_objective(const ModelSpec& spec, LossKind loss_kind,
                       std::span<const TaskDataset> datasets, std::span<const double> alphas,
                       const QuadraticAnchor& anchor, const ParamVector& theta) {
  check_weights(datasets, alphas);
  require_same_layout(anchor.anchor.layout_ptr(), theta.layout_ptr(), "joint objective");
  double total = 0.0;
  for (std::size_t t = 0; t < datasets.size(); ++t) {
    if (alphas[t] == 0.0) continue;
    total += alphas[t] * loss(spec, loss_kind, theta, datasets[t], Reduce::sum);
  }
  const auto a = anchor.anchor.values();
  const auto h = anchor.h0.values();
  double pen = 0.0;
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double diff = theta[i] - a[i];
    pen += (h[i] + anchor.delta) * diff * diff;
  }
  return total + 0.5 * pen;
}

ParamVector joint_gradient(const ModelSpec& spec, LossKind loss_kind,
                           std::span<const TaskDataset> datasets, std::span<const double> alphas,
                           const QuadraticAnchor& anchor, const ParamVector& theta) {
  check_weights(datasets, alphas);
  require_same_layout(anchor.anchor.layout_ptr(), theta.layout_ptr(), "joint gradient");
  std::vector<double> g(theta.size(), 0.0);
  for (std::size_t t = 0; t < datasets.size(); ++t) {
    if (alphas[t] == 0.0) continue;
    const ParamVector gt = grad(spec, loss_kind, theta, datasets[t], Reduce::sum);
    simd::axpy(alphas[t], gt.values(), g);
  }
  add_penalty_gradient(anchor, theta.values(), g);
  for (double x : g) {
    if (!std::isfinite(x)) throw NumericError("objective gradient is not finite");
  }
  return ParamVector(theta.layout_ptr(), std::move(g));
}

double stationarity_residual(const ModelSpec& spec, LossKind loss_kind,
                             std::span<const TaskDataset> datasets, std::span<const double> alphas,
                             const QuadraticAnchor& anchor, const ParamVector& theta) {
  return l2_norm(joint_gradient(spec, loss_kind, datasets, alphas, anchor, theta).values());
}

Checkpoint train_anchor(const ModelSpec& spec, LossKind loss_kind, const TaskDataset& data,
                        double delta, const TrainConfig& cfg) {
  const LayoutPtr layout = canonical_layout(spec);
  const QuadraticAnchor ridge = QuadraticAnchor::ridge(layout, delta);
  std::vector<double> init(layout->total_len(), 0.0);
  if (spec.kind == ModelKind::mlp) {
    Rng rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
    const double scale = 1.0 / std::sqrt(static_cast<double>(spec.n_features));
    for (double& x : init) x = scale * rng.normal();
  }
  const double alpha = 1.0;
  return run_adam(spec, loss_kind, std::span<const TaskDataset>(&data, 1),
                  std::span<const double>(&alpha, 1), ridge, ParamVector(layout, std::move(init)),
                  cfg, objective_name(1, true));
}

Checkpoint finetune_task(const ModelSpec& spec, LossKind loss_kind, const TaskDataset& data,
                         const QuadraticAnchor& anchor, const TrainConfig& cfg) {
  const double alpha = 1.0;
  return run_adam(spec, loss_kind, std::span<const TaskDataset>(&data, 1),
                  std::span<const double>(&alpha, 1), anchor, anchor.anchor, cfg,
                  objective_name(1, false));
}

Checkpoint train_joint_target(const ModelSpec& spec, LossKind loss_kind,
                              std::span<const TaskDataset> datasets,
                              std::span<const double> alphas, const QuadraticAnchor& anchor,
                              const TrainConfig& cfg) {
  for (double a : alphas) {
    if (a < 0.0) throw ConfigError("joint-target alphas must be nonnegative");
  }
  return run_adam(spec, loss_kind, datasets, alphas, anchor, anchor.anchor, cfg, "joint");
}

ParamVector closed_form_solve(std::span<const TaskDataset> datasets,
                              std::span<const double> alphas, const QuadraticAnchor& anchor) {
  check_weights(datasets, alphas);
  const std::size_t d = anchor.anchor.size();
  for (const auto& ds : datasets) {
    if (ds.n_features() != d) {
      throw LayoutError(fmt::format("dataset '{}' has {} features, anchor has {} parameters",
                                    ds.task_id(), ds.n_features(), d));
    }
  }
  // Augmented matrix [A | b], row-major with d + 1 columns.
  const std::size_t w = d + 1;
  std::vector<double> m(d * w, 0.0);
  const auto a = anchor.anchor.values();
  const auto h = anchor.h0.values();
  for (std::size_t i = 0; i < d; ++i) {
    const double p = h[i] + anchor.delta;
    m[i * w + i] = p;
    m[i * w + d] = p * a[i];
  }
  for (std::size_t t = 0; t < datasets.size(); ++t) {
    const auto& ds = datasets[t];
    for (std::size_t n = 0; n < ds.n_examples(); ++n) {
      const auto x = ds.row(n);
      const double y = ds.target(n);
      for (std::size_t i = 0; i < d; ++i) {
        if (x[i] == 0.0) continue;
        const double ax = alphas[t] * x[i];
        for (std::size_t j = 0; j < d; ++j) m[i * w + j] += ax * x[j];
        m[i * w + d] += ax * y;
      }
    }
  }
  double scale = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < d; ++j) scale = std::max(scale, std::abs(m[i * w + j]));
  }
  const double tiny = 1e-13 * scale;
  for (std::size_t col = 0; col < d; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < d; ++r) {
      if (std::abs(m[r * w + col]) > std::abs(m[piv * w + col])) piv = r;
    }
    if (!(std::abs(m[piv * w + col]) > tiny)) {
      throw SingularSystemError(
          fmt::format("normal equations are singular (pivot {} at column {})", m[piv * w + col], col));
    }
    if (piv != col) {
      for (std::size_t j = 0; j < w; ++j) std::swap(m[piv * w + j], m[col * w + j]);
    }
    for (std::size_t r = col + 1; r < d; ++r) {
      const double f = m[r * w + col] / m[col * w + col];
      if (f == 0.0) continue;
      for (std::size_t j = col; j < w; ++j) m[r * w + j] -= f * m[col * w + j];
    }
  }
  std::vector<double> theta(d);
  for (std::size_t i = d; i-- > 0;) {
    double s = m[i * w + d];
    for (std::size_t j = i + 1; j < d; ++j) s -= m[i * w + j] * theta[j];
    theta[i] = s / m[i * w + i];
  }
  for (double x : theta) {
    if (!std::isfinite(x)) throw SingularSystemError("normal-equation solution is not finite");
  }
  return ParamVector(anchor.anchor.layout_ptr(), std::move(theta));
}

}  // namespace gradmerge
