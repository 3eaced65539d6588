#include "gradmerge/models.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <fmt/format.h>

#include "gradmerge/errors.hpp"
#include "gradmerge/simd/kernels.hpp"

namespace gradmerge {

std::string_view to_string(ModelKind kind) {
  switch (kind) {
    case ModelKind::linear_regression: return "linear_regression";
    case ModelKind::logistic: return "logistic";
    case ModelKind::mlp: return "mlp";
  }
  return "?";
}

std::string_view to_string(Activation act) {
  return act == Activation::tanh ? "tanh" : "relu";
}

std::string_view to_string(LossKind kind) {
  return kind == LossKind::squared_error ? "squared_error" : "logistic_nll";
}

ModelKind parse_model_kind(std::string_view name) {
  if (name == "linear_regression") return ModelKind::linear_regression;
  if (name == "logistic") return ModelKind::logistic;
  if (name == "mlp") return ModelKind::mlp;
  throw ConfigError(fmt::format("unknown model kind '{}'", name));
}

Activation parse_activation(std::string_view name) {
  if (name == "tanh") return Activation::tanh;
  if (name == "relu") return Activation::relu;
  throw ConfigError(fmt::format("unknown activation '{}'", name));
}

LossKind parse_loss_kind(std::string_view name) {
  if (name == "squared_error") return LossKind::squared_error;
  if (name == "logistic_nll") return LossKind::logistic_nll;
  throw ConfigError(fmt::format("unknown loss kind '{}'", name));
}

void ModelSpec::validate() const {
  if (n_features == 0) throw ConfigError("n_features must be positive");
  if (kind == ModelKind::mlp) {
    if (!hidden) throw ConfigError("mlp requires a hidden size");
    if (*hidden == 0) throw ConfigError("hidden size must be positive");
  } else if (hidden) {
    throw ConfigError(fmt::format("hidden size given for non-mlp model '{}'", to_string(kind)));
  }
}

LayoutPtr canonical_layout(const ModelSpec& spec) {
  spec.validate();
  if (spec.kind != ModelKind::mlp) return make_layout({{"w", {spec.n_features}}});
  const std::size_t h = *spec.hidden;
  return make_layout({{"W1", {h, spec.n_features}}, {"b1", {h}}, {"W2", {1, h}}, {"b2", {1}}});
}

// ---------------------------------------------------------------------------
// TaskDataset

TaskDataset::TaskDataset(std::string task_id, std::size_t n_features, std::vector<double> inputs,
                         std::vector<double> targets, std::uint64_t seed)
    : task_id_(std::move(task_id)),
      n_features_(n_features),
      inputs_(std::move(inputs)),
      targets_(std::move(targets)),
      seed_(seed) {
  if (n_features_ == 0) throw ConfigError("dataset needs at least one feature");
  if (inputs_.size() != targets_.size() * n_features_) {
    throw LayoutError(fmt::format("dataset '{}': {} input values for {} rows of {} features",
                                  task_id_, inputs_.size(), targets_.size(), n_features_));
  }
  auto finite = [](double v) { return std::isfinite(v); };
  if (!std::all_of(inputs_.begin(), inputs_.end(), finite) ||
      !std::all_of(targets_.begin(), targets_.end(), finite)) {
    throw NumericError(fmt::format("dataset '{}' contains non-finite values", task_id_));
  }
}

TaskDataset TaskDataset::slice(std::size_t begin, std::size_t end, std::string task_id) const {
  if (begin > end || end > n_examples()) {
    throw ConfigError(fmt::format("slice [{}, {}) out of range for {} examples", begin, end,
                                  n_examples()));
  }
  std::vector<double> x(inputs_.begin() + static_cast<std::ptrdiff_t>(begin * n_features_),
                        inputs_.begin() + static_cast<std::ptrdiff_t>(end * n_features_));
  std::vector<double> y(targets_.begin() + static_cast<std::ptrdiff_t>(begin),
                        targets_.begin() + static_cast<std::ptrdiff_t>(end));
  return TaskDataset(std::move(task_id), n_features_, std::move(x), std::move(y), seed_);
}

TaskDataset TaskDataset::slice(std::size_t begin, std::size_t end) const {
  return slice(begin, end, task_id_);
}

TaskDataset concat(std::span<const TaskDataset> parts, std::string task_id) {
  if (parts.empty()) throw ConfigError("concat of zero datasets");
  const std::size_t f = parts.front().n_features();
  std::vector<double> x, y;
  for (const auto& p : parts) {
    if (p.n_features() != f) {
      throw LayoutError(fmt::format("concat: '{}' has {} features, expected {}", p.task_id(),
                                    p.n_features(), f));
    }
    x.insert(x.end(), p.inputs().begin(), p.inputs().end());
    y.insert(y.end(), p.targets().begin(), p.targets().end());
  }
  return TaskDataset(std::move(task_id), f, std::move(x), std::move(y), parts.front().seed());
}

nlohmann::json dataset_to_json(const TaskDataset& data) {
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t i = 0; i < data.n_examples(); ++i) {
    auto r = data.row(i);
    rows.push_back(std::vector<double>(r.begin(), r.end()));
  }
  return {{"task_id", data.task_id()},
          {"seed", data.seed()},
          {"n_features", data.n_features()},
          {"inputs", std::move(rows)},
          {"targets", std::vector<double>(data.targets().begin(), data.targets().end())}};
}

TaskDataset dataset_from_json(const nlohmann::json& doc) {
  try {
    const auto& rows = doc.at("inputs");
    const auto& targets = doc.at("targets");
    std::size_t f = 0;
    if (doc.contains("n_features")) {
      f = doc.at("n_features").get<std::size_t>();
    } else if (!rows.empty()) {
      f = rows.at(0).size();
    }
    if (f == 0) throw ConfigError("dataset JSON: cannot determine feature count");
    std::vector<double> x;
    x.reserve(rows.size() * f);
    for (const auto& r : rows) {
      if (r.size() != f) throw LayoutError("dataset JSON: ragged input rows");
      for (const auto& v : r) x.push_back(v.get<double>());
    }
    return TaskDataset(doc.at("task_id").get<std::string>(), f, std::move(x),
                       targets.get<std::vector<double>>(), doc.value("seed", std::uint64_t{0}));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(fmt::format("dataset JSON: {}", e.what()));
  }
}

void save_dataset(const TaskDataset& data, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(fmt::format("cannot write '{}'", path.string()));
  out << dataset_to_json(data).dump() << '\n';
  if (!out) throw IoError(fmt::format("write failed for '{}'", path.string()));
}

TaskDataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(fmt::format("cannot read '{}'", path.string()));
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(fmt::format("'{}': {}", path.string(), e.what()));
  }
  return dataset_from_json(doc);
}

// ---------------------------------------------------------------------------
// Loss and backprop

double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

namespace {

double softplus(double z) { return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))); }

// Per-example loss value and its derivative with respect to the model output.
struct OutputLoss {
  double value;
  double dvalue;
};

OutputLoss output_loss(LossKind kind, double f, double y) {
  if (kind == LossKind::squared_error) {
    const double r = f - y;
    return {0.5 * r * r, r};
  }
  return {softplus(f) - y * f, sigmoid(f) - y};
}

double activate(Activation act, double z) { return act == Activation::tanh ? std::tanh(z) : std::max(z, 0.0); }

double activate_grad(Activation act, double z, double a) {
  if (act == Activation::tanh) return 1.0 - a * a;
  return z > 0.0 ? 1.0 : 0.0;
}

// Evaluates one example; when g is non-empty, adds weight * d(loss)/d(theta) into it.
class Evaluator {
 public:
  Evaluator(const ModelSpec& spec, LossKind loss_kind, std::span<const double> theta)
      : spec_(spec), loss_kind_(loss_kind), theta_(theta) {
    if (spec.kind == ModelKind::mlp) {
      hidden_ = *spec.hidden;
      z_.resize(hidden_);
      a_.resize(hidden_);
    }
  }

  double output(std::span<const double> x) {
    if (spec_.kind != ModelKind::mlp) return simd::dot(theta_, x);
    const std::size_t f = spec_.n_features;
    const double* w1 = theta_.data();
    const double* b1 = w1 + hidden_ * f;
    const double* w2 = b1 + hidden_;
    const double b2 = w2[hidden_];
    for (std::size_t j = 0; j < hidden_; ++j) {
      z_[j] = simd::dot(std::span<const double>(w1 + j * f, f), x) + b1[j];
      a_[j] = activate(spec_.activation, z_[j]);
    }
    return simd::dot(std::span<const double>(w2, hidden_), a_) + b2;
  }

  double accumulate(std::span<const double> x, double y, double weight, std::span<double> g) {
    const double f = output(x);
    const OutputLoss l = output_loss(loss_kind_, f, y);
    if (g.empty()) return l.value;
    const double r = weight * l.dvalue;
    if (spec_.kind != ModelKind::mlp) {
      simd::axpy(r, x, g);
      return l.value;
    }
    const std::size_t nf = spec_.n_features;
    const double* w2 = theta_.data() + hidden_ * nf + hidden_;
    double* gw1 = g.data();
    double* gb1 = gw1 + hidden_ * nf;
    double* gw2 = gb1 + hidden_;
    for (std::size_t j = 0; j < hidden_; ++j) {
      gw2[j] += r * a_[j];
      const double dz = r * w2[j] * activate_grad(spec_.activation, z_[j], a_[j]);
      simd::axpy(dz, x, std::span<double>(gw1 + j * nf, nf));
      gb1[j] += dz;
    }
    gw2[hidden_] += r;
    return l.value;
  }

 private:
  const ModelSpec& spec_;
  LossKind loss_kind_;
  std::span<const double> theta_;
  std::size_t hidden_ = 0;
  std::vector<double> z_;
  std::vector<double> a_;
};

void check_finite(double v, const char* what) {
  if (!std::isfinite(v)) throw NumericError(fmt::format("{} is not finite", what));
}

}  // namespace

void check_compatible(const ModelSpec& spec, LossKind loss_kind, const ParamVector& theta,
                      const TaskDataset& data) {
  spec.validate();
  if (spec.kind == ModelKind::linear_regression && loss_kind != LossKind::squared_error) {
    throw ConfigError("linear_regression requires squared_error loss");
  }
  if (spec.kind == ModelKind::logistic && loss_kind != LossKind::logistic_nll) {
    throw ConfigError("logistic model requires logistic_nll loss");
  }
  if (loss_kind == LossKind::logistic_nll) {
    for (double y : data.targets()) {
      if (y != 0.0 && y != 1.0) {
        throw ConfigError(fmt::format("dataset '{}': logistic_nll needs {{0,1}} targets, got {}",
                                      data.task_id(), y));
      }
    }
  }
  if (theta.layout() != *canonical_layout(spec)) {
    throw LayoutError(fmt::format("parameter layout does not match {} model", to_string(spec.kind)));
  }
  if (data.n_features() != spec.n_features) {
    throw LayoutError(fmt::format("dataset '{}' has {} features, model expects {}", data.task_id(),
                                  data.n_features(), spec.n_features));
  }
}

double loss(const ModelSpec& spec, LossKind loss_kind, const ParamVector& theta,
            const TaskDataset& data, Reduce reduce) {
  check_compatible(spec, loss_kind, theta, data);
  if (reduce == Reduce::mean && data.empty()) {
    throw EmptyDataError(fmt::format("mean loss over empty dataset '{}'", data.task_id()));
  }
  Evaluator ev(spec, loss_kind, theta.values());
  double total = 0.0;
  for (std::size_t i = 0; i < data.n_examples(); ++i) {
    total += ev.accumulate(data.row(i), data.target(i), 0.0, {});
  }
  if (reduce == Reduce::mean) total /= static_cast<double>(data.n_examples());
  check_finite(total, "loss");
  return total;
}

ParamVector grad(const ModelSpec& spec, LossKind loss_kind, const ParamVector& theta,
                 const TaskDataset& data, Reduce reduce) {
  check_compatible(spec, loss_kind, theta, data);
  if (reduce == Reduce::mean && data.empty()) {
    throw EmptyDataError(fmt::format("mean gradient over empty dataset '{}'", data.task_id()));
  }
  const double weight =
      reduce == Reduce::mean ? 1.0 / static_cast<double>(data.n_examples()) : 1.0;
  std::vector<double> g(theta.size(), 0.0);
  Evaluator ev(spec, loss_kind, theta.values());
  double total = 0.0;
  for (std::size_t i = 0; i < data.n_examples(); ++i) {
    total += ev.accumulate(data.row(i), data.target(i), weight, g);
  }
  check_finite(total, "loss");
  for (double v : g) check_finite(v, "gradient");
  return ParamVector(theta.layout_ptr(), std::move(g));
}

std::vector<ParamVector> per_example_grads(const ModelSpec& spec, LossKind loss_kind,
                                           const ParamVector& theta, const TaskDataset& data) {
  check_compatible(spec, loss_kind, theta, data);
  Evaluator ev(spec, loss_kind, theta.values());
  std::vector<ParamVector> out;
  out.reserve(data.n_examples());
  for (std::size_t i = 0; i < data.n_examples(); ++i) {
    std::vector<double> g(theta.size(), 0.0);
    check_finite(ev.accumulate(data.row(i), data.target(i), 1.0, g), "loss");
    for (double v : g) check_finite(v, "gradient");
    out.emplace_back(theta.layout_ptr(), std::move(g));
  }
  return out;
}

ParamVector fd_grad(const ModelSpec& spec, LossKind loss_kind, const ParamVector& theta,
                    const TaskDataset& data, double h, Reduce reduce) {
  if (!(h > 0.0) || !std::isfinite(h)) {
    throw ConfigError(fmt::format("finite-difference step must be positive, got {}", h));
  }
  std::vector<double> work(theta.values().begin(), theta.values().end());
  std::vector<double> g(theta.size());
  for (std::size_t j = 0; j < work.size(); ++j) {
    const double orig = work[j];
    work[j] = orig + h;
    const double up = loss(spec, loss_kind, ParamVector(theta.layout_ptr(), work), data, reduce);
    work[j] = orig - h;
    const double down = loss(spec, loss_kind, ParamVector(theta.layout_ptr(), work), data, reduce);
    work[j] = orig;
    g[j] = (up - down) / (2.0 * h);
  }
  return ParamVector(theta.layout_ptr(), std::move(g));
}

std::vector<double> predict(const ModelSpec& spec, const ParamVector& theta,
                            const TaskDataset& data) {
  const LossKind lk =
      spec.kind == ModelKind::logistic ? LossKind::logistic_nll : LossKind::squared_error;
  if (theta.layout() != *canonical_layout(spec)) {
    throw LayoutError(fmt::format("parameter layout does not match {} model", to_string(spec.kind)));
  }
  if (data.n_features() != spec.n_features) {
    throw LayoutError(fmt::format("dataset '{}' has {} features, model expects {}", data.task_id(),
                                  data.n_features(), spec.n_features));
  }
  Evaluator ev(spec, lk, theta.values());
  std::vector<double> out(data.n_examples());
  for (std::size_t i = 0; i < data.n_examples(); ++i) {
    out[i] = ev.output(data.row(i));
    check_finite(out[i], "prediction");
  }
  return out;
}

std::size_t correct_count(const ModelSpec& spec, const ParamVector& theta,
                          const TaskDataset& data) {
  const auto out = predict(spec, theta, data);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < out.size(); ++i) {
    // sigmoid(f) >= 0.5 exactly when f >= 0
    const double label = out[i] >= 0.0 ? 1.0 : 0.0;
    if (label == data.target(i)) ++correct;
  }
  return correct;
}

double accuracy(const ModelSpec& spec, const ParamVector& theta, const TaskDataset& data) {
  if (data.empty()) {
    throw EmptyDataError(fmt::format("accuracy over empty dataset '{}'", data.task_id()));
  }
  return static_cast<double>(correct_count(spec, theta, data)) /
         static_cast<double>(data.n_examples());
}

}  // namespace gradmerge
