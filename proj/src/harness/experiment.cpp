#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include <fmt/format.h>

#include "gradmerge/errors.hpp"
#include "gradmerge/harness.hpp"
#include "gradmerge/rng.hpp"

namespace gradmerge::harness {

const std::vector<std::string>& known_methods() {
  static const std::vector<std::string> names{"am", "wam", "ta", "fa", "fa1",
                                              "ties", "ours", "remove-ta", "remove-ours"};
  return names;
}

void ExperimentSpec::validate() const {
  model.validate();
  if (model.kind == ModelKind::linear_regression && loss != LossKind::squared_error) {
    throw ConfigError("linear_regression requires squared_error loss");
  }
  if (model.kind == ModelKind::logistic && loss != LossKind::logistic_nll) {
    throw ConfigError("logistic model requires logistic_nll loss");
  }
  if (n_tasks == 0) throw ConfigError("n_tasks must be at least 1");
  if (classification() && model.n_features < 2) {
    throw ConfigError("classification tasks need n_features >= 2 (last feature is the constant 1)");
  }
  if (data.n_train == 0 || data.n_test == 0) throw ConfigError("n_train and n_test must be positive");
  if (!(data.noise >= 0.0) || !(data.shift >= 0.0) || !(data.rotation >= 0.0) ||
      !std::isfinite(data.separation)) {
    throw ConfigError("data generator parameters must be finite and nonnegative");
  }
  if (!(anchor.delta >= 0.0) || !std::isfinite(anchor.delta)) throw ConfigError("anchor delta must be >= 0");
  fisher.validate();
  train.validate();
  for (const auto& m : methods) {
    if (std::find(known_methods().begin(), known_methods().end(), m) == known_methods().end()) {
      throw ConfigError(fmt::format("unknown method '{}'", m));
    }
  }
  for (const auto& [m, a] : alpha_overrides) {
    if (std::find(known_methods().begin(), known_methods().end(), m) == known_methods().end()) {
      throw ConfigError(fmt::format("alpha override for unknown method '{}'", m));
    }
    if (!std::isfinite(a)) throw ConfigError("alpha override must be finite");
  }
  for (double a : alphas) {
    if (!std::isfinite(a)) throw ConfigError("sweep alphas must be finite");
  }
  if (!std::isfinite(alpha)) throw ConfigError("alpha must be finite");
  if (trainer != "auto" && trainer != "adam" && trainer != "closed_form") {
    throw ConfigError(fmt::format("unknown trainer '{}'", trainer));
  }
  if (trainer == "closed_form" && model.kind != ModelKind::linear_regression) {
    throw ConfigError("closed_form trainer needs a linear_regression model");
  }
  if (curvature != "auto" && curvature != "fisher" && curvature != "exact") {
    throw ConfigError(fmt::format("unknown curvature source '{}'", curvature));
  }
  if (!(mask.keep_fraction > 0.0 && mask.keep_fraction <= 1.0)) {
    throw ConfigError("mask keep_fraction must lie in (0, 1]");
  }
  if (anchor.h0 != "auto" && anchor.h0 != "fisher" && anchor.h0 != "exact" && anchor.h0.rfind("identity", 0) != 0) {
    throw ConfigError(fmt::format("unknown h0 source '{}'", anchor.h0));
  }
}

std::vector<double> parse_alpha_list(const std::string& text) {
  std::vector<double> out;
  auto to_double = [&](const std::string& s) {
    try {
      std::size_t used = 0;
      const double v = std::stod(s, &used);
      if (used != s.size()) throw std::invalid_argument(s);
      return v;
    } catch (const std::exception&) {
      throw ConfigError(fmt::format("cannot parse alpha '{}'", s));
    }
  };
  if (text.find(':') != std::string::npos) {
    std::vector<std::string> parts;
    std::stringstream ss(text);
    for (std::string p; std::getline(ss, p, ':');) parts.push_back(p);
    if (parts.size() != 3) throw ConfigError(fmt::format("alpha range '{}' is not start:stop:step", text));
    const double start = to_double(parts[0]), stop = to_double(parts[1]), step = to_double(parts[2]);
    if (!(step > 0.0) || stop < start) throw ConfigError(fmt::format("invalid alpha range '{}'", text));
    const auto n = static_cast<std::size_t>(std::floor((stop - start) / step + 1e-9));
    for (std::size_t k = 0; k <= n; ++k) {
      // Round to 12 decimals so 0.1 * 3 prints as 0.3.
      out.push_back(std::round((start + static_cast<double>(k) * step) * 1e12) / 1e12);
    }
    return out;
  }
  std::stringstream ss(text);
  for (std::string p; std::getline(ss, p, ',');) out.push_back(to_double(p));
  if (out.empty()) throw ConfigError("empty alpha list");
  return out;
}

namespace {

using nlohmann::json;

template <typename T>
void read(const json& obj, const char* key, T& into) {
  if (obj.contains(key) && !obj.at(key).is_null()) into = obj.at(key).get<T>();
}

}  // namespace

ExperimentSpec spec_from_json(const json& doc) {
  ExperimentSpec s;
  try {
    read(doc, "name", s.name);
    read(doc, "seed", s.seed);
    if (doc.contains("model")) {
      const auto& m = doc.at("model");
      if (m.contains("kind")) s.model.kind = parse_model_kind(m.at("kind").get<std::string>());
      read(m, "n_features", s.model.n_features);
      s.model.hidden.reset();
      if (m.contains("hidden") && !m.at("hidden").is_null()) s.model.hidden = m.at("hidden").get<std::size_t>();
      if (m.contains("activation")) s.model.activation = parse_activation(m.at("activation").get<std::string>());
      if (s.model.kind == ModelKind::linear_regression) s.loss = LossKind::squared_error;
    }
    if (doc.contains("loss")) s.loss = parse_loss_kind(doc.at("loss").get<std::string>());
    read(doc, "n_tasks", s.n_tasks);
    if (doc.contains("data")) {
      const auto& d = doc.at("data");
      read(d, "n_train", s.data.n_train);
      read(d, "n_test", s.data.n_test);
      read(d, "noise", s.data.noise);
      read(d, "separation", s.data.separation);
      read(d, "shift", s.data.shift);
      read(d, "rotation", s.data.rotation);
      if (d.contains("design")) {
        const auto v = d.at("design").get<std::string>();
        if (v == "axis") s.data.design = LinearDesign::axis;
        else if (v == "dense") s.data.design = LinearDesign::dense;
        else throw ConfigError(fmt::format("unknown design '{}'", v));
      }
    }
    if (doc.contains("anchor")) {
      read(doc.at("anchor"), "h0", s.anchor.h0);
      read(doc.at("anchor"), "delta", s.anchor.delta);
    }
    if (doc.contains("fisher")) {
      const auto& f = doc.at("fisher");
      if (f.contains("mode")) {
        const auto v = f.at("mode").get<std::string>();
        if (v == "sum") s.fisher.mode = FisherMode::sum;
        else if (v == "avg") s.fisher.mode = FisherMode::avg;
        else throw ConfigError(fmt::format("unknown Fisher mode '{}'", v));
      }
      read(f, "delta_floor", s.fisher.delta_floor);
      if (f.contains("max_examples")) {
        s.fisher.max_examples.reset();
        if (!f.at("max_examples").is_null()) s.fisher.max_examples = f.at("max_examples").get<std::size_t>();
      }
    }
    if (doc.contains("train")) {
      const auto& t = doc.at("train");
      read(t, "lr", s.train.lr);
      read(t, "beta1", s.train.beta1);
      read(t, "beta2", s.train.beta2);
      read(t, "eps", s.train.eps);
      read(t, "epochs", s.train.epochs);
      read(t, "tol", s.train.tol);
      if (t.contains("batch_size")) {
        const auto& b = t.at("batch_size");
        s.train.batch_size = b.is_string() ? (b.get<std::string>() == "full" ? 0 : throw ConfigError("batch_size must be an integer or \"full\""))
                                           : b.get<std::size_t>();
      }
      if (t.contains("grad_clip_norm") && !t.at("grad_clip_norm").is_null()) {
        s.train.grad_clip_norm = t.at("grad_clip_norm").get<double>();
      }
    }
    read(doc, "trainer", s.trainer);
    read(doc, "curvature", s.curvature);
    read(doc, "methods", s.methods);
    if (doc.contains("alphas")) {
      const auto& a = doc.at("alphas");
      s.alphas = a.is_string() ? parse_alpha_list(a.get<std::string>()) : a.get<std::vector<double>>();
    }
    read(doc, "alpha", s.alpha);
    read(doc, "alpha_overrides", s.alpha_overrides);
    if (doc.contains("mask")) {
      read(doc.at("mask"), "keep_fraction", s.mask.keep_fraction);
      read(doc.at("mask"), "elect_sign", s.mask.elect_sign);
    }
    read(doc, "fa_include_anchor", s.fa_include_anchor);
    if (doc.contains("removal")) {
      const auto& r = doc.at("removal");
      read(r, "task", s.removal.task);
      read(r, "alpha", s.removal.alpha);
      if (r.contains("max_rows") && !r.at("max_rows").is_null()) s.removal.max_rows = r.at("max_rows").get<std::size_t>();
    }
  } catch (const json::exception& e) {
    throw ConfigError(fmt::format("experiment config: {}", e.what()));
  }
  s.validate();
  return s;
}

json spec_to_json(const ExperimentSpec& s) {
  json model{{"kind", to_string(s.model.kind)},
             {"n_features", s.model.n_features},
             {"activation", to_string(s.model.activation)}};
  model["hidden"] = s.model.hidden ? json(*s.model.hidden) : json(nullptr);
  json train{{"lr", s.train.lr},         {"beta1", s.train.beta1}, {"beta2", s.train.beta2},
             {"eps", s.train.eps},       {"epochs", s.train.epochs}, {"tol", s.train.tol},
             {"batch_size", s.train.batch_size}};
  train["grad_clip_norm"] = s.train.grad_clip_norm ? json(*s.train.grad_clip_norm) : json(nullptr);
  json fisher{{"mode", s.fisher.mode == FisherMode::sum ? "sum" : "avg"},
              {"delta_floor", s.fisher.delta_floor}};
  fisher["max_examples"] = s.fisher.max_examples ? json(*s.fisher.max_examples) : json(nullptr);
  json removal{{"task", s.removal.task}, {"alpha", s.removal.alpha}};
  removal["max_rows"] = s.removal.max_rows ? json(*s.removal.max_rows) : json(nullptr);
  return {{"name", s.name},
          {"seed", s.seed},
          {"model", model},
          {"loss", to_string(s.loss)},
          {"n_tasks", s.n_tasks},
          {"data",
           {{"n_train", s.data.n_train},
            {"n_test", s.data.n_test},
            {"noise", s.data.noise},
            {"separation", s.data.separation},
            {"shift", s.data.shift},
            {"rotation", s.data.rotation},
            {"design", s.data.design == LinearDesign::axis ? "axis" : "dense"}}},
          {"anchor", {{"h0", s.anchor.h0}, {"delta", s.anchor.delta}}},
          {"fisher", fisher},
          {"train", train},
          {"trainer", s.trainer},
          {"curvature", s.curvature},
          {"methods", s.methods},
          {"alphas", s.alphas},
          {"alpha", s.alpha},
          {"alpha_overrides", s.alpha_overrides},
          {"mask", {{"keep_fraction", s.mask.keep_fraction}, {"elect_sign", s.mask.elect_sign}}},
          {"fa_include_anchor", s.fa_include_anchor},
          {"removal", removal}};
}

ExperimentSpec load_spec(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError(fmt::format("cannot read config '{}'", path.string()));
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(fmt::format("config '{}': {}", path.string(), e.what()));
  }
  return spec_from_json(doc);
}

std::uint64_t resolve_seed(std::optional<std::uint64_t> flag, std::uint64_t config_seed) {
  if (flag) return *flag;
  if (const char* env = std::getenv("GRADMERGE_SEED"); env && *env) {
    char* end = nullptr;
    const unsigned long long v = std::strtoull(env, &end, 10);
    if (end == env || *end != '\0') {
      throw ConfigError(fmt::format("GRADMERGE_SEED='{}' is not an unsigned integer", env));
    }
    return v;
  }
  return config_seed;
}

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

TaskSplit make_classification_task(const ExperimentSpec& spec, std::size_t t) {
  const std::uint64_t task_seed = splitmix64(spec.seed * 1000003ULL + t);
  Rng rng(task_seed);
  const std::size_t raw = spec.model.n_features - 1;
  std::vector<double> center(raw), axis(raw, 0.0);
  for (double& c : center) c = spec.data.shift * rng.normal();
  const double angle = spec.data.rotation * rng.normal();
  if (raw >= 2) {
    axis[0] = std::cos(angle);
    axis[1] = std::sin(angle);
  } else {
    axis[0] = 1.0;
  }
  auto make = [&](std::size_t n, const std::string& id) {
    std::vector<double> x;
    std::vector<double> y(n);
    x.reserve(n * spec.model.n_features);
    for (std::size_t i = 0; i < n; ++i) {
      y[i] = static_cast<double>(rng.below(2));
      const double sign = y[i] == 1.0 ? 1.0 : -1.0;
      for (std::size_t j = 0; j < raw; ++j) {
        x.push_back(spec.data.noise * rng.normal() + center[j] + sign * spec.data.separation * axis[j]);
      }
      x.push_back(1.0);
    }
    return TaskDataset(id, spec.model.n_features, std::move(x), std::move(y), task_seed);
  };
  TaskDataset train = make(spec.data.n_train, fmt::format("task{}", t));
  TaskDataset test = make(spec.data.n_test, fmt::format("task{}", t));
  return {std::move(train), std::move(test)};
}

TaskSplit make_regression_task(const ExperimentSpec& spec, const std::vector<double>& base,
                               std::size_t t) {
  const std::uint64_t task_seed = splitmix64(spec.seed * 1000003ULL + t);
  Rng rng(task_seed);
  const std::size_t f = spec.model.n_features;
  std::vector<double> w(base);
  for (double& v : w) v += spec.data.shift * rng.normal();
  auto make = [&](std::size_t n, const std::string& id) {
    std::vector<double> x(n * f, 0.0), y(n);
    for (std::size_t i = 0; i < n; ++i) {
      double* row = x.data() + i * f;
      if (spec.data.design == LinearDesign::axis) {
        row[rng.below(f)] = rng.normal();
      } else {
        for (std::size_t j = 0; j < f; ++j) row[j] = rng.normal();
      }
      double out = 0.0;
      if (spec.model.kind == ModelKind::mlp) {
        for (std::size_t j = 0; j < f; ++j) out += std::tanh(row[j] * w[j]);
      } else {
        for (std::size_t j = 0; j < f; ++j) out += row[j] * w[j];
      }
      y[i] = out + spec.data.noise * rng.normal();
    }
    return TaskDataset(id, f, std::move(x), std::move(y), task_seed);
  };
  TaskDataset train = make(spec.data.n_train, fmt::format("task{}", t));
  TaskDataset test = make(spec.data.n_test, fmt::format("task{}", t));
  return {std::move(train), std::move(test)};
}

}  // namespace

std::vector<TaskSplit> gen_tasks(const ExperimentSpec& spec) {
  spec.validate();
  std::vector<TaskSplit> out;
  if (spec.classification()) {
    for (std::size_t t = 0; t < spec.n_tasks; ++t) out.push_back(make_classification_task(spec, t));
    return out;
  }
  Rng base_rng(splitmix64(spec.seed ^ 0x5eedULL));
  std::vector<double> base(spec.model.n_features);
  for (double& v : base) v = base_rng.normal();
  for (std::size_t t = 0; t < spec.n_tasks; ++t) out.push_back(make_regression_task(spec, base, t));
  return out;
}

void write_tasks(const std::vector<TaskSplit>& tasks, const std::filesystem::path& dir) {
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    save_dataset(tasks[t].train, dir / fmt::format("task{}_train.json", t));
    save_dataset(tasks[t].test, dir / fmt::format("task{}_test.json", t));
  }
}

}  // namespace gradmerge::harness
