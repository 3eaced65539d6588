#include <algorithm>
#include <cmath>
#include <fstream>

#include <fmt/format.h>
#include <fmt/ostream.h>

#include "gradmerge/errors.hpp"
#include "gradmerge/harness.hpp"

namespace gradmerge::harness {

void write_summary_csv(const std::vector<SummaryRow>& rows, std::ostream& out) {
  out << "method,alpha,task,metric,value\n";
  for (const auto& r : rows) fmt::print(out, "{},{},{},{},{}\n", r.method, r.alpha, r.task, r.metric, r.value);
}

namespace {

std::map<std::string, std::string> model_meta(const ExperimentSpec& spec, std::string name) {
  std::map<std::string, std::string> meta{
      {"name", std::move(name)},
      {"model", std::string(to_string(spec.model.kind))},
      {"n_features", std::to_string(spec.model.n_features)},
      {"loss", std::string(to_string(spec.loss))},
  };
  if (spec.model.hidden) {
    meta["hidden"] = std::to_string(*spec.model.hidden);
    meta["activation"] = std::string(to_string(spec.model.activation));
  }
  return meta;
}

Checkpoint with_meta(Checkpoint ckpt, const std::map<std::string, std::string>& extra) {
  for (const auto& [k, v] : extra) ckpt = ckpt.with_meta(k, v);
  return ckpt;
}

struct Trainer {
  const ExperimentSpec& spec;
  bool closed_form;
  bool exact;

  Checkpoint anchor(const TaskDataset& data) const {
    if (!closed_form) return train_anchor(spec.model, spec.loss, data, spec.anchor.delta, spec.train);
    const LayoutPtr layout = canonical_layout(spec.model);
    const double one = 1.0;
    const ParamVector theta = closed_form_solve(std::span<const TaskDataset>(&data, 1),
                                                std::span<const double>(&one, 1),
                                                QuadraticAnchor::ridge(layout, spec.anchor.delta));
    return Checkpoint(theta, std::nullopt, std::nullopt,
                      {{"objective", "anchor"}, {"trainer", "closed_form"},
                       {"delta", fmt::format("{}", spec.anchor.delta)}, {"seed", std::to_string(spec.seed)}});
  }

  Checkpoint joint(std::span<const TaskDataset> data, std::span<const double> alphas,
                   const QuadraticAnchor& quad, const std::string& objective) const {
    if (!closed_form) {
      if (data.size() == 1 && alphas[0] == 1.0) {
        return finetune_task(spec.model, spec.loss, data[0], quad, spec.train);
      }
      return train_joint_target(spec.model, spec.loss, data, alphas, quad, spec.train);
    }
    return Checkpoint(closed_form_solve(data, alphas, quad), std::nullopt, std::nullopt,
                      {{"objective", objective}, {"trainer", "closed_form"},
                       {"delta", fmt::format("{}", quad.delta)}, {"seed", std::to_string(spec.seed)}});
  }

  DiagCurvature curvature(const ParamVector& theta, const TaskDataset& data) const {
    if (exact) return exact_hessian_diag(spec.model, spec.loss, theta, data);
    return fisher_diag(spec.model, spec.loss, theta, data, spec.fisher);
  }

  DiagCurvature anchor_h0(const ParamVector& theta, const TaskDataset& data) const {
    const std::string& src = spec.anchor.h0;
    if (src == "auto") return curvature(theta, data);
    if (src == "fisher") {
      return anchor_curvature(spec.model, spec.loss, h0_source::Fisher{&theta, &data, spec.fisher});
    }
    if (src == "exact") return anchor_curvature(spec.model, spec.loss, h0_source::Exact{&theta, &data});
    double scale = 1.0;
    if (const auto colon = src.find(':'); colon != std::string::npos) {
      try {
        scale = std::stod(src.substr(colon + 1));
      } catch (const std::exception&) {
        throw ConfigError(fmt::format("cannot parse h0 scale in '{}'", src));
      }
    }
    return anchor_curvature(spec.model, spec.loss, h0_source::Identity{scale});
  }
};

Trainer make_trainer(const ExperimentSpec& spec) {
  const bool linear = spec.model.kind == ModelKind::linear_regression;
  return {spec, spec.trainer == "closed_form" || (spec.trainer == "auto" && linear),
          spec.curvature == "exact" || (spec.curvature == "auto" && linear)};
}

struct Metrics {
  std::vector<double> loss;
  std::vector<double> accuracy;
  double avg_loss = 0.0;
  double avg_accuracy = 0.0;
  double true_avg_accuracy = 0.0;
};

Metrics evaluate(const ExperimentSpec& spec, const ParamVector& theta, const std::vector<TaskSplit>& data) {
  Metrics m;
  std::size_t correct = 0, total = 0;
  for (const auto& split : data) {
    m.loss.push_back(loss(spec.model, spec.loss, theta, split.test, Reduce::mean));
    if (spec.classification()) {
      const std::size_t c = correct_count(spec.model, theta, split.test);
      m.accuracy.push_back(static_cast<double>(c) / static_cast<double>(split.test.n_examples()));
      correct += c;
      total += split.test.n_examples();
    }
  }
  const double n = static_cast<double>(data.size());
  for (double l : m.loss) m.avg_loss += l / n;
  for (double a : m.accuracy) m.avg_accuracy += a / n;
  if (total > 0) m.true_avg_accuracy = static_cast<double>(correct) / static_cast<double>(total);
  return m;
}

void push_metrics(std::vector<SummaryRow>& rows, const ExperimentSpec& spec, const std::string& method,
                  double alpha, const Metrics& m, const std::vector<TaskSplit>& data) {
  for (std::size_t t = 0; t < data.size(); ++t) {
    const std::string task = data[t].test.task_id();
    rows.push_back({method, alpha, task, "loss", m.loss[t]});
    if (spec.classification()) rows.push_back({method, alpha, task, "accuracy", m.accuracy[t]});
  }
  rows.push_back({method, alpha, "avg", "loss", m.avg_loss});
  if (spec.classification()) {
    rows.push_back({method, alpha, "avg", "accuracy", m.avg_accuracy});
    rows.push_back({method, alpha, "true_avg", "accuracy", m.true_avg_accuracy});
  }
}

double headline(const ExperimentSpec& spec, const Metrics& m) {
  return spec.classification() ? m.avg_accuracy : m.avg_loss;
}

void write_text(const std::filesystem::path& path, const std::function<void(std::ostream&)>& body) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(fmt::format("cannot write '{}'", path.string()));
  body(out);
  if (!out) throw IoError(fmt::format("write failed for '{}'", path.string()));
}

std::string alphas_meta(std::size_t n, double alpha) {
  std::string s;
  for (std::size_t i = 0; i < n; ++i) s += fmt::format("{}{}", i ? "," : "", alpha);
  return s;
}

}  // namespace

TrainedSetup train_setup(const ExperimentSpec& spec) {
  return train_setup(spec, gen_tasks(spec));
}

TrainedSetup train_setup(const ExperimentSpec& spec_in, std::vector<TaskSplit> data) {
  ExperimentSpec spec = spec_in;
  spec.train.seed = spec.seed;
  spec.validate();
  if (data.size() < 2) throw ConfigError("merging experiments need n_tasks >= 2 (anchor task plus one or more tasks)");
  spec.n_tasks = data.size();
  const Trainer tr = make_trainer(spec);
  const TaskDataset& anchor_data = data[0].train;

  Checkpoint anchor_ckpt = tr.anchor(anchor_data);
  const DiagCurvature h0 = tr.anchor_h0(anchor_ckpt.params(), anchor_data);
  anchor_ckpt = with_meta(anchor_ckpt.with_curvature(h0), model_meta(spec, "anchor"));
  QuadraticAnchor quad(anchor_ckpt.params(), h0, spec.anchor.delta);

  std::vector<Checkpoint> tasks;
  std::vector<double> residuals;
  std::vector<DiagCurvature> inc_fishers;
  const ParamVector& a = anchor_ckpt.params();
  for (std::size_t t = 1; t < data.size(); ++t) {
    const TaskDataset& d = data[t].train;
    const double one = 1.0;
    Checkpoint ck = tr.joint(std::span<const TaskDataset>(&d, 1), std::span<const double>(&one, 1), quad, "finetune");
    residuals.push_back(stationarity_residual(spec.model, spec.loss, std::span<const TaskDataset>(&d, 1),
                                              std::span<const double>(&one, 1), quad, ck.params()));
    ck = with_meta(ck.with_curvature(tr.curvature(ck.params(), d)), model_meta(spec, d.task_id()));
    tasks.push_back(Checkpoint(ck.params(), ck.curvature(), std::string("anchor"), ck.meta()));
    const ParamVector inc(a.layout_ptr(), difference(ck.params(), a));
    inc_fishers.push_back(fisher_diag(spec.model, spec.loss, inc, d, spec.fisher));
  }
  return TrainedSetup{spec,         std::move(data),      std::move(anchor_ckpt), std::move(quad),
                      std::move(tasks), std::move(residuals), std::move(inc_fishers), tr.closed_form,
                      tr.exact};
}

ParamVector merge_method(const TrainedSetup& setup, const std::string& method, double alpha) {
  const ExperimentSpec& spec = setup.spec;
  MergeInputs in{setup.anchor, {}, spec.anchor.delta, 1.0};
  for (std::size_t t = 0; t < setup.tasks.size(); ++t) {
    if (method == "fa1") {
      in.tasks.push_back({alpha, setup.tasks[t].with_curvature(setup.increment_fishers[t])});
    } else {
      in.tasks.push_back({alpha, setup.tasks[t]});
    }
  }
  if (method == "am") return merge_average(in, false);
  if (method == "wam") {
    const double total = 1.0 + alpha * static_cast<double>(in.tasks.size());
    if (!(total > 0.0)) throw ConfigError("wam weights must sum to a positive value");
    in.anchor_alpha = 1.0 / total;
    for (auto& t : in.tasks) t.alpha = alpha / total;
    return merge_average(in, true);
  }
  if (method == "ta") return merge_task_arithmetic(in);
  if (method == "fa") return merge_fisher(in, spec.fa_include_anchor);
  if (method == "fa1") return merge_fa1(in);
  if (method == "ties") return merge_masked(in, spec.mask);
  if (method == "ours") return merge_uncertainty(in);
  throw ConfigError(fmt::format("'{}' is not an addition merge method", method));
}

AdditionResult run_addition(const ExperimentSpec& spec,
                            const std::optional<std::filesystem::path>& out_dir) {
  return run_addition(train_setup(spec), out_dir);
}

AdditionResult run_addition(const TrainedSetup& setup,
                            const std::optional<std::filesystem::path>& out_dir) {
  const ExperimentSpec& spec = setup.spec;
  const Trainer tr = make_trainer(spec);
  std::vector<TaskDataset> train_sets;
  std::vector<TaskDataset> test_sets;
  for (std::size_t t = 1; t < setup.data.size(); ++t) {
    train_sets.push_back(setup.data[t].train);
    test_sets.push_back(setup.data[t].test);
  }
  const std::vector<double> alphas(train_sets.size(), spec.alpha);
  Checkpoint target = with_meta(tr.joint(train_sets, alphas, setup.quad, "joint"), model_meta(spec, "target"));

  AdditionResult res{{}, {}, {}, target};
  push_metrics(res.summary, spec, "anchor", 0.0, evaluate(spec, setup.anchor.params(), setup.data), setup.data);
  push_metrics(res.summary, spec, "target", spec.alpha, evaluate(spec, target.params(), setup.data), setup.data);

  DiagnosticFixture fx{spec.name, spec.model, spec.loss, setup.quad, target.params(), alphas,
                       {}, train_sets, test_sets};
  for (const auto& t : setup.tasks) fx.thetas.push_back(t.params());

  std::vector<NamedMerge> named;
  std::map<std::string, double> merged_alpha;
  auto flush_summary = [&] {
    if (out_dir) write_text(*out_dir / "summary.csv", [&](std::ostream& o) { write_summary_csv(res.summary, o); });
  };
  try {
    for (const auto& method : spec.methods) {
      if (method == "remove-ta" || method == "remove-ours") continue;
      const auto ov = spec.alpha_overrides.find(method);
      const double alpha = ov == spec.alpha_overrides.end() ? spec.alpha : ov->second;
      const std::string label = ov == spec.alpha_overrides.end() ? method : method + "+oracle-tuned";
      const ParamVector merged = merge_method(setup, method, alpha);
      push_metrics(res.summary, spec, label, alpha, evaluate(spec, merged, setup.data), setup.data);
      const MismatchReport rep = mismatch_report(fx, merged);
      res.summary.push_back({label, alpha, "all", "mismatch_l2", rep.total_weighted_norm});
      res.summary.push_back({label, alpha, "all", "error_l2", rep.error_norm});
      res.merged.emplace(label, merged);
      merged_alpha[label] = alpha;
      named.push_back({label, [merged](const DiagnosticFixture&) { return merged; }});
    }
  } catch (...) {
    flush_summary();
    throw;
  }
  res.report = mismatch_vs_error_table(named, std::span<const DiagnosticFixture>(&fx, 1));

  if (out_dir) {
    write_text(*out_dir / "report.csv", [&](std::ostream& o) { write_mismatch_csv(res.report, o); });
    flush_summary();
    const auto ck = *out_dir / "checkpoints";
    save_checkpoint(setup.anchor, ck / "anchor");
    for (const auto& t : setup.tasks) save_checkpoint(t, ck / t.name());
    save_checkpoint(target, ck / "target");
    for (const auto& [label, merged] : res.merged) {
      const double alpha = merged_alpha.at(label);
      auto meta = model_meta(spec, "merged_" + label);
      meta["method"] = label;
      meta["alphas"] = alphas_meta(setup.tasks.size(), alpha);
      save_checkpoint(Checkpoint(merged, std::nullopt, std::string("anchor"), meta), ck / ("merged_" + label));
    }
  }
  return res;
}

RemovalResult run_removal(const ExperimentSpec& spec_in,
                          const std::optional<std::filesystem::path>& out_dir) {
  ExperimentSpec spec = spec_in;
  spec.train.seed = spec.seed;
  spec.validate();
  const std::size_t r = spec.removal.task;
  if (r == 0 || r >= spec.n_tasks) {
    throw ConfigError(fmt::format("removal.task must be in [1, {}), got {}", spec.n_tasks, r));
  }
  const Trainer tr = make_trainer(spec);
  const std::vector<TaskSplit> data = gen_tasks(spec);
  const TaskDataset& retained = data[0].train;
  TaskDataset removed = data[r].train;
  if (spec.removal.max_rows && *spec.removal.max_rows < removed.n_examples()) {
    removed = removed.slice(0, *spec.removal.max_rows);
  }
  const std::vector<TaskDataset> parts{retained, removed};
  const TaskDataset large = concat(parts, "large");

  Checkpoint anchor = tr.anchor(large);
  const double alpha = spec.removal.alpha;
  ParamVector removed_ta = anchor.params();
  ParamVector removed_ours = anchor.params();
  Checkpoint task_ckpt = anchor;
  if (!removed.empty()) {
    const DiagCurvature h0 = tr.anchor_h0(anchor.params(), large);
    anchor = with_meta(anchor.with_curvature(h0), model_meta(spec, "anchor"));
    const QuadraticAnchor quad(anchor.params(), h0, spec.anchor.delta);
    const double one = 1.0;
    task_ckpt = tr.joint(std::span<const TaskDataset>(&removed, 1), std::span<const double>(&one, 1), quad,
                         "finetune");
    task_ckpt = with_meta(task_ckpt.with_curvature(tr.curvature(task_ckpt.params(), removed)),
                          model_meta(spec, "removed_task"));
    const DiagCurvature hbar_minus = tr.curvature(anchor.params(), retained);
    MergeInputs ta_in{anchor, {{-alpha, task_ckpt}}, spec.anchor.delta, 1.0};
    removed_ta = merge_task_arithmetic(ta_in);
    removed_ours = remove_task(anchor, {alpha, task_ckpt}, hbar_minus, h0.plus(spec.anchor.delta),
                               spec.anchor.delta);
  }
  const Checkpoint retrain = tr.anchor(retained);

  RemovalResult res{{}, l2_distance(removed_ta, retrain.params()), l2_distance(removed_ours, retrain.params()),
                    anchor.params(), retrain.params(), removed_ta, removed_ours};
  const std::vector<TaskSplit> eval{data[0], data[r]};
  auto add = [&](const std::string& method, double a, const ParamVector& theta) {
    res.summary.push_back({method, a, "all", "distance_to_retrain", l2_distance(theta, retrain.params())});
    const Metrics m = evaluate(spec, theta, eval);
    for (std::size_t k = 0; k < eval.size(); ++k) {
      const std::string task = k == 0 ? "retained" : "removed";
      res.summary.push_back({method, a, task, "loss", m.loss[k]});
      if (spec.classification()) res.summary.push_back({method, a, task, "accuracy", m.accuracy[k]});
    }
  };
  add("anchor", 0.0, anchor.params());
  add("retrain", 0.0, retrain.params());
  add("remove-ta", alpha, removed_ta);
  add("remove-ours", alpha, removed_ours);

  if (out_dir) {
    write_text(*out_dir / "removal.csv", [&](std::ostream& o) { write_summary_csv(res.summary, o); });
    const auto ck = *out_dir / "checkpoints" / "removal";
    save_checkpoint(anchor, ck / "anchor");
    save_checkpoint(with_meta(retrain, model_meta(spec, "retrain")), ck / "retrain");
    if (!removed.empty()) save_checkpoint(task_ckpt, ck / "removed_task");
    for (const auto& [name, theta] : {std::pair<std::string, const ParamVector&>{"remove-ta", removed_ta},
                                      std::pair<std::string, const ParamVector&>{"remove-ours", removed_ours}}) {
      auto meta = model_meta(spec, name);
      meta["method"] = name;
      meta["alphas"] = fmt::format("{}", alpha);
      save_checkpoint(Checkpoint(theta, std::nullopt, std::string("anchor"), meta), ck / name);
    }
  }
  return res;
}

SweepResult sweep_alpha(const TrainedSetup& setup) {
  const ExperimentSpec& spec = setup.spec;
  if (spec.alphas.empty()) throw ConfigError("sweep needs at least one alpha");
  static const std::vector<std::string> sweepable{"wam", "ta", "fa1", "ties", "ours"};
  SweepResult res;
  res.anchor_value = headline(spec, evaluate(spec, setup.anchor.params(), setup.data));
  const std::string metric = spec.classification() ? "accuracy" : "loss";
  for (const auto& method : spec.methods) {
    if (std::find(sweepable.begin(), sweepable.end(), method) == sweepable.end()) continue;
    SweepSeries s{method, {}, {}};
    for (double a : spec.alphas) {
      const double v = headline(spec, evaluate(spec, merge_method(setup, method, a), setup.data));
      s.alphas.push_back(a);
      s.values.push_back(v);
      res.rows.push_back({method, a, "avg", metric, v});
    }
    res.series.push_back(std::move(s));
  }
  if (res.series.empty()) {
    throw ConfigError("no sweepable methods configured (sweep supports wam, ta, fa1, ties, ours)");
  }
  return res;
}

SweepResult sweep_alpha(const ExperimentSpec& spec,
                        const std::optional<std::filesystem::path>& out_dir) {
  SweepResult res = sweep_alpha(train_setup(spec));
  if (out_dir) write_sweep_files(res, *out_dir);
  return res;
}

void write_sweep_files(const SweepResult& result, const std::filesystem::path& dir) {
  write_text(dir / "sweep.csv", [&](std::ostream& o) { write_summary_csv(result.rows, o); });
  for (const auto& s : result.series) {
    write_text(dir / fmt::format("sweep_{}.dat", s.method), [&](std::ostream& o) {
      fmt::print(o, "# alpha {}\n", s.method);
      for (std::size_t i = 0; i < s.alphas.size(); ++i) fmt::print(o, "{} {}\n", s.alphas[i], s.values[i]);
    });
  }
}

}  // namespace gradmerge::harness
