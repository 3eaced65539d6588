#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <fmt/ostream.h>

#include "gradmerge/errors.hpp"
#include "gradmerge/harness.hpp"

namespace gradmerge::harness {

namespace {

namespace fs = std::filesystem;

struct GlobalOptions {
  std::optional<std::uint64_t> seed;
  std::optional<fs::path> out;
  std::optional<fs::path> config;
};

ExperimentSpec load_config(const GlobalOptions& g) {
  ExperimentSpec spec = g.config ? load_spec(*g.config) : ExperimentSpec{};
  spec.seed = resolve_seed(g.seed, spec.seed);
  return spec;
}

fs::path out_or(const GlobalOptions& g, const fs::path& fallback) { return g.out.value_or(fallback); }

// Loads a checkpoint and names it after its path when the meta has no name.
Checkpoint load_named(const fs::path& stem) {
  Checkpoint ck = load_checkpoint(stem);
  if (!ck.meta().count("name")) ck = ck.with_meta("name", stem.string());
  return ck;
}

ModelSpec model_for(const Checkpoint& ck, const ExperimentSpec& fallback, LossKind& loss_kind) {
  const auto& m = ck.meta();
  if (!m.count("model")) {
    loss_kind = fallback.loss;
    return fallback.model;
  }
  ModelSpec spec;
  spec.kind = parse_model_kind(m.at("model"));
  spec.n_features = std::stoul(m.at("n_features"));
  if (m.count("hidden")) spec.hidden = std::stoul(m.at("hidden"));
  if (m.count("activation")) spec.activation = parse_activation(m.at("activation"));
  loss_kind = m.count("loss") ? parse_loss_kind(m.at("loss")) : fallback.loss;
  return spec;
}

std::map<std::string, std::string> model_meta(const ModelSpec& spec, LossKind loss_kind) {
  std::map<std::string, std::string> meta{{"model", std::string(to_string(spec.kind))},
                                          {"n_features", std::to_string(spec.n_features)},
                                          {"loss", std::string(to_string(loss_kind))}};
  if (spec.hidden) {
    meta["hidden"] = std::to_string(*spec.hidden);
    meta["activation"] = std::string(to_string(spec.activation));
  }
  return meta;
}

Checkpoint add_meta(Checkpoint ck, const std::map<std::string, std::string>& extra) {
  for (const auto& [k, v] : extra) ck = ck.with_meta(k, v);
  return ck;
}

std::vector<double> expand_alphas(const std::vector<double>& given, std::size_t n) {
  if (given.empty()) return std::vector<double>(n, 1.0);
  if (given.size() == 1) return std::vector<double>(n, given[0]);
  if (given.size() != n) {
    throw ConfigError(fmt::format("{} alphas given for {} tasks", given.size(), n));
  }
  return given;
}

std::string join(const std::vector<double>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += fmt::format("{}{}", i ? "," : "", v[i]);
  return s;
}

void write_file(const fs::path& path, const std::function<void(std::ostream&)>& body) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(fmt::format("cannot write '{}'", path.string()));
  body(out);
}

DiagCurvature parse_h0(const std::string& text, const Checkpoint& anchor) {
  if (text == "ckpt") {
    if (anchor.curvature()) return *anchor.curvature();
    fmt::print(stderr, "warning: anchor '{}' has no curvature; using identity H0\n", anchor.name());
    return DiagCurvature::identity(anchor.params().layout_ptr());
  }
  if (text == "zero") return DiagCurvature::zeros(anchor.params().layout_ptr());
  if (text.rfind("identity", 0) == 0) {
    double scale = 1.0;
    if (auto c = text.find(':'); c != std::string::npos) scale = std::stod(text.substr(c + 1));
    if (!(scale > 0.0)) throw ConfigError("identity H0 scale must be positive");
    return DiagCurvature::identity(anchor.params().layout_ptr(), scale);
  }
  throw ConfigError(fmt::format("unknown --h0 '{}' (ckpt, zero, identity:SCALE)", text));
}

}  // namespace

int run_cli(int argc, char** argv) {
  CLI::App app{"Model merging with gradient-mismatch diagnostics"};
  app.fallthrough();
  app.require_subcommand(1);
  GlobalOptions g;
  app.add_option("--seed", g.seed, "Random seed (overrides GRADMERGE_SEED and the config)");
  app.add_option("--out", g.out, "Output directory or checkpoint stem");
  app.add_option("--config", g.config, "Experiment config (JSON)");

  // gen
  auto* gen = app.add_subcommand("gen", "Generate task datasets");

  // train
  auto* train = app.add_subcommand("train", "Train an anchor, task or joint-target model");
  std::string objective;
  std::vector<std::string> train_data;
  std::vector<double> train_alphas;
  std::string train_anchor_stem, train_h0 = "ckpt", train_name;
  std::optional<double> train_delta;
  train->add_option("--objective", objective, "anchor | finetune | joint")
      ->required()
      ->check(CLI::IsMember({"anchor", "finetune", "joint"}));
  train->add_option("--data", train_data, "Dataset JSON file(s)")->required();
  train->add_option("--alpha", train_alphas, "Per-dataset weights for the joint objective");
  train->add_option("--anchor", train_anchor_stem, "Anchor checkpoint stem (finetune, joint)");
  train->add_option("--h0", train_h0, "Anchor precision: ckpt | zero | identity:SCALE");
  train->add_option("--delta", train_delta, "Penalty delta (default from config)");
  train->add_option("--name", train_name, "Name recorded in the checkpoint");

  // fisher
  auto* fisher = app.add_subcommand("fisher", "Attach a curvature estimate to a checkpoint");
  std::string fisher_ckpt, fisher_data, fisher_mode = "sum", fisher_increment;
  std::optional<double> fisher_floor;
  std::optional<std::size_t> fisher_max;
  bool fisher_exact = false;
  fisher->add_option("--ckpt", fisher_ckpt, "Checkpoint stem")->required();
  fisher->add_option("--data", fisher_data, "Dataset JSON")->required();
  fisher->add_option("--mode", fisher_mode, "sum | avg")->check(CLI::IsMember({"sum", "avg"}));
  fisher->add_option("--floor", fisher_floor, "Delta floor added to every entry");
  fisher->add_option("--max-examples", fisher_max, "Use at most this many examples");
  fisher->add_flag("--exact", fisher_exact, "Exact Hessian diagonal instead of the Fisher");
  fisher->add_option("--at-increment", fisher_increment,
                     "Evaluate at (theta - anchor) for this anchor stem (fa1 input)");

  // merge
  auto* merge = app.add_subcommand("merge", "Merge task checkpoints");
  std::string merge_method_name, merge_anchor;
  std::vector<std::string> merge_tasks;
  std::vector<double> merge_alphas;
  double merge_anchor_alpha = 1.0;
  std::optional<double> merge_delta, merge_keep;
  bool merge_elect = false, merge_no_anchor_fisher = false;
  merge->add_option("--method", merge_method_name, "am | wam | ta | fa | fa1 | ties | ours")
      ->required()
      ->check(CLI::IsMember({"am", "wam", "ta", "fa", "fa1", "ties", "ours"}));
  merge->add_option("--anchor", merge_anchor, "Anchor checkpoint stem")->required();
  merge->add_option("--task", merge_tasks, "Task checkpoint stem(s)")->required();
  merge->add_option("--alpha", merge_alphas, "One alpha for all tasks or one per task");
  merge->add_option("--anchor-alpha", merge_anchor_alpha, "Anchor weight for wam");
  merge->add_option("--delta", merge_delta, "Added to the anchor curvature (default from config)");
  merge->add_option("--keep", merge_keep, "ties: fraction of coordinates kept per task");
  merge->add_flag("--elect-sign", merge_elect, "ties: sign election");
  merge->add_flag("--no-anchor-fisher", merge_no_anchor_fisher, "fa: leave the anchor out of the average");

  // remove
  auto* remove = app.add_subcommand("remove", "Remove a task's contribution from the anchor");
  std::string remove_method = "remove-ours", remove_anchor, remove_task_stem, remove_retain, remove_hbar;
  double remove_alpha = 1.0;
  std::optional<double> remove_delta;
  bool remove_exact = false;
  remove->add_option("--method", remove_method, "remove-ours | remove-ta")
      ->check(CLI::IsMember({"remove-ours", "remove-ta"}));
  remove->add_option("--anchor", remove_anchor, "Anchor checkpoint stem (with curvature)")->required();
  remove->add_option("--task", remove_task_stem, "Fine-tuned task checkpoint stem")->required();
  remove->add_option("--retain-data", remove_retain, "Data kept after removal (for the leave-out curvature)");
  remove->add_option("--hbar-minus", remove_hbar, "Checkpoint stem whose curvature is the leave-out curvature");
  remove->add_option("--alpha", remove_alpha, "Removal strength");
  remove->add_option("--delta", remove_delta, "Delta added to the leave-out curvature");
  remove->add_flag("--exact", remove_exact, "Exact Hessian for the leave-out curvature");

  // diagnose
  auto* diagnose = app.add_subcommand("diagnose", "Gradient-mismatch report for merged checkpoints");
  std::string diag_target, diag_anchor;
  std::vector<std::string> diag_merged, diag_tasks, diag_data, diag_test;
  std::vector<double> diag_alphas;
  std::optional<double> diag_delta;
  diagnose->add_option("--target", diag_target, "Target (jointly trained) checkpoint stem")->required();
  diagnose->add_option("--anchor", diag_anchor, "Anchor checkpoint stem")->required();
  diagnose->add_option("--merged", diag_merged, "Merged checkpoint stem(s)")->required();
  diagnose->add_option("--task", diag_tasks, "Task checkpoint stem(s)")->required();
  diagnose->add_option("--data", diag_data, "Training data per task")->required();
  diagnose->add_option("--test", diag_test, "Test data per task");
  diagnose->add_option("--alpha", diag_alphas, "Task weights");
  diagnose->add_option("--delta", diag_delta, "Anchor delta (default from config)");

  // sweep
  auto* sweep = app.add_subcommand("sweep", "Accuracy/loss versus alpha per method");
  std::vector<std::string> sweep_methods;
  std::string sweep_alphas;
  sweep->add_option("--method", sweep_methods, "Methods to sweep (wam, ta, fa1, ties, ours)");
  sweep->add_option("--alphas", sweep_alphas, "start:stop:step or comma list");

  // oracle-check
  auto* oracle = app.add_subcommand("oracle-check", "Run the exact-oracle suite");
  std::size_t oracle_fixtures = 50;
  oracle->add_option("--fixtures", oracle_fixtures, "Random fixtures per oracle family");

  // report
  auto* report = app.add_subcommand("report", "Addition, removal and sweep experiments");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << app.help() << "\n";
    app.exit(e);
    return 1;
  }

  try {
    if (*gen) {
      const ExperimentSpec spec = load_config(g);
      write_tasks(gen_tasks(spec), out_or(g, "data"));
      return 0;
    }

    if (*train) {
      ExperimentSpec spec = load_config(g);
      std::vector<TaskDataset> data;
      for (const auto& f : train_data) data.push_back(load_dataset(f));
      if (!g.config) spec.model.n_features = data.front().n_features();
      TrainConfig cfg = spec.train;
      cfg.seed = spec.seed;
      const double delta = train_delta.value_or(spec.anchor.delta);
      Checkpoint out_ck = [&] {
        if (objective == "anchor") {
          if (data.size() != 1) throw ConfigError("anchor training takes exactly one dataset");
          return train_anchor(spec.model, spec.loss, data[0], delta, cfg);
        }
        if (train_anchor_stem.empty()) throw ConfigError(fmt::format("--anchor is required for {}", objective));
        const Checkpoint anchor = load_named(train_anchor_stem);
        const QuadraticAnchor quad(anchor.params(), parse_h0(train_h0, anchor), delta);
        if (objective == "finetune") {
          if (data.size() != 1) throw ConfigError("finetune takes exactly one dataset");
          const Checkpoint ft = finetune_task(spec.model, spec.loss, data[0], quad, cfg);
          return Checkpoint(ft.params(), std::nullopt, anchor.name(), ft.meta());
        }
        const auto alphas = expand_alphas(train_alphas, data.size());
        return train_joint_target(spec.model, spec.loss, data, alphas, quad, cfg);
      }();
      auto meta = model_meta(spec.model, spec.loss);
      meta["name"] = train_name.empty() ? objective : train_name;
      save_checkpoint(add_meta(out_ck, meta), out_or(g, objective));
      return 0;
    }

    if (*fisher) {
      const ExperimentSpec spec = load_config(g);
      const Checkpoint ck = load_named(fisher_ckpt);
      LossKind lk;
      const ModelSpec model = model_for(ck, spec, lk);
      const TaskDataset data = load_dataset(fisher_data);
      FisherConfig cfg = spec.fisher;
      cfg.mode = fisher_mode == "avg" ? FisherMode::avg : FisherMode::sum;
      if (fisher_floor) cfg.delta_floor = *fisher_floor;
      if (fisher_max) cfg.max_examples = *fisher_max;
      ParamVector at = ck.params();
      if (!fisher_increment.empty()) {
        const Checkpoint anchor = load_named(fisher_increment);
        at = ParamVector(at.layout_ptr(), difference(ck.params(), anchor.params()));
      }
      const DiagCurvature curv = fisher_exact ? exact_hessian_diag(model, lk, at, data)
                                              : fisher_diag(model, lk, at, data, cfg);
      save_checkpoint(ck.with_curvature(curv), out_or(g, fisher_ckpt));
      return 0;
    }

    if (*merge) {
      const ExperimentSpec spec = load_config(g);
      MergeInputs in{load_named(merge_anchor), {}, merge_delta.value_or(spec.anchor.delta), merge_anchor_alpha};
      const auto alphas = expand_alphas(merge_alphas, merge_tasks.size());
      for (std::size_t t = 0; t < merge_tasks.size(); ++t) in.tasks.push_back({alphas[t], load_named(merge_tasks[t])});
      ParamVector merged = [&] {
        const std::string& m = merge_method_name;
        if (m == "am") return merge_average(in, false);
        if (m == "wam") return merge_average(in, true);
        if (m == "ta") return merge_task_arithmetic(in);
        if (m == "fa") return merge_fisher(in, !merge_no_anchor_fisher);
        if (m == "fa1") return merge_fa1(in);
        if (m == "ties") return merge_masked(in, {merge_keep.value_or(spec.mask.keep_fraction), merge_elect});
        return merge_uncertainty(in);
      }();
      auto meta = in.anchor.meta();
      meta["name"] = "merged_" + merge_method_name;
      meta["method"] = merge_method_name;
      meta["alphas"] = join(alphas);
      save_checkpoint(Checkpoint(std::move(merged), std::nullopt, in.anchor.name(), meta), out_or(g, "merged"));
      return 0;
    }

    if (*remove) {
      const ExperimentSpec spec = load_config(g);
      const Checkpoint anchor = load_named(remove_anchor);
      const Checkpoint task = load_named(remove_task_stem);
      const double delta = remove_delta.value_or(spec.anchor.delta);
      ParamVector out = [&] {
        if (remove_method == "remove-ta") {
          return merge_task_arithmetic(MergeInputs{anchor, {{-remove_alpha, task}}, delta, 1.0});
        }
        if (!anchor.curvature()) {
          throw MissingCurvatureError(fmt::format("remove-ours needs curvature on anchor '{}'", anchor.name()));
        }
        DiagCurvature hbar_minus = [&] {
          if (!remove_hbar.empty()) {
            const Checkpoint h = load_named(remove_hbar);
            if (!h.curvature()) {
              throw MissingCurvatureError(fmt::format("checkpoint '{}' has no curvature", h.name()));
            }
            return *h.curvature();
          }
          if (remove_retain.empty()) throw ConfigError("remove-ours needs --retain-data or --hbar-minus");
          LossKind lk;
          const ModelSpec model = model_for(anchor, spec, lk);
          const TaskDataset retained = load_dataset(remove_retain);
          return remove_exact ? exact_hessian_diag(model, lk, anchor.params(), retained)
                              : fisher_diag(model, lk, anchor.params(), retained, spec.fisher);
        }();
        return remove_task(anchor, {remove_alpha, task}, hbar_minus, anchor.curvature()->plus(delta), delta);
      }();
      auto meta = anchor.meta();
      meta["name"] = remove_method;
      meta["method"] = remove_method;
      meta["alphas"] = fmt::format("{}", remove_alpha);
      save_checkpoint(Checkpoint(std::move(out), std::nullopt, anchor.name(), meta), out_or(g, "removed"));
      return 0;
    }

    if (*diagnose) {
      const ExperimentSpec spec = load_config(g);
      const Checkpoint target = load_named(diag_target);
      const Checkpoint anchor = load_named(diag_anchor);
      LossKind lk;
      const ModelSpec model = model_for(target, spec, lk);
      if (diag_tasks.size() != diag_data.size()) throw ConfigError("--task and --data counts differ");
      if (!diag_test.empty() && diag_test.size() != diag_tasks.size()) {
        throw ConfigError("--test count must match --task count");
      }
      const double delta = diag_delta.value_or(spec.anchor.delta);
      DiagnosticFixture fx{spec.name, model, lk,
                           QuadraticAnchor(anchor.params(), parse_h0("ckpt", anchor), delta),
                           target.params(), expand_alphas(diag_alphas, diag_tasks.size()), {}, {}, {}};
      for (std::size_t t = 0; t < diag_tasks.size(); ++t) {
        fx.thetas.push_back(load_named(diag_tasks[t]).params());
        fx.train.push_back(load_dataset(diag_data[t]));
        if (!diag_test.empty()) fx.test.push_back(load_dataset(diag_test[t]));
      }
      std::vector<NamedMerge> methods;
      for (const auto& stem : diag_merged) {
        const Checkpoint m = load_named(stem);
        const std::string label = m.meta().count("method") ? m.meta().at("method") : m.name();
        methods.push_back({label, [p = m.params()](const DiagnosticFixture&) { return p; }});
      }
      const auto rows = mismatch_vs_error_table(methods, std::span<const DiagnosticFixture>(&fx, 1));
      if (g.out) {
        write_file(*g.out, [&](std::ostream& o) { write_mismatch_csv(rows, o); });
      } else {
        write_mismatch_csv(rows, std::cout);
      }
      return 0;
    }

    if (*sweep) {
      ExperimentSpec spec = load_config(g);
      if (!sweep_methods.empty()) {
        for (const auto& m : sweep_methods) {
          if (m != "wam" && m != "ta" && m != "fa1" && m != "ties" && m != "ours") {
            throw ConfigError(fmt::format("method '{}' cannot be swept over alpha (use wam, ta, fa1, ties, ours)", m));
          }
        }
        spec.methods = sweep_methods;
      }
      if (!sweep_alphas.empty()) spec.alphas = parse_alpha_list(sweep_alphas);
      sweep_alpha(spec, out_or(g, "sweep"));
      return 0;
    }

    if (*oracle) {
      const std::uint64_t seed = resolve_seed(g.seed, g.config ? load_spec(*g.config).seed : 0);
      const OracleSuiteResult res = run_oracle_suite(seed, oracle_fixtures);
      if (g.out) {
        write_file(*g.out / "oracle_check.csv", [&](std::ostream& o) { write_oracle_csv(res, o); });
      } else {
        write_oracle_csv(res, std::cout);
      }
      print_oracle_summary(res, std::cout);
      return res.all_pass() ? 0 : 2;
    }

    if (*report) {
      const ExperimentSpec spec = load_config(g);
      const fs::path dir = out_or(g, "report");
      const TrainedSetup setup = train_setup(spec);
      run_addition(setup, dir);
      write_sweep_files(sweep_alpha(setup), dir);
      run_removal(spec, dir);
      return 0;
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.kind() == ErrorKind::numeric ? 2 : 1;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: IoError: " << e.what() << "\n";
    return 1;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: ConfigError: invalid number (" << e.what() << ")\n";
    return 1;
  } catch (const std::out_of_range& e) {
    std::cerr << "error: ConfigError: value out of range (" << e.what() << ")\n";
    return 1;
  }
  return 1;
}

}  // namespace gradmerge::harness
