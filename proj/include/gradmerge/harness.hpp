#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "gradmerge/curvature.hpp"
#include "gradmerge/diagnostics.hpp"
#include "gradmerge/merging.hpp"
#include "gradmerge/models.hpp"
#include "gradmerge/oracles.hpp"
#include "gradmerge/training.hpp"

namespace gradmerge::harness {

// ---------------------------------------------------------------------------
// Experiment description

struct DataConfig {
  std::size_t n_train = 500;
  std::size_t n_test = 500;
  double noise = 1.0;        // feature noise (classification) or target noise (regression)
  double separation = 2.0;   // distance of each class mean from the task center
  double shift = 0.5;        // std. dev. of per-task centers / planted-weight offsets
  double rotation = 0.3;     // std. dev. (radians) of per-task class-axis rotation
  LinearDesign design = LinearDesign::axis;  // regression inputs
};

struct AnchorConfig {
  std::string h0 = "auto";  // auto (same source as task curvature) | fisher | exact | identity:SCALE
  double delta = 1e-2;
};

struct RemovalConfig {
  std::size_t task = 1;                   // which task's data is removed
  std::optional<std::size_t> max_rows;    // truncate the removed slice
  double alpha = 1.0;
};

struct ExperimentSpec {
  std::string name = "default";
  std::uint64_t seed = 0;
  ModelSpec model{ModelKind::logistic, 3, std::nullopt, Activation::tanh};
  LossKind loss = LossKind::logistic_nll;
  std::size_t n_tasks = 5;
  DataConfig data;
  AnchorConfig anchor;
  FisherConfig fisher;
  TrainConfig train;
  std::string trainer = "auto";    // auto | adam | closed_form
  std::string curvature = "auto";  // auto | fisher | exact
  std::vector<std::string> methods{"am", "wam", "ta", "fa", "fa1", "ties", "ours"};
  std::vector<double> alphas{0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0};
  double alpha = 1.0;
  std::map<std::string, double> alpha_overrides;
  MaskConfig mask{0.2, true};
  bool fa_include_anchor = true;
  RemovalConfig removal;

  bool classification() const { return loss == LossKind::logistic_nll; }
  void validate() const;
};

const std::vector<std::string>& known_methods();

ExperimentSpec spec_from_json(const nlohmann::json& doc);
nlohmann::json spec_to_json(const ExperimentSpec& spec);
ExperimentSpec load_spec(const std::filesystem::path& path);

/// Parses "start:stop:step" (inclusive stop) or a comma-separated list.
std::vector<double> parse_alpha_list(const std::string& text);

/// Seed precedence: explicit flag, then GRADMERGE_SEED, then the config value.
std::uint64_t resolve_seed(std::optional<std::uint64_t> flag, std::uint64_t config_seed);

// ---------------------------------------------------------------------------
// Data

struct TaskSplit {
  TaskDataset train;
  TaskDataset test;
};

/// Classification: Gaussian blobs around a per-task center with a per-task
/// rotated class axis; the last feature is a constant 1. Regression: a shared
/// planted weight vector plus a per-task offset, targets with Gaussian noise.
std::vector<TaskSplit> gen_tasks(const ExperimentSpec& spec);

void write_tasks(const std::vector<TaskSplit>& tasks, const std::filesystem::path& dir);

// ---------------------------------------------------------------------------
// Pipelines

struct SummaryRow {
  std::string method;
  double alpha;
  std::string task;
  std::string metric;
  double value;
};

void write_summary_csv(const std::vector<SummaryRow>& rows, std::ostream& out);

/// Anchor, fine-tuned task models and their curvatures for one experiment.
struct TrainedSetup {
  ExperimentSpec spec;
  std::vector<TaskSplit> data;
  Checkpoint anchor;               // curvature = H0 without delta
  QuadraticAnchor quad;            // (anchor, H0, delta)
  std::vector<Checkpoint> tasks;   // tasks 1..T-1, curvature = H_t
  std::vector<double> task_residuals;
  std::vector<DiagCurvature> increment_fishers;  // Fisher at theta_t - anchor, for fa1
  bool closed_form = false;
  bool exact_curvature = false;
};

TrainedSetup train_setup(const ExperimentSpec& spec);
/// Same, on caller-supplied splits (index 0 is the anchor task).
TrainedSetup train_setup(const ExperimentSpec& spec, std::vector<TaskSplit> data);

/// Merged parameters for `method` at a common task weight alpha.
ParamVector merge_method(const TrainedSetup& setup, const std::string& method, double alpha);

struct AdditionResult {
  std::vector<SummaryRow> summary;
  std::vector<MismatchRow> report;
  std::map<std::string, ParamVector> merged;  // by method label
  Checkpoint target;
};

/// Trains everything, merges with every configured method and evaluates.
/// When out_dir is set, writes report.csv, summary.csv and checkpoints/.
AdditionResult run_addition(const ExperimentSpec& spec,
                            const std::optional<std::filesystem::path>& out_dir);
AdditionResult run_addition(const TrainedSetup& setup,
                            const std::optional<std::filesystem::path>& out_dir);

struct RemovalResult {
  std::vector<SummaryRow> summary;
  double distance_ta = 0.0;
  double distance_ours = 0.0;
  ParamVector anchor;
  ParamVector retrain;
  ParamVector removed_ta;
  ParamVector removed_ours;
};

RemovalResult run_removal(const ExperimentSpec& spec,
                          const std::optional<std::filesystem::path>& out_dir);

struct SweepSeries {
  std::string method;
  std::vector<double> alphas;
  std::vector<double> values;  // aggregate accuracy (classification) or mean test loss
};

struct SweepResult {
  std::vector<SummaryRow> rows;
  std::vector<SweepSeries> series;
  double anchor_value = 0.0;
};

/// Methods in the sweep must be one of wam, ta, fa1, ties, ours.
SweepResult sweep_alpha(const TrainedSetup& setup);
SweepResult sweep_alpha(const ExperimentSpec& spec,
                        const std::optional<std::filesystem::path>& out_dir);
void write_sweep_files(const SweepResult& result, const std::filesystem::path& dir);

// ---------------------------------------------------------------------------
// Oracle suite

struct OracleSuiteResult {
  std::vector<OracleResult> results;
  bool all_pass() const;
};

// Individual oracle families; each fixture is seeded from (seed, index).
std::vector<OracleResult> oracle_hand_fixtures();
std::vector<OracleResult> oracle_linear_merge(std::uint64_t seed, std::size_t n_fixtures);
std::vector<OracleResult> oracle_removal(std::uint64_t seed, std::size_t n_fixtures);
std::vector<OracleResult> oracle_identity(std::uint64_t seed, std::size_t n_fixtures);
/// Identity residual of Adam-trained logistic models against identity_residual_bound.
std::vector<OracleResult> oracle_identity_trained(std::uint64_t seed, std::size_t n_fixtures);
std::vector<OracleResult> oracle_map(std::uint64_t seed, std::size_t n_fixtures);
std::vector<OracleResult> oracle_reductions(std::uint64_t seed, std::size_t n_fixtures);

/// All families above.
OracleSuiteResult run_oracle_suite(std::uint64_t seed, std::size_t n_fixtures = 50);
void write_oracle_csv(const OracleSuiteResult& result, std::ostream& out);
void print_oracle_summary(const OracleSuiteResult& result, std::ostream& out);

// ---------------------------------------------------------------------------
// Command line

/// Entry point of the `gradmerge` tool. Returns the process exit code:
/// 0 on success, 1 for validation errors, 2 for numeric failures.
int run_cli(int argc, char** argv);

}  // namespace gradmerge::harness
