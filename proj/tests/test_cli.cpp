#include <doctest.h>

#include <algorithm>
#include <array>
#include <cstdio>
#include <cstdlib>
#include <sys/wait.h>

#include "gradmerge/harness.hpp"
#include "gradmerge/param_space.hpp"
#include "test_util.hpp"

using namespace gradmerge;

namespace {

struct Run {
  int code;
  std::string output;  // stdout and stderr interleaved
};

// Runs the CLI through the shell; `args` is appended verbatim.
Run cli(const std::string& args, const std::string& env = "") {
  const std::string cmd = env + (env.empty() ? "" : " ") + "\"" GRADMERGE_CLI_PATH "\" " + args + " 2>&1";
  FILE* pipe = ::popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  std::string out;
  std::array<char, 4096> buf{};
  while (std::size_t n = std::fread(buf.data(), 1, buf.size(), pipe)) out.append(buf.data(), n);
  const int status = ::pclose(pipe);
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, out};
}

std::string q(const std::filesystem::path& p) { return "\"" + p.string() + "\""; }

bool contains(const std::string& hay, const std::string& needle) { return hay.find(needle) != std::string::npos; }

// A small logistic experiment config.
void write_config(const std::filesystem::path& path, std::uint64_t seed = 1) {
  harness::ExperimentSpec s;
  s.seed = seed;
  s.n_tasks = 3;
  s.data.n_train = 120;
  s.data.n_test = 120;
  s.alphas = {0.0, 0.5, 1.0};
  testutil::write_file(path, harness::spec_to_json(s).dump(2));
}

std::vector<std::string> files_under(const std::filesystem::path& dir) {
  std::vector<std::string> out;
  for (const auto& e : std::filesystem::recursive_directory_iterator(dir)) {
    if (e.is_regular_file()) out.push_back(std::filesystem::relative(e.path(), dir).string());
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

TEST_CASE("oracle-check passes") {
  const Run r = cli("oracle-check --seed 7");
  CHECK(r.code == 0);
  CHECK(contains(r.output, "name,abs_err,rel_err,tolerance,pass"));
  CHECK_FALSE(contains(r.output, ",false\n"));
  CHECK(contains(r.output, "oracle checks passed"));
}

TEST_CASE("oracle-check writes its table to --out") {
  testutil::TempDir dir("cli_oracle");
  const Run r = cli("oracle-check --seed 3 --fixtures 5 --out " + q(dir.path()));
  CHECK(r.code == 0);
  const std::string csv = testutil::read_file(dir / "oracle_check.csv");
  CHECK(csv.rfind("name,abs_err,rel_err,tolerance,pass\n", 0) == 0);
}

TEST_CASE("usage errors exit with 1") {
  SUBCASE("unknown flag") {
    const Run r = cli("gen --no-such-flag");
    CHECK(r.code == 1);
    CHECK(contains(r.output, "Usage:"));
  }
  SUBCASE("no subcommand") {
    const Run r = cli("");
    CHECK(r.code == 1);
    CHECK(contains(r.output, "Usage:"));
  }
  SUBCASE("unknown merge method") {
    CHECK(cli("merge --method magic --anchor a --task b").code == 1);
  }
  SUBCASE("missing config file") {
    const Run r = cli("gen --config /nonexistent/spec.json --out /tmp/unused");
    CHECK(r.code == 1);
    CHECK(contains(r.output, "IoError"));
  }
  SUBCASE("bad GRADMERGE_SEED") {
    testutil::TempDir dir("cli_env");
    CHECK(cli("gen --out " + q(dir / "d"), "GRADMERGE_SEED=abc").code == 1);
  }
}

TEST_CASE("gen is deterministic and honours seed precedence") {
  testutil::TempDir dir("cli_gen");
  write_config(dir / "spec.json");
  const std::string base = "gen --config " + q(dir / "spec.json");
  REQUIRE(cli(base + " --out " + q(dir / "a")).code == 0);
  REQUIRE(cli(base + " --out " + q(dir / "b")).code == 0);
  REQUIRE(cli(base + " --out " + q(dir / "env"), "GRADMERGE_SEED=99").code == 0);
  REQUIRE(cli(base + " --seed 99 --out " + q(dir / "flag"), "GRADMERGE_SEED=5").code == 0);

  const auto files = files_under(dir / "a");
  CHECK(files.size() == 6);
  REQUIRE(files == files_under(dir / "b"));
  for (const auto& f : files) CHECK(testutil::read_file(dir / "a" / f) == testutil::read_file(dir / "b" / f));
  CHECK(testutil::read_file(dir / "env" / files[0]) != testutil::read_file(dir / "a" / files[0]));
  CHECK(testutil::read_file(dir / "env" / files[0]) == testutil::read_file(dir / "flag" / files[0]));
}

TEST_CASE("merge --method ours without curvature names the checkpoint") {
  testutil::TempDir dir("cli_missing");
  write_config(dir / "spec.json");
  const std::string cfg = "--config " + q(dir / "spec.json");
  REQUIRE(cli("gen " + cfg + " --out " + q(dir / "data")).code == 0);
  REQUIRE(cli("train " + cfg + " --objective anchor --data " + q(dir / "data/task0_train.json") + " --name anchor0 --out " +
              q(dir / "anchor"))
              .code == 0);
  REQUIRE(cli("train " + cfg + " --objective finetune --h0 identity:1 --anchor " + q(dir / "anchor") + " --data " +
              q(dir / "data/task1_train.json") + " --name sentiment_task --out " + q(dir / "task1"))
              .code == 0);
  const Run r = cli("merge " + cfg + " --method ours --anchor " + q(dir / "anchor") + " --task " + q(dir / "task1") +
                    " --out " + q(dir / "merged"));
  CHECK(r.code == 1);
  CHECK(contains(r.output, "MissingCurvatureError"));
  CHECK(contains(r.output, "sentiment_task"));
  CHECK_FALSE(std::filesystem::exists(dir / "merged.f64le"));
}

TEST_CASE("numeric failures exit with 2") {
  testutil::TempDir dir("cli_numeric");
  const auto layout = testutil::flat_layout(2);
  const auto zero = testutil::curv({0.0, 0.0}, layout);
  save_checkpoint(Checkpoint(testutil::vec({1.0, 2.0}, layout), zero, std::nullopt, {{"name", "a"}}), dir / "a");
  save_checkpoint(Checkpoint(testutil::vec({2.0, 3.0}, layout), zero, std::string("a"), {{"name", "t"}}), dir / "t");
  const Run r = cli("merge --method ours --delta 0 --anchor " + q(dir / "a") + " --task " + q(dir / "t") + " --out " +
                    q(dir / "m"));
  CHECK(r.code == 2);
  CHECK(contains(r.output, "SingularCurvatureError"));
}

TEST_CASE("step-by-step workflow is reproducible") {
  testutil::TempDir dir("cli_flow");
  write_config(dir / "spec.json");
  const std::string cfg = "--config " + q(dir / "spec.json");

  auto run_all = [&](const std::filesystem::path& out) {
    auto p = [&](const std::string& name) { return q(out / name); };
    const std::vector<std::string> steps{
        "gen " + cfg + " --out " + p("data"),
        "train " + cfg + " --objective anchor --data " + p("data/task0_train.json") + " --name anchor --out " +
            p("anchor"),
        "fisher " + cfg + " --ckpt " + p("anchor") + " --data " + p("data/task0_train.json"),
        "train " + cfg + " --objective finetune --anchor " + p("anchor") + " --data " + p("data/task1_train.json") +
            " --name task1 --out " + p("task1"),
        "train " + cfg + " --objective finetune --anchor " + p("anchor") + " --data " + p("data/task2_train.json") +
            " --name task2 --out " + p("task2"),
        "fisher " + cfg + " --ckpt " + p("task1") + " --data " + p("data/task1_train.json"),
        "fisher " + cfg + " --ckpt " + p("task2") + " --data " + p("data/task2_train.json"),
        "train " + cfg + " --objective joint --anchor " + p("anchor") + " --data " + p("data/task1_train.json") + " " +
            p("data/task2_train.json") + " --name target --out " + p("target"),
        "merge " + cfg + " --method ours --anchor " + p("anchor") + " --task " + p("task1") + " " + p("task2") +
            " --out " + p("merged_ours"),
        "merge " + cfg + " --method ta --anchor " + p("anchor") + " --task " + p("task1") + " " + p("task2") +
            " --out " + p("merged_ta"),
        "merge " + cfg + " --method ties --keep 0.5 --elect-sign --anchor " + p("anchor") + " --task " + p("task1") +
            " " + p("task2") + " --out " + p("merged_ties"),
        "diagnose " + cfg + " --target " + p("target") + " --anchor " + p("anchor") + " --merged " +
            p("merged_ours") + " " + p("merged_ta") + " --task " + p("task1") + " " + p("task2") + " --data " +
            p("data/task1_train.json") + " " + p("data/task2_train.json") + " --test " + p("data/task1_test.json") +
            " " + p("data/task2_test.json") + " --out " + p("diagnose.csv"),
        "remove " + cfg + " --anchor " + p("anchor") + " --task " + p("task1") + " --retain-data " +
            p("data/task0_train.json") + " --out " + p("removed"),
        "sweep " + cfg + " --method ours ta --alphas 0:1:0.5 --out " + p("sweep"),
        "report " + cfg + " --out " + p("report"),
    };
    for (const auto& s : steps) {
      const Run r = cli(s);
      INFO(s);
      INFO(r.output);
      REQUIRE(r.code == 0);
    }
  };
  run_all(dir / "run1");
  run_all(dir / "run2");

  const auto files = files_under(dir / "run1");
  REQUIRE(files == files_under(dir / "run2"));
  for (const auto& f : {"diagnose.csv", "sweep/sweep.csv", "report/summary.csv", "report/report.csv",
                        "report/removal.csv", "merged_ours.f64le", "removed.meta.json"}) {
    CHECK(std::find(files.begin(), files.end(), f) != files.end());
  }
  for (const auto& f : files) {
    CAPTURE(f);
    CHECK(testutil::read_file(dir / "run1" / f) == testutil::read_file(dir / "run2" / f));
  }

  // Diagnose rows: (method, task) per task plus an aggregate row per method.
  const std::string diag = testutil::read_file(dir / "run1/diagnose.csv");
  CHECK(std::count(diag.begin(), diag.end(), '\n') == 1 + 2 * 3);

  // Merged checkpoints round-trip bit-exactly.
  const Checkpoint m = load_checkpoint(dir / "run1/merged_ours");
  save_checkpoint(m, dir / "copy");
  CHECK(testutil::read_file(dir / "copy.f64le") == testutil::read_file(dir / "run1/merged_ours.f64le"));
  CHECK(load_checkpoint(dir / "copy").params() == m.params());
  CHECK(m.meta().at("method") == "ours");
}
