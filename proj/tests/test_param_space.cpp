#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <random>

#include <json.hpp>

#include "gradmerge/errors.hpp"
#include "gradmerge/param_space.hpp"
#include "test_util.hpp"

using namespace gradmerge;
using testutil::curv;
using testutil::vec;

TEST_CASE("layout totals and offsets") {
  auto layout = make_layout({{"W1", {4, 3}}, {"b1", {4}}, {"W2", {1, 4}}, {"b2", {1}}});
  CHECK(layout->total_len() == 21);
  CHECK(layout->offset_of("W1") == 0);
  CHECK(layout->offset_of("b1") == 12);
  CHECK(layout->offset_of("W2") == 16);
  CHECK(layout->offset_of("b2") == 20);
  CHECK_THROWS_AS(layout->offset_of("nope"), LayoutError);
}

TEST_CASE("layout validation") {
  CHECK_THROWS_AS(make_layout({}), LayoutError);
  CHECK_THROWS_AS(make_layout({{"", {2}}}), LayoutError);
  CHECK_THROWS_AS(make_layout({{"a", {2}}, {"a", {3}}}), LayoutError);
  CHECK_THROWS_AS(make_layout({{"a", {2, 0}}}), LayoutError);
  CHECK_THROWS_AS(make_layout({{"a", {}}}), LayoutError);
}

TEST_CASE("vectors reject non-finite values and wrong lengths") {
  auto layout = testutil::flat_layout(2);
  CHECK_THROWS_AS(ParamVector(layout, {1.0, std::nan("")}), NumericError);
  CHECK_THROWS_AS(ParamVector(layout, {1.0, std::numeric_limits<double>::infinity()}), NumericError);
  CHECK_THROWS_AS(ParamVector(layout, {1.0}), LayoutError);
  CHECK_THROWS_AS(DiagCurvature(layout, {1.0, -0.5}), NumericError);
  CHECK_NOTHROW(DiagCurvature(layout, {0.0, 2.0}));
}

TEST_CASE("block views") {
  auto layout = make_layout({{"a", {2}}, {"b", {3}}});
  ParamVector v(layout, {1, 2, 3, 4, 5});
  auto b = v.block("b");
  REQUIRE(b.size() == 3);
  CHECK(b[0] == 3);
  CHECK(b[2] == 5);
}

TEST_CASE("combine examples") {
  const auto v = vec({1.5, -2.0, 3.25});
  SUBCASE("single unit term is identity") {
    const WeightedTerm t[] = {{1.0, v}};
    CHECK(combine(t) == v);
  }
  SUBCASE("equal halves of the same vector") {
    const WeightedTerm t[] = {{0.5, v}, {0.5, v}};
    CHECK(combine(t) == v);
  }
  SUBCASE("self-cancellation") {
    const auto u = vec({1, 2});
    const WeightedTerm t[] = {{1.0, u}, {-1.0, u}};
    const auto r = combine(t);
    CHECK(r[0] == 0.0);
    CHECK(r[1] == 0.0);
  }
}

TEST_CASE("combine errors") {
  const auto a = vec({1, 2});
  const auto b = vec({1, 2, 3});
  const WeightedTerm mismatched[] = {{1.0, a}, {1.0, b}};
  CHECK_THROWS_AS(combine(mismatched), LayoutError);
  CHECK_THROWS_AS(combine(std::span<const WeightedTerm>{}), ConfigError);

  const auto big = vec({1e308});
  const WeightedTerm overflow[] = {{10.0, big}};
  CHECK_THROWS_AS(combine(overflow), NumericError);

  // Same shape under a different block name is still a different layout.
  const auto renamed = vec({1, 2}, testutil::flat_layout(2, "v"));
  const WeightedTerm named[] = {{1.0, a}, {1.0, renamed}};
  CHECK_THROWS_AS(combine(named), LayoutError);
}

TEST_CASE("combine is permutation invariant") {
  std::mt19937_64 gen(17);
  auto layout = testutil::flat_layout(11);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<ParamVector> vs;
    std::vector<double> ws;
    for (int k = 0; k < 6; ++k) {
      vs.emplace_back(layout, testutil::uniform(gen, 11, -5, 5));
      ws.push_back(testutil::uniform(gen, 1, -2, 2)[0]);
    }
    std::vector<WeightedTerm> terms;
    for (std::size_t k = 0; k < vs.size(); ++k) terms.push_back({ws[k], vs[k]});
    const auto base = combine(terms);
    std::shuffle(terms.begin(), terms.end(), gen);
    const auto shuffled = combine(terms);
    CHECK(max_abs_difference(base.values(), shuffled.values()) <= 1e-12);
  }
}

TEST_CASE("precondition_combine examples") {
  SUBCASE("zero increments return the anchor") {
    const auto anchor = vec({0.3, -1.2});
    const auto h = curv({1.0, 2.0});
    const PreconditionTerm t[] = {{0.7, h, h, anchor}, {0.4, h, h, anchor}};
    CHECK(precondition_combine(anchor, t, curv({1.0, 1.0})) == anchor);
  }
  SUBCASE("identity prior and zero task curvature give task arithmetic") {
    const auto anchor = vec({0.0});
    const auto theta = vec({1.75});
    const auto h0 = curv({1.0});
    const auto ht = curv({0.0});
    const PreconditionTerm t[] = {{1.0, h0, ht, theta}};
    CHECK(precondition_combine(anchor, t, curv({1.0}))[0] == 1.75);
  }
  SUBCASE("1-D two-task least-squares fixture") {
    const auto anchor = vec({0.0});
    const auto t1 = vec({1.0});
    const auto t2 = vec({2.0});
    const auto one = curv({1.0});
    const PreconditionTerm t[] = {{1.0, one, one, t1}, {1.0, one, one, t2}};
    CHECK(precondition_combine(anchor, t, curv({3.0}))[0] == doctest::Approx(2.0).epsilon(1e-15));
  }
}

TEST_CASE("precondition_combine rejects non-positive hbar") {
  const auto anchor = vec({0.0, 0.0});
  const auto theta = vec({1.0, 1.0});
  const auto h = curv({1.0, 1.0});
  const PreconditionTerm t[] = {{1.0, h, h, theta}};
  CHECK_THROWS_AS(precondition_combine(anchor, t, curv({1.0, 0.0})), SingularCurvatureError);
}

TEST_CASE("precondition_combine is invariant to a joint curvature scale") {
  std::mt19937_64 gen(3);
  auto layout = testutil::flat_layout(7);
  for (int trial = 0; trial < 50; ++trial) {
    const ParamVector anchor(layout, testutil::uniform(gen, 7, -1, 1));
    const ParamVector th1(layout, testutil::uniform(gen, 7, -1, 1));
    const ParamVector th2(layout, testutil::uniform(gen, 7, -1, 1));
    const DiagCurvature h0(layout, testutil::uniform(gen, 7, 0.1, 2));
    const DiagCurvature h1(layout, testutil::uniform(gen, 7, 0, 3));
    const DiagCurvature h2(layout, testutil::uniform(gen, 7, 0, 3));
    const DiagCurvature hbar = h0.plus(h1).plus(h2);
    const PreconditionTerm t[] = {{1.0, h0, h1, th1}, {0.5, h0, h2, th2}};
    const auto base = precondition_combine(anchor, t, hbar);
    for (double c : {1e-3, 0.7, 3.0, 1e4}) {
      const auto h0c = h0.scaled(c), h1c = h1.scaled(c), h2c = h2.scaled(c), hbarc = hbar.scaled(c);
      const PreconditionTerm tc[] = {{1.0, h0c, h1c, th1}, {0.5, h0c, h2c, th2}};
      CHECK(max_abs_difference(base.values(), precondition_combine(anchor, tc, hbarc).values()) <= 1e-12);
    }
  }
}

TEST_CASE("checkpoint file sizes") {
  testutil::TempDir dir("ps");
  const auto params = vec({1.0, 2.0, 3.0});
  save_checkpoint(Checkpoint(params), dir / "plain");
  CHECK(std::filesystem::file_size(blob_path(dir / "plain")) == 24);
  save_checkpoint(Checkpoint(params, curv({0.1, 0.2, 0.3})), dir / "curv");
  CHECK(std::filesystem::file_size(blob_path(dir / "curv")) == 48);
}

TEST_CASE("checkpoint round-trip is bit-exact") {
  testutil::TempDir dir("ps");
  std::mt19937_64 gen(8);
  auto layout = make_layout({{"W1", {3, 2}}, {"b1", {3}}});
  for (int trial = 0; trial < 25; ++trial) {
    auto vals = testutil::uniform(gen, 9, -1e3, 1e3);
    vals[0] = 0.1 + 0.2;  // awkward binary fraction
    vals[1] = -0.0;
    vals[2] = std::numeric_limits<double>::denorm_min();
    vals[3] = std::numeric_limits<double>::max();
    std::optional<DiagCurvature> c;
    if (trial % 2) c = DiagCurvature(layout, testutil::uniform(gen, 9, 0, 1e-6));
    const Checkpoint ckpt(ParamVector(layout, vals), c,
                          trial % 3 ? std::optional<std::string>("anchor") : std::nullopt,
                          {{"seed", std::to_string(trial)}, {"name", "m"}});
    const auto stem = dir / ("ck" + std::to_string(trial));
    save_checkpoint(ckpt, stem);
    const Checkpoint back = load_checkpoint(stem);
    CHECK(back == ckpt);
    CHECK(std::signbit(back.params()[1]));
    CHECK(back.layout() == ckpt.layout());
    CHECK(back.meta() == ckpt.meta());
  }
}

TEST_CASE("meta sidecar uses the documented keys") {
  testutil::TempDir dir("ps");
  const Checkpoint ckpt(vec({1, 2}), curv({1, 1}), std::string("base"), {{"objective", "anchor"}});
  save_checkpoint(ckpt, dir / "m");
  const auto doc = nlohmann::json::parse(testutil::read_file(meta_path(dir / "m")));
  CHECK(doc.contains("layout"));
  CHECK(doc["anchor_id"] == "base");
  CHECK(doc["has_curvature"] == true);
  CHECK(doc["meta"]["objective"] == "anchor");
  CHECK(doc["layout"][0][0] == "w");
}

TEST_CASE("corrupt checkpoints are rejected") {
  testutil::TempDir dir("ps");
  const auto stem = dir / "c";
  save_checkpoint(Checkpoint(vec({1.0, 2.0, 3.0})), stem);

  SUBCASE("truncated blob") {
    auto blob = testutil::read_file(blob_path(stem));
    testutil::write_file(blob_path(stem), blob.substr(0, blob.size() - 8));
    CHECK_THROWS_AS(load_checkpoint(stem), CorruptCheckpointError);
  }
  SUBCASE("missing layout key") {
    auto doc = nlohmann::json::parse(testutil::read_file(meta_path(stem)));
    doc.erase("layout");
    testutil::write_file(meta_path(stem), doc.dump());
    CHECK_THROWS_AS(load_checkpoint(stem), CorruptCheckpointError);
  }
  SUBCASE("NaN in blob") {
    auto blob = testutil::read_file(blob_path(stem));
    const double nan = std::nan("");
    std::memcpy(blob.data() + 8, &nan, sizeof nan);
    testutil::write_file(blob_path(stem), blob);
    CHECK_THROWS_AS(load_checkpoint(stem), NumericError);
  }
  SUBCASE("missing files") {
    CHECK_THROWS_AS(load_checkpoint(dir / "absent"), IoError);
  }
}

TEST_CASE("checkpoint invariants") {
  const auto p = vec({1, 2});
  CHECK_THROWS_AS(Checkpoint(p, curv({1, 2, 3})), LayoutError);
  CHECK(Checkpoint(p).name() == "unnamed");
  CHECK(Checkpoint(p).with_meta("name", "x").name() == "x");
  CHECK(Checkpoint(p).with_curvature(curv({1, 1})).curvature().has_value());
}

TEST_CASE("norm helpers") {
  const std::vector<double> x{3, -4};
  CHECK(l2_norm(x) == 5.0);
  CHECK(linf_norm(x) == 4.0);
  CHECK(l2_distance(vec({0, 0}), vec({3, 4})) == 5.0);
  CHECK(difference(vec({3, 4}), vec({1, 1})) == std::vector<double>{2, 3});
}
