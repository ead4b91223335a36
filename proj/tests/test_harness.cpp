#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <iterator>

#include "reachctl/harness/reports.hpp"

namespace fs = std::filesystem;
using namespace reachctl;
using namespace reachctl::harness;

namespace {

// Double integrator in a 1.0 x 0.6 box with the target on the right half.
json tiny_doc() {
  return json::parse(R"({
    "schema_version": 1,
    "name": "tiny",
    "system": {
      "A": [[0,0,1,0],[0,0,0,1],[0,0,0,0],[0,0,0,0]],
      "B": [[0,0],[0,0],[1,0],[0,1]],
      "E": [[1,0],[0,1],[0,0],[0,0]],
      "n_s": 2, "n_d": 2,
      "input_set": {"box": {"lo": [-2,-2], "hi": [2,2]}},
      "velocity_indices": [2,3]
    },
    "constraints": {"box": {"lo": [-1.5,-1.5], "hi": [1.5,1.5]}},
    "time": {"T": 2.0, "N": 2, "J": 5, "sim_step": 0.01},
    "noise": {"mean": [0,0], "covariance": [[0,0],[0,0]]},
    "geometry": {
      "bounds": {"lo": [0,0], "hi": [1.0,0.6]},
      "target": [{"box": {"lo": [0.6,0], "hi": [1.0,0.6]}}]
    },
    "x0": [0.35,0.25,0,0],
    "grid": {"edge": 0.1},
    "mpc": {"Q": [100,100,1,1], "R": [0.1,0.1]},
    "commands": {"list": [
      {"velocity": [-0.3,0], "weights": [1000,1000]},
      {"velocity": [0.3,0], "weights": [1000,1000]}
    ]},
    "kernel": {"samples": 4},
    "evaluation": {"trials": 20, "trajectories": 2},
    "alpha": 0.5,
    "cost": {"radial": {"center": [0.2,0.3], "scale": 1.0}},
    "pareto": {"kappas": [4,6,8,10]},
    "seed": 3
  })");
}

fs::path fresh_dir(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("reachctl-test-" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

std::size_t count_lines(const fs::path& p) {
  const auto s = slurp(p);
  return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n'));
}

std::string scenario_error(const json& doc) {
  try {
    parse_scenario(doc);
  } catch (const ScenarioError& e) {
    return e.what();
  }
  return "";
}

TEST(Scenario, ShippedScenariosLoad) {
  for (const char* name : {"simple", "zigzag", "ball_field", "labyrinth", "two_room", "quadcopter"}) {
    const auto sc = load_scenario(fs::path(REACHCTL_SCENARIO_DIR) / (std::string(name) + ".json"));
    EXPECT_EQ(sc.name, name);
    const auto s = build_setup(sc, RunOptions{});
    EXPECT_TRUE(s.warnings.empty()) << name;
    EXPECT_GT(s.grid->safe_cells().size(), 0u);
    EXPECT_EQ(s.actions.size(), 20u);
  }
}

TEST(Scenario, ErrorsNameTheField) {
  auto doc = tiny_doc();
  doc["schema_version"] = 7;
  EXPECT_NE(scenario_error(doc).find("schema_version"), std::string::npos);
  doc = tiny_doc();
  doc["time"].erase("J");
  EXPECT_NE(scenario_error(doc).find("time"), std::string::npos);
  doc = tiny_doc();
  doc["geometry"]["target"][0] = json{{"blob", {}}};
  EXPECT_NE(scenario_error(doc).find("unknown region kind"), std::string::npos);
  doc = tiny_doc();
  doc["x0"] = {0.1, 0.1};
  EXPECT_NE(scenario_error(doc).find("x0"), std::string::npos);
  doc = tiny_doc();
  doc["commands"]["list"][0]["velocity"] = {1.0};
  EXPECT_NE(scenario_error(doc).find("commands.list[0]"), std::string::npos);
  EXPECT_THROW(load_scenario("/nonexistent/scenario.json"), IoError);
}

TEST(Scenario, HashFollowsContent) {
  auto a = parse_scenario(tiny_doc());
  auto doc = tiny_doc();
  doc["seed"] = 4;
  EXPECT_NE(a.hash, parse_scenario(doc).hash);
  EXPECT_EQ(a.hash, parse_scenario(tiny_doc()).hash);
}

TEST(Setup, InitialStateChecksDependOnMode) {
  auto doc = tiny_doc();
  doc["x0"] = {0.35, 0.25, 0.2, 0.0};
  const auto sc = parse_scenario(doc);
  RunOptions opt;
  EXPECT_EQ(build_setup(sc, opt).warnings.size(), 1u);
  opt.certificate = true;
  EXPECT_THROW(build_setup(sc, opt), ScenarioError);

  doc = tiny_doc();
  doc["x0"] = {0.8, 0.25, 0.0, 0.0};  // starts in the target cell
  EXPECT_THROW(build_setup(parse_scenario(doc), RunOptions{}), ScenarioError);
}

TEST(FirstHit, TargetIsCheckedBeforeSafeSet) {
  Vector lo(1), hi(1), tlo(1), thi(1);
  lo << 0.0;
  hi << 1.0;
  tlo << 0.9;
  thi << 1.5;
  const RegionSet S(HyperRect::from_bounds(lo, hi));
  const RegionSet T(HyperRect::from_bounds(tlo, thi));
  auto run = [&](std::initializer_list<double> xs) {
    FirstHit fh;
    std::int64_t i = 0;
    for (double v : xs) fh.observe(S, T, Vector::Constant(1, v), i++);
    return fh;
  };
  // A point in T outside S still counts as reaching T.
  auto a = run({0.5, 1.2, -1.0});
  EXPECT_EQ(a.state, FirstHit::State::success);
  EXPECT_EQ(a.step, 1);
  // Leaving S first is final, even if T is entered later.
  auto b = run({0.5, -0.1, 0.95});
  EXPECT_EQ(b.state, FirstHit::State::failure);
  EXPECT_EQ(b.step, 1);
  EXPECT_EQ(run({0.2, 0.3}).state, FirstHit::State::undecided);
}

TEST(Pipeline, ZeroNoiseAdjacentTargetAlwaysReached) {
  RunOptions opt;
  opt.threads = 2;
  Pipeline pl(parse_scenario(tiny_doc()), opt);
  const auto& e = pl.evaluation();
  EXPECT_EQ(e.trials, 20);
  EXPECT_EQ(e.successes, 20);
  EXPECT_EQ(e.infeasible_events, 0);
  EXPECT_EQ(e.g_violations, 0);
  EXPECT_LE(e.max_terminal_deviation, 1e-6);
  EXPECT_GT(pl.v_tilde_0(), 0.99);
  EXPECT_LE(pl.v_tilde_0(), pl.v_plain_0() + 1e-15);
  // The policy moves right, toward the target.
  EXPECT_EQ(pl.robust().policy.at(0, pl.setup().grid->initial_cell()), 1);
}

TEST(Reports, RowCountsAndFiles) {
  const auto dir = fresh_dir("reports");
  RunOptions opt;
  Pipeline pl(parse_scenario(tiny_doc()), opt);
  write_run(pl, dir);
  EXPECT_EQ(count_lines(dir / "value_field.csv"), 1 + pl.setup().grid->safe_cells().size());
  EXPECT_EQ(count_lines(dir / "pareto.csv"), 5u);
  EXPECT_EQ(count_lines(dir / "results.csv"), 2u);
  EXPECT_EQ(count_lines(dir / "trajectories" / "index.csv"), 3u);
  EXPECT_TRUE(fs::exists(dir / "trajectories" / "trial_0.csv"));
  // Inner resolution: one row per inner step plus the initial state.
  EXPECT_EQ(count_lines(dir / "trajectories" / "trial_0.csv"), 1u + 1u + 2u * 5u);
  const auto geo = json::parse(slurp(dir / "geometry.json"));
  EXPECT_EQ(geo["type"], "FeatureCollection");
  const auto m = json::parse(slurp(dir / "manifest.json"));
  EXPECT_TRUE(m.contains("run_info"));
  EXPECT_EQ(m["safe_cells"], pl.setup().grid->safe_cells().size());

  const auto values = slurp(dir / "values.bin");
  const auto header = json::parse(values.substr(0, values.find('\n')));
  EXPECT_EQ(header["stages"], 3);
  EXPECT_EQ(values.size() - values.find('\n') - 1,
            3 * static_cast<std::size_t>(pl.setup().grid->num_cells()) * sizeof(double));
  fs::remove_all(dir);
}

TEST(Reports, EmptyEvaluationWritesHeadersOnly) {
  const auto dir = fresh_dir("empty");
  RunOptions opt;
  opt.trials = 0;
  Pipeline pl(parse_scenario(tiny_doc()), opt);
  write_run(pl, dir);
  EXPECT_EQ(count_lines(dir / "results.csv"), 1u);
  EXPECT_EQ(count_lines(dir / "trajectories" / "index.csv"), 1u);
  fs::remove_all(dir);
}

TEST(Pipeline, DeterministicAndCached) {
  const auto cache = fresh_dir("cache");
  const auto a = fresh_dir("det-a"), b = fresh_dir("det-b");
  auto doc = tiny_doc();
  doc["noise"]["covariance"] = {{0.05, 0.0}, {0.0, 0.05}};
  RunOptions opt;
  opt.cache_dir = cache;
  opt.threads = 1;
  Pipeline first(parse_scenario(doc), opt);
  write_run(first, a);
  EXPECT_FALSE(first.cache_hit());
  opt.threads = 3;
  Pipeline second(parse_scenario(doc), opt);
  write_run(second, b);
  EXPECT_TRUE(second.cache_hit());
  for (const char* f : {"results.csv", "value_field.csv", "pareto.csv", "values.bin", "policy.bin",
                        "trajectories/index.csv", "trajectories/trial_1.csv", "geometry.json"})
    EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
  auto ma = json::parse(slurp(a / "manifest.json")), mb = json::parse(slurp(b / "manifest.json"));
  ma.erase("run_info");
  mb.erase("run_info");
  EXPECT_EQ(ma, mb);

  // A different seed must not reuse the cached kernel.
  opt.seed = 99;
  Pipeline third(parse_scenario(doc), opt);
  third.kernel();
  EXPECT_FALSE(third.cache_hit());
  EXPECT_NE(third.kernel_key(), first.kernel_key());

  // A corrupted cache entry is an I/O error.
  for (const auto& e : fs::directory_iterator(cache)) std::ofstream(e.path()) << "garbage\n";
  opt.seed.reset();
  Pipeline fourth(parse_scenario(doc), opt);
  try {
    fourth.kernel();
    ADD_FAILURE() << "expected an error";
  } catch (const StageError& e) {
    EXPECT_EQ(e.code(), kIoError);
  }
  fs::remove_all(cache);
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Pipeline, CertificateModeRejectsSoftConstraints) {
  auto doc = tiny_doc();
  doc["mpc"]["soft_constraints"] = true;
  RunOptions opt;
  opt.certificate = true;
  Pipeline pl(parse_scenario(doc), opt);
  try {
    pl.setup();
    ADD_FAILURE() << "expected an error";
  } catch (const StageError& e) {
    EXPECT_EQ(e.code(), kScenarioError);
  }
}

}  // namespace
