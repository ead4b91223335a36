// reachctl: command-line driver for the reach-avoid pipeline.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <thread>

#include "CLI11.hpp"
#include "reachctl/harness/reports.hpp"

namespace fs = std::filesystem;
using namespace reachctl;
using namespace reachctl::harness;

namespace {

struct Args {
  std::string scenario;
  std::string out = "out";
  std::optional<std::uint64_t> seed;
  unsigned threads = 0;
  std::string cache;
  bool certificate = false;
  std::optional<int> trials;
};

json matrix_json(const Matrix& M) {
  json rows = json::array();
  for (Index i = 0; i < M.rows(); ++i) {
    json r = json::array();
    for (Index j = 0; j < M.cols(); ++j) r.push_back(M(i, j));
    rows.push_back(r);
  }
  return rows;
}

json polytope_json(const HalfspacePolytope& p) {
  return json{{"normals", matrix_json(p.normals())},
              {"offsets", std::vector<double>(p.offsets().data(), p.offsets().data() + p.size())}};
}

RunOptions options(const Args& a) {
  RunOptions o;
  o.seed = a.seed;
  o.threads = a.threads ? a.threads : std::max(1u, std::thread::hardware_concurrency());
  if (!a.cache.empty()) o.cache_dir = fs::path(a.cache);
  o.certificate = a.certificate;
  o.trials = a.trials;
  return o;
}

void print_json(const json& j) { std::cout << j.dump(2) << '\n'; }

int cmd_discretize(Pipeline& pl) {
  const auto& sc = pl.scenario();
  const DiscreteLti d = discretize(sc.sys, sc.inner_step());
  print_json({{"step", d.step}, {"A", matrix_json(d.A)}, {"B", matrix_json(d.B)}, {"E", matrix_json(d.E)}});
  return kOk;
}

int cmd_tighten(Pipeline& pl) {
  const auto& s = pl.setup();
  const auto& fam = s.mpc->family;
  print_json({{"eta", s.tightening.eta},
              {"kappa_x", s.tightening.kappa_x},
              {"kappa_u", s.tightening.kappa_u},
              {"r", s.tightening.r},
              {"zeta", s.tightening.zeta},
              {"g", polytope_json(fam.g)},
              {"g_hat", polytope_json(fam.g_hat)},
              {"g_tilde", polytope_json(fam.g_tilde)},
              {"terminal", fam.zero_terminal() ? "zero_set" : "polytope"}});
  return kOk;
}

int cmd_grid(Pipeline& pl, const fs::path& out) {
  const auto& s = pl.setup();
  write_geometry(out / "geometry.json", pl.scenario(), s);
  const auto& g = *s.grid;
  std::size_t target = 0, unsafe = 0;
  for (Index c = 0; c < g.num_cells(); ++c) {
    if (g.cell_class(c) == CellClass::target) ++target;
    if (g.cell_class(c) == CellClass::unsafe) ++unsafe;
  }
  print_json({{"cells", g.num_cells()},
              {"safe", g.safe_cells().size()},
              {"target", target},
              {"unsafe", unsafe},
              {"initial_cell", g.initial_cell()},
              {"neighborhood", s.neighbors->offsets().size() / static_cast<std::size_t>(g.dim())}});
  return kOk;
}

int cmd_kernel(Pipeline& pl, const fs::path& out) {
  const auto& k = pl.kernel();
  fs::create_directories(out);
  std::ofstream os(out / "kernel.bin", std::ios::binary);
  if (!os) throw IoError("cannot write " + (out / "kernel.bin").string());
  k.write(os);
  print_json({{"actions", k.num_actions()},
              {"samples_per_action", k.samples_per_action()},
              {"controller_failures", k.controller_failures()},
              {"cache_hit", pl.cache_hit()}});
  return kOk;
}

int cmd_solve(Pipeline& pl, const fs::path& out) {
  const auto& r = pl.robust();
  write_value_field(out / "value_field.csv", *pl.setup().grid, r, &pl.plain());
  write_tables(out, r);
  print_json({{"V_tilde_0", pl.v_tilde_0()}, {"V_0", pl.v_plain_0()}});
  return kOk;
}

int cmd_eval(Pipeline& pl, const fs::path& out) {
  const auto& e = pl.evaluation();
  write_results(out / "results.csv", pl.scenario().name, pl.v_tilde_0(), e);
  write_trajectories(out / "trajectories", e);
  std::cout << results_header() << '\n' << results_row(pl.scenario().name, pl.v_tilde_0(), e) << '\n';
  return kOk;
}

int cmd_pareto(Pipeline& pl, const fs::path& out) {
  write_pareto(out / "pareto.csv", pl.pareto());
  std::ifstream in(out / "pareto.csv");
  std::cout << in.rdbuf();
  return kOk;
}

int cmd_run(Pipeline& pl, const fs::path& out) {
  write_run(pl, out);
  std::ifstream in(out / "results.csv");
  std::cout << in.rdbuf();
  return kOk;
}

// Prints the tables of an existing output directory.
int cmd_report(const fs::path& out) {
  bool any = false;
  for (const char* f : {"results.csv", "pareto.csv"}) {
    std::ifstream in(out / f);
    if (!in) continue;
    any = true;
    std::cout << "# " << f << '\n' << in.rdbuf() << '\n';
  }
  if (!any) throw IoError("no results found in " + out.string());
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Reach-avoid control with a sampled grid abstraction and tube MPC"};
  app.set_version_flag("--version", std::string(REACHCTL_VERSION));
  app.require_subcommand(1);
  Args a;
  auto common = [&](CLI::App* sub, bool needs_scenario = true) {
    auto* o = sub->add_option("--scenario", a.scenario, "scenario JSON file");
    if (needs_scenario) o->required();
    sub->add_option("--out", a.out, "output directory")->capture_default_str();
    sub->add_option("--seed", a.seed, "override the scenario seed");
    sub->add_option("--threads", a.threads, "worker threads (0: all cores)");
    sub->add_option("--cache", a.cache, "kernel cache directory");
    sub->add_option("--trials", a.trials, "override the number of evaluation trials")->check(CLI::NonNegativeNumber);
    sub->add_flag("--certificate-mode", a.certificate, "treat theory violations as errors");
  };
  const char* names[][2] = {{"discretize", "print the zero-order-hold model"},
                            {"tighten", "print the tightened constraint sets"},
                            {"grid", "build the grid abstraction"},
                            {"kernel", "sample the transition kernel"},
                            {"solve", "robust and plain value iteration"},
                            {"eval", "closed-loop Monte-Carlo evaluation"},
                            {"pareto", "cost/reach trade-off sweep"},
                            {"run", "every stage and every report"}};
  std::map<std::string, CLI::App*> subs;
  for (auto& [n, d] : names) common(subs[n] = app.add_subcommand(n, d));
  auto* report = app.add_subcommand("report", "print the tables of an output directory");
  report->add_option("--out", a.out, "output directory")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kScenarioError;
  }

  try {
    const fs::path out(a.out);
    if (report->parsed()) return cmd_report(out);
    Pipeline pl(load_scenario(a.scenario), options(a));
    for (const auto& w : pl.setup().warnings) std::cerr << "warning: " << w << '\n';
    if (subs["discretize"]->parsed()) return cmd_discretize(pl);
    if (subs["tighten"]->parsed()) return cmd_tighten(pl);
    if (subs["grid"]->parsed()) return cmd_grid(pl, out);
    if (subs["kernel"]->parsed()) return cmd_kernel(pl, out);
    if (subs["solve"]->parsed()) return cmd_solve(pl, out);
    if (subs["eval"]->parsed()) return cmd_eval(pl, out);
    if (subs["pareto"]->parsed()) return cmd_pareto(pl, out);
    return cmd_run(pl, out);
  } catch (const StageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return e.code();
  } catch (const ScenarioError& e) {
    std::cerr << "scenario error: " << e.what() << '\n';
    return kScenarioError;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return kIoError;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return kIoError;
  }
}
