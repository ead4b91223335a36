#pragma once

// End-to-end run of one scenario: tightening, grid, kernel (cached), value
// iteration, closed-loop evaluation and the Lagrangian sweep.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "reachctl/abstraction.hpp"
#include "reachctl/closed_loop.hpp"
#include "reachctl/dp.hpp"
#include "reachctl/harness/scenario.hpp"
#include "reachctl/stats.hpp"

#ifndef REACHCTL_VERSION
#define REACHCTL_VERSION "0.0.0"
#endif

namespace reachctl::harness {

/// Exit codes of the command-line tool.
enum ExitCode : int { kOk = 0, kScenarioError = 2, kTheoryViolation = 3, kIoError = 4 };

/// A pipeline stage failed; carries the stage name and the exit code.
class StageError : public std::runtime_error {
 public:
  StageError(std::string stage, int code, const std::string& what)
      : std::runtime_error(stage + ": " + what), stage_(std::move(stage)), code_(code) {}
  const std::string& stage() const { return stage_; }
  int code() const { return code_; }

 private:
  std::string stage_;
  int code_;
};

struct RunOptions {
  std::optional<std::uint64_t> seed;
  unsigned threads = 1;
  std::optional<std::filesystem::path> cache_dir;
  bool certificate = false;
  std::optional<int> trials;
};

/// Seeds of the independent random streams of one run.
struct Seeds {
  std::uint64_t root = 0;
  std::uint64_t commands = 0;
  std::uint64_t kernel = 0;
  std::uint64_t evaluation = 0;

  explicit Seeds(std::uint64_t r = 0)
      : root(r), commands(derive_seed(r, {1})), kernel(derive_seed(r, {2})),
        evaluation(derive_seed(r, {3})) {}
};

/// First-hit reach-avoid bookkeeping on the fine path: success once T is
/// entered with all earlier points in S, failure once S is left first.
struct FirstHit {
  enum class State { undecided, success, failure };
  State state = State::undecided;
  std::int64_t step = -1;

  void observe(const RegionSet& S, const RegionSet& T, const Vector& xs, std::int64_t i) {
    if (state != State::undecided) return;
    if (region_contains(T, xs)) {
      state = State::success;
      step = i;
    } else if (!region_contains(S, xs)) {
      state = State::failure;
      step = i;
    }
  }
  bool decided() const { return state != State::undecided; }
};

struct TrialRecord {
  int trial = 0;
  bool success = false;
  std::vector<int> actions;
  Trajectory path;  // decimated; empty unless recorded
  double cost = 0.0;
};

struct EvalReport {
  int trials = 0;
  int successes = 0;
  double v_hat = 0.0;
  double ci_lower = 0.0;
  double ci_upper = 1.0;
  double eps99 = 0.0;  // one-sided 99% radius above v_hat
  std::int64_t g_violations = 0;
  std::int64_t infeasible_events = 0;
  double max_terminal_deviation = 0.0;  // max ‖x^d‖∞ at block boundaries
  double mean_cost = 0.0;
  std::vector<TrialRecord> recorded;
};

/// Everything derived from the scenario before sampling.
struct Setup {
  Seeds seeds;
  EtaResult eta;
  TighteningParams tightening;
  std::shared_ptr<const MpcConfig> mpc;
  ClosedLoopPlant plant;
  RegionSet safe = RegionSet::empty(1);
  RegionSet target = RegionSet::empty(1);
  std::optional<GridAbstraction> grid;
  std::optional<NeighborhoodIndex> neighbors;
  std::vector<CommandParams> actions;
  std::vector<std::string> warnings;
};

namespace detail {

inline bool within(const HalfspacePolytope& p, const Vector& x, double tol) {
  for (Index i = 0; i < p.size(); ++i)
    if (p.normals().row(i).dot(x) > p.offsets()[i] + tol) return false;
  return true;
}

}  // namespace detail

/// Tightening, MPC configuration, grid and command set.
inline Setup build_setup(const Scenario& sc, const RunOptions& opt) {
  Setup s;
  s.seeds = Seeds(opt.seed.value_or(sc.seed));
  const Index ns = sc.sys.n_s, nd = sc.sys.n_d;
  try {
    const TimeGrid tg(sc.T, sc.N, sc.J, sc.sim_step);
    const double dt = sc.inner_step();
    s.eta = compute_eta(sc.sys, sc.g_d, sc.sys.input_set, dt, sc.kappa_x);
    auto& tp = s.tightening;
    tp.eta = s.eta.eta;
    tp.kappa_x = s.eta.kappa_x;
    tp.kappa_u = s.eta.kappa_u;
    tp.zeta = sc.edge;
    tp.r = tube_radius_for(sc.sys, sc.outer_step(), sc.edge);

    auto cfg = std::make_shared<MpcConfig>();
    cfg->model = discretize(sc.sys, dt);
    cfg->input_set = sc.sys.input_set;
    cfg->Q = sc.Q;
    cfg->R = sc.R;
    cfg->J = sc.J;
    cfg->family = build_constraint_family(
        sc.g_d, tp, sc.terminal_polytope ? TerminalMode::validated_polytope : TerminalMode::zero_set,
        sc.terminal_polytope, sc.collapse_tilde);
    cfg->mode = sc.mode;
    cfg->zeta = sc.edge;
    cfg->r = tp.r;
    cfg->qp = sc.qp;
    cfg->soft_constraints = sc.soft_constraints;
    if (opt.certificate && sc.soft_constraints)
      throw ScenarioError("soft constraints are not allowed in certificate mode");
    cfg->validate();
    s.mpc = cfg;
    s.plant = ClosedLoopPlant(sc.sys, tg, sc.noise, s.mpc, sc.velocity_indices);

    s.safe = sc.safe_set();
    s.target = sc.target_set();
    s.grid.emplace(sc.sets(), sc.edge, tp.r, Vector(sc.x0.head(ns)));
    s.neighbors.emplace(*s.grid);
    s.actions = sample_commands(sc, s.seeds.commands);
  } catch (const ScenarioError&) {
    throw;
  } catch (const ArgumentError& e) {
    throw ScenarioError(e.what());
  }

  // Initial-state checks.
  auto complain = [&](const std::string& msg) {
    if (opt.certificate) throw ScenarioError("x0: " + msg);
    s.warnings.push_back("x0: " + msg);
  };
  const Vector xs = sc.x0.head(ns), xd = sc.x0.tail(nd);
  if (!region_contains(s.safe, xs)) complain("initial position is not inside S");
  if (s.mpc->family.zero_terminal()) {
    if (xd.size() > 0 && xd.lpNorm<Eigen::Infinity>() > 1e-12)
      complain("x^d(0) must be zero for the zero terminal set");
  } else if (!detail::within(std::get<ValidatedPolytope>(s.mpc->family.terminal).set, sc.x0, 1e-9)) {
    complain("initial state is outside the terminal set");
  }
  const Index c0 = s.grid->initial_cell();
  if (c0 < 0 || s.grid->cell_class(c0) != CellClass::safe)
    throw ScenarioError("x0: the initial cell must be a safe grid cell (found " +
                        std::string(c0 < 0 ? "off-grid" : to_string(s.grid->cell_class(c0))) + ")");
  return s;
}

/// Closed-loop Monte-Carlo evaluation of a policy with the robust MPC.
/// Trials use the streams (seed, trial) and run in parallel; the physical
/// simulation continues with the last command after the outcome is decided.
inline EvalReport evaluate_policy(const Scenario& sc, const Setup& s, const Policy& pi, int trials,
                                  std::uint64_t seed, unsigned threads) {
  require(pi.N == sc.N, "evaluate_policy: policy horizon != N");
  const GridAbstraction& grid = *s.grid;
  const ClosedLoopPlant& plant = s.plant;
  const Index ns = sc.sys.n_s, nd = sc.sys.n_d;
  const int S = plant.grid.substeps();
  const std::int64_t per_block = plant.grid.fine_steps_per_block();
  const double h = plant.grid.sim_step();
  const int record = std::min(trials, sc.recorded_trajectories);

  struct Result {
    TrialRecord rec;
    std::int64_t g_viol = 0;
    std::int64_t infeasible = 0;
    double max_dev = 0.0;
  };
  std::vector<Result> results(static_cast<std::size_t>(std::max(trials, 0)));
  const unsigned workers = worker_count(results.size(), threads);
  std::vector<std::unique_ptr<TrackingMpc>> ctl(workers);
  std::vector<BlockWorkspace> ws(workers);
  for (auto& c : ctl) c = std::make_unique<TrackingMpc>(s.mpc);

  parallel_for(results.size(), workers, [&](std::size_t t, unsigned w) {
    Result& res = results[t];
    res.rec.trial = static_cast<int>(t);
    const bool keep = static_cast<int>(t) < record;
    RandomStream rng(seed, {static_cast<std::uint64_t>(t)});
    Vector x = sc.x0;
    FirstHit fh;
    int last = -1;
    Vector u_last = Vector::Zero(sc.sys.m());
    for (int k = 0; k < sc.N; ++k) {
      const Vector xs = x.head(ns);
      int a = execute_policy(pi, grid, k, xs);
      if (a < 0) a = last;
      require(a >= 0, "evaluate_policy: no action for the initial cell");
      last = a;
      res.rec.actions.push_back(a);
      const Index cell = grid.locate(xs);
      const Vector center = cell >= 0 ? grid.center(cell) : xs;
      if (k > 0 && nd > 0) res.max_dev = std::max(res.max_dev, x.tail(nd).lpNorm<Eigen::Infinity>());
      TrackingMpc& mpc = *ctl[w];
      auto observe = [&](std::int64_t i, const Vector& xv) {
        const std::int64_t gi = k * per_block + i;
        const Vector pos = xv.head(ns);
        if (k == 0 || i > 0) {  // i == 0 repeats the end of the previous block
          fh.observe(s.safe, s.target, pos, gi);
          if (nd > 0 && !detail::within(sc.g_d, xv.tail(nd), 1e-9)) ++res.g_viol;
        }
        if (sc.cost && !fh.decided() && i < per_block) res.rec.cost += (*sc.cost)(pos.data()) * h;
        if (k > 0 && i == 0) return true;
        if (keep && (sc.fine_trajectories || i % S == 0)) {
          res.rec.path.t.push_back(plant.grid.time_at(gi));
          res.rec.path.x.push_back(xv);
          res.rec.path.u.push_back(u_last);
        }
        return true;
      };
      try {
        simulate_block(plant, mpc, k, x, s.actions[static_cast<std::size_t>(a)], center, rng,
                       ws[w], [&](std::int64_t i, const Vector& xv) {
                         if (i > 0) u_last = ws[w].u;
                         return observe(i, xv);
                       });
      } catch (const MpcInfeasible&) {
        ++res.infeasible;
        break;
      }
    }
    if (nd > 0) res.max_dev = std::max(res.max_dev, x.tail(nd).lpNorm<Eigen::Infinity>());
    res.rec.success = fh.state == FirstHit::State::success;
    // Inputs are stored with the state they act from.
    if (keep && res.rec.path.u.size() > 1) {
      for (std::size_t i = 0; i + 1 < res.rec.path.u.size(); ++i)
        res.rec.path.u[i] = res.rec.path.u[i + 1];
      res.rec.path.u.pop_back();
    }
  });

  EvalReport rep;
  rep.trials = trials;
  double cost = 0.0;
  for (auto& r : results) {
    rep.successes += r.rec.success ? 1 : 0;
    rep.g_violations += r.g_viol;
    rep.infeasible_events += r.infeasible;
    rep.max_terminal_deviation = std::max(rep.max_terminal_deviation, r.max_dev);
    cost += r.rec.cost;
    if (r.rec.trial < record) rep.recorded.push_back(std::move(r.rec));
  }
  if (trials > 0) {
    rep.v_hat = static_cast<double>(rep.successes) / trials;
    rep.ci_lower = clopper_pearson_lower(rep.successes, trials, 0.99);
    rep.ci_upper = clopper_pearson_upper(rep.successes, trials, 0.99);
    rep.eps99 = rep.ci_upper - rep.v_hat;
    rep.mean_cost = cost / trials;
  }
  return rep;
}

/// Lazily evaluated stages of one run with wall times and a kernel cache.
class Pipeline {
 public:
  Pipeline(Scenario sc, RunOptions opt) : sc_(std::move(sc)), opt_(std::move(opt)) {}

  const Scenario& scenario() const { return sc_; }
  const RunOptions& options() const { return opt_; }

  const Setup& setup() {
    if (!setup_) timed("setup", [&] { setup_.emplace(build_setup(sc_, opt_)); });
    return *setup_;
  }

  const TransitionModel& kernel() {
    if (kernel_) return *kernel_;
    const Setup& s = setup();
    timed("kernel", [&] {
      KernelSettings ks = sc_.kernel;
      ks.seed = s.seeds.kernel;
      ks.threads = opt_.threads;
      ks.cost = sc_.cost;
      const auto file = cache_file();
      if (file && std::filesystem::exists(*file)) {
        kernel_ = load_kernel(*file);
        cache_hit_ = true;
        return;
      }
      try {
        kernel_ = estimate_kernel(s.plant, *s.grid, s.actions, ks);
      } catch (const ArgumentError& e) {
        throw StageError("kernel", kScenarioError, e.what());
      }
      if (file) save_kernel(*file, *kernel_);
    });
    if (opt_.certificate && kernel_->controller_failures() > 0)
      throw StageError("kernel", kTheoryViolation,
                       std::to_string(kernel_->controller_failures()) +
                           " MPC infeasibility events while sampling the kernel");
    return *kernel_;
  }

  const KernelTable& table() {
    if (!table_) {
      const auto& k = kernel();
      timed("table", [&] { table_ = k.table(*setup().grid, opt_.threads); });
    }
    return *table_;
  }

  const ValueIterationResult& robust() {
    if (!robust_) {
      const auto& t = table();
      timed("solve", [&] { robust_ = robust_value_iteration(t, *setup_->grid, *setup_->neighbors, sc_.N); });
    }
    return *robust_;
  }

  const ValueIterationResult& plain() {
    if (!plain_) {
      const auto& t = table();
      timed("solve_plain", [&] { plain_ = plain_value_iteration(t, *setup_->grid, sc_.N); });
    }
    return *plain_;
  }

  const EvalReport& evaluation() {
    if (eval_) return *eval_;
    const auto& pol = robust().policy;
    const int trials = opt_.trials.value_or(sc_.trials);
    timed("eval", [&] {
      eval_ = evaluate_policy(sc_, *setup_, pol, trials, setup_->seeds.evaluation, opt_.threads);
    });
    if (opt_.certificate) {
      if (eval_->infeasible_events > 0 || eval_->g_violations > 0)
        throw StageError("eval", kTheoryViolation,
                         std::to_string(eval_->infeasible_events) + " infeasibility events, " +
                             std::to_string(eval_->g_violations) + " constraint violations");
      if (trials > 0 && v_tilde_0() > eval_->ci_upper)
        throw StageError("eval", kTheoryViolation,
                         "certified value exceeds the 99% upper confidence bound");
    }
    return *eval_;
  }

  const std::vector<ParetoPoint>& pareto() {
    if (!pareto_) {
      if (!sc_.cost) throw StageError("pareto", kScenarioError, "scenario has no running cost");
      if (sc_.kappas.empty()) throw StageError("pareto", kScenarioError, "scenario lists no kappas");
      const auto& t = table();
      timed("pareto", [&] {
        pareto_policies_.clear();
        pareto_ = pareto_sweep(t, *setup_->grid, *setup_->neighbors, sc_.alpha, sc_.kappas, sc_.N,
                               &pareto_policies_);
      });
    }
    return *pareto_;
  }
  const std::vector<Policy>& pareto_policies() {
    pareto();
    return pareto_policies_;
  }

  double v_tilde_0() {
    const auto& s = setup();
    return robust().values.at(0, s.grid->initial_cell());
  }
  double v_plain_0() {
    const auto& s = setup();
    return plain().values.at(0, s.grid->initial_cell());
  }

  bool cache_hit() const { return cache_hit_; }
  const std::vector<std::pair<std::string, double>>& wall_times() const { return times_; }

  /// Cache key of the kernel: everything that influences the samples.
  std::string kernel_key() {
    json material = sc_.source;
    for (const char* k : {"name", "evaluation", "pareto", "alpha"}) material.erase(k);
    json key{{"scenario", material},
             {"seed", setup().seeds.kernel},
             {"commands_seed", setup().seeds.commands},
             {"version", REACHCTL_VERSION}};
    return hex64(fnv1a(key.dump()));
  }

 private:
  template <class F>
  void timed(const std::string& stage, F&& f) {
    const auto t0 = std::chrono::steady_clock::now();
    try {
      f();
    } catch (const StageError&) {
      throw;
    } catch (const ScenarioError& e) {
      throw StageError(stage, kScenarioError, e.what());
    } catch (const IoError& e) {
      throw StageError(stage, kIoError, e.what());
    }
    const std::chrono::duration<double> dt = std::chrono::steady_clock::now() - t0;
    times_.emplace_back(stage, dt.count());
  }

  std::optional<std::filesystem::path> cache_file() {
    if (!opt_.cache_dir) return std::nullopt;
    return *opt_.cache_dir / ("kernel-" + kernel_key() + ".bin");
  }

  TransitionModel load_kernel(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw IoError("cannot open " + p.string());
    std::string header;
    std::getline(in, header);
    json h;
    try {
      h = json::parse(header);
    } catch (const json::parse_error&) {
      throw IoError("corrupt cache header in " + p.string());
    }
    if (h.value("format", "") != "reachctl-kernel" || h.value("key", "") != kernel_key())
      throw IoError("cache file " + p.string() + " does not match this scenario");
    try {
      return TransitionModel::read(in);
    } catch (const ArgumentError& e) {
      throw IoError(p.string() + ": " + e.what());
    }
  }

  void save_kernel(const std::filesystem::path& p, const TransitionModel& m) {
    std::error_code ec;
    std::filesystem::create_directories(p.parent_path(), ec);
    const auto tmp = p.string() + ".tmp";
    {
      std::ofstream out(tmp, std::ios::binary);
      if (!out) throw IoError("cannot write " + tmp);
      json h{{"format", "reachctl-kernel"}, {"version", 1}, {"key", kernel_key()},
             {"scenario", sc_.name}};
      out << h.dump() << '\n';
      m.write(out);
      if (!out) throw IoError("write failed for " + tmp);
    }
    std::filesystem::rename(tmp, p, ec);
    if (ec) throw IoError("cannot move cache file into place: " + ec.message());
  }

  Scenario sc_;
  RunOptions opt_;
  std::optional<Setup> setup_;
  std::optional<TransitionModel> kernel_;
  std::optional<KernelTable> table_;
  std::optional<ValueIterationResult> robust_, plain_;
  std::optional<EvalReport> eval_;
  std::optional<std::vector<ParetoPoint>> pareto_;
  std::vector<Policy> pareto_policies_;
  bool cache_hit_ = false;
  std::vector<std::pair<std::string, double>> times_;
};

}  // namespace reachctl::harness
