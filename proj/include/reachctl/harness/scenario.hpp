#pragma once

// JSON scenario files: the plant, geometry, time grid, controller weights,
// command distribution and experiment settings of one run.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "reachctl/abstraction.hpp"
#include "reachctl/lti_model.hpp"
#include "reachctl/mpc.hpp"
#include "reachctl/tightening.hpp"

namespace reachctl::harness {

using json = nlohmann::json;

inline constexpr int kSchemaVersion = 1;

/// Invalid or inconsistent scenario (exit code 2).
class ScenarioError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// File system failure (exit code 4).
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::uint64_t fnv1a(const std::string& s, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << v;
  return os.str();
}

/// A scalar distribution: {"normal": {"mean", "std"}} or {"uniform": {"lo", "hi"}}.
struct Distribution {
  bool normal = true;
  double a = 0.0;  // mean or lo
  double b = 0.0;  // std or hi

  double sample(RandomStream& rng) const {
    return normal ? a + b * rng.normal() : rng.uniform(a, b);
  }
};

struct CommandSpec {
  int count = 0;
  Distribution velocity;
  std::optional<Distribution> weight;  // Q override for the x^s entries
  std::vector<CommandParams> explicit_list;
};

struct Scenario {
  json source;
  std::string name;
  std::string hash;

  StructuredLti sys;
  std::vector<Index> velocity_indices;
  HalfspacePolytope g_d;
  std::optional<double> kappa_x;

  double T = 0.0;
  int N = 1;
  int J = 1;
  double sim_step = 0.0;
  NoiseModel noise;

  HyperRect bounds{Vector::Zero(1), Vector::Zero(1)};
  std::vector<RegionSet> obstacles;
  std::vector<RegionSet> targets;
  Vector x0;
  double edge = 0.0;

  Matrix Q, R;
  MpcMode mode = MpcMode::robust;
  bool collapse_tilde = true;
  std::optional<HalfspacePolytope> terminal_polytope;  // on the full state
  QpSettings qp;
  bool soft_constraints = false;

  CommandSpec commands;
  KernelSettings kernel;
  int trials = 100;
  int recorded_trajectories = 0;
  bool fine_trajectories = false;
  double alpha = 0.0;
  std::optional<StageCost> cost;
  std::vector<double> kappas;
  std::uint64_t seed = 0;

  double outer_step() const { return T / N; }
  double inner_step() const { return T / (static_cast<double>(N) * J); }

  /// S: the bounding box minus the obstacles.
  RegionSet safe_set() const {
    std::vector<RegionSet> holes = obstacles;
    holes.push_back(RegionSet::complement(RegionSet(bounds)));
    return RegionSet::complement(RegionSet::make_union(std::move(holes), bounds.dim()));
  }
  RegionSet target_set() const { return RegionSet::make_union(targets, bounds.dim()); }
  ReachAvoidSets sets() const { return ReachAvoidSets{bounds, safe_set(), target_set()}; }
};

namespace detail {

[[noreturn]] inline void fail(const std::string& where, const std::string& what) {
  throw ScenarioError("scenario: " + where + ": " + what);
}

inline const json& field(const json& j, const char* key, const std::string& where) {
  if (!j.is_object() || !j.contains(key)) fail(where, std::string("missing field '") + key + "'");
  return j.at(key);
}

inline double number(const json& j, const std::string& where) {
  if (!j.is_number()) fail(where, "expected a number");
  const double v = j.get<double>();
  if (!std::isfinite(v)) fail(where, "non-finite number");
  return v;
}

inline Vector vec(const json& j, const std::string& where) {
  if (!j.is_array()) fail(where, "expected an array of numbers");
  Vector v(static_cast<Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) v[static_cast<Index>(i)] = number(j[i], where);
  return v;
}

inline Matrix mat(const json& j, const std::string& where) {
  if (!j.is_array() || j.empty()) fail(where, "expected a non-empty row-major matrix");
  const std::size_t cols = j[0].is_array() ? j[0].size() : 0;
  Matrix M(static_cast<Index>(j.size()), static_cast<Index>(cols));
  for (std::size_t r = 0; r < j.size(); ++r) {
    if (!j[r].is_array() || j[r].size() != cols) fail(where, "ragged matrix rows");
    for (std::size_t c = 0; c < cols; ++c)
      M(static_cast<Index>(r), static_cast<Index>(c)) = number(j[r][c], where);
  }
  return M;
}

/// Q and R accept a full matrix or its diagonal.
inline Matrix weight_matrix(const json& j, Index n, const std::string& where) {
  if (j.is_array() && !j.empty() && j[0].is_number()) {
    const Vector d = vec(j, where);
    if (d.size() != n) fail(where, "diagonal has the wrong length");
    return d.asDiagonal();
  }
  Matrix M = mat(j, where);
  if (M.rows() != n || M.cols() != n) fail(where, "matrix has the wrong shape");
  return M;
}

inline HalfspacePolytope polytope(const json& j, const std::string& where) {
  if (j.contains("box")) {
    const json& b = j.at("box");
    const Vector lo = vec(field(b, "lo", where), where + ".box.lo");
    const Vector hi = vec(field(b, "hi", where), where + ".box.hi");
    if (lo.size() != hi.size() || !(hi.array() >= lo.array()).all())
      fail(where, "box needs lo <= hi of equal length");
    return HalfspacePolytope::box(lo, hi);
  }
  if (j.contains("halfspaces")) {
    const json& h = j.at("halfspaces");
    const Matrix H = mat(field(h, "normals", where), where + ".normals");
    const Vector b = vec(field(h, "offsets", where), where + ".offsets");
    if (H.rows() != b.size()) fail(where, "normals and offsets differ in count");
    return HalfspacePolytope(H, b);
  }
  fail(where, "expected 'box' or 'halfspaces'");
}

inline RegionSet region(const json& j, Index dim, const std::string& where) {
  if (!j.is_object() || j.size() != 1) fail(where, "a region is an object with exactly one key");
  const auto& [kind, body] = *j.items().begin();
  RegionSet out = RegionSet::empty(dim);
  if (kind == "box") {
    const Vector lo = vec(field(body, "lo", where), where + ".lo");
    const Vector hi = vec(field(body, "hi", where), where + ".hi");
    if (lo.size() != dim || hi.size() != dim || !(hi.array() >= lo.array()).all())
      fail(where, "box needs lo <= hi in the stochastic dimension");
    out = RegionSet(HyperRect::from_bounds(lo, hi));
  } else if (kind == "ball") {
    const Vector c = vec(field(body, "center", where), where + ".center");
    const double r = number(field(body, "radius", where), where + ".radius");
    if (c.size() != dim || r < 0.0) fail(where, "ball needs a center in the stochastic dimension and radius >= 0");
    out = RegionSet(BallRegion(c, r));
  } else if (kind == "polytope") {
    const Matrix H = mat(field(body, "normals", where), where + ".normals");
    const Vector b = vec(field(body, "offsets", where), where + ".offsets");
    if (H.cols() != dim || H.rows() != b.size()) fail(where, "polytope shape mismatch");
    out = RegionSet(HalfspacePolytope(H, b));
  } else if (kind == "union") {
    if (!body.is_array()) fail(where, "union takes an array of regions");
    std::vector<RegionSet> members;
    for (std::size_t i = 0; i < body.size(); ++i)
      members.push_back(region(body[i], dim, where + ".union[" + std::to_string(i) + "]"));
    out = RegionSet::make_union(std::move(members), dim);
  } else if (kind == "complement") {
    out = RegionSet::complement(region(body, dim, where + ".complement"));
  } else {
    fail(where, "unknown region kind '" + kind + "'");
  }
  return out;
}

inline Distribution distribution(const json& j, const std::string& where) {
  Distribution d;
  if (j.contains("normal")) {
    d.normal = true;
    d.a = number(field(j.at("normal"), "mean", where), where + ".mean");
    d.b = number(field(j.at("normal"), "std", where), where + ".std");
    if (d.b < 0.0) fail(where, "std must be >= 0");
  } else if (j.contains("uniform")) {
    d.normal = false;
    d.a = number(field(j.at("uniform"), "lo", where), where + ".lo");
    d.b = number(field(j.at("uniform"), "hi", where), where + ".hi");
    if (d.b < d.a) fail(where, "uniform needs lo <= hi");
  } else {
    fail(where, "expected 'normal' or 'uniform'");
  }
  return d;
}

template <class T>
T value_or(const json& j, const char* key, T fallback) {
  return j.is_object() && j.contains(key) ? j.at(key).get<T>() : fallback;
}

}  // namespace detail

/// Parses and validates a scenario document.
inline Scenario parse_scenario(const json& doc) {
  using namespace detail;
  Scenario sc;
  try {
    sc.source = doc;
    sc.hash = hex64(fnv1a(doc.dump()));
    if (value_or<int>(doc, "schema_version", -1) != kSchemaVersion)
      fail("schema_version", "expected " + std::to_string(kSchemaVersion));
    sc.name = field(doc, "name", "name").get<std::string>();

    const json& sj = field(doc, "system", "system");
    const Matrix A = mat(field(sj, "A", "system"), "system.A");
    const Matrix B = mat(field(sj, "B", "system"), "system.B");
    const Matrix E = mat(field(sj, "E", "system"), "system.E");
    const auto ns = field(sj, "n_s", "system").get<Index>();
    const auto nd = field(sj, "n_d", "system").get<Index>();
    const HalfspacePolytope U = polytope(field(sj, "input_set", "system"), "system.input_set");
    sc.sys = StructuredLti(A, B, E, ns, nd, U);
    for (const auto& v : field(sj, "velocity_indices", "system")) {
      const auto idx = v.get<Index>();
      if (idx < 0 || idx >= sc.sys.n()) fail("system.velocity_indices", "index out of range");
      sc.velocity_indices.push_back(idx);
    }
    if (static_cast<Index>(sc.velocity_indices.size()) != ns)
      fail("system.velocity_indices", "need one entry per stochastic state");

    const json& cj = field(doc, "constraints", "constraints");
    sc.g_d = polytope(cj, "constraints");
    if (sc.g_d.dim() != nd) fail("constraints", "state constraints must live on x^d");
    if (cj.contains("kappa_x")) sc.kappa_x = number(cj.at("kappa_x"), "constraints.kappa_x");

    const json& tj = field(doc, "time", "time");
    sc.T = number(field(tj, "T", "time"), "time.T");
    sc.N = field(tj, "N", "time").get<int>();
    sc.J = field(tj, "J", "time").get<int>();
    sc.sim_step = number(field(tj, "sim_step", "time"), "time.sim_step");

    const json& nj = field(doc, "noise", "noise");
    sc.noise = NoiseModel(vec(field(nj, "mean", "noise"), "noise.mean"),
                          mat(field(nj, "covariance", "noise"), "noise.covariance"),
                          value_or<double>(nj, "sample_interval", sc.sim_step));

    const json& gj = field(doc, "geometry", "geometry");
    {
      const json& b = field(gj, "bounds", "geometry");
      const Vector lo = vec(field(b, "lo", "geometry.bounds"), "geometry.bounds.lo");
      const Vector hi = vec(field(b, "hi", "geometry.bounds"), "geometry.bounds.hi");
      if (lo.size() != ns || hi.size() != ns || !(hi.array() > lo.array()).all())
        fail("geometry.bounds", "need lo < hi with n_s entries");
      sc.bounds = HyperRect::from_bounds(lo, hi);
    }
    if (gj.contains("obstacles"))
      for (std::size_t i = 0; i < gj.at("obstacles").size(); ++i)
        sc.obstacles.push_back(region(gj.at("obstacles")[i], ns, "geometry.obstacles[" + std::to_string(i) + "]"));
    const json& tl = field(gj, "target", "geometry");
    if (!tl.is_array() || tl.empty()) fail("geometry.target", "need a non-empty list of regions");
    for (std::size_t i = 0; i < tl.size(); ++i)
      sc.targets.push_back(region(tl[i], ns, "geometry.target[" + std::to_string(i) + "]"));

    sc.x0 = vec(field(doc, "x0", "x0"), "x0");
    if (sc.x0.size() != sc.sys.n()) fail("x0", "initial state has the wrong dimension");
    sc.edge = number(field(field(doc, "grid", "grid"), "edge", "grid"), "grid.edge");
    if (!(sc.edge > 0.0)) fail("grid.edge", "must be positive");

    const json& mj = field(doc, "mpc", "mpc");
    sc.Q = weight_matrix(field(mj, "Q", "mpc"), sc.sys.n(), "mpc.Q");
    sc.R = weight_matrix(field(mj, "R", "mpc"), sc.sys.m(), "mpc.R");
    const auto mode = value_or<std::string>(mj, "mode", "robust");
    if (mode != "robust" && mode != "nominal") fail("mpc.mode", "expected robust or nominal");
    sc.mode = mode == "robust" ? MpcMode::robust : MpcMode::nominal;
    sc.collapse_tilde = value_or<bool>(mj, "collapse_tilde", true);
    const auto term = value_or<std::string>(mj, "terminal", "zero_set");
    if (term == "polytope") {
      sc.terminal_polytope = polytope(field(mj, "terminal_set", "mpc"), "mpc.terminal_set");
    } else if (term != "zero_set") {
      fail("mpc.terminal", "expected zero_set or polytope");
    }
    sc.soft_constraints = value_or<bool>(mj, "soft_constraints", false);
    if (mj.contains("qp")) {
      const json& q = mj.at("qp");
      sc.qp.tol = value_or<double>(q, "tol", sc.qp.tol);
      sc.qp.max_iter = value_or<int>(q, "max_iter", sc.qp.max_iter);
      sc.qp.rho = value_or<double>(q, "rho", sc.qp.rho);
    }

    const json& aj = field(doc, "commands", "commands");
    if (aj.contains("list")) {
      for (std::size_t i = 0; i < aj.at("list").size(); ++i) {
        const json& c = aj.at("list")[i];
        const std::string w = "commands.list[" + std::to_string(i) + "]";
        CommandParams p{vec(field(c, "velocity", w), w + ".velocity"),
                        c.contains("weights") ? vec(c.at("weights"), w + ".weights") : Vector()};
        if (p.velocity.size() != ns || (p.weights.size() != 0 && p.weights.size() != ns))
          fail(w, "velocity and weights need n_s entries");
        sc.commands.explicit_list.push_back(std::move(p));
      }
    } else {
      sc.commands.count = field(aj, "count", "commands").get<int>();
      if (sc.commands.count < 1) fail("commands.count", "need at least one command");
      sc.commands.velocity = distribution(field(aj, "velocity", "commands"), "commands.velocity");
      if (aj.contains("weight")) sc.commands.weight = distribution(aj.at("weight"), "commands.weight");
    }

    const json& kj = field(doc, "kernel", "kernel");
    sc.kernel.samples_per_action = field(kj, "samples", "kernel").get<int>();
    const auto kmode = value_or<std::string>(kj, "mode", "translation_invariant");
    if (kmode != "translation_invariant" && kmode != "per_state")
      fail("kernel.mode", "expected translation_invariant or per_state");
    sc.kernel.mode = kmode == "per_state" ? KernelMode::per_state : KernelMode::translation_invariant;
    sc.kernel.cost_stride = value_or<int>(kj, "cost_stride", 10);

    const json ej = doc.contains("evaluation") ? doc.at("evaluation") : json::object();
    sc.trials = value_or<int>(ej, "trials", 100);
    sc.recorded_trajectories = value_or<int>(ej, "trajectories", 0);
    sc.fine_trajectories = value_or<std::string>(ej, "resolution", "inner") == "fine";
    if (sc.trials < 0 || sc.recorded_trajectories < 0) fail("evaluation", "counts must be >= 0");

    sc.alpha = value_or<double>(doc, "alpha", 0.0);
    if (doc.contains("cost")) {
      const json& r = field(doc.at("cost"), "radial", "cost");
      sc.cost = StageCost{vec(field(r, "center", "cost.radial"), "cost.radial.center"),
                          -1.0 / number(field(r, "scale", "cost.radial"), "cost.radial.scale")};
      if (sc.cost->center.size() != ns) fail("cost.radial.center", "need n_s entries");
    }
    if (doc.contains("pareto"))
      for (const auto& k : field(doc.at("pareto"), "kappas", "pareto")) sc.kappas.push_back(number(k, "pareto.kappas"));
    sc.seed = value_or<std::uint64_t>(doc, "seed", 0);
  } catch (const ScenarioError&) {
    throw;
  } catch (const std::exception& e) {
    throw ScenarioError(std::string("scenario: ") + e.what());
  }
  return sc;
}

inline json read_json_file(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) throw IoError("cannot open " + p.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ScenarioError("scenario: " + p.string() + ": " + e.what());
  }
}

inline Scenario load_scenario(const std::filesystem::path& p) { return parse_scenario(read_json_file(p)); }

/// Draws the frozen command set from the scenario's distributions.
inline std::vector<CommandParams> sample_commands(const Scenario& sc, std::uint64_t seed) {
  if (!sc.commands.explicit_list.empty()) return sc.commands.explicit_list;
  RandomStream rng(seed, {0x636d64ULL});
  const Index ns = sc.sys.n_s;
  std::vector<CommandParams> out;
  for (int i = 0; i < sc.commands.count; ++i) {
    CommandParams p;
    p.velocity.resize(ns);
    for (Index k = 0; k < ns; ++k) p.velocity[k] = sc.commands.velocity.sample(rng);
    // One position weight per command, shared by all stochastic coordinates.
    if (sc.commands.weight)
      p.weights = Vector::Constant(ns, std::max(0.0, sc.commands.weight->sample(rng)));
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace reachctl::harness
