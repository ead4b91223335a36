#pragma once

// Files written by a pipeline run.

#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <string>

#include "reachctl/harness/pipeline.hpp"

namespace reachctl::harness {

/// Shortest round-trip text for a double.
inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

namespace detail {

inline std::ofstream open_out(const std::filesystem::path& p, bool binary = false) {
  std::error_code ec;
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path(), ec);
  std::ofstream out(p, binary ? std::ios::binary | std::ios::out : std::ios::out);
  if (!out) throw IoError("cannot write " + p.string());
  return out;
}

inline void finish(std::ofstream& out, const std::filesystem::path& p) {
  out.flush();
  if (!out) throw IoError("write failed for " + p.string());
}

inline std::vector<double> to_vec(const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

inline json hyperrect_json(const HyperRect& b) {
  return json{{"box", {{"lo", to_vec(b.center - b.half_widths)}, {"hi", to_vec(b.center + b.half_widths)}}}};
}

}  // namespace detail

inline const char* results_header() {
  return "scenario,V_tilde_0,V_hat_0,successes,trials,ci99_lower,ci99_upper,eps99,bound_holds";
}

/// One results row; the bound holds when the certified value does not exceed
/// the 99% upper confidence bound of the empirical rate.
inline std::string results_row(const std::string& name, double v_tilde, const EvalReport& e) {
  const bool holds = e.trials == 0 || v_tilde <= e.ci_upper;
  return name + "," + fmt(v_tilde) + "," + fmt(e.v_hat) + "," + std::to_string(e.successes) + "," +
         std::to_string(e.trials) + "," + fmt(e.ci_lower) + "," + fmt(e.ci_upper) + "," +
         fmt(e.eps99) + "," + (holds ? "true" : "false");
}

inline void write_results(const std::filesystem::path& p, const std::string& name, double v_tilde,
                          const EvalReport& e) {
  auto out = detail::open_out(p);
  out << results_header() << '\n';
  if (e.trials > 0) out << results_row(name, v_tilde, e) << '\n';
  detail::finish(out, p);
}

/// Stage-0 values and actions on the safe cells.
inline void write_value_field(const std::filesystem::path& p, const GridAbstraction& g,
                              const ValueIterationResult& robust, const ValueIterationResult* plain) {
  auto out = detail::open_out(p);
  out << "cell";
  for (Index d = 0; d < g.dim(); ++d) out << ",c" << d;
  out << ",V_tilde_0,action_0";
  if (plain) out << ",V_0,plain_action_0";
  out << '\n';
  for (Index c : g.safe_cells()) {
    out << c;
    const Vector ctr = g.center(c);
    for (Index d = 0; d < g.dim(); ++d) out << ',' << fmt(ctr[d]);
    out << ',' << fmt(robust.values.at(0, c)) << ',' << robust.policy.at(0, c);
    if (plain) out << ',' << fmt(plain->values.at(0, c)) << ',' << plain->policy.at(0, c);
    out << '\n';
  }
  detail::finish(out, p);
}

inline void write_pareto(const std::filesystem::path& p, const std::vector<ParetoPoint>& pts) {
  auto out = detail::open_out(p);
  out << "kappa,expected_cost,reach_prob,certified_reach,objective\n";
  for (const auto& q : pts)
    out << fmt(q.kappa) << ',' << fmt(q.expected_cost) << ',' << fmt(q.reach_prob) << ','
        << fmt(q.certified_reach) << ',' << fmt(q.objective) << '\n';
  detail::finish(out, p);
}

/// Recorded trajectories, one CSV each, plus an index.
inline void write_trajectories(const std::filesystem::path& dir, const EvalReport& e) {
  auto idx_path = dir / "index.csv";
  auto idx = detail::open_out(idx_path);
  idx << "trial,success,cost,file,actions\n";
  for (const auto& r : e.recorded) {
    const std::string file = "trial_" + std::to_string(r.trial) + ".csv";
    std::string acts;
    for (std::size_t i = 0; i < r.actions.size(); ++i) acts += (i ? " " : "") + std::to_string(r.actions[i]);
    idx << r.trial << ',' << (r.success ? 1 : 0) << ',' << fmt(r.cost) << ',' << file << ',' << acts << '\n';
    auto tp = dir / file;
    auto out = detail::open_out(tp);
    const auto& path = r.path;
    out << 't';
    const Index n = path.x.empty() ? 0 : path.x.front().size();
    const Index m = path.u.empty() ? 0 : path.u.front().size();
    for (Index i = 0; i < n; ++i) out << ",x" << i;
    for (Index i = 0; i < m; ++i) out << ",u" << i;
    out << '\n';
    for (std::size_t i = 0; i < path.x.size(); ++i) {
      out << fmt(path.t[i]);
      for (Index d = 0; d < n; ++d) out << ',' << fmt(path.x[i][d]);
      for (Index d = 0; d < m; ++d) out << ',' << (i < path.u.size() ? fmt(path.u[i][d]) : std::string());
      out << '\n';
    }
    detail::finish(out, tp);
  }
  detail::finish(idx, idx_path);
}

/// Geometry for plotting: bounds, obstacles, targets, start and grid.
inline void write_geometry(const std::filesystem::path& p, const Scenario& sc, const Setup& s) {
  json features = json::array();
  auto feature = [&](const std::string& role, const json& geom) {
    features.push_back(json{{"type", "Feature"}, {"properties", {{"role", role}}}, {"geometry", geom}});
  };
  feature("bounds", detail::hyperrect_json(sc.bounds));
  for (const auto& o : sc.source["geometry"].value("obstacles", json::array())) feature("obstacle", o);
  for (const auto& t : sc.source["geometry"].value("target", json::array())) feature("target", t);
  const Vector x0 = sc.x0.head(sc.sys.n_s);
  feature("start", json{{"type", "Point"}, {"coordinates", detail::to_vec(x0)}});
  const auto& g = *s.grid;
  json grid{{"zeta", g.zeta()},
            {"r", g.r()},
            {"lower_corner", detail::to_vec(g.lower_corner())},
            {"shape", g.shape()},
            {"safe_cells", g.safe_cells().size()}};
  const json doc{{"type", "FeatureCollection"}, {"features", features}, {"grid", grid}};
  auto out = detail::open_out(p);
  out << doc.dump(2) << '\n';
  detail::finish(out, p);
}

/// Value and policy tables: a JSON header line followed by raw little-endian
/// arrays of shape (N+1)×cells (doubles) or N×cells (int32).
inline void write_tables(const std::filesystem::path& dir, const ValueIterationResult& r) {
  {
    const auto p = dir / "values.bin";
    auto out = detail::open_out(p, true);
    out << json{{"format", "reachctl-values"}, {"dtype", "f64"}, {"stages", r.values.N + 1},
                {"cells", r.values.num_cells}}.dump()
        << '\n';
    out.write(reinterpret_cast<const char*>(r.values.v.data()),
              static_cast<std::streamsize>(r.values.v.size() * sizeof(double)));
    detail::finish(out, p);
  }
  const auto p = dir / "policy.bin";
  auto out = detail::open_out(p, true);
  out << json{{"format", "reachctl-policy"}, {"dtype", "i32"}, {"stages", r.policy.N},
              {"cells", r.policy.num_cells}}.dump()
      << '\n';
  out.write(reinterpret_cast<const char*>(r.policy.a.data()),
            static_cast<std::streamsize>(r.policy.a.size() * sizeof(std::int32_t)));
  detail::finish(out, p);
}

inline std::string utc_timestamp() {
  const std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// Run manifest. Everything outside "run_info" is deterministic.
inline json manifest(Pipeline& pl, const std::vector<std::string>& files) {
  const auto& sc = pl.scenario();
  const auto& s = pl.setup();
  json m{{"tool", "reachctl"},
         {"version", REACHCTL_VERSION},
         {"scenario", sc.name},
         {"scenario_hash", sc.hash},
         {"schema_version", kSchemaVersion},
         {"seed", s.seeds.root},
         {"certificate_mode", pl.options().certificate},
         {"eta", s.tightening.eta},
         {"kappa_x", s.tightening.kappa_x},
         {"kappa_u", s.tightening.kappa_u},
         {"r", s.tightening.r},
         {"zeta", s.tightening.zeta},
         {"actions", s.actions.size()},
         {"safe_cells", s.grid->safe_cells().size()},
         {"warnings", s.warnings},
         {"files", files}};
  json info{{"created", utc_timestamp()}, {"cache_hit", pl.cache_hit()}, {"threads", pl.options().threads}};
  json times = json::object();
  for (const auto& [stage, sec] : pl.wall_times()) times[stage] = sec;
  info["wall_seconds"] = times;
  m["run_info"] = info;
  return m;
}

inline void write_manifest(const std::filesystem::path& p, const json& m) {
  auto out = detail::open_out(p);
  out << m.dump(2) << '\n';
  detail::finish(out, p);
}

}  // namespace reachctl::harness

namespace reachctl::harness {

/// Full pipeline into `out`: every stage and every report file.
inline void write_run(Pipeline& pl, const std::filesystem::path& out) {
  const auto& sc = pl.scenario();
  const auto& s = pl.setup();
  std::vector<std::string> files{"results.csv", "value_field.csv", "geometry.json", "values.bin",
                                 "policy.bin", "trajectories/index.csv"};
  const auto& robust = pl.robust();
  const auto& plain = pl.plain();
  const auto& ev = pl.evaluation();
  write_results(out / "results.csv", sc.name, pl.v_tilde_0(), ev);
  write_value_field(out / "value_field.csv", *s.grid, robust, &plain);
  write_geometry(out / "geometry.json", sc, s);
  write_tables(out, robust);
  write_trajectories(out / "trajectories", ev);
  if (sc.cost && !sc.kappas.empty()) {
    write_pareto(out / "pareto.csv", pl.pareto());
    files.push_back("pareto.csv");
  }
  write_manifest(out / "manifest.json", manifest(pl, files));
}

}  // namespace reachctl::harness
