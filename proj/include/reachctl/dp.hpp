#pragma once

// Finite-horizon value iteration on the abstract kernel: reach-avoid values,
// their robust counterpart over cell neighborhoods, and the Lagrangian
// trade-off between running cost and reach probability.

#include <cstdint>
#include <optional>
#include <vector>

#include "reachctl/abstraction.hpp"
#include "reachctl/core.hpp"

namespace reachctl {

/// Values V_k(cell) for k = 0..N over every grid cell. Target cells hold 1 and
/// unsafe cells 0 at every stage.
struct ValueTable {
  int N = 0;
  Index num_cells = 0;
  std::vector<double> v;

  ValueTable() = default;
  ValueTable(int horizon, Index cells)
      : N(horizon), num_cells(cells),
        v(static_cast<std::size_t>(horizon + 1) * static_cast<std::size_t>(cells), 0.0) {}

  double at(int k, Index c) const { return v[index(k, c)]; }
  double& at(int k, Index c) { return v[index(k, c)]; }

 private:
  std::size_t index(int k, Index c) const {
    return static_cast<std::size_t>(k) * static_cast<std::size_t>(num_cells) +
           static_cast<std::size_t>(c);
  }
};

/// Actions π_k(cell) for k = 0..N−1; -1 on target and unsafe cells.
struct Policy {
  int N = 0;
  Index num_cells = 0;
  std::vector<std::int32_t> a;

  Policy() = default;
  Policy(int horizon, Index cells)
      : N(horizon), num_cells(cells),
        a(static_cast<std::size_t>(horizon) * static_cast<std::size_t>(cells), -1) {}

  std::int32_t at(int k, Index c) const { return a[index(k, c)]; }
  std::int32_t& at(int k, Index c) { return a[index(k, c)]; }

 private:
  std::size_t index(int k, Index c) const {
    return static_cast<std::size_t>(k) * static_cast<std::size_t>(num_cells) +
           static_cast<std::size_t>(c);
  }
};

struct ValueIterationResult {
  ValueTable values;
  Policy policy;
};

namespace detail {

inline void check_table(const KernelTable& t, const GridAbstraction& g, int N) {
  require(N >= 1, "value iteration: N must be >= 1");
  require(t.num_actions >= 1, "value iteration: no actions");
  require(t.safe_cells == g.safe_cells(), "value iteration: kernel built for a different grid");
  require(t.rows.size() == t.safe_cells.size() * static_cast<std::size_t>(t.num_actions),
          "value iteration: kernel has the wrong number of rows");
}

inline ValueTable boundary_values(const GridAbstraction& g, int N) {
  ValueTable V(N, g.num_cells());
  for (int k = 0; k <= N; ++k)
    for (Index c = 0; c < g.num_cells(); ++c)
      if (g.cell_class(c) == CellClass::target) V.at(k, c) = 1.0;
  return V;
}

/// W_{k+1}(j) for each safe position j: V_{k+1}(j) itself, or its minimum
/// over the neighborhood C_j.
inline void continuation(const GridAbstraction& g, const NeighborhoodIndex* nb,
                         const ValueTable& V, int k1, std::vector<double>& W) {
  const auto& safe = g.safe_cells();
  W.resize(safe.size());
  for (std::size_t p = 0; p < safe.size(); ++p) {
    if (nb == nullptr) {
      W[p] = V.at(k1, safe[p]);
      continue;
    }
    double m = 1.0;
    for (const Index* c = nb->begin(static_cast<Index>(p)); c != nb->end(static_cast<Index>(p)); ++c)
      m = std::min(m, V.at(k1, *c));
    W[p] = m;
  }
}

inline double expected(const GridAbstraction& g, const SparseRow& row,
                       const std::vector<double>& W) {
  double s = row.p_target;
  for (std::size_t e = 0; e < row.cells.size(); ++e)
    s += row.probs[e] * W[static_cast<std::size_t>(g.safe_position(row.cells[e]))];
  return s;
}

inline ValueIterationResult reach_avoid_iteration(const KernelTable& t, const GridAbstraction& g,
                                                  const NeighborhoodIndex* nb, int N) {
  check_table(t, g, N);
  ValueIterationResult out{boundary_values(g, N), Policy(N, g.num_cells())};
  std::vector<double> W;
  const auto& safe = g.safe_cells();
  for (int k = N - 1; k >= 0; --k) {
    continuation(g, nb, out.values, k + 1, W);
    for (std::size_t p = 0; p < safe.size(); ++p) {
      double best = -1.0;
      int best_a = 0;
      for (int a = 0; a < t.num_actions; ++a) {
        const double q = expected(g, t.row(static_cast<Index>(p), a), W);
        if (q > best) {
          best = q;
          best_a = a;
        }
      }
      out.values.at(k, safe[p]) = best;
      out.policy.at(k, safe[p]) = best_a;
    }
  }
  return out;
}

}  // namespace detail

/// Reach-avoid value iteration on the abstract MDP. Ties go to the lowest
/// action index.
inline ValueIterationResult plain_value_iteration(const KernelTable& t, const GridAbstraction& g,
                                                  int N) {
  return detail::reach_avoid_iteration(t, g, nullptr, N);
}

/// Same recursion with the continuation value replaced by its minimum over
/// each destination's neighborhood; a lower bound on the reach-avoid
/// probability of the continuous closed loop.
inline ValueIterationResult robust_value_iteration(const KernelTable& t, const GridAbstraction& g,
                                                   const NeighborhoodIndex& nb, int N) {
  return detail::reach_avoid_iteration(t, g, &nb, N);
}

/// Reach-avoid value of a fixed policy, robust if a neighborhood index is given.
inline ValueTable evaluate_policy(const KernelTable& t, const GridAbstraction& g,
                                  const Policy& pi, const NeighborhoodIndex* nb = nullptr) {
  const int N = pi.N;
  detail::check_table(t, g, N);
  require(pi.num_cells == g.num_cells(), "evaluate_policy: policy built for a different grid");
  ValueTable V = detail::boundary_values(g, N);
  std::vector<double> W;
  const auto& safe = g.safe_cells();
  for (int k = N - 1; k >= 0; --k) {
    detail::continuation(g, nb, V, k + 1, W);
    for (std::size_t p = 0; p < safe.size(); ++p) {
      const int a = pi.at(k, safe[p]);
      require(a >= 0 && a < t.num_actions, "evaluate_policy: policy has no action on a safe cell");
      V.at(k, safe[p]) = detail::expected(g, t.row(static_cast<Index>(p), a), W);
    }
  }
  return V;
}

/// Expected accumulated stage cost of a fixed policy; absorbed states stop
/// accruing cost. Returns C_k(cell) with zero on absorbed cells.
inline ValueTable evaluate_cost(const KernelTable& t, const GridAbstraction& g, const Policy& pi) {
  const int N = pi.N;
  detail::check_table(t, g, N);
  ValueTable C(N, g.num_cells());
  const auto& safe = g.safe_cells();
  std::vector<double> W(safe.size());
  for (int k = N - 1; k >= 0; --k) {
    for (std::size_t p = 0; p < safe.size(); ++p) W[p] = C.at(k + 1, safe[p]);
    for (std::size_t p = 0; p < safe.size(); ++p) {
      const int a = pi.at(k, safe[p]);
      require(a >= 0 && a < t.num_actions, "evaluate_cost: policy has no action on a safe cell");
      const SparseRow& row = t.row(static_cast<Index>(p), a);
      double s = row.stage_cost;
      for (std::size_t e = 0; e < row.cells.size(); ++e)
        s += row.probs[e] * W[static_cast<std::size_t>(g.safe_position(row.cells[e]))];
      C.at(k, safe[p]) = s;
    }
  }
  return C;
}

/// Multiplier κ on the reach indicator and the chance level α. The stage
/// costs come from the kernel rows; the terminal cost on S \ T is zero.
struct LagrangianObjective {
  double kappa = 0.0;
  double alpha = 0.0;
};

struct LagrangianResult {
  ValueTable returns;       // max E[Σ g_k + κ·reach], without the −κα shift
  Policy policy;
  double expected_cost = 0.0;     // E[Σ g_k] from the initial cell
  double reach_prob = 0.0;        // plain value of the policy at the initial cell
  double certified_reach = 0.0;   // robust value of the policy at the initial cell
  double objective = 0.0;         // expected_cost + κ (reach_prob − α)
};

/// Maximises E[Σ g_k + κ·1{reach}] by backward recursion and evaluates the
/// resulting policy from the grid's initial cell. Ties go to the lowest action.
inline LagrangianResult lagrangian_value_iteration(const KernelTable& t, const GridAbstraction& g,
                                                   const NeighborhoodIndex& nb,
                                                   const LagrangianObjective& obj, int N) {
  detail::check_table(t, g, N);
  require(obj.kappa >= 0.0 && std::isfinite(obj.kappa), "lagrangian: kappa must be >= 0");
  require(g.initial_cell() >= 0, "lagrangian: initial position is outside the grid");
  LagrangianResult out;
  out.returns = ValueTable(N, g.num_cells());
  out.policy = Policy(N, g.num_cells());
  const auto& safe = g.safe_cells();
  std::vector<double> W(safe.size());
  for (int k = N - 1; k >= 0; --k) {
    for (std::size_t p = 0; p < safe.size(); ++p) W[p] = out.returns.at(k + 1, safe[p]);
    for (std::size_t p = 0; p < safe.size(); ++p) {
      double best = -std::numeric_limits<double>::infinity();
      int best_a = 0;
      for (int a = 0; a < t.num_actions; ++a) {
        const SparseRow& row = t.row(static_cast<Index>(p), a);
        double q = row.stage_cost + obj.kappa * row.p_target;
        for (std::size_t e = 0; e < row.cells.size(); ++e)
          q += row.probs[e] * W[static_cast<std::size_t>(g.safe_position(row.cells[e]))];
        if (q > best) {
          best = q;
          best_a = a;
        }
      }
      out.returns.at(k, safe[p]) = best;
      out.policy.at(k, safe[p]) = best_a;
    }
  }
  const Index c0 = g.initial_cell();
  const CellClass cls = g.cell_class(c0);
  if (cls == CellClass::safe) {
    out.expected_cost = evaluate_cost(t, g, out.policy).at(0, c0);
    out.reach_prob = evaluate_policy(t, g, out.policy).at(0, c0);
    out.certified_reach = evaluate_policy(t, g, out.policy, &nb).at(0, c0);
  } else {
    out.reach_prob = out.certified_reach = cls == CellClass::target ? 1.0 : 0.0;
  }
  out.objective = out.expected_cost + obj.kappa * (out.reach_prob - obj.alpha);
  return out;
}

struct ParetoPoint {
  double kappa = 0.0;
  double expected_cost = 0.0;
  double reach_prob = 0.0;
  double certified_reach = 0.0;
  double objective = 0.0;
};

/// One Lagrangian solve per κ. `policies`, if given, receives each policy.
inline std::vector<ParetoPoint> pareto_sweep(const KernelTable& t, const GridAbstraction& g,
                                             const NeighborhoodIndex& nb, double alpha,
                                             const std::vector<double>& kappas, int N,
                                             std::vector<Policy>* policies = nullptr) {
  std::vector<ParetoPoint> out;
  for (double kappa : kappas) {
    auto res = lagrangian_value_iteration(t, g, nb, LagrangianObjective{kappa, alpha}, N);
    out.push_back({kappa, res.expected_cost, res.reach_prob, res.certified_reach, res.objective});
    if (policies) policies->push_back(std::move(res.policy));
  }
  return out;
}

/// Action for block k at position x^s, or -1 once the abstract state is
/// absorbed (target, unsafe or off the grid).
inline int execute_policy(const Policy& pi, const GridAbstraction& g, int k, const Vector& xs) {
  require(k >= 0 && k < pi.N, "execute_policy: stage out of range");
  const Index c = g.locate(xs);
  if (c < 0 || g.cell_class(c) != CellClass::safe) return -1;
  return pi.at(k, c);
}

}  // namespace reachctl
