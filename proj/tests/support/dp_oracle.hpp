#pragma once

// Small random MDPs on grids and brute-force reference solutions for them.

#include <algorithm>
#include <map>
#include <optional>
#include <random>
#include <vector>

#include "reachctl/abstraction.hpp"

namespace reachctl::testing {

struct DpInstance {
  GridAbstraction grid;
  KernelTable table;
  int N = 1;
};

inline HyperRect unit_cell_box(double x, double y, double inflate) {
  Vector lo(2), hi(2);
  lo << x - inflate, y - inflate;
  hi << x + 1.0 + inflate, y + 1.0 + inflate;
  return HyperRect::from_bounds(lo, hi);
}

/// Random rows over the safe cells of `g`: up to four destinations plus
/// target and unsafe mass, normalised to one.
inline KernelTable random_rows(const GridAbstraction& g, int A, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> U(0.0, 1.0);
  KernelTable t;
  t.num_actions = A;
  t.safe_cells = g.safe_cells();
  const auto ns = t.safe_cells.size();
  t.rows.resize(ns * static_cast<std::size_t>(A));
  for (auto& row : t.rows) {
    const int d = static_cast<int>(rng() % (std::min<std::size_t>(4, ns) + 1));
    std::map<Index, double> dest;
    for (int i = 0; i < d; ++i) dest[t.safe_cells[rng() % ns]] += U(rng);
    double pt = U(rng) < 0.7 ? U(rng) : 0.0;
    double pu = U(rng) < 0.7 ? U(rng) : 0.0;
    double total = pt + pu;
    for (auto& [c, w] : dest) total += w;
    if (total == 0.0) {
      pu = 1.0;
      total = 1.0;
    }
    row.p_target = pt / total;
    row.p_unsafe = pu / total;
    for (auto& [c, w] : dest) {
      row.cells.push_back(c);
      row.probs.push_back(w / total);
    }
    row.stage_cost = -U(rng);
  }
  return t;
}

/// Grid of unit cells with random safe/target/unsafe layout, up to 6×6,
/// up to three actions and N ≤ 4. Half of the instances are tiny so that
/// full policy enumeration stays affordable.
inline DpInstance random_dp_instance(std::mt19937_64& rng) {
  while (true) {
    const bool tiny = rng() % 2 == 0;
    const int w = 1 + static_cast<int>(rng() % (tiny ? 3 : 6));
    const int h = 1 + static_cast<int>(rng() % (tiny ? 3 : 6));
    if (w * h < 2) continue;
    const int N = 1 + static_cast<int>(rng() % (tiny ? 2 : 4));
    const int A = 1 + static_cast<int>(rng() % 3);
    const double radii[] = {0.0, 0.3, 0.75, 1.0, 1.5};
    const double r = radii[rng() % 5];
    std::vector<RegionSet> safe_members, target_members;
    std::vector<Vector> safe_centers;
    for (int x = 0; x < w; ++x) {
      for (int y = 0; y < h; ++y) {
        const auto roll = rng() % 100;
        const HyperRect b = unit_cell_box(x, y, r + 0.05);
        if (roll < 55) {
          safe_members.emplace_back(b);
          Vector c(2);
          c << x + 0.5, y + 0.5;
          safe_centers.push_back(c);
        } else if (roll < 70) {
          safe_members.emplace_back(b);
          target_members.emplace_back(b);
        }
      }
    }
    if (safe_centers.empty()) continue;
    Vector lo = Vector::Zero(2), hi(2);
    hi << w, h;
    ReachAvoidSets sets{HyperRect::from_bounds(lo, hi), RegionSet::make_union(safe_members, 2),
                        RegionSet::make_union(target_members, 2)};
    const Vector x0 = safe_centers[rng() % safe_centers.size()];
    GridAbstraction g(sets, 1.0, r, x0);
    if (g.safe_cells().empty()) continue;
    KernelTable t = random_rows(g, A, rng);
    return DpInstance{std::move(g), std::move(t), N};
  }
}

/// Three unit cells in a row: safe, target, safe. Start in cell 0.
inline DpInstance line_instance(int /*cells*/, int A) {
  Vector lo = Vector::Zero(2), hi(2), tlo(2), thi(2), x0(2);
  hi << 3.0, 1.0;
  tlo << 1.0, 0.0;
  thi << 2.0, 1.0;
  x0 << 0.5, 0.5;
  const HyperRect bounds = HyperRect::from_bounds(lo, hi);
  ReachAvoidSets sets{bounds, RegionSet(bounds), RegionSet(HyperRect::from_bounds(tlo, thi))};
  GridAbstraction g(sets, 1.0, 0.0, x0);
  KernelTable t;
  t.num_actions = A;
  t.safe_cells = g.safe_cells();
  for (Index c : t.safe_cells) {
    for (int a = 0; a < A; ++a) {
      SparseRow row;
      if (a % 2 == 0) {
        row.p_target = 0.5;
        row.cells = {c};
        row.probs = {0.5};
      } else {
        row.p_unsafe = 0.3;
        row.cells = {c};
        row.probs = {0.7};
      }
      t.rows.push_back(row);
    }
  }
  return DpInstance{std::move(g), std::move(t), 2};
}

namespace detail {

inline std::size_t position(const DpInstance& inst, Index cell) {
  const auto& s = inst.table.safe_cells;
  return static_cast<std::size_t>(std::find(s.begin(), s.end(), cell) - s.begin());
}

inline const SparseRow& row_of(const DpInstance& inst, Index cell, int a) {
  return inst.table.rows[position(inst, cell) * static_cast<std::size_t>(inst.table.num_actions) +
                         static_cast<std::size_t>(a)];
}

/// Cells whose centers are within r of the box of half-width ζ around the
/// center of `cell`, by direct distance computation.
inline std::vector<Index> brute_neighbors(const GridAbstraction& g, Index cell) {
  std::vector<Index> out;
  const Vector cj = g.center(cell);
  for (Index c = 0; c < g.num_cells(); ++c) {
    const Vector d = ((g.center(c) - cj).cwiseAbs().array() - g.zeta()).matrix().cwiseMax(0.0);
    if (d.norm() <= g.r() + 1e-9) out.push_back(c);
  }
  return out;
}

inline double terminal_value(const GridAbstraction& g, Index c) {
  return g.cell_class(c) == CellClass::target ? 1.0 : 0.0;
}

}  // namespace detail

/// Memoised recursion over (stage, cell) maximising over every action.
class RecursiveOracle {
 public:
  RecursiveOracle(const DpInstance& inst, bool robust) : inst_(inst), robust_(robust) {}

  double value(int k, Index c) {
    const auto& g = inst_.grid;
    if (g.cell_class(c) != CellClass::safe) return detail::terminal_value(g, c);
    if (k == inst_.N) return 0.0;
    const auto key = std::make_pair(k, c);
    if (auto it = memo_.find(key); it != memo_.end()) return it->second;
    double best = 0.0;
    for (int a = 0; a < inst_.table.num_actions; ++a) {
      const SparseRow& row = detail::row_of(inst_, c, a);
      double q = row.p_target;
      for (std::size_t e = 0; e < row.cells.size(); ++e) q += row.probs[e] * next(k + 1, row.cells[e]);
      best = std::max(best, q);
    }
    memo_[key] = best;
    return best;
  }

 private:
  double next(int k, Index dest) {
    if (!robust_) return value(k, dest);
    double m = 1.0;
    for (Index c : detail::brute_neighbors(inst_.grid, dest)) m = std::min(m, value(k, c));
    return m;
  }

  const DpInstance& inst_;
  bool robust_;
  std::map<std::pair<int, Index>, double> memo_;
};

/// Best stage-0 value per cell over every deterministic Markov policy, or
/// nullopt if there are more than `limit` policies.
inline std::optional<std::vector<double>> enumerate_policies(const DpInstance& inst, bool robust,
                                                             double limit) {
  const auto& g = inst.grid;
  const auto& safe = inst.table.safe_cells;
  const int A = inst.table.num_actions;
  const std::size_t slots = safe.size() * static_cast<std::size_t>(inst.N);
  if (std::pow(static_cast<double>(A), static_cast<double>(slots)) > limit) return std::nullopt;
  std::vector<std::vector<Index>> nbrs(safe.size());
  for (std::size_t p = 0; p < safe.size(); ++p)
    nbrs[p] = robust ? detail::brute_neighbors(g, safe[p]) : std::vector<Index>{safe[p]};

  std::vector<double> best(static_cast<std::size_t>(g.num_cells()), 0.0);
  for (Index c = 0; c < g.num_cells(); ++c) best[static_cast<std::size_t>(c)] = detail::terminal_value(g, c);
  std::vector<int> choice(slots, 0);
  std::vector<double> V(static_cast<std::size_t>(g.num_cells())), Vn(V.size());
  while (true) {
    for (Index c = 0; c < g.num_cells(); ++c) V[static_cast<std::size_t>(c)] = detail::terminal_value(g, c);
    for (int k = inst.N - 1; k >= 0; --k) {
      Vn = V;
      for (std::size_t p = 0; p < safe.size(); ++p) {
        const int a = choice[static_cast<std::size_t>(k) * safe.size() + p];
        const SparseRow& row = detail::row_of(inst, safe[p], a);
        double q = row.p_target;
        for (std::size_t e = 0; e < row.cells.size(); ++e) {
          const std::size_t dp = detail::position(inst, row.cells[e]);
          double m = 1.0;
          for (Index c : nbrs[dp]) m = std::min(m, V[static_cast<std::size_t>(c)]);
          q += row.probs[e] * m;
        }
        Vn[static_cast<std::size_t>(safe[p])] = q;
      }
      std::swap(V, Vn);
    }
    for (std::size_t p = 0; p < safe.size(); ++p) {
      auto& b = best[static_cast<std::size_t>(safe[p])];
      b = std::max(b, V[static_cast<std::size_t>(safe[p])]);
    }
    std::size_t i = 0;
    while (i < slots && choice[i] == A - 1) choice[i++] = 0;
    if (i == slots) break;
    ++choice[i];
  }
  return best;
}

/// Maximum expected accumulated stage cost from stage 0, per cell.
inline std::vector<double> max_cost(const DpInstance& inst) {
  const auto& g = inst.grid;
  std::vector<double> C(static_cast<std::size_t>(g.num_cells()), 0.0), Cn;
  for (int k = inst.N - 1; k >= 0; --k) {
    Cn.assign(C.size(), 0.0);
    for (Index c : inst.table.safe_cells) {
      double best = -1e300;
      for (int a = 0; a < inst.table.num_actions; ++a) {
        const SparseRow& row = detail::row_of(inst, c, a);
        double q = row.stage_cost;
        for (std::size_t e = 0; e < row.cells.size(); ++e)
          q += row.probs[e] * C[static_cast<std::size_t>(row.cells[e])];
        best = std::max(best, q);
      }
      Cn[static_cast<std::size_t>(c)] = best;
    }
    C = Cn;
  }
  return C;
}

}  // namespace reachctl::testing
