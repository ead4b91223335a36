#pragma once

// Constraint tightening: the inter-sample growth bound, the tightening
// margin eta, the tube radius r and the resulting constraint family.

#include <cmath>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/LU>

#include "reachctl/core.hpp"
#include "reachctl/geometry.hpp"
#include "reachctl/lti_model.hpp"
#include "reachctl/qp.hpp"

namespace reachctl {

/// Below this ‖A‖ the growth bound uses its linear (A = 0) branch.
inline constexpr double kZeroNormThreshold = 1e-12;

/// Bound on ‖z(t) − z(0)‖ over [0, dt] for z' = A z + d with ‖A‖ = norm_A.
inline double growth_bound_psi(double norm_A, double dt, double norm_z0, double norm_d) {
  require(norm_A >= 0.0 && dt >= 0.0 && norm_z0 >= 0.0 && norm_d >= 0.0,
          "growth_bound_psi: arguments must be nonnegative");
  if (norm_A <= kZeroNormThreshold) return dt * norm_d;
  const double g = std::expm1(norm_A * dt);
  return g * norm_z0 + g * norm_d / norm_A;
}

struct TighteningParams {
  double eta = 0.0;
  double kappa_x = 0.0;
  double kappa_u = 0.0;
  double r = 0.0;
  double zeta = 0.0;
};

// ---------------------------------------------------------------------------
// Vertices

/// True iff every row of p has a single nonzero entry and every coordinate is
/// bounded on both sides; then lo/hi receive the box bounds.
inline bool as_box(const HalfspacePolytope& p, Vector& lo, Vector& hi) {
  const Index d = p.dim();
  const double inf = std::numeric_limits<double>::infinity();
  lo = Vector::Constant(d, -inf);
  hi = Vector::Constant(d, inf);
  for (Index i = 0; i < p.size(); ++i) {
    Index nz = -1;
    for (Index k = 0; k < d; ++k) {
      if (p.normals()(i, k) != 0.0) {
        if (nz >= 0) return false;
        nz = k;
      }
    }
    const double h = p.normals()(i, nz);
    const double bound = p.offsets()[i] / h;
    if (h > 0) hi[nz] = std::min(hi[nz], bound);
    else lo[nz] = std::max(lo[nz], bound);
  }
  return lo.allFinite() && hi.allFinite();
}

/// Vertices of a bounded polytope by brute force over all dim-subsets of its
/// facets. Intended for dim <= 8; duplicates are merged.
inline std::vector<Vector> enumerate_vertices(const HalfspacePolytope& p, double tol = 1e-9) {
  const Index d = p.dim();
  const Index M = p.size();
  require(d >= 1 && d <= 8, "enumerate_vertices: supported for 1 <= dim <= 8");
  std::vector<Vector> out;
  if (M < d) return out;
  std::vector<Index> pick(static_cast<std::size_t>(d));
  for (Index i = 0; i < d; ++i) pick[static_cast<std::size_t>(i)] = i;
  Matrix H(d, d);
  Vector b(d);
  while (true) {
    for (Index i = 0; i < d; ++i) {
      H.row(i) = p.normals().row(pick[static_cast<std::size_t>(i)]);
      b[i] = p.offsets()[pick[static_cast<std::size_t>(i)]];
    }
    Eigen::FullPivLU<Matrix> lu(H);
    if (lu.rank() == d) {
      const Vector v = lu.solve(b);
      const double scale = 1.0 + v.cwiseAbs().maxCoeff();
      bool feasible = true;
      for (Index i = 0; i < M && feasible; ++i)
        feasible = p.normals().row(i).dot(v) <= p.offsets()[i] + tol * scale;
      if (feasible) {
        bool dup = false;
        for (const auto& w : out) dup = dup || (w - v).cwiseAbs().maxCoeff() <= tol * scale;
        if (!dup) out.push_back(v);
      }
    }
    // Next combination in lexicographic order.
    Index i = d - 1;
    while (i >= 0 && pick[static_cast<std::size_t>(i)] == M - d + i) --i;
    if (i < 0) break;
    ++pick[static_cast<std::size_t>(i)];
    for (Index k = i + 1; k < d; ++k)
      pick[static_cast<std::size_t>(k)] = pick[static_cast<std::size_t>(k - 1)] + 1;
  }
  return out;
}

/// Vertices of the axis box lo <= x <= hi (2^d of them, d <= 20).
inline std::vector<Vector> box_vertices(const Vector& lo, const Vector& hi) {
  const Index d = lo.size();
  require(d <= 20, "box_vertices: dimension too large");
  std::vector<Vector> out;
  const std::size_t count = std::size_t{1} << d;
  out.reserve(count);
  for (std::size_t mask = 0; mask < count; ++mask) {
    Vector v(d);
    for (Index k = 0; k < d; ++k) v[k] = (mask >> k) & 1U ? hi[k] : lo[k];
    out.push_back(std::move(v));
  }
  return out;
}

/// Vertices of p: closed form for boxes, facet enumeration otherwise.
inline std::vector<Vector> polytope_vertices(const HalfspacePolytope& p) {
  Vector lo, hi;
  if (as_box(p, lo, hi)) {
    require((lo.array() <= hi.array()).all(), "polytope_vertices: empty box");
    return box_vertices(lo, hi);
  }
  return enumerate_vertices(p);
}

/// max ‖x‖ over a bounded polytope.
inline double max_norm_over(const HalfspacePolytope& p) {
  if (p.dim() == 0) return 0.0;
  Vector lo, hi;
  if (as_box(p, lo, hi)) return lo.cwiseAbs().cwiseMax(hi.cwiseAbs()).norm();
  if (p.dim() > 8)
    throw ArgumentError(
        "unbounded or high-dimensional deterministic constraint set: supply kappa_x explicitly");
  const auto verts = enumerate_vertices(p);
  if (verts.empty())
    throw ArgumentError(
        "unbounded deterministic constraint set: supply a norm bound kappa_x explicitly");
  // A bounded polytope in R^d has at least d+1 vertices; fewer means a
  // recession direction, i.e. unboundedness.
  if (static_cast<Index>(verts.size()) < p.dim() + 1)
    throw ArgumentError(
        "unbounded deterministic constraint set: supply a norm bound kappa_x explicitly");
  double best = 0.0;
  for (const auto& v : verts) best = std::max(best, v.norm());
  return best;
}

struct EtaResult {
  double eta = 0.0;
  double kappa_x = 0.0;
  double kappa_u = 0.0;
};

/// eta = psi(‖A_4‖, dt, kappa_x, kappa_u) for the continuous deterministic
/// subsystem x^d' = A_4 x^d + B_2 u.
inline EtaResult compute_eta(const StructuredLti& sys, const HalfspacePolytope& g_d,
                             const HalfspacePolytope& u_set, double dt,
                             std::optional<double> kappa_x_override = std::nullopt) {
  require(g_d.dim() == sys.n_d, "compute_eta: constraint set must live on x^d");
  require(u_set.dim() == sys.m(), "compute_eta: input set dimension != m");
  require(dt > 0.0, "compute_eta: dt must be positive");
  EtaResult res;
  res.kappa_x = kappa_x_override ? *kappa_x_override : max_norm_over(g_d);
  require(res.kappa_x >= 0.0 && std::isfinite(res.kappa_x), "compute_eta: invalid kappa_x");
  const Matrix B2 = sys.B2();
  for (const auto& u : polytope_vertices(u_set)) res.kappa_u = std::max(res.kappa_u, (B2 * u).norm());
  res.eta = growth_bound_psi(norm2(sys.A4()), dt, res.kappa_x, res.kappa_u);
  return res;
}

/// r = e^{‖A_c‖ Dt} · ½ζ√n_H.
inline double compute_tube_radius(const Matrix& A_c, double Dt, double zeta, Index n_H) {
  require(Dt >= 0.0, "compute_tube_radius: Dt must be >= 0");
  require(zeta > 0.0, "compute_tube_radius: zeta must be positive");
  require(n_H >= 1, "compute_tube_radius: cell dimension must be >= 1");
  return std::exp(norm2(A_c) * Dt) * 0.5 * zeta * std::sqrt(static_cast<double>(n_H));
}

/// True iff the stochastic states do not feed back into the dynamics, so a
/// cell offset is transported unchanged.
inline bool stochastic_states_decoupled(const StructuredLti& sys) {
  return sys.A_c.leftCols(sys.n_s).isZero(0.0);
}

/// Tube radius for cells over x^s: ½ζ√n_s when the stochastic states are
/// decoupled, the exponential bound otherwise.
inline double tube_radius_for(const StructuredLti& sys, double Dt, double zeta) {
  if (stochastic_states_decoupled(sys)) {
    require(zeta > 0.0, "tube_radius_for: zeta must be positive");
    return 0.5 * zeta * std::sqrt(static_cast<double>(sys.n_s));
  }
  return compute_tube_radius(sys.A_c, Dt, zeta, sys.n_s);
}

// ---------------------------------------------------------------------------
// Constraint family

enum class TerminalMode { zero_set, validated_polytope };

/// x^d = 0 at every block boundary.
struct ZeroSet {};

/// A user-supplied terminal polytope over the full state.
struct ValidatedPolytope {
  HalfspacePolytope set;
};

using TerminalSet = std::variant<ZeroSet, ValidatedPolytope>;

struct ConstraintFamily {
  HalfspacePolytope g;        // over x^d
  HalfspacePolytope g_hat;    // g ⊖ B_eta
  HalfspacePolytope g_tilde;  // g ⊖ B_(eta + r)
  TerminalSet terminal = ZeroSet{};

  bool zero_terminal() const { return std::holds_alternative<ZeroSet>(terminal); }
};

/// Raised when tightening leaves an empty set.
class OverTightened : public ArgumentError {
 public:
  OverTightened(Index constraint, const std::string& what)
      : ArgumentError(what), constraint_(constraint) {}
  Index constraint() const { return constraint_; }

 private:
  Index constraint_;
};

namespace detail {

// Feasibility of { x : H x <= b } via a least-norm QP.
inline bool polytope_nonempty(const Matrix& H, const Vector& b) {
  const Index d = H.cols();
  if (H.rows() == 0) return true;
  QuadraticProgram qp(Matrix::Identity(d, d), Vector::Zero(d), Matrix(0, d), Vector(0), H, b);
  return solve_qp(qp, 1e-9, 50000).status == QpStatus::optimal;
}

// Smallest k such that the first k+1 rows are already infeasible.
inline Index first_infeasible_prefix(const HalfspacePolytope& p) {
  for (Index k = 0; k < p.size(); ++k)
    if (!polytope_nonempty(p.normals().topRows(k + 1), p.offsets().head(k + 1))) return k;
  return p.size() - 1;
}

}  // namespace detail

/// Builds g, g_hat, g_tilde and the terminal set. With collapse_tilde the
/// robust set equals g_hat (sound when x^d is noise-free and the terminal set
/// pins x^d = 0).
inline ConstraintFamily build_constraint_family(
    const HalfspacePolytope& g, const TighteningParams& params, TerminalMode mode,
    std::optional<HalfspacePolytope> terminal_polytope = std::nullopt,
    bool collapse_tilde = false) {
  require(params.eta >= 0.0 && params.r >= 0.0 && std::isfinite(params.eta) &&
              std::isfinite(params.r),
          "build_constraint_family: eta and r must be finite and >= 0");
  require(!collapse_tilde || mode == TerminalMode::zero_set,
          "build_constraint_family: collapsing g_tilde requires the zero terminal set");
  ConstraintFamily fam;
  fam.g = g;
  fam.g_hat = pontryagin_erode_ball(g, params.eta);
  fam.g_tilde = collapse_tilde ? fam.g_hat : pontryagin_erode_ball(g, params.eta + params.r);
  for (const auto* p : {&fam.g_hat, &fam.g_tilde}) {
    if (!detail::polytope_nonempty(p->normals(), p->offsets())) {
      const Index k = detail::first_infeasible_prefix(*p);
      throw OverTightened(k, "over-tightened: constraint " + std::to_string(k) +
                                 " empties the tightened set");
    }
  }
  if (mode == TerminalMode::zero_set) {
    for (Index i = 0; i < fam.g_tilde.size(); ++i)
      if (fam.g_tilde.offsets()[i] < 0.0)
        throw OverTightened(i, "over-tightened: constraint " + std::to_string(i) +
                                   " excludes x^d = 0 from the tightened set");
    fam.terminal = ZeroSet{};
  } else {
    require(terminal_polytope.has_value(),
            "build_constraint_family: validated terminal mode needs a polytope");
    fam.terminal = ValidatedPolytope{*terminal_polytope};
  }
  return fam;
}

/// Checks one-step robust invariance of `term` (over x^d) under
/// x+ = A_4 x + B_2 u + d with ‖d‖∞ <= disturbance_bound: every vertex must lie
/// in g_tilde_d and admit u ∈ u_set keeping every disturbed successor in term.
/// Convexity makes the vertex-by-vertex check sufficient.
inline bool validate_terminal_invariance(const HalfspacePolytope& term, const Matrix& A4,
                                         const Matrix& B2, const HalfspacePolytope& g_tilde_d,
                                         const HalfspacePolytope& u_set,
                                         double disturbance_bound) {
  const Index nd = term.dim();
  const Index m = B2.cols();
  require(A4.rows() == nd && A4.cols() == nd && B2.rows() == nd,
          "validate_terminal_invariance: dimension mismatch");
  require(g_tilde_d.dim() == nd && u_set.dim() == m,
          "validate_terminal_invariance: dimension mismatch");
  require(disturbance_bound >= 0.0, "validate_terminal_invariance: bound must be >= 0");
  const auto verts = polytope_vertices(term);
  require(!verts.empty(), "validate_terminal_invariance: terminal set has no vertices");
  std::vector<Vector> dists;
  if (disturbance_bound > 0.0)
    dists = box_vertices(Vector::Constant(nd, -disturbance_bound),
                         Vector::Constant(nd, disturbance_bound));
  else
    dists.push_back(Vector::Zero(nd));
  const Index M = term.size();
  const Index nd_count = static_cast<Index>(dists.size());
  for (std::size_t vi = 0; vi < verts.size(); ++vi) {
    const Vector& v = verts[vi];
    const double scale = 1.0 + v.cwiseAbs().maxCoeff();
    for (Index i = 0; i < g_tilde_d.size(); ++i)
      if (g_tilde_d.normals().row(i).dot(v) > g_tilde_d.offsets()[i] + 1e-9 * scale) return false;
    // One u must serve every disturbance vertex: H (A4 v + B2 u + d) <= b.
    Matrix A_in(M * nd_count + u_set.size(), m);
    Vector b_in(M * nd_count + u_set.size());
    const Matrix HB = term.normals() * B2;
    const Vector Hv = term.normals() * (A4 * v);
    for (Index k = 0; k < nd_count; ++k) {
      A_in.middleRows(k * M, M) = HB;
      b_in.segment(k * M, M) = term.offsets() - Hv - term.normals() * dists[static_cast<std::size_t>(k)];
    }
    A_in.bottomRows(u_set.size()) = u_set.normals();
    b_in.tail(u_set.size()) = u_set.offsets();
    QuadraticProgram qp(Matrix::Identity(m, m), Vector::Zero(m), Matrix(0, m), Vector(0), A_in,
                        b_in);
    const auto sol = solve_qp(qp, 1e-9, 50000);
    if (sol.status == QpStatus::infeasible) return false;
    if (sol.status != QpStatus::optimal)
      throw NumericalError("validate_terminal_invariance: solver failed at vertex " +
                           std::to_string(vi));
    const Vector slack = b_in - A_in * sol.z;
    if (slack.minCoeff() < -1e-7) return false;
  }
  return true;
}

}  // namespace reachctl
