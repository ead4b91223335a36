#pragma once

// Reference-tracking MPC over one outer block of J inner steps, in nominal
// form and in robust form with the cell-anchored initial condition. Problems
// are condensed: the decision variables are the inputs only.

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include <Eigen/Eigenvalues>

#include "reachctl/core.hpp"
#include "reachctl/geometry.hpp"
#include "reachctl/lti_model.hpp"
#include "reachctl/qp.hpp"
#include "reachctl/tightening.hpp"

namespace reachctl {

enum class MpcMode { nominal, robust };

inline const char* to_string(MpcMode m) { return m == MpcMode::nominal ? "nominal" : "robust"; }

struct MpcConfig {
  DiscreteLti model;            // inner-step model
  HalfspacePolytope input_set;  // U
  Matrix Q;
  Matrix R;
  int J = 1;
  ConstraintFamily family;
  MpcMode mode = MpcMode::robust;
  double zeta = 0.0;  // cell edge, for the robust terminal erosion
  double r = 0.0;     // tube radius, for the robust terminal erosion
  QpSettings qp;
  double usable_residual = 1e-5;  // max-iter results below this are accepted
  bool soft_constraints = false;  // exploratory only; never in certificate runs
  double slack_weight = 1e6;

  void validate() const {
    const Index n = model.n(), m = model.m();
    require(J >= 1, "MpcConfig: horizon must be >= 1");
    require(n > 0 && m > 0, "MpcConfig: empty model");
    require(Q.rows() == n && Q.cols() == n, "MpcConfig: Q must be n x n");
    require(R.rows() == m && R.cols() == m, "MpcConfig: R must be m x m");
    require(input_set.dim() == m, "MpcConfig: input set dimension != m");
    require(family.g.dim() == model.n_d, "MpcConfig: state constraints must live on x^d");
    const Matrix Rs = 0.5 * (R + R.transpose());
    Eigen::SelfAdjointEigenSolver<Matrix> es(Rs, Eigen::EigenvaluesOnly);
    require(es.eigenvalues().minCoeff() > 1e-10, "MpcConfig: R must be positive definite");
    check_psd(Q, "MpcConfig: Q must be positive semidefinite");
    if (const auto* vp = std::get_if<ValidatedPolytope>(&family.terminal))
      require(vp->set.dim() == n, "MpcConfig: terminal polytope must live on the full state");
  }

  static void check_psd(const Matrix& M, const char* msg) {
    const Matrix Ms = 0.5 * (M + M.transpose());
    Eigen::SelfAdjointEigenSolver<Matrix> es(Ms, Eigen::EigenvaluesOnly);
    require(es.eigenvalues().minCoeff() >= -1e-10, msg);
  }
};

/// Reference x_0^ref..x_J^ref plus optional replacements for the leading
/// diagonal entries of Q.
struct Command {
  std::vector<Vector> reference;
  std::optional<Vector> q_override;
};

/// Parameters of a velocity command: constant velocity for the stochastic
/// coordinates and the matching Q weights.
struct CommandParams {
  Vector velocity;
  Vector weights;
};

/// Integrates the commanded velocity from `start` (positions, length n_s) over
/// l·dt for l = 0..J. Velocity entries listed in velocity_indices carry the
/// command; all other reference entries are zero.
inline Command reference_from_command(const CommandParams& p, const Vector& start, double dt,
                                      int J, Index n, const std::vector<Index>& velocity_indices) {
  const Index ns = p.velocity.size();
  require(start.size() == ns, "reference_from_command: start must have n_s entries");
  require(static_cast<Index>(velocity_indices.size()) == ns,
          "reference_from_command: need one velocity index per stochastic coordinate");
  require(p.weights.size() == 0 || p.weights.size() == ns,
          "reference_from_command: weights must be empty or have n_s entries");
  require((p.weights.array() >= 0.0).all(), "reference_from_command: weights must be >= 0");
  Command c;
  c.reference.reserve(static_cast<std::size_t>(J) + 1);
  for (int l = 0; l <= J; ++l) {
    Vector ref = Vector::Zero(n);
    ref.head(ns) = start + (l * dt) * p.velocity;
    for (Index i = 0; i < ns; ++i) ref[velocity_indices[static_cast<std::size_t>(i)]] = p.velocity[i];
    c.reference.push_back(std::move(ref));
  }
  if (p.weights.size() > 0) c.q_override = p.weights;
  return c;
}

/// Anchor of the robust initial condition: z_j = x_{k,j} − A^j (x_{k,0} − center)
/// where center = (c_i, x^d_{k,0}), so the offset lives on x^s only.
struct RmpcAnchor {
  Vector cell_center;    // c_i, length n_s
  Vector initial_state;  // x_{k,0}
  std::vector<Vector> offsets;  // A^j (x_{k,0} − center), j = 0..J

  RmpcAnchor() = default;
  RmpcAnchor(const DiscreteLti& model, int J, Vector center, Vector x0, double zeta)
      : cell_center(std::move(center)), initial_state(std::move(x0)) {
    const Index ns = model.n_s;
    require(cell_center.size() == ns && initial_state.size() == model.n(),
            "RmpcAnchor: dimension mismatch");
    const double dist = (initial_state.head(ns) - cell_center).lpNorm<Eigen::Infinity>();
    require(dist <= 0.5 * zeta * (1.0 + 1e-12) + 1e-15,
            "RmpcAnchor: initial state is not inside the anchor cell");
    Vector off = Vector::Zero(model.n());
    off.head(ns) = initial_state.head(ns) - cell_center;
    offsets.reserve(static_cast<std::size_t>(J) + 1);
    for (int j = 0; j <= J; ++j) {
      offsets.push_back(off);
      off = model.A * off;
    }
  }

  /// Full-state center (c_i, x^d_{k,0}).
  Vector center_state() const {
    Vector c = initial_state;
    c.head(cell_center.size()) = cell_center;
    return c;
  }
};

/// Raised when an MPC problem has no usable solution.
class MpcInfeasible : public NumericalError {
 public:
  MpcInfeasible(int k, int j, Vector x, QpStatus status, double prim, double dual)
      : NumericalError(describe(k, j, x, status, prim, dual)), k_(k), j_(j), x_(std::move(x)),
        status_(status), prim_(prim), dual_(dual) {}
  int k() const { return k_; }
  int j() const { return j_; }
  const Vector& state() const { return x_; }
  QpStatus status() const { return status_; }
  double primal_residual() const { return prim_; }
  double dual_residual() const { return dual_; }

 private:
  static std::string describe(int k, int j, const Vector& x, QpStatus s, double p, double d) {
    std::ostringstream os;
    os << "MPC problem without usable solution at k=" << k << " j=" << j << " (status "
       << to_string(s) << ", residuals " << p << "/" << d << ") x=[";
    for (Index i = 0; i < x.size(); ++i) os << (i ? " " : "") << x[i];
    os << "]";
    return os.str();
  }
  int k_, j_;
  Vector x_;
  QpStatus status_;
  double prim_, dual_;
};

namespace detail {

// Horizon-L prediction structure: stacked z_1..z_L = Phi z_0 + Gamma v.
struct Prediction {
  Matrix Phi;
  Matrix Gamma;
};

inline Prediction make_prediction(const DiscreteLti& model, int L) {
  const Index n = model.n(), m = model.m();
  Prediction p;
  p.Phi.resize(L * n, n);
  p.Gamma = Matrix::Zero(L * n, L * m);
  Matrix Ak = Matrix::Identity(n, n);
  std::vector<Matrix> AkB;  // A^k B
  AkB.reserve(static_cast<std::size_t>(L));
  for (int t = 0; t < L; ++t) {
    AkB.push_back(Ak * model.B);
    Ak = model.A * Ak;
    p.Phi.middleRows(t * n, n) = Ak;
  }
  for (int t = 1; t <= L; ++t)
    for (int i = 0; i < t; ++i)
      p.Gamma.block((t - 1) * n, i * m, n, m) = AkB[static_cast<std::size_t>(t - 1 - i)];
  return p;
}

// Constant parts of a condensed problem: matrices and the affine maps that
// turn (z_0, reference) into (q, b_eq, b_in).
struct CondensedStructure {
  int L = 0;
  Index n_vars = 0;   // L*m inputs (+1 slack in soft mode)
  Prediction pred;
  Matrix Qbar;        // blkdiag(Q) over z_1..z_L
  Matrix P;           // unscaled Hessian
  double cost_scale = 1.0;
  Matrix A_eq, A_in;
  Matrix eq_state;    // b_eq = eq_const - eq_state * z0
  Vector eq_const;
  Matrix in_state;    // b_in = in_const - in_state * z0
  Vector in_const;
};

inline HalfspacePolytope robust_terminal_set(const MpcConfig& cfg, const HalfspacePolytope& T) {
  const Index n = cfg.model.n(), ns = cfg.model.n_s;
  Vector hw = Vector::Zero(n);
  hw.head(ns).setConstant(0.5 * cfg.zeta);
  return pontryagin_erode_ball(pontryagin_erode_rect(T, HyperRect(Vector::Zero(n), hw)), cfg.r);
}

inline CondensedStructure make_structure(const MpcConfig& cfg, const Matrix& Q, int L) {
  const DiscreteLti& mdl = cfg.model;
  const Index n = mdl.n(), m = mdl.m(), ns = mdl.n_s, nd = mdl.n_d;
  CondensedStructure s;
  s.L = L;
  s.pred = make_prediction(mdl, L);
  const Index nu = L * m;
  const bool soft = cfg.soft_constraints;
  s.n_vars = nu + (soft ? 1 : 0);

  s.Qbar = Matrix::Zero(L * n, L * n);
  for (int t = 0; t < L; ++t) s.Qbar.block(t * n, t * n, n, n) = Q;
  Matrix Rbar = Matrix::Zero(nu, nu);
  for (int t = 0; t < L; ++t) Rbar.block(t * m, t * m, m, m) = cfg.R;
  s.P = Matrix::Zero(s.n_vars, s.n_vars);
  s.P.topLeftCorner(nu, nu) =
      2.0 * (s.pred.Gamma.transpose() * s.Qbar * s.pred.Gamma + Rbar);
  if (soft) s.P(nu, nu) = 2.0 * cfg.slack_weight;
  s.P = 0.5 * (s.P + s.P.transpose());
  const double pmax = s.P.cwiseAbs().maxCoeff();
  s.cost_scale = pmax > 0.0 ? 1.0 / pmax : 1.0;

  const HalfspacePolytope& G =
      cfg.mode == MpcMode::nominal ? cfg.family.g_hat : cfg.family.g_tilde;
  const HalfspacePolytope& U = cfg.input_set;
  const bool zero_term = cfg.family.zero_terminal();
  std::optional<HalfspacePolytope> term;
  if (!zero_term) {
    const auto& T = std::get<ValidatedPolytope>(cfg.family.terminal).set;
    term = cfg.mode == MpcMode::nominal ? T : robust_terminal_set(cfg, T);
  }

  // State inequality rows on x^d for z_1..z_{L-1}, and z_L too unless the
  // terminal equality pins it.
  const int state_steps = zero_term ? L - 1 : L;
  const Index mg = G.size(), mu = U.size();
  const Index mt = term ? term->size() : 0;
  const Index rows_in = L * mu + state_steps * mg + mt + (soft ? 1 : 0);
  s.A_in = Matrix::Zero(rows_in, s.n_vars);
  s.in_state = Matrix::Zero(rows_in, n);
  s.in_const = Vector::Zero(rows_in);
  Index row = 0;
  for (int t = 0; t < L; ++t) {
    s.A_in.block(row, t * m, mu, m) = U.normals();
    s.in_const.segment(row, mu) = U.offsets();
    row += mu;
  }
  for (int t = 1; t <= state_steps; ++t) {
    const Matrix Hd = G.normals();
    s.A_in.block(row, 0, mg, nu) =
        Hd * s.pred.Gamma.block((t - 1) * n + ns, 0, nd, nu);
    s.in_state.middleRows(row, mg) = Hd * s.pred.Phi.block((t - 1) * n + ns, 0, nd, n);
    s.in_const.segment(row, mg) = G.offsets();
    if (soft) s.A_in.block(row, nu, mg, 1).setConstant(-1.0);
    row += mg;
  }
  if (term) {
    s.A_in.block(row, 0, mt, nu) = term->normals() * s.pred.Gamma.middleRows((L - 1) * n, n);
    s.in_state.middleRows(row, mt) = term->normals() * s.pred.Phi.middleRows((L - 1) * n, n);
    s.in_const.segment(row, mt) = term->offsets();
    row += mt;
  }
  if (soft) {
    s.A_in(row, nu) = -1.0;  // slack >= 0
    ++row;
  }
  if (zero_term && nd > 0) {
    s.A_eq = Matrix::Zero(nd, s.n_vars);
    s.A_eq.leftCols(nu) = s.pred.Gamma.block((L - 1) * n + ns, 0, nd, nu);
    s.eq_state = s.pred.Phi.block((L - 1) * n + ns, 0, nd, n);
    s.eq_const = Vector::Zero(nd);
  } else {
    s.A_eq = Matrix(0, s.n_vars);
    s.eq_state = Matrix(0, n);
    s.eq_const = Vector(0);
  }
  return s;
}

inline Matrix effective_Q(const MpcConfig& cfg, const std::optional<Vector>& over) {
  Matrix Q = cfg.Q;
  if (over) {
    require(over->size() <= Q.rows(), "MPC: Q override longer than the state");
    require((over->array() >= 0.0).all(), "MPC: Q override entries must be >= 0");
    for (Index i = 0; i < over->size(); ++i) Q(i, i) = (*over)[i];
    MpcConfig::check_psd(Q, "MPC: Q with overrides is not positive semidefinite");
  }
  return Q;
}

// Linear cost term for initial state z0 and references ref_{j+1..J}.
inline Vector linear_cost(const CondensedStructure& s, const Vector& z0,
                          const std::vector<Vector>& reference, int j) {
  const Index n = z0.size();
  Vector ref(s.L * n);
  for (int t = 1; t <= s.L; ++t) ref.segment((t - 1) * n, n) = reference[static_cast<std::size_t>(j + t)];
  const Vector err = s.pred.Phi * z0 - ref;
  Vector q = Vector::Zero(s.n_vars);
  const Index nu = s.pred.Gamma.cols();
  q.head(nu) = 2.0 * s.pred.Gamma.transpose() * (s.Qbar * err);
  return q;
}

inline Vector initial_condition(const MpcConfig& cfg, int j, const Vector& x,
                                const RmpcAnchor* anchor) {
  if (cfg.mode == MpcMode::nominal) return x;
  require(anchor != nullptr, "MPC: robust mode needs an anchor");
  require(static_cast<int>(anchor->offsets.size()) == cfg.J + 1, "MPC: anchor horizon mismatch");
  return x - anchor->offsets[static_cast<std::size_t>(j)];
}

}  // namespace detail

/// The condensed QP at inner step j in the variables (v_j..v_{J-1}); states
/// are eliminated through the dynamics. Cost is scaled so max|P| = 1.
inline QuadraticProgram build_mpc_qp(const MpcConfig& cfg, int j, const Vector& x,
                                     const Command& cmd, const RmpcAnchor* anchor = nullptr) {
  cfg.validate();
  require(j >= 0 && j < cfg.J, "build_mpc_qp: j must lie in [0, J)");
  require(x.size() == cfg.model.n(), "build_mpc_qp: state dimension mismatch");
  require(static_cast<int>(cmd.reference.size()) == cfg.J + 1,
          "build_mpc_qp: reference must have J+1 entries");
  const Matrix Q = detail::effective_Q(cfg, cmd.q_override);
  const auto s = detail::make_structure(cfg, Q, cfg.J - j);
  const Vector z0 = detail::initial_condition(cfg, j, x, anchor);
  const Vector q = detail::linear_cost(s, z0, cmd.reference, j);
  Vector b_eq = s.eq_const - s.eq_state * z0;
  Vector b_in = s.in_const - s.in_state * z0;
  return QuadraticProgram(s.cost_scale * s.P, s.cost_scale * q, s.A_eq, std::move(b_eq), s.A_in,
                          std::move(b_in));
}

struct MpcEvent {
  int k = 0;
  int j = 0;
  QpStatus status = QpStatus::optimal;
  int iterations = 0;
  double primal_residual = 0.0;
  double dual_residual = 0.0;
  bool accepted_with_warning = false;
};

struct MpcStats {
  std::int64_t solves = 0;
  std::int64_t warnings = 0;
  std::int64_t iterations = 0;
};

/// Receding-horizon controller for one block at a time. Caches condensed
/// structures per (Q override, remaining horizon); reuse one instance per
/// thread across blocks and trajectories.
class TrackingMpc {
 public:
  explicit TrackingMpc(std::shared_ptr<const MpcConfig> cfg) : cfg_(std::move(cfg)) {
    require(cfg_ != nullptr, "TrackingMpc: null config");
    cfg_->validate();
  }

  const MpcConfig& config() const { return *cfg_; }
  const MpcStats& stats() const { return stats_; }
  void set_event_sink(std::function<void(const MpcEvent&)> sink) { sink_ = std::move(sink); }

  /// Starts block k with command `cmd` from x_{k,0}. Robust mode requires the
  /// anchor cell center (length n_s).
  void begin_block(int k, const Command& cmd, const Vector& x0,
                   const std::optional<Vector>& cell_center = std::nullopt) {
    require(static_cast<int>(cmd.reference.size()) == cfg_->J + 1,
            "TrackingMpc: reference must have J+1 entries");
    k_ = k;
    cmd_ = cmd;
    if (cfg_->mode == MpcMode::robust) {
      require(cell_center.has_value(), "TrackingMpc: robust mode needs the anchor cell center");
      anchor_ = RmpcAnchor(cfg_->model, cfg_->J, *cell_center, x0, cfg_->zeta);
    }
    key_ = cmd.q_override ? std::vector<double>(cmd.q_override->data(),
                                                cmd.q_override->data() + cmd.q_override->size())
                          : std::vector<double>{};
    warm_.reset();
  }

  /// Input for inner step j given the measured state x_{k,j}.
  Vector step(int j, const Vector& x) {
    const MpcConfig& cfg = *cfg_;
    require(j >= 0 && j < cfg.J, "TrackingMpc: j must lie in [0, J)");
    const int L = cfg.J - j;
    Entry& e = entry(L);
    const Vector z0 = detail::initial_condition(
        cfg, j, x, cfg.mode == MpcMode::robust ? &*anchor_ : nullptr);
    const Vector q = e.s.cost_scale * detail::linear_cost(e.s, z0, cmd_.reference, j);
    const Vector b_eq = e.s.eq_const - e.s.eq_state * z0;
    const Vector b_in = e.s.in_const - e.s.in_state * z0;
    QpWarmStart warm;
    const QpWarmStart* wp = nullptr;
    if (warm_ && warm_->size() == e.s.n_vars) {
      warm.z = *warm_;
      wp = &warm;
    }
    const QpSolution sol = e.qp.solve(q, b_eq, b_in, wp);
    ++stats_.solves;
    stats_.iterations += sol.iterations;
    MpcEvent ev{k_, j, sol.status, sol.iterations, sol.primal_residual, sol.dual_residual, false};
    const bool usable = sol.status == QpStatus::optimal ||
                        (sol.status == QpStatus::max_iterations &&
                         sol.primal_residual <= cfg.usable_residual &&
                         sol.dual_residual <= cfg.usable_residual);
    if (!usable) {
      if (sink_) sink_(ev);
      throw MpcInfeasible(k_, j, x, sol.status, sol.primal_residual, sol.dual_residual);
    }
    if (sol.status != QpStatus::optimal) {
      ev.accepted_with_warning = true;
      ++stats_.warnings;
    }
    if (sink_) sink_(ev);
    const Index m = cfg.model.m();
    const Index nu = L * m;
    // Shifted plan for the next step: drop the first input.
    Vector next(e.s.n_vars - m);
    next.head(nu - m) = sol.z.segment(m, nu - m);
    if (e.s.n_vars > nu) next.tail(e.s.n_vars - nu) = sol.z.tail(e.s.n_vars - nu);
    warm_ = std::move(next);
    return clip_input(sol.z.head(m));
  }

  const std::optional<RmpcAnchor>& anchor() const { return anchor_; }

 private:
  struct Entry {
    detail::CondensedStructure s;
    PreparedQp qp;
  };

  Entry& entry(int L) {
    auto key = std::make_pair(key_, L);
    auto it = cache_.find(key);
    if (it != cache_.end()) return *it->second;
    const Matrix Q = detail::effective_Q(*cfg_, cmd_.q_override);
    auto e = std::make_unique<Entry>();
    e->s = detail::make_structure(*cfg_, Q, L);
    e->qp = PreparedQp(e->s.cost_scale * e->s.P, e->s.A_eq, e->s.A_in, cfg_->qp);
    return *cache_.emplace(std::move(key), std::move(e)).first->second;
  }

  // Removes solver-tolerance excursions outside a box input set.
  Vector clip_input(Vector u) const {
    if (!box_known_) {
      box_known_ = true;
      is_box_ = as_box(cfg_->input_set, u_lo_, u_hi_);
    }
    if (is_box_) u = u.cwiseMax(u_lo_).cwiseMin(u_hi_);
    return u;
  }

  std::shared_ptr<const MpcConfig> cfg_;
  std::map<std::pair<std::vector<double>, int>, std::unique_ptr<Entry>> cache_;
  std::vector<double> key_;
  Command cmd_;
  std::optional<RmpcAnchor> anchor_;
  std::optional<Vector> warm_;
  int k_ = 0;
  MpcStats stats_;
  std::function<void(const MpcEvent&)> sink_;
  mutable bool box_known_ = false;
  mutable bool is_box_ = false;
  mutable Vector u_lo_, u_hi_;
};

}  // namespace reachctl
