#pragma once

// Dense convex QP solver based on operator splitting (ADMM) with
// over-relaxation, step-size adaptation, infeasibility certificates and an
// active-set polishing step.
//
//   minimize    1/2 z' P z + q' z
//   subject to  A_eq z  = b_eq
//               A_in z <= b_in
//
// Internally the constraints are stacked as l <= A z <= u.

#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <utility>

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>
#include <Eigen/LU>

#include "reachctl/core.hpp"

namespace reachctl {

struct QuadraticProgram {
  Matrix P;
  Vector q;
  Matrix A_eq;
  Vector b_eq;
  Matrix A_in;
  Vector b_in;

  QuadraticProgram() = default;

  /// Symmetrizes P and checks dimensions and positive semidefiniteness.
  QuadraticProgram(Matrix P_, Vector q_, Matrix A_eq_, Vector b_eq_,
                   Matrix A_in_, Vector b_in_)
      : P(std::move(P_)), q(std::move(q_)), A_eq(std::move(A_eq_)),
        b_eq(std::move(b_eq_)), A_in(std::move(A_in_)), b_in(std::move(b_in_)) {
    validate();
  }

  Index num_vars() const { return q.size(); }

  void validate() {
    const Index n = q.size();
    require(P.rows() == n && P.cols() == n, "QP: P must be n x n");
    if (A_eq.size() == 0) A_eq.resize(0, n);
    if (A_in.size() == 0) A_in.resize(0, n);
    require(A_eq.cols() == n && A_eq.rows() == b_eq.size(),
            "QP: equality block dimensions are inconsistent");
    require(A_in.cols() == n && A_in.rows() == b_in.size(),
            "QP: inequality block dimensions are inconsistent");
    require(P.allFinite() && q.allFinite() && A_eq.allFinite() &&
                A_in.allFinite() && b_eq.allFinite(),
            "QP: non-finite problem data");
    P = 0.5 * (P + P.transpose());
    if (n > 0) {
      Eigen::SelfAdjointEigenSolver<Matrix> es(P, Eigen::EigenvaluesOnly);
      require(es.eigenvalues().minCoeff() >= -1e-10,
              "QP: cost matrix P is not positive semidefinite");
    }
  }
};

enum class QpStatus { optimal, infeasible, max_iterations };

inline const char* to_string(QpStatus s) {
  switch (s) {
    case QpStatus::optimal: return "optimal";
    case QpStatus::infeasible: return "infeasible";
    case QpStatus::max_iterations: return "max-iter";
  }
  return "unknown";
}

struct QpSolution {
  Vector z;
  Vector y_eq;  // multipliers of A_eq z = b_eq
  Vector y_in;  // multipliers of A_in z <= b_in, nonnegative at optimum
  QpStatus status = QpStatus::max_iterations;
  double primal_residual = std::numeric_limits<double>::infinity();
  double dual_residual = std::numeric_limits<double>::infinity();
  int iterations = 0;
  bool polished = false;
};

struct QpSettings {
  double tol = 1e-8;
  int max_iter = 20000;
  double rho = 0.1;
  double sigma = 1e-6;
  double alpha = 1.6;
  double equality_rho_scale = 1e3;
  int check_interval = 10;
  bool adaptive_rho = true;
  int adaptive_rho_interval = 50;
  double adaptive_rho_tolerance = 5.0;
  bool polish = true;
  double polish_start = 1e-3;  // residual level at which polishing is attempted
  double infeasibility_tol = 1e-6;
};

/// Primal/dual starting point for the ADMM iterates (stacked constraint order).
struct QpWarmStart {
  Vector z;
  Vector y;
};

/// A QP whose matrices are fixed; only q and the bounds vary between solves.
/// Holds scratch storage, so use one instance per thread.
class PreparedQp {
 public:
  PreparedQp() = default;

  PreparedQp(Matrix P, Matrix A_eq, Matrix A_in, QpSettings settings = {})
      : settings_(settings) {
    const Index n = P.rows();
    require(P.cols() == n, "QP: P must be square");
    if (A_eq.size() == 0) A_eq.resize(0, n);
    if (A_in.size() == 0) A_in.resize(0, n);
    require(A_eq.cols() == n && A_in.cols() == n, "QP: constraint width mismatch");
    P_ = 0.5 * (P + P.transpose());
    m_eq_ = A_eq.rows();
    A_.resize(m_eq_ + A_in.rows(), n);
    A_.topRows(m_eq_) = A_eq;
    A_.bottomRows(A_in.rows()) = A_in;
    gram_eq_ = A_eq.transpose() * A_eq;
    gram_in_ = A_in.transpose() * A_in;
  }

  Index num_vars() const { return P_.rows(); }
  Index num_eq() const { return m_eq_; }
  Index num_in() const { return A_.rows() - m_eq_; }
  const QpSettings& settings() const { return settings_; }
  QpSettings& settings() { return settings_; }
  const Matrix& P() const { return P_; }
  const Matrix& A() const { return A_; }

  QpSolution solve(const Vector& q, const Vector& b_eq, const Vector& b_in,
                   const QpWarmStart* warm = nullptr) {
    const Index n = num_vars();
    const Index m = A_.rows();
    require(q.size() == n, "QP: q has wrong length");
    require(b_eq.size() == m_eq_ && b_in.size() == num_in(),
            "QP: bound vectors have wrong length");
    require(q.allFinite() && b_eq.allFinite(), "QP: non-finite problem data");

    const double inf = std::numeric_limits<double>::infinity();
    lower_.resize(m);
    upper_.resize(m);
    lower_.head(m_eq_) = b_eq;
    upper_.head(m_eq_) = b_eq;
    lower_.tail(m - m_eq_).setConstant(-inf);
    upper_.tail(m - m_eq_) = b_in;

    const QpSettings& s = settings_;
    double rho = s.rho;
    factorize(rho);

    Vector x = Vector::Zero(n);
    Vector z = Vector::Zero(m);
    Vector y = Vector::Zero(m);
    if (warm != nullptr) {
      if (warm->z.size() == n) x = warm->z;
      z = project(A_ * x);
      if (warm->y.size() == m) y = warm->y;
    }

    Vector rho_vec = rho_vector(rho);
    Vector x_tilde(n), z_tilde(m), z_relaxed(m), y_prev(m), rhs(n), Ax(m);

    // A fixed update spacing can lock rho into a two-value cycle where neither
    // value gets enough iterations to settle, so each reversal doubles it.
    int adapt_gap = s.adaptive_rho_interval;
    int next_adapt = adapt_gap;
    int last_direction = 0;
    QpSolution out;
    for (int it = 1; it <= s.max_iter; ++it) {
      rhs = s.sigma * x - q + A_.transpose() * (rho_vec.cwiseProduct(z) - y);
      x_tilde = chol_.solve(rhs);
      z_tilde = A_ * x_tilde;
      x = s.alpha * x_tilde + (1.0 - s.alpha) * x;
      z_relaxed = s.alpha * z_tilde + (1.0 - s.alpha) * z;
      y_prev = y;
      const Vector z_next = project(z_relaxed + y.cwiseQuotient(rho_vec));
      y += rho_vec.cwiseProduct(z_relaxed - z_next);
      z = z_next;

      if (it % s.check_interval != 0 && it != s.max_iter) continue;

      Ax = A_ * x;
      const Vector Px = P_ * x;
      const Vector Aty = A_.transpose() * y;
      const double prim = m > 0 ? (Ax - z).lpNorm<Eigen::Infinity>() : 0.0;
      const double dual = (Px + q + Aty).lpNorm<Eigen::Infinity>();
      out.iterations = it;
      if (prim <= s.tol && dual <= s.tol) {
        fill_solution(out, x, y, prim, dual, QpStatus::optimal);
        return out;
      }
      if (s.polish && prim <= s.polish_start && dual <= s.polish_start &&
          try_polish(q, x, z, y, out)) {
        out.iterations = it;
        return out;
      }
      // A certificate only counts while the iterate is measurably infeasible;
      // degenerate feasible sets (a single point) also make y drift.
      if (m > 0 && prim > s.infeasibility_tol && primal_infeasible(y - y_prev)) {
        fill_solution(out, x, y, prim, dual, QpStatus::infeasible);
        return out;
      }
      if (s.adaptive_rho && it >= next_adapt && m > 0) {
        const double prim_scale =
            std::max({Ax.lpNorm<Eigen::Infinity>(), z.lpNorm<Eigen::Infinity>(), 1e-12});
        const double dual_scale = std::max(
            {Px.lpNorm<Eigen::Infinity>(), Aty.lpNorm<Eigen::Infinity>(),
             q.lpNorm<Eigen::Infinity>(), 1e-12});
        const double ratio = std::sqrt((prim / prim_scale) / std::max(dual / dual_scale, 1e-30));
        const double candidate = std::clamp(rho * ratio, 1e-6, 1e6);
        if (candidate > rho * s.adaptive_rho_tolerance ||
            candidate < rho / s.adaptive_rho_tolerance) {
          const int direction = candidate > rho ? 1 : -1;
          if (direction == -last_direction) adapt_gap *= 2;
          last_direction = direction;
          rho = candidate;
          factorize(rho);
          rho_vec = rho_vector(rho);
        }
        next_adapt = it + adapt_gap;
      }
      if (it == s.max_iter) {
        fill_solution(out, x, y, prim, dual, QpStatus::max_iterations);
        return out;
      }
    }
    fill_solution(out, x, y, out.primal_residual, out.dual_residual,
                  QpStatus::max_iterations);
    return out;
  }

 private:
  Vector project(const Vector& v) const {
    return v.cwiseMax(lower_).cwiseMin(upper_);
  }

  Vector rho_vector(double rho) const {
    Vector r(A_.rows());
    r.head(m_eq_).setConstant(rho * settings_.equality_rho_scale);
    r.tail(A_.rows() - m_eq_).setConstant(rho);
    return r;
  }

  void factorize(double rho) {
    Matrix K = P_;
    K.diagonal().array() += settings_.sigma;
    K += (rho * settings_.equality_rho_scale) * gram_eq_ + rho * gram_in_;
    chol_.compute(K);
    if (chol_.info() != Eigen::Success) throw NumericalError("QP: KKT factorization failed");
  }

  bool primal_infeasible(const Vector& dy) const {
    const double norm = dy.lpNorm<Eigen::Infinity>();
    if (norm <= 1e-12) return false;
    const double eps = settings_.infeasibility_tol * norm;
    if ((A_.transpose() * dy).lpNorm<Eigen::Infinity>() > eps) return false;
    double support = 0.0;
    for (Index i = 0; i < dy.size(); ++i) {
      if (dy[i] > 0) {
        if (!std::isfinite(upper_[i])) {
          if (dy[i] > eps) return false;
          continue;
        }
        support += upper_[i] * dy[i];
      } else if (dy[i] < 0) {
        if (!std::isfinite(lower_[i])) {
          if (-dy[i] > eps) return false;
          continue;
        }
        support += lower_[i] * dy[i];
      }
    }
    return support < -eps;
  }

  void fill_solution(QpSolution& out, const Vector& x, const Vector& y, double prim,
                     double dual, QpStatus status) const {
    out.z = x;
    out.y_eq = y.head(m_eq_);
    out.y_in = y.tail(A_.rows() - m_eq_);
    out.primal_residual = prim;
    out.dual_residual = dual;
    out.status = status;
  }

  // Guesses the active set from the ADMM iterate and solves the equality
  // constrained KKT system on it. Accepted only if the result meets the
  // tolerance on the full problem with correctly signed multipliers.
  bool try_polish(const Vector& q, const Vector& x, const Vector& z, const Vector& y,
                  QpSolution& out) const {
    const Index n = num_vars();
    const Index m = A_.rows();
    std::vector<Index> active;
    std::vector<int> side;  // -1 lower, +1 upper, 0 equality
    active.reserve(static_cast<std::size_t>(m));
    for (Index i = 0; i < m; ++i) {
      if (i < m_eq_) {
        active.push_back(i);
        side.push_back(0);
      } else if (std::isfinite(upper_[i]) && upper_[i] - z[i] < y[i]) {
        active.push_back(i);
        side.push_back(1);
      } else if (std::isfinite(lower_[i]) && z[i] - lower_[i] < -y[i]) {
        active.push_back(i);
        side.push_back(-1);
      }
    }
    const Index na = static_cast<Index>(active.size());
    Matrix K = Matrix::Zero(n + na, n + na);
    Vector rhs(n + na);
    K.topLeftCorner(n, n) = P_;
    rhs.head(n) = -q;
    for (Index k = 0; k < na; ++k) {
      const Index i = active[static_cast<std::size_t>(k)];
      K.block(n + k, 0, 1, n) = A_.row(i);
      K.block(0, n + k, n, 1) = A_.row(i).transpose();
      rhs[n + k] = side[static_cast<std::size_t>(k)] < 0 ? lower_[i] : upper_[i];
    }
    constexpr double delta = 1e-9;
    Matrix K_reg = K;
    K_reg.topLeftCorner(n, n).diagonal().array() += delta;
    K_reg.bottomRightCorner(na, na).diagonal().array() -= delta;
    Eigen::PartialPivLU<Matrix> lu(K_reg);
    Vector sol = lu.solve(rhs);
    for (int refine = 0; refine < 5; ++refine) {
      const Vector r = rhs - K * sol;
      if (!r.allFinite()) return false;
      sol += lu.solve(r);
    }
    if (!sol.allFinite()) return false;

    Vector y_full = Vector::Zero(m);
    const double tol = settings_.tol;
    for (Index k = 0; k < na; ++k) {
      const double yk = sol[n + k];
      const int sd = side[static_cast<std::size_t>(k)];
      if ((sd > 0 && yk < -tol) || (sd < 0 && yk > tol)) return false;
      y_full[active[static_cast<std::size_t>(k)]] = yk;
    }
    const Vector xs = sol.head(n);
    const Vector Ax = A_ * xs;
    const double prim = m > 0 ? (Ax - project(Ax)).lpNorm<Eigen::Infinity>() : 0.0;
    const double dual = (P_ * xs + q + A_.transpose() * y_full).lpNorm<Eigen::Infinity>();
    if (prim > tol || dual > tol) return false;
    (void)x;
    fill_solution(out, xs, y_full, prim, dual, QpStatus::optimal);
    out.polished = true;
    return true;
  }

  QpSettings settings_;
  Matrix P_;
  Matrix A_;
  Index m_eq_ = 0;
  Matrix gram_eq_;
  Matrix gram_in_;
  Vector lower_;
  Vector upper_;
  Eigen::LLT<Matrix> chol_;
};

/// One-shot solve of a QP with default settings apart from tol and max_iter.
inline QpSolution solve_qp(const QuadraticProgram& p, double tol = 1e-8,
                           int max_iter = 20000) {
  require(tol > 0.0 && max_iter > 0, "solve_qp: tol and max_iter must be positive");
  QpSettings s;
  s.tol = tol;
  s.max_iter = max_iter;
  PreparedQp prepared(p.P, p.A_eq, p.A_in, s);
  return prepared.solve(p.q, p.b_eq, p.b_in);
}

}  // namespace reachctl
