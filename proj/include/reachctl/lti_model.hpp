#pragma once

// Block-structured continuous LTI systems, their zero-order-hold
// discretization and a fine-step stochastic simulator.

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>
#include <unsupported/Eigen/MatrixFunctions>

#include "reachctl/core.hpp"
#include "reachctl/geometry.hpp"

namespace reachctl {

inline Matrix matrix_exponential(const Matrix& M) {
  require(M.rows() == M.cols(), "matrix_exponential: matrix must be square");
  require(M.allFinite(), "matrix_exponential: non-finite entries");
  if (M.rows() == 0) return M;
  return M.exp();
}

/// Spectral norm (largest singular value).
inline double norm2(const Matrix& M) {
  require(M.allFinite(), "norm2: non-finite entries");
  if (M.size() == 0) return 0.0;
  Eigen::JacobiSVD<Matrix> svd(M);
  return svd.singularValues()[0];
}

/// x' = A_c x + B_c u + E_c w with x = (x^s, x^d); noise only drives x^s and
/// x^d does not depend on x^s.
struct StructuredLti {
  Matrix A_c;
  Matrix B_c;
  Matrix E_c;
  Index n_s = 0;
  Index n_d = 0;
  HalfspacePolytope input_set;

  StructuredLti() = default;
  StructuredLti(Matrix A, Matrix B, Matrix E, Index ns, Index nd, HalfspacePolytope U)
      : A_c(std::move(A)), B_c(std::move(B)), E_c(std::move(E)), n_s(ns), n_d(nd),
        input_set(std::move(U)) {
    validate();
  }

  Index n() const { return n_s + n_d; }
  Index m() const { return B_c.cols(); }
  Index n_w() const { return E_c.cols(); }

  auto A1() const { return A_c.topLeftCorner(n_s, n_s); }
  auto A2() const { return A_c.topRightCorner(n_s, n_d); }
  auto A4() const { return A_c.bottomRightCorner(n_d, n_d); }
  auto B2() const { return B_c.bottomRows(n_d); }

  void validate() const {
    require(n_s >= 0 && n_d >= 0 && n() > 0, "StructuredLti: bad state split");
    require(A_c.rows() == n() && A_c.cols() == n(), "StructuredLti: A_c must be n x n");
    require(B_c.rows() == n() && B_c.cols() > 0, "StructuredLti: B_c must be n x m");
    require(E_c.rows() == n(), "StructuredLti: E_c must have n rows");
    require(A_c.allFinite() && B_c.allFinite() && E_c.allFinite(),
            "StructuredLti: non-finite system matrix");
    require(A_c.bottomLeftCorner(n_d, n_s).isZero(0.0),
            "StructuredLti: deterministic states must not depend on stochastic states");
    require(E_c.bottomRows(n_d).isZero(0.0),
            "StructuredLti: noise must not enter the deterministic states");
    require(input_set.dim() == m(), "StructuredLti: input set dimension != m");
  }
};

struct DiscreteLti {
  Matrix A;
  Matrix B;
  Matrix E;
  double step = 0.0;
  Index n_s = 0;
  Index n_d = 0;

  Index n() const { return n_s + n_d; }
  Index m() const { return B.cols(); }
  auto A4() const { return A.bottomRightCorner(n_d, n_d); }
  auto B2() const { return B.bottomRows(n_d); }
};

/// Exact zero-order hold of (A_c, B_c, E_c) over dt via one augmented exponential.
inline DiscreteLti discretize(const StructuredLti& sys, double dt) {
  require(dt > 0.0 && std::isfinite(dt), "discretize: dt must be positive");
  const Index n = sys.n(), m = sys.m(), w = sys.n_w();
  Matrix M = Matrix::Zero(n + m + w, n + m + w);
  M.topLeftCorner(n, n) = sys.A_c;
  M.block(0, n, n, m) = sys.B_c;
  M.block(0, n + m, n, w) = sys.E_c;
  const Matrix X = matrix_exponential(M * dt);
  DiscreteLti d;
  d.A = X.topLeftCorner(n, n);
  d.B = X.block(0, n, n, m);
  d.E = X.block(0, n + m, n, w);
  d.A.bottomLeftCorner(sys.n_d, sys.n_s).setZero();
  d.E.bottomRows(sys.n_d).setZero();
  d.step = dt;
  d.n_s = sys.n_s;
  d.n_d = sys.n_d;
  return d;
}

/// Gaussian disturbance held constant over each sample interval.
class NoiseModel {
 public:
  NoiseModel() = default;
  NoiseModel(Vector mean, Matrix covariance, double sample_interval)
      : mean_(std::move(mean)), cov_(std::move(covariance)), interval_(sample_interval) {
    require(cov_.rows() == mean_.size() && cov_.cols() == mean_.size(),
            "NoiseModel: covariance must be n_w x n_w");
    require(mean_.allFinite() && cov_.allFinite(), "NoiseModel: non-finite parameters");
    require((cov_ - cov_.transpose()).cwiseAbs().maxCoeff() <= 1e-12 * (1.0 + cov_.cwiseAbs().maxCoeff()),
            "NoiseModel: covariance must be symmetric");
    require(sample_interval > 0.0, "NoiseModel: sample interval must be positive");
    Eigen::SelfAdjointEigenSolver<Matrix> es(cov_);
    require(es.eigenvalues().minCoeff() >= -1e-12, "NoiseModel: covariance must be PSD");
    factor_ = es.eigenvectors() *
              es.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal();
    zero_ = cov_.isZero(0.0);
  }

  static NoiseModel none(Index n_w, double sample_interval) {
    return NoiseModel(Vector::Zero(n_w), Matrix::Zero(n_w, n_w), sample_interval);
  }

  Index dim() const { return mean_.size(); }
  const Vector& mean() const { return mean_; }
  const Matrix& covariance() const { return cov_; }
  double sample_interval() const { return interval_; }
  bool is_zero() const { return zero_ && mean_.isZero(0.0); }

  /// Draws one disturbance into `out`; `scratch` holds the standard normals.
  void sample(RandomStream& rng, Vector& out, Vector& scratch) const {
    out = mean_;
    if (zero_) return;
    scratch.resize(mean_.size());
    for (Index i = 0; i < mean_.size(); ++i) scratch[i] = rng.normal();
    out.noalias() += factor_ * scratch;
  }

 private:
  Vector mean_;
  Matrix cov_;
  Matrix factor_;
  double interval_ = 1e-3;
  bool zero_ = true;
};

/// Horizon T split into N outer blocks of J inner steps, each simulated in
/// `substeps` fine steps. Times are computed from integer counters.
class TimeGrid {
 public:
  TimeGrid() = default;
  TimeGrid(double T, int N, int J, double sim_step) : T_(T), N_(N), J_(J) {
    require(T > 0.0 && std::isfinite(T), "TimeGrid: T must be positive");
    require(N >= 1 && J >= 1, "TimeGrid: N and J must be >= 1");
    require(sim_step > 0.0, "TimeGrid: sim_step must be positive");
    const double ratio = inner_step() / sim_step;
    const double rounded = std::round(ratio);
    require(rounded >= 1.0 && std::abs(ratio - rounded) <= 1e-9 * ratio,
            "TimeGrid: sim_step must divide the inner step");
    S_ = static_cast<int>(rounded);
  }

  double T() const { return T_; }
  int N() const { return N_; }
  int J() const { return J_; }
  int substeps() const { return S_; }
  double outer_step() const { return T_ / N_; }
  double inner_step() const { return T_ / (static_cast<double>(N_) * J_); }
  double sim_step() const { return T_ / (static_cast<double>(N_) * J_ * S_); }
  std::int64_t fine_steps_per_block() const { return static_cast<std::int64_t>(J_) * S_; }
  std::int64_t total_fine_steps() const { return fine_steps_per_block() * N_; }
  double time_at(std::int64_t fine_index) const {
    return T_ * static_cast<double>(fine_index) / static_cast<double>(total_fine_steps());
  }
  double time_at(int k, int j, int s = 0) const {
    return time_at((static_cast<std::int64_t>(k) * J_ + j) * S_ + s);
  }

 private:
  double T_ = 1.0;
  int N_ = 1;
  int J_ = 1;
  int S_ = 1;
};

/// Exact ZOH of the continuous system over one fine step, applied with a held
/// input and a held disturbance.
class FineStepper {
 public:
  FineStepper() = default;
  FineStepper(const StructuredLti& sys, double sim_step) : d_(discretize(sys, sim_step)) {}

  const DiscreteLti& model() const { return d_; }

  void step(Vector& x, const Vector& u, const Vector& w) const {
    Vector next;
    step(x, u, w, next);
  }

  /// Same as step() but reuses `scratch` to avoid allocation.
  void step(Vector& x, const Vector& u, const Vector& w, Vector& scratch) const {
    scratch.noalias() = d_.A * x;
    scratch.noalias() += d_.B * u;
    if (w.size() > 0) scratch.noalias() += d_.E * w;
    x.swap(scratch);
  }

 private:
  DiscreteLti d_;
};

/// Raised when the input callback fails during simulation.
class ControllerFailure : public std::runtime_error {
 public:
  ControllerFailure(double time, const std::string& what)
      : std::runtime_error("controller failed at t=" + std::to_string(time) + ": " + what),
        time_(time) {}
  double time() const { return time_; }

 private:
  double time_;
};

struct Trajectory {
  std::vector<double> t;
  std::vector<Vector> x;  // state at each fine step, x[0] = initial state
  std::vector<Vector> u;  // input applied on [t_i, t_{i+1}); u.size() == x.size() - 1
  std::vector<std::size_t> inner_marks;  // indices of inner-step boundaries
  std::vector<std::size_t> outer_marks;  // indices of outer-step boundaries

  void write_csv(std::ostream& os) const {
    const Index n = x.empty() ? 0 : x.front().size();
    const Index m = u.empty() ? 0 : u.front().size();
    os << "t";
    for (Index i = 0; i < n; ++i) os << ",x" << i;
    for (Index i = 0; i < m; ++i) os << ",u" << i;
    os << '\n';
    os.precision(17);
    for (std::size_t k = 0; k < x.size(); ++k) {
      os << t[k];
      for (Index i = 0; i < n; ++i) os << ',' << x[k][i];
      // The last state has no input interval; repeat the last input.
      const Vector* uk = u.empty() ? nullptr : &u[std::min(k, u.size() - 1)];
      for (Index i = 0; i < m; ++i) os << ',' << (*uk)[i];
      os << '\n';
    }
  }
};

/// Input callback: receives (inner step counter, time, state) at every inner
/// boundary and returns the input held until the next boundary.
using InputCallback = std::function<Vector(std::int64_t, double, const Vector&)>;

/// Simulates the continuous system for `duration` seconds on the fine grid of
/// `grid`, querying the controller every inner step and resampling the
/// disturbance every noise sample interval.
inline Trajectory simulate_fine(const StructuredLti& sys, const Vector& x0,
                                const InputCallback& controller, const NoiseModel& noise,
                                double duration, const TimeGrid& grid, RandomStream& rng) {
  require(x0.size() == sys.n(), "simulate_fine: x0 has wrong dimension");
  require(noise.dim() == sys.n_w(), "simulate_fine: noise dimension != n_w");
  const double h = grid.sim_step();
  const double steps_real = duration / h;
  const auto steps = static_cast<std::int64_t>(std::llround(steps_real));
  require(steps >= 0 && std::abs(steps_real - static_cast<double>(steps)) <= 1e-9 * (1.0 + steps_real),
          "simulate_fine: duration must be a multiple of sim_step");
  const double resample_real = noise.sample_interval() / h;
  const auto resample = std::max<std::int64_t>(1, std::llround(resample_real));

  const FineStepper stepper(sys, h);
  Trajectory traj;
  traj.t.reserve(static_cast<std::size_t>(steps) + 1);
  traj.x.reserve(static_cast<std::size_t>(steps) + 1);
  traj.u.reserve(static_cast<std::size_t>(steps));
  Vector x = x0;
  Vector u = Vector::Zero(sys.m());
  Vector w = Vector::Zero(sys.n_w());
  Vector scratch, next;
  traj.t.push_back(0.0);
  traj.x.push_back(x);
  const std::int64_t per_inner = grid.substeps();
  const std::int64_t per_outer = grid.fine_steps_per_block();
  for (std::int64_t i = 0; i < steps; ++i) {
    if (i % per_inner == 0) {
      traj.inner_marks.push_back(static_cast<std::size_t>(i));
      if (i % per_outer == 0) traj.outer_marks.push_back(static_cast<std::size_t>(i));
      const double t = grid.time_at(i);
      try {
        u = controller(i / per_inner, t, x);
      } catch (const std::exception& e) {
        throw ControllerFailure(t, e.what());
      }
      require(u.size() == sys.m(), "simulate_fine: controller returned wrong input size");
    }
    if (i % resample == 0) noise.sample(rng, w, scratch);
    stepper.step(x, u, w, next);
    traj.u.push_back(u);
    traj.t.push_back(grid.time_at(i + 1));
    traj.x.push_back(x);
  }
  if (steps % per_inner == 0) traj.inner_marks.push_back(static_cast<std::size_t>(steps));
  if (steps % per_outer == 0) traj.outer_marks.push_back(static_cast<std::size_t>(steps));
  return traj;
}

}  // namespace reachctl
