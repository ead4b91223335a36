#include <gtest/gtest.h>

#include <cmath>

#include "reachctl/tightening.hpp"
#include "support/models.hpp"

namespace reachctl {
namespace {

Vector vec(std::initializer_list<double> v) {
  Vector out(static_cast<Index>(v.size()));
  Index i = 0;
  for (double x : v) out[i++] = x;
  return out;
}

Vector uniform_in_box(RandomStream& rng, const Vector& lo, const Vector& hi) {
  Vector x(lo.size());
  for (Index i = 0; i < lo.size(); ++i) x[i] = rng.uniform(lo[i], hi[i]);
  return x;
}

TEST(GrowthBoundPsi, Examples) {
  EXPECT_DOUBLE_EQ(growth_bound_psi(0.0, 0.1, 5.0, 2.0), 0.2);
  EXPECT_NEAR(growth_bound_psi(1.0, 0.1, 1.0, 1.0), 2.0 * (std::exp(0.1) - 1.0), 1e-15);
  EXPECT_NEAR(growth_bound_psi(1.0, 0.1, 1.0, 1.0), 0.2103418, 1e-7);
  EXPECT_NEAR(growth_bound_psi(1e-9, 0.1, 0.0, 1.0), 0.1, 1e-8 * 0.1);
  EXPECT_THROW(growth_bound_psi(-1.0, 0.1, 0.0, 0.0), ArgumentError);
  EXPECT_THROW(growth_bound_psi(1.0, 0.1, -1.0, 0.0), ArgumentError);
}

TEST(GrowthBoundPsi, ContinuousAtZeroNorm) {
  for (double a : {1e-6, 1e-8, 1e-10, 1e-11}) {
    const double v = growth_bound_psi(a, 0.3, 0.0, 2.0);
    EXPECT_NEAR(v, 0.6, 0.6 * 1e-5);
  }
}

TEST(GrowthBoundPsi, MonotoneInEachArgument) {
  RandomStream rng(1);
  for (int t = 0; t < 500; ++t) {
    const double a = rng.uniform(0, 3), dt = rng.uniform(0, 1), z = rng.uniform(0, 5),
                 d = rng.uniform(0, 5), h = rng.uniform(0, 0.5);
    const double base = growth_bound_psi(a, dt, z, d);
    EXPECT_GE(growth_bound_psi(a + h, dt, z, d), base * (1 - 1e-14));
    EXPECT_GE(growth_bound_psi(a, dt + h, z, d), base);
    EXPECT_GE(growth_bound_psi(a, dt, z + h, d), base);
    EXPECT_GE(growth_bound_psi(a, dt, z, d + h), base);
  }
}

TEST(Vertices, BoxAndTriangle) {
  const auto box = HalfspacePolytope::box(vec({-1, -2}), vec({1, 2}));
  EXPECT_EQ(polytope_vertices(box).size(), 4u);
  EXPECT_NEAR(max_norm_over(box), std::sqrt(5.0), 1e-15);
  Matrix H(3, 2);
  H << -1, 0, 0, -1, 1, 1;
  const HalfspacePolytope tri(H, vec({0, 0, 1}));
  const auto v = enumerate_vertices(tri);
  EXPECT_EQ(v.size(), 3u);
  EXPECT_NEAR(max_norm_over(tri), 1.0, 1e-12);
}

TEST(Vertices, UnboundedSetIsReported) {
  Matrix H(2, 2);
  H << -1, 0, 0, -1;
  EXPECT_THROW(max_norm_over(HalfspacePolytope(H, vec({0, 0}))), ArgumentError);
}

TEST(ComputeEta, IntegratorBranch) {
  // A_4 = 0, B_2 = I, U = unit box: eta = dt * sqrt(m).
  const StructuredLti sys(Matrix::Zero(3, 3),
                          (Matrix(3, 2) << 0, 0, 1, 0, 0, 1).finished(),
                          (Matrix(3, 1) << 1, 0, 0).finished(), 1, 2,
                          HalfspacePolytope::box(vec({-1, -1}), vec({1, 1})));
  const auto e = compute_eta(sys, HalfspacePolytope::box(vec({-1, -1}), vec({1, 1})),
                             sys.input_set, 0.1);
  EXPECT_NEAR(e.eta, 0.1 * std::sqrt(2.0), 1e-15);
  EXPECT_NEAR(e.kappa_x, std::sqrt(2.0), 1e-15);
  EXPECT_NEAR(e.kappa_u, std::sqrt(2.0), 1e-15);
}

TEST(ComputeEta, RejectsWrongDimensions) {
  const auto sys = testing::double_integrator_2d();
  EXPECT_THROW(compute_eta(sys, HalfspacePolytope::box(vec({-1}), vec({1})), sys.input_set, 0.1),
               ArgumentError);
}

// Brute-force oracle: the largest deviation ‖x^d(t) − x^d(0)‖ over [0, dt]
// for states in G^d and constant inputs in U never exceeds eta.
double max_simulated_deviation(const StructuredLti& sys, const HalfspacePolytope& g_d, double dt,
                               int samples, int substeps, std::uint64_t seed) {
  const Index nd = sys.n_d;
  Vector lo, hi, ulo, uhi;
  EXPECT_TRUE(as_box(g_d, lo, hi));
  EXPECT_TRUE(as_box(sys.input_set, ulo, uhi));
  const StructuredLti sub(sys.A4(), sys.B2(), Matrix::Zero(nd, 0), 0, nd, sys.input_set);
  const auto step = discretize(sub, dt / substeps);
  const auto u_verts = box_vertices(ulo, uhi);
  const auto x_verts = box_vertices(lo, hi);
  RandomStream rng(seed);
  double worst = 0.0;
  for (int s = 0; s < samples; ++s) {
    // Mix interior samples with vertex samples, where the maximum is attained.
    const Vector x0 = s % 2 == 0 ? uniform_in_box(rng, lo, hi)
                                 : x_verts[rng.next_u64() % x_verts.size()];
    const Vector u = s % 3 == 0 ? uniform_in_box(rng, ulo, uhi)
                                : u_verts[rng.next_u64() % u_verts.size()];
    Vector x = x0;
    for (int k = 0; k < substeps; ++k) {
      x = step.A * x + step.B * u;
      worst = std::max(worst, (x - x0).norm());
    }
  }
  return worst;
}

TEST(ComputeEta, UpperBoundsSimulatedDeviationQuadcopter) {
  const auto sys = testing::quadcopter_12d();
  const auto g_d = testing::quadcopter_state_box();
  const double dt = 0.1;
  const auto e = compute_eta(sys, g_d, sys.input_set, dt);
  EXPECT_GT(norm2(sys.A4()), 0.0);
  const double worst = max_simulated_deviation(sys, g_d, dt, 100000, 20, 11);
  EXPECT_LE(worst, e.eta);
  EXPECT_GT(worst, 0.0);
}

TEST(ComputeEta, UpperBoundsSimulatedDeviationDampedIntegrator) {
  const auto sys = testing::double_integrator_2d(2.0, 0.2);
  const auto g_d = HalfspacePolytope::box(vec({-1.5, -1.5}), vec({1.5, 1.5}));
  const auto e = compute_eta(sys, g_d, sys.input_set, 0.1);
  const double worst = max_simulated_deviation(sys, g_d, 0.1, 100000, 20, 12);
  EXPECT_LE(worst, e.eta);
  // The bound should not be wildly loose on this system.
  EXPECT_GE(worst, 0.5 * e.eta);
}

TEST(TubeRadius, Examples) {
  EXPECT_NEAR(compute_tube_radius(Matrix::Zero(4, 4), 1.0, 0.1, 2), 0.05 * std::sqrt(2.0), 1e-15);
  RandomStream rng(2);
  Matrix A(3, 3);
  for (Index i = 0; i < 9; ++i) A(i / 3, i % 3) = rng.normal();
  EXPECT_NEAR(compute_tube_radius(A, 0.0, 0.2, 3), 0.1 * std::sqrt(3.0), 1e-15);
  EXPECT_NEAR(compute_tube_radius(Matrix::Identity(2, 2), 2.5, 0.05, 2),
              std::exp(2.5) * 0.025 * std::sqrt(2.0), 1e-12);
  EXPECT_NEAR(compute_tube_radius(Matrix::Identity(2, 2), 2.5, 0.05, 2), 0.4307162, 1e-7);
}

TEST(TubeRadius, DecoupledPositionsUseCellRadius) {
  const auto quad = testing::quadcopter_12d();
  EXPECT_TRUE(stochastic_states_decoupled(quad));
  EXPECT_NEAR(tube_radius_for(quad, 2.5, 0.1), 0.05 * std::sqrt(2.0), 1e-15);
  Matrix A = Matrix::Zero(2, 2);
  A(0, 0) = -0.3;
  const StructuredLti coupled(A, Matrix::Ones(2, 1), (Matrix(2, 1) << 1, 0).finished(), 1, 1,
                              HalfspacePolytope::box(vec({-1}), vec({1})));
  EXPECT_FALSE(stochastic_states_decoupled(coupled));
  EXPECT_NEAR(tube_radius_for(coupled, 1.0, 0.1), std::exp(0.3) * 0.05, 1e-14);
}

// ‖e^{A_c t} x‖ <= r for x in the cell and t in [0, Dt].
void check_tube_soundness(const Matrix& A_c, Index n_H, const Matrix& embed, double Dt,
                          double zeta, double r, std::uint64_t seed) {
  RandomStream rng(seed);
  const Vector half = Vector::Constant(n_H, 0.5 * zeta);
  for (int s = 0; s < 10000; ++s) {
    Vector xh = uniform_in_box(rng, -half, half);
    if (s % 4 == 0)
      for (Index i = 0; i < n_H; ++i) xh[i] = (rng.next_u64() & 1U) ? half[i] : -half[i];
    const double t = s % 10 == 0 ? Dt : rng.uniform(0.0, Dt);
    const Vector e = matrix_exponential(A_c * t) * (embed * xh);
    ASSERT_LE(e.norm(), r) << "sample " << s;
  }
}

TEST(TubeRadius, SoundOnCellErrors) {
  RandomStream rng(3);
  Matrix A(4, 4);
  for (Index i = 0; i < 16; ++i) A(i / 4, i % 4) = rng.normal();
  const double r = compute_tube_radius(A, 0.7, 0.1, 4);
  check_tube_soundness(A, 4, Matrix::Identity(4, 4), 0.7, 0.1, r, 4);

  const auto quad = testing::quadcopter_12d();
  Matrix embed = Matrix::Zero(12, 2);
  embed(0, 0) = embed(1, 1) = 1.0;
  check_tube_soundness(quad.A_c, 2, embed, 2.5, 0.1, tube_radius_for(quad, 2.5, 0.1) * (1 + 1e-15),
                       5);
}

TEST(ConstraintFamily, Examples) {
  const auto g = HalfspacePolytope::box(vec({-1}), vec({1}));
  TighteningParams p;
  auto fam = build_constraint_family(g, p, TerminalMode::zero_set);
  EXPECT_EQ(fam.g_hat.offsets(), g.offsets());
  EXPECT_EQ(fam.g_tilde.offsets(), g.offsets());
  p.eta = 0.1;
  p.r = 0.2;
  fam = build_constraint_family(g, p, TerminalMode::zero_set);
  EXPECT_NEAR(fam.g_hat.offsets()[0], 0.9, 1e-15);
  EXPECT_NEAR(fam.g_tilde.offsets()[0], 0.7, 1e-15);
  fam = build_constraint_family(g, p, TerminalMode::zero_set, std::nullopt, true);
  EXPECT_EQ(fam.g_tilde.offsets(), fam.g_hat.offsets());
  EXPECT_TRUE(fam.zero_terminal());
}

TEST(ConstraintFamily, NestedOnRandomPoints) {
  RandomStream rng(6);
  const auto g = HalfspacePolytope::box(vec({-1.5, -1.5}), vec({1.5, 1.5}));
  TighteningParams p;
  p.eta = 0.28;
  p.r = 0.07;
  const auto fam = build_constraint_family(g, p, TerminalMode::zero_set);
  for (int s = 0; s < 5000; ++s) {
    const Vector x = uniform_in_box(rng, vec({-2, -2}), vec({2, 2}));
    if (fam.g_tilde.contains(x)) {
      EXPECT_TRUE(fam.g_hat.contains(x));
    }
    if (fam.g_hat.contains(x)) {
      EXPECT_TRUE(fam.g.contains(x));
    }
  }
}

TEST(ConstraintFamily, OverTighteningNamesConstraint) {
  const auto g = HalfspacePolytope::box(vec({-1, -5}), vec({1, 5}));
  TighteningParams p;
  p.eta = 0.8;
  p.r = 0.5;
  try {
    build_constraint_family(g, p, TerminalMode::zero_set);
    FAIL() << "expected OverTightened";
  } catch (const OverTightened& e) {
    EXPECT_EQ(e.constraint(), 1);
  }
}

TEST(TerminalInvariance, ZeroSetExamples) {
  const auto zero = HalfspacePolytope::box(vec({0, 0}), vec({0, 0}));
  const auto g = HalfspacePolytope::box(vec({-1, -1}), vec({1, 1}));
  const auto U = HalfspacePolytope::box(vec({-1, -1}), vec({1, 1}));
  EXPECT_TRUE(validate_terminal_invariance(zero, Matrix::Zero(2, 2), Matrix::Identity(2, 2), g, U,
                                           0.0));
  EXPECT_FALSE(validate_terminal_invariance(zero, Matrix::Zero(2, 2), Matrix::Identity(2, 2), g,
                                            U, 0.05));
}

// Gridded one-step oracle for a velocity box under v+ = v + dt u + d:
// from each of 1000 boundary points, search a grid of inputs for one that keeps
// all disturbance corners inside the set.
bool gridded_invariance(double box, double a_max, double dt, double dist) {
  for (int s = 0; s < 1000; ++s) {
    const double ang = 2.0 * 3.14159265358979 * s / 1000.0;
    Vector v(2);
    const double c = std::cos(ang), sn = std::sin(ang);
    const double scale = box / std::max(std::abs(c), std::abs(sn));
    v << c * scale, sn * scale;
    bool found = false;
    for (int i = 0; i <= 40 && !found; ++i) {
      for (int j = 0; j <= 40 && !found; ++j) {
        Vector u(2);
        u << -a_max + 2 * a_max * i / 40.0, -a_max + 2 * a_max * j / 40.0;
        const Vector nxt = v + dt * u;
        found = (nxt.cwiseAbs().array() + dist <= box + 1e-12).all();
      }
    }
    if (!found) return false;
  }
  return true;
}

TEST(TerminalInvariance, AgreesWithGriddedOracle) {
  const double dt = 0.1;
  const auto g = HalfspacePolytope::box(vec({-1.5, -1.5}), vec({1.5, 1.5}));
  for (double a_max : {0.5, 2.0}) {
    for (double dist : {0.0, 0.02, 0.1, 0.3}) {
      const double box = 1.0;
      const auto term = HalfspacePolytope::box(vec({-box, -box}), vec({box, box}));
      const auto U = HalfspacePolytope::box(vec({-a_max, -a_max}), vec({a_max, a_max}));
      const bool lp = validate_terminal_invariance(term, Matrix::Identity(2, 2),
                                                   dt * Matrix::Identity(2, 2), g, U, dist);
      EXPECT_EQ(lp, gridded_invariance(box, a_max, dt, dist))
          << "a_max " << a_max << " dist " << dist;
    }
  }
}

}  // namespace
}  // namespace reachctl
