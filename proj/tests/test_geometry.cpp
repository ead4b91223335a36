#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "reachctl/geometry.hpp"

namespace reachctl {
namespace {

Vector vec(std::initializer_list<double> v) {
  Vector out(static_cast<Index>(v.size()));
  Index i = 0;
  for (double x : v) out[i++] = x;
  return out;
}

HalfspacePolytope halfline(double b) { return HalfspacePolytope(Matrix::Ones(1, 1), vec({b})); }

TEST(HalfspacePolytope, RejectsZeroNormalAndMismatch) {
  EXPECT_THROW(HalfspacePolytope(Matrix::Zero(1, 2), vec({1.0})), ArgumentError);
  EXPECT_THROW(HalfspacePolytope(Matrix::Ones(2, 2), vec({1.0})), ArgumentError);
}

TEST(ErodeBall, Examples) {
  EXPECT_DOUBLE_EQ(pontryagin_erode_ball(halfline(1.0), 0.0).offsets()[0], 1.0);
  EXPECT_DOUBLE_EQ(pontryagin_erode_ball(halfline(1.0), 0.5).offsets()[0], 0.5);
  Matrix h(1, 2);
  h << 1, 1;
  const auto e = pontryagin_erode_ball(HalfspacePolytope(h, vec({std::sqrt(2.0)})), 1.0);
  EXPECT_NEAR(e.offsets()[0], 0.0, 1e-15);
  EXPECT_THROW(pontryagin_erode_ball(halfline(1.0), -0.1), ArgumentError);
}

TEST(ErodeRect, Examples) {
  const HyperRect h1(vec({0.0}), vec({0.025}));
  EXPECT_DOUBLE_EQ(pontryagin_erode_rect(halfline(1.0), h1).offsets()[0], 0.975);
  Matrix h(1, 2);
  h << 1, 1;
  const HalfspacePolytope p(h, vec({2.0}));
  EXPECT_DOUBLE_EQ(pontryagin_erode_rect(p, HyperRect(vec({0, 0}), vec({0, 0}))).offsets()[0], 2.0);
  EXPECT_DOUBLE_EQ(pontryagin_erode_rect(p, HyperRect(vec({0, 0}), vec({1, 1}))).offsets()[0], 0.0);
  EXPECT_THROW(pontryagin_erode_rect(p, HyperRect(vec({0.1, 0}), vec({1, 1}))), ArgumentError);
}

TEST(RegionContains, ClosedSetsAndComplement) {
  const RegionSet ball = BallRegion(vec({0, 0}), 1.0);
  EXPECT_TRUE(region_contains(ball, vec({0, 0})));
  EXPECT_TRUE(region_contains(ball, vec({1, 0})));
  EXPECT_FALSE(region_contains(ball, vec({1.0000001, 0})));
  EXPECT_FALSE(region_contains(RegionSet::complement(ball), vec({0, 0})));
  EXPECT_THROW(region_contains(ball, vec({0})), ArgumentError);
  const RegionSet u = RegionSet::make_union(
      {ball, HyperRect(vec({3, 3}), vec({0.5, 0.5}))}, 2);
  EXPECT_TRUE(region_contains(u, vec({3.5, 2.5})));
  EXPECT_FALSE(region_contains(u, vec({2, 2})));
}

HalfspacePolytope random_polytope(RandomStream& rng, Index dim, Index m) {
  Matrix H(m, dim);
  Vector b(m);
  for (Index i = 0; i < m; ++i) {
    for (Index d = 0; d < dim; ++d) H(i, d) = rng.normal();
    b[i] = rng.uniform(0.5, 2.0);
  }
  return HalfspacePolytope(H, b);
}

TEST(ErodeBall, MonotoneInRadius) {
  RandomStream rng(3);
  for (int t = 0; t < 50; ++t) {
    const auto p = random_polytope(rng, 3, 6);
    const double r1 = rng.uniform(0.0, 0.3);
    const double r2 = r1 + rng.uniform(0.0, 0.3);
    const auto e1 = pontryagin_erode_ball(p, r1);
    const auto e2 = pontryagin_erode_ball(p, r2);
    for (int s = 0; s < 200; ++s) {
      Vector x(3);
      for (Index d = 0; d < 3; ++d) x[d] = rng.uniform(-2, 2);
      if (e2.contains(x)) {
        EXPECT_TRUE(e1.contains(x));
      }
    }
  }
}

TEST(ErodeBall, SoundUnderBoundedPerturbation) {
  RandomStream rng(4);
  const auto p = random_polytope(rng, 3, 8);
  const double r = 0.2;
  const auto e = pontryagin_erode_ball(p, r);
  int checked = 0;
  while (checked < 10000) {
    Vector x(3);
    for (Index d = 0; d < 3; ++d) x[d] = rng.uniform(-2, 2);
    if (!e.contains(x)) continue;
    Vector d(3);
    for (Index k = 0; k < 3; ++k) d[k] = rng.normal();
    d *= rng.uniform(0.0, r) / d.norm();
    ASSERT_TRUE(p.contains(x + d));
    ++checked;
  }
}

TEST(RectFullyInside, Examples) {
  const RegionSet s = HyperRect::from_bounds(vec({-5, -5}), vec({5, 5}));
  const HyperRect cell = HyperRect::from_bounds(vec({0, 0}), vec({0.1, 0.1}));
  EXPECT_TRUE(rect_fully_inside(cell, s, 0.05));
  const HyperRect edge = HyperRect::from_bounds(vec({4.9, 0}), vec({5.0, 0.1}));
  EXPECT_TRUE(rect_fully_inside(edge, s, 0.0));
  EXPECT_FALSE(rect_fully_inside(edge, s, 1e-9));
  const RegionSet free_space = RegionSet::complement(BallRegion(vec({0.45, 0.45}), 0.2));
  EXPECT_FALSE(rect_fully_inside(HyperRect::from_bounds(vec({0.4, 0.4}), vec({0.5, 0.5})),
                                 free_space, 0.0));
  EXPECT_THROW(rect_fully_inside(cell, s, -1.0), ArgumentError);
}

// Oracle: does every sampled point of (cell ⊕ B_margin) lie in s? Samples a
// lattice over the cell and, for margin > 0, a ring of directions around it.
bool sampled_inside(const HyperRect& cell, const RegionSet& s, double margin, int per_axis) {
  const Vector lo = cell.lo();
  const Vector w = cell.hi() - lo;
  const int dirs = margin > 0.0 ? 48 : 0;
  for (int i = 0; i < per_axis; ++i) {
    for (int j = 0; j < per_axis; ++j) {
      Vector x(2);
      x[0] = lo[0] + w[0] * i / (per_axis - 1);
      x[1] = lo[1] + w[1] * j / (per_axis - 1);
      if (!region_contains(s, x)) return false;
      const bool on_edge = i == 0 || j == 0 || i == per_axis - 1 || j == per_axis - 1;
      if (!on_edge) continue;
      for (int d = 0; d < dirs; ++d) {
        const double a = 2.0 * std::numbers::pi * d / dirs;
        Vector y = x;
        y[0] += margin * std::cos(a);
        y[1] += margin * std::sin(a);
        if (!region_contains(s, y)) return false;
      }
    }
  }
  return true;
}

RegionSet random_region(RandomStream& rng, int kind) {
  switch (kind) {
    case 0:
      return BallRegion(vec({rng.uniform(-1, 1), rng.uniform(-1, 1)}), rng.uniform(0.1, 1.0));
    case 1:
      return HyperRect(vec({rng.uniform(-1, 1), rng.uniform(-1, 1)}),
                       vec({rng.uniform(0.1, 1), rng.uniform(0.1, 1)}));
    case 2: {
      HalfspacePolytope p = random_polytope(rng, 2, 5);
      return p;
    }
    default: {
      std::vector<RegionSet> obstacles;
      obstacles.push_back(RegionSet::complement(HyperRect(vec({0, 0}), vec({1.5, 1.5}))));
      obstacles.push_back(BallRegion(vec({rng.uniform(-1, 1), rng.uniform(-1, 1)}),
                                     rng.uniform(0.1, 0.5)));
      obstacles.push_back(HyperRect(vec({rng.uniform(-1, 1), rng.uniform(-1, 1)}),
                                    vec({rng.uniform(0.05, 0.4), rng.uniform(0.05, 0.4)})));
      Matrix H(3, 2);
      Vector b(3);
      const Vector c = vec({rng.uniform(-1, 1), rng.uniform(-1, 1)});
      for (int i = 0; i < 3; ++i) {
        const double a = 2.0 * std::numbers::pi * (i + rng.uniform(0, 0.5)) / 3.0;
        H(i, 0) = std::cos(a);
        H(i, 1) = std::sin(a);
        b[i] = H.row(i).dot(c) + 0.2;
      }
      obstacles.push_back(HalfspacePolytope(H, b));
      return RegionSet::complement(RegionSet::make_union(std::move(obstacles), 2));
    }
  }
}

TEST(RectFullyInside, AgreesWithSamplingOracle) {
  RandomStream rng(2024);
  constexpr int per_axis = 32;  // 1024 samples per cell
  int positives = 0, negatives = 0;
  for (int t = 0; t < 400; ++t) {
    const RegionSet s = random_region(rng, t % 4);
    const double edge = rng.uniform(0.05, 0.4);
    const Vector lo = vec({rng.uniform(-1.5, 1.2), rng.uniform(-1.5, 1.2)});
    const HyperRect cell = HyperRect::from_bounds(lo, lo + Vector::Constant(2, edge));
    const double margin = (t % 3 == 0) ? 0.0 : rng.uniform(0.0, 0.15);
    const bool exact = rect_fully_inside(cell, s, margin);
    if (exact) {
      ++positives;
      EXPECT_TRUE(sampled_inside(cell, s, margin, per_axis)) << "false positive, trial " << t;
    } else {
      ++negatives;
      // A negative must be explained by some point within one oracle spacing.
      const double h = edge / (per_axis - 1);
      const HyperRect grown(cell.center, cell.half_widths.array() + h);
      EXPECT_FALSE(sampled_inside(grown, s, margin + h, per_axis))
          << "false negative far from the boundary, trial " << t;
    }
  }
  EXPECT_GT(positives, 50);
  EXPECT_GT(negatives, 50);
}

TEST(RectDisjoint, BallAndPolytope) {
  const RegionSet ball = BallRegion(vec({0, 0}), 1.0);
  const HyperRect far = HyperRect::from_bounds(vec({1.0, 1.0}), vec({1.2, 1.2}));
  // Corner (1,1) is at distance sqrt(2) - 1 from the ball.
  EXPECT_TRUE(rect_disjoint(far, ball, 0.4));
  EXPECT_FALSE(rect_disjoint(far, ball, 0.42));
  Matrix H(2, 2);
  H << 1, 1, -1, 0;
  const RegionSet tri = HalfspacePolytope(H, vec({0.0, 1.0}));
  // Distance from (1,1) to {x + y <= 0} is sqrt(2).
  EXPECT_TRUE(rect_disjoint(far, tri, 1.41));
  EXPECT_FALSE(rect_disjoint(far, tri, 1.42));
}

}  // namespace
}  // namespace reachctl
