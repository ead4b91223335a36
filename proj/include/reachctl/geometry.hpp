#pragma once

// Polyhedral and norm-ball set algebra: half-space polytopes, balls, boxes
// and their unions/complements, Pontryagin erosion, and exact containment of
// axis-aligned cells in eroded regions.

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "reachctl/core.hpp"
#include "reachctl/qp.hpp"

namespace reachctl {

/// { x : normals.row(i) * x <= offsets[i] for all i }.
class HalfspacePolytope {
 public:
  HalfspacePolytope() = default;

  HalfspacePolytope(Matrix normals, Vector offsets)
      : normals_(std::move(normals)), offsets_(std::move(offsets)) {
    require(normals_.rows() == offsets_.size(),
            "HalfspacePolytope: normals and offsets differ in count");
    require(normals_.allFinite(), "HalfspacePolytope: non-finite normal");
    require(!offsets_.hasNaN(), "HalfspacePolytope: NaN offset");
    for (Index i = 0; i < normals_.rows(); ++i)
      require(normals_.row(i).squaredNorm() > 0.0, "HalfspacePolytope: zero normal row");
  }

  /// The whole space R^dim.
  static HalfspacePolytope universe(Index dim) {
    return HalfspacePolytope(Matrix(0, dim), Vector(0));
  }

  /// Axis-aligned box lo <= x <= hi written as 2*dim half-spaces.
  static HalfspacePolytope box(const Vector& lo, const Vector& hi) {
    require(lo.size() == hi.size(), "HalfspacePolytope::box: size mismatch");
    const Index d = lo.size();
    Matrix H = Matrix::Zero(2 * d, d);
    Vector b(2 * d);
    for (Index i = 0; i < d; ++i) {
      H(2 * i, i) = 1.0;
      b[2 * i] = hi[i];
      H(2 * i + 1, i) = -1.0;
      b[2 * i + 1] = -lo[i];
    }
    return HalfspacePolytope(std::move(H), std::move(b));
  }

  Index dim() const { return normals_.cols(); }
  Index size() const { return normals_.rows(); }
  const Matrix& normals() const { return normals_; }
  const Vector& offsets() const { return offsets_; }

  bool contains(const Vector& x) const {
    require(x.size() == dim(), "HalfspacePolytope::contains: dimension mismatch");
    for (Index i = 0; i < size(); ++i)
      if (normals_.row(i).dot(x) > offsets_[i]) return false;
    return true;
  }

 private:
  Matrix normals_;
  Vector offsets_;
};

/// Origin-centred Euclidean ball B_r.
struct Ball {
  double radius = 0.0;
  Index dim = 0;

  Ball(double r, Index d) : radius(r), dim(d) {
    require(r >= 0.0 && std::isfinite(r), "Ball: radius must be finite and >= 0");
  }
};

/// Closed Euclidean ball with an explicit centre.
struct BallRegion {
  Vector center;
  double radius = 0.0;

  BallRegion(Vector c, double r) : center(std::move(c)), radius(r) {
    require(r >= 0.0 && std::isfinite(r), "BallRegion: radius must be finite and >= 0");
    require(center.allFinite(), "BallRegion: non-finite centre");
  }
  Index dim() const { return center.size(); }
  bool contains(const Vector& x) const { return (x - center).squaredNorm() <= radius * radius; }
};

/// Closed axis-aligned box { x : |x - center| <= half_widths } elementwise.
struct HyperRect {
  Vector center;
  Vector half_widths;

  HyperRect(Vector c, Vector hw) : center(std::move(c)), half_widths(std::move(hw)) {
    require(center.size() == half_widths.size(), "HyperRect: size mismatch");
    require(center.allFinite() && half_widths.allFinite(), "HyperRect: non-finite data");
    require((half_widths.array() >= 0.0).all(), "HyperRect: negative half-width");
  }

  static HyperRect from_bounds(const Vector& lo, const Vector& hi) {
    require(lo.size() == hi.size() && (hi.array() >= lo.array()).all(),
            "HyperRect::from_bounds: need lo <= hi");
    return HyperRect(0.5 * (lo + hi), 0.5 * (hi - lo));
  }

  Index dim() const { return center.size(); }
  Vector lo() const { return center - half_widths; }
  Vector hi() const { return center + half_widths; }
  bool contains(const Vector& x) const {
    return ((x - center).cwiseAbs().array() <= half_widths.array()).all();
  }
};

class RegionSet;

struct RegionUnion {
  std::vector<RegionSet> members;
};

struct RegionComplement {
  std::shared_ptr<const RegionSet> inner;
};

/// A closed primitive, a union of regions, or the complement of a region.
class RegionSet {
 public:
  using Shape = std::variant<HalfspacePolytope, BallRegion, HyperRect, RegionUnion,
                             RegionComplement>;

  RegionSet(HalfspacePolytope p) : shape_(std::move(p)), dim_(std::get<0>(shape_).dim()) {}
  RegionSet(BallRegion b) : shape_(std::move(b)), dim_(std::get<1>(shape_).dim()) {}
  RegionSet(HyperRect r) : shape_(std::move(r)), dim_(std::get<2>(shape_).dim()) {}

  static RegionSet make_union(std::vector<RegionSet> members, Index dim) {
    for (const auto& m : members)
      require(m.dim() == dim, "RegionSet union: members must share the ambient dimension");
    return RegionSet(Shape(RegionUnion{std::move(members)}), dim);
  }

  static RegionSet complement(RegionSet inner) {
    const Index d = inner.dim();
    return RegionSet(Shape(RegionComplement{std::make_shared<const RegionSet>(std::move(inner))}),
                     d);
  }

  /// An empty region (the union of nothing).
  static RegionSet empty(Index dim) { return make_union({}, dim); }

  Index dim() const { return dim_; }
  const Shape& shape() const { return shape_; }

 private:
  RegionSet(Shape s, Index d) : shape_(std::move(s)), dim_(d) {}

  Shape shape_;
  Index dim_;
};

// ---------------------------------------------------------------------------
// Erosion

/// p ⊖ B_r: every offset shrinks by ||h_i|| r.
inline HalfspacePolytope pontryagin_erode_ball(const HalfspacePolytope& p, double r) {
  require(r >= 0.0 && std::isfinite(r), "pontryagin_erode_ball: radius must be >= 0");
  Vector b = p.offsets();
  for (Index i = 0; i < p.size(); ++i) b[i] -= p.normals().row(i).norm() * r;
  return HalfspacePolytope(p.normals(), std::move(b));
}

/// p ⊖ H for an origin-centred box H: offsets shrink by the box support sum_d |h_id| w_d.
inline HalfspacePolytope pontryagin_erode_rect(const HalfspacePolytope& p, const HyperRect& h) {
  require(h.dim() == p.dim(), "pontryagin_erode_rect: dimension mismatch");
  require(h.center.isZero(0.0), "pontryagin_erode_rect: box must be centred at the origin");
  Vector b = p.offsets() - p.normals().cwiseAbs() * h.half_widths;
  return HalfspacePolytope(p.normals(), std::move(b));
}

// ---------------------------------------------------------------------------
// Membership

inline bool region_contains(const RegionSet& s, const Vector& x) {
  require(x.size() == s.dim(), "region_contains: dimension mismatch");
  struct Visitor {
    const Vector& x;
    bool operator()(const HalfspacePolytope& p) const { return p.contains(x); }
    bool operator()(const BallRegion& b) const { return b.contains(x); }
    bool operator()(const HyperRect& r) const { return r.contains(x); }
    bool operator()(const RegionUnion& u) const {
      for (const auto& m : u.members)
        if (region_contains(m, x)) return true;
      return false;
    }
    bool operator()(const RegionComplement& c) const { return !region_contains(*c.inner, x); }
  };
  return std::visit(Visitor{x}, s.shape());
}

// ---------------------------------------------------------------------------
// Cell containment

namespace detail {

// Euclidean distance between the box `cell` and the point c.
inline double box_point_distance(const HyperRect& cell, const Vector& c) {
  const Vector gap = ((c - cell.center).cwiseAbs() - cell.half_widths).cwiseMax(0.0);
  return gap.norm();
}

// Euclidean distance between two axis-aligned boxes.
inline double box_box_distance(const HyperRect& a, const HyperRect& b) {
  const Vector gap =
      ((a.center - b.center).cwiseAbs() - a.half_widths - b.half_widths).cwiseMax(0.0);
  return gap.norm();
}

// Lower bound on dist(cell, p) that is exact up to the QP tolerance; used to
// decide disjointness of a cell and a polytope obstacle.
inline double box_polytope_distance_lower_bound(const HyperRect& cell,
                                                const HalfspacePolytope& p) {
  // Facet separation gives an exact answer whenever a facet separates.
  double best = 0.0;
  for (Index i = 0; i < p.size(); ++i) {
    const auto h = p.normals().row(i);
    const double min_over_cell =
        h.dot(cell.center) - h.cwiseAbs().dot(cell.half_widths.transpose());
    const double gap = (min_over_cell - p.offsets()[i]) / h.norm();
    best = std::max(best, gap);
  }
  // Projection distance: min ||x - y||^2, x in cell, y in p.
  const Index d = cell.dim();
  Matrix P = Matrix::Zero(2 * d, 2 * d);
  P.topLeftCorner(d, d) = Matrix::Identity(d, d);
  P.bottomRightCorner(d, d) = Matrix::Identity(d, d);
  P.topRightCorner(d, d) = -Matrix::Identity(d, d);
  P.bottomLeftCorner(d, d) = -Matrix::Identity(d, d);
  P *= 2.0;
  Matrix A_in = Matrix::Zero(2 * d + p.size(), 2 * d);
  Vector b_in(2 * d + p.size());
  for (Index k = 0; k < d; ++k) {
    A_in(2 * k, k) = 1.0;
    b_in[2 * k] = cell.center[k] + cell.half_widths[k];
    A_in(2 * k + 1, k) = -1.0;
    b_in[2 * k + 1] = -(cell.center[k] - cell.half_widths[k]);
  }
  A_in.bottomRightCorner(p.size(), d) = p.normals();
  b_in.tail(p.size()) = p.offsets();
  QuadraticProgram qp(P, Vector::Zero(2 * d), Matrix(0, 2 * d), Vector(0), A_in, b_in);
  const QpSolution sol = solve_qp(qp, 1e-10, 50000);
  if (sol.status == QpStatus::infeasible) {
    // Empty polytope: nothing to intersect.
    return std::numeric_limits<double>::infinity();
  }
  if (sol.status != QpStatus::optimal) return best;
  const double dist = (sol.z.head(d) - sol.z.tail(d)).norm();
  // Shrink by a solver-accuracy allowance so the bound stays a lower bound.
  return std::max(best, dist - 1e-7);
}

// True iff every point of cell ⊕ B_margin lies outside s (s closed primitives).
inline bool cell_disjoint(const HyperRect& cell, const RegionSet& s, double margin);

inline bool cell_inside(const HyperRect& cell, const RegionSet& s, double margin) {
  struct Visitor {
    const HyperRect& cell;
    double margin;
    bool operator()(const HalfspacePolytope& p) const {
      for (Index i = 0; i < p.size(); ++i) {
        const auto h = p.normals().row(i);
        const double support = h.dot(cell.center) + h.cwiseAbs().dot(cell.half_widths.transpose());
        if (support + h.norm() * margin > p.offsets()[i]) return false;
      }
      return true;
    }
    bool operator()(const BallRegion& b) const {
      const Vector far = (cell.center - b.center).cwiseAbs() + cell.half_widths;
      return far.norm() + margin <= b.radius;
    }
    bool operator()(const HyperRect& r) const {
      const Vector lo = cell.lo().array() - margin;
      const Vector hi = cell.hi().array() + margin;
      return (lo.array() >= r.lo().array()).all() && (hi.array() <= r.hi().array()).all();
    }
    bool operator()(const RegionUnion& u) const {
      // Sufficient: contained in a single member.
      for (const auto& m : u.members)
        if (cell_inside(cell, m, margin)) return true;
      return false;
    }
    bool operator()(const RegionComplement& c) const {
      return cell_disjoint(cell, *c.inner, margin);
    }
  };
  return std::visit(Visitor{cell, margin}, s.shape());
}

inline bool cell_disjoint(const HyperRect& cell, const RegionSet& s, double margin) {
  struct Visitor {
    const HyperRect& cell;
    double margin;
    bool operator()(const HalfspacePolytope& p) const {
      return box_polytope_distance_lower_bound(cell, p) > margin;
    }
    bool operator()(const BallRegion& b) const {
      return box_point_distance(cell, b.center) > b.radius + margin;
    }
    bool operator()(const HyperRect& r) const { return box_box_distance(cell, r) > margin; }
    bool operator()(const RegionUnion& u) const {
      for (const auto& m : u.members)
        if (!cell_disjoint(cell, m, margin)) return false;
      return true;
    }
    bool operator()(const RegionComplement& c) const {
      // cell ⊕ B_m misses the complement iff it lies inside the inner set.
      return cell_inside(cell, *c.inner, margin);
    }
  };
  return std::visit(Visitor{cell, margin}, s.shape());
}

}  // namespace detail

/// True iff every point of `cell` lies in s ⊖ B_margin. Exact for primitives
/// and complements of unions of primitives; for unions it is a sufficient test
/// (containment in a single member).
inline bool rect_fully_inside(const HyperRect& cell, const RegionSet& s, double margin) {
  require(cell.dim() == s.dim(), "rect_fully_inside: dimension mismatch");
  require(margin >= 0.0 && std::isfinite(margin), "rect_fully_inside: margin must be >= 0");
  return detail::cell_inside(cell, s, margin);
}

/// True iff cell ⊕ B_margin has no point in common with s.
inline bool rect_disjoint(const HyperRect& cell, const RegionSet& s, double margin) {
  require(cell.dim() == s.dim(), "rect_disjoint: dimension mismatch");
  require(margin >= 0.0 && std::isfinite(margin), "rect_disjoint: margin must be >= 0");
  return detail::cell_disjoint(cell, s, margin);
}

}  // namespace reachctl
