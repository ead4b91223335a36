#pragma once

// Uniform grid over the stochastic subspace, cell neighborhoods and empirical
// transition kernels sampled from the closed loop.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <limits>
#include <memory>
#include <optional>
#include <ostream>
#include <vector>

#include "reachctl/closed_loop.hpp"
#include "reachctl/core.hpp"
#include "reachctl/geometry.hpp"
#include "reachctl/tightening.hpp"

namespace reachctl {

enum class CellClass : std::uint8_t { safe, target, unsafe };

inline const char* to_string(CellClass c) {
  switch (c) {
    case CellClass::safe: return "safe";
    case CellClass::target: return "target";
    case CellClass::unsafe: return "unsafe";
  }
  return "?";
}

/// Safe set S and target set T on the stochastic subspace together with the
/// box that the grid tiles. The box must cover S.
struct ReachAvoidSets {
  HyperRect bounds;
  RegionSet safe;
  RegionSet target;
};

/// Cell index along one axis for the normalised coordinate u = (x − lo)/ζ.
/// Points on a shared face go to the lower cell.
inline std::int64_t axis_cell(double u) {
  if (u == 0.0) return 0;
  return static_cast<std::int64_t>(std::ceil(u)) - 1;
}

/// Cell offset of a displacement p on a lattice whose origin cell is centred
/// at 0; same face rule as axis_cell.
inline std::int32_t lattice_offset(double p, double zeta) {
  return static_cast<std::int32_t>(std::ceil(p / zeta + 0.5)) - 1;
}

class GridAbstraction {
 public:
  GridAbstraction(const ReachAvoidSets& sets, double zeta, double r, const Vector& x0_s)
      : lo_(sets.bounds.lo()), zeta_(zeta), r_(r) {
    const Index d = sets.bounds.dim();
    require(d > 0, "GridAbstraction: empty stochastic subspace");
    require(zeta > 0.0 && std::isfinite(zeta), "GridAbstraction: zeta must be positive");
    require(r >= 0.0 && std::isfinite(r), "GridAbstraction: r must be >= 0");
    require(sets.safe.dim() == d && sets.target.dim() == d && x0_s.size() == d,
            "GridAbstraction: dimension mismatch");
    const Vector extent = 2.0 * sets.bounds.half_widths;
    shape_.resize(static_cast<std::size_t>(d));
    stride_.resize(static_cast<std::size_t>(d));
    num_cells_ = 1;
    for (Index k = 0; k < d; ++k) {
      const double cells = std::ceil(extent[k] / zeta - 1e-9);
      require(cells <= 1e7, "GridAbstraction: too many cells along one axis");
      shape_[static_cast<std::size_t>(k)] = std::max<Index>(1, static_cast<Index>(cells));
    }
    for (Index k = d - 1; k >= 0; --k) {
      stride_[static_cast<std::size_t>(k)] = num_cells_;
      num_cells_ *= shape_[static_cast<std::size_t>(k)];
      require(num_cells_ <= (Index{1} << 31), "GridAbstraction: too many cells");
    }
    class_.resize(static_cast<std::size_t>(num_cells_));
    safe_pos_.assign(static_cast<std::size_t>(num_cells_), -1);
    for (Index c = 0; c < num_cells_; ++c) {
      const HyperRect box = cell(c);
      CellClass cls = CellClass::unsafe;
      if (rect_fully_inside(box, sets.target, r))
        cls = CellClass::target;
      else if (rect_fully_inside(box, sets.safe, r))
        cls = CellClass::safe;
      class_[static_cast<std::size_t>(c)] = cls;
      if (cls == CellClass::safe) {
        safe_pos_[static_cast<std::size_t>(c)] = static_cast<Index>(safe_.size());
        safe_.push_back(c);
      }
    }
    initial_ = locate(x0_s);
  }

  Index dim() const { return lo_.size(); }
  double zeta() const { return zeta_; }
  double r() const { return r_; }
  const Vector& lower_corner() const { return lo_; }
  const std::vector<Index>& shape() const { return shape_; }
  Index num_cells() const { return num_cells_; }

  /// Cells in S̃ \ T̃, in increasing index order.
  const std::vector<Index>& safe_cells() const { return safe_; }
  /// Position of a cell in safe_cells(), or -1.
  Index safe_position(Index c) const { return safe_pos_[static_cast<std::size_t>(c)]; }
  CellClass cell_class(Index c) const { return class_[static_cast<std::size_t>(c)]; }
  /// Cell containing the initial position, or -1 if it lies outside the grid.
  Index initial_cell() const { return initial_; }

  std::vector<Index> multi_index(Index c) const {
    std::vector<Index> mi(shape_.size());
    for (std::size_t k = 0; k < shape_.size(); ++k) {
      mi[k] = c / stride_[k];
      c %= stride_[k];
    }
    return mi;
  }

  /// Flat index of the cell mi + offset, or -1 if that cell is outside the grid.
  Index shifted(const std::vector<Index>& mi, const std::int32_t* offset) const {
    Index flat = 0;
    for (std::size_t k = 0; k < shape_.size(); ++k) {
      const Index v = mi[k] + offset[k];
      if (v < 0 || v >= shape_[k]) return -1;
      flat += v * stride_[k];
    }
    return flat;
  }

  Vector center(Index c) const {
    const auto mi = multi_index(c);
    Vector x(dim());
    for (Index k = 0; k < dim(); ++k)
      x[k] = lo_[k] + (static_cast<double>(mi[static_cast<std::size_t>(k)]) + 0.5) * zeta_;
    return x;
  }

  HyperRect cell(Index c) const { return HyperRect(center(c), Vector::Constant(dim(), 0.5 * zeta_)); }

  /// Cell containing x (positions), or -1 outside the grid.
  Index locate(const Vector& x) const { return locate(x.data()); }
  Index locate(const double* x) const {
    Index flat = 0;
    for (std::size_t k = 0; k < shape_.size(); ++k) {
      const double u = (x[k] - lo_[static_cast<Index>(k)]) / zeta_;
      if (!(u >= 0.0) || u > static_cast<double>(shape_[k])) return -1;
      flat += static_cast<Index>(axis_cell(u)) * stride_[k];
    }
    return flat;
  }

 private:
  Vector lo_;
  double zeta_;
  double r_;
  std::vector<Index> shape_, stride_;
  Index num_cells_ = 0;
  std::vector<CellClass> class_;
  std::vector<Index> safe_, safe_pos_;
  Index initial_ = -1;
};

/// Lattice offsets o with ζ·‖max(|o|−1, 0)‖ ≤ r, i.e. the cell centers within
/// distance r of the box of half-width ζ around the origin.
inline std::vector<std::vector<std::int32_t>> neighborhood_offsets(Index dim, double zeta,
                                                                   double r) {
  const auto reach = static_cast<std::int32_t>(std::floor(r / zeta)) + 1;
  const double limit = (r / zeta) * (r / zeta) * (1.0 + 1e-12);
  std::vector<std::vector<std::int32_t>> out;
  std::vector<std::int32_t> o(static_cast<std::size_t>(dim), -reach);
  while (true) {
    double s = 0.0;
    for (auto v : o) {
      const double e = std::max(std::abs(v) - 1, 0);
      s += e * e;
    }
    if (s <= limit) out.push_back(o);
    std::size_t k = 0;
    while (k < o.size() && o[k] == reach) o[k++] = -reach;
    if (k == o.size()) break;
    ++o[k];
  }
  return out;
}

/// C_j for every safe cell j: the grid cells whose centers lie within r of
/// H_j ⊕ H, clipped at the grid edge.
class NeighborhoodIndex {
 public:
  explicit NeighborhoodIndex(const GridAbstraction& g)
      : offsets_(neighborhood_offsets(g.dim(), g.zeta(), g.r())) {
    start_.reserve(g.safe_cells().size() + 1);
    start_.push_back(0);
    for (Index c : g.safe_cells()) {
      const auto mi = g.multi_index(c);
      for (const auto& o : offsets_) {
        const Index n = g.shifted(mi, o.data());
        if (n >= 0) cells_.push_back(n);
      }
      start_.push_back(static_cast<Index>(cells_.size()));
    }
  }

  const std::vector<std::vector<std::int32_t>>& offsets() const { return offsets_; }
  /// Neighbors of the safe cell at position p of safe_cells().
  const Index* begin(Index p) const { return cells_.data() + start_[static_cast<std::size_t>(p)]; }
  const Index* end(Index p) const { return cells_.data() + start_[static_cast<std::size_t>(p) + 1]; }
  Index size(Index p) const { return end(p) - begin(p); }

 private:
  std::vector<std::vector<std::int32_t>> offsets_;
  std::vector<Index> start_;
  std::vector<Index> cells_;
};

// ---------------------------------------------------------------------------
// Kernel estimation

enum class KernelMode { translation_invariant, per_state };

inline const char* to_string(KernelMode m) {
  return m == KernelMode::translation_invariant ? "translation_invariant" : "per_state";
}

/// Running cost g(x) = weight · ‖x^s − center‖ while the abstract state is
/// neither absorbed in the target nor outside the safe cells.
struct StageCost {
  Vector center;
  double weight = 0.0;

  double operator()(const double* p) const {
    double s = 0.0;
    for (Index k = 0; k < center.size(); ++k) {
      const double d = p[k] - center[k];
      s += d * d;
    }
    return weight * std::sqrt(s);
  }
};

struct KernelSettings {
  KernelMode mode = KernelMode::translation_invariant;
  int samples_per_action = 50;
  std::uint64_t seed = 0;
  unsigned threads = 1;
  int cost_stride = 10;  // fine steps between cost quadrature points
  std::optional<StageCost> cost;
};

/// One row of the abstract kernel for a (safe cell, action) pair.
struct SparseRow {
  double p_target = 0.0;
  double p_unsafe = 0.0;
  std::vector<Index> cells;   // destination safe cells, increasing
  std::vector<double> probs;  // matching probabilities
  double stage_cost = 0.0;    // expected running cost over the block

  double total() const {
    double s = p_target + p_unsafe;
    for (double p : probs) s += p;
    return s;
  }
};

/// Rows for every (safe cell position, action).
struct KernelTable {
  int num_actions = 0;
  std::vector<Index> safe_cells;
  std::vector<SparseRow> rows;

  const SparseRow& row(Index pos, int a) const {
    return rows[static_cast<std::size_t>(pos) * static_cast<std::size_t>(num_actions) +
                static_cast<std::size_t>(a)];
  }
  SparseRow& row(Index pos, int a) {
    return rows[static_cast<std::size_t>(pos) * static_cast<std::size_t>(num_actions) +
                static_cast<std::size_t>(a)];
  }
};

/// A sampled block trajectory in compressed form: the sequence of distinct
/// consecutive cells it visited and decimated positions for the running cost.
struct SampledPath {
  // Translation-invariant mode: n_s lattice offsets per visit. Per-state
  // mode: one global cell index per visit (-1 outside the grid).
  std::vector<std::int32_t> visits;
  std::vector<std::int32_t> first_step;  // fine index where each visit starts
  std::vector<double> cost_points;       // n_s per point, every cost_stride fine steps
  std::int32_t failure_step = -1;        // fine index of a controller failure
};

namespace detail {

struct RowAccumulator {
  int target = 0, unsafe = 0;
  std::vector<Index> ends;
  double cost = 0.0;

  SparseRow finish(int K) {
    SparseRow row;
    const double inv = 1.0 / static_cast<double>(K);
    row.p_target = target * inv;
    row.p_unsafe = unsafe * inv;
    std::sort(ends.begin(), ends.end());
    for (std::size_t i = 0; i < ends.size();) {
      std::size_t j = i;
      while (j < ends.size() && ends[j] == ends[i]) ++j;
      row.cells.push_back(ends[i]);
      row.probs.push_back(static_cast<double>(j - i) * inv);
      i = j;
    }
    row.stage_cost = cost * inv;
    return row;
  }
};

}  // namespace detail

namespace detail {

template <class T>
void put(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
void put_vec(std::ostream& os, const std::vector<T>& v) {
  put<std::uint64_t>(os, v.size());
  if (!v.empty()) os.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(T)));
}

template <class T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw ArgumentError("kernel file: truncated");
  return v;
}

template <class T>
std::vector<T> get_vec(std::istream& is) {
  const auto n = get<std::uint64_t>(is);
  if (n > (std::uint64_t{1} << 40) / sizeof(T)) throw ArgumentError("kernel file: corrupt length");
  std::vector<T> v(n);
  if (n > 0) is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(T)));
  if (!is) throw ArgumentError("kernel file: truncated");
  return v;
}

}  // namespace detail

class TransitionModel;
TransitionModel estimate_kernel(const ClosedLoopPlant& plant, const GridAbstraction& grid,
                                const std::vector<CommandParams>& actions,
                                const KernelSettings& settings);

/// Empirical kernel. Translation-invariant models keep K sampled paths per
/// action from the origin and re-anchor them at each cell; per-state models
/// keep the rows computed from paths simulated at each cell center.
class TransitionModel {
 public:
  TransitionModel() = default;

  KernelMode mode() const { return mode_; }
  int num_actions() const { return num_actions_; }
  int samples_per_action() const { return K_; }
  Index n_s() const { return ns_; }
  double zeta() const { return zeta_; }
  std::int64_t controller_failures() const { return failures_; }
  const std::vector<SampledPath>& paths() const { return paths_; }
  const KernelSettings& settings() const { return settings_; }
  double sim_step() const { return h_; }

  /// Row for safe cell `cell` and action a.
  SparseRow row_for(const GridAbstraction& grid, Index cell, int a) const {
    require(a >= 0 && a < num_actions_, "row_for: action out of range");
    const Index pos = grid.safe_position(cell);
    require(pos >= 0, "row_for: cell is not a safe cell");
    if (mode_ == KernelMode::per_state) {
      require(static_cast<Index>(rows_.size()) ==
                  static_cast<Index>(grid.safe_cells().size()) * num_actions_,
              "row_for: model was estimated on a different grid");
      return rows_[static_cast<std::size_t>(pos * num_actions_ + a)];
    }
    require(grid.dim() == ns_ && grid.zeta() == zeta_,
            "row_for: grid does not match the sampled lattice");
    const auto mi = grid.multi_index(cell);
    const Vector c = grid.center(cell);
    detail::RowAccumulator acc;
    Vector point(ns_);
    for (int s = 0; s < K_; ++s) {
      const SampledPath& path = paths_[static_cast<std::size_t>(a * K_ + s)];
      const std::size_t nv = path.first_step.size();
      std::int64_t absorbed_at = -1;
      bool hit_target = false;
      Index last = cell;
      for (std::size_t v = 0; v < nv; ++v) {
        const Index dst = grid.shifted(mi, path.visits.data() + v * static_cast<std::size_t>(ns_));
        const CellClass cls = dst < 0 ? CellClass::unsafe : grid.cell_class(dst);
        if (cls != CellClass::safe) {
          absorbed_at = path.first_step[v];
          hit_target = cls == CellClass::target;
          break;
        }
        last = dst;
      }
      if (absorbed_at < 0 && path.failure_step >= 0) absorbed_at = path.failure_step;
      if (absorbed_at < 0)
        acc.ends.push_back(last);
      else if (hit_target)
        ++acc.target;
      else
        ++acc.unsafe;
      if (settings_.cost) {
        const std::int64_t stop = absorbed_at < 0 ? steps_ : absorbed_at;
        const std::size_t npts = path.cost_points.size() / static_cast<std::size_t>(ns_);
        for (std::size_t m = 0; m < npts; ++m) {
          if (static_cast<std::int64_t>(m) * settings_.cost_stride >= stop) break;
          for (Index k = 0; k < ns_; ++k)
            point[k] = c[k] + path.cost_points[m * static_cast<std::size_t>(ns_) +
                                               static_cast<std::size_t>(k)];
          acc.cost += (*settings_.cost)(point.data()) * settings_.cost_stride * h_;
        }
      }
    }
    return acc.finish(K_);
  }

  /// Raw binary form of the model (native byte order).
  void write(std::ostream& os) const {
    using detail::put;
    using detail::put_vec;
    put<std::uint32_t>(os, 0x4b524e4cU);
    put<std::int32_t>(os, mode_ == KernelMode::per_state ? 1 : 0);
    put<std::int32_t>(os, num_actions_);
    put<std::int32_t>(os, K_);
    put<std::int64_t>(os, ns_);
    put<double>(os, zeta_);
    put<double>(os, h_);
    put<std::int64_t>(os, steps_);
    put<std::int64_t>(os, failures_);
    put<std::int32_t>(os, settings_.cost_stride);
    put<std::uint8_t>(os, settings_.cost ? 1 : 0);
    if (settings_.cost) {
      put_vec(os, std::vector<double>(settings_.cost->center.data(),
                                      settings_.cost->center.data() + settings_.cost->center.size()));
      put<double>(os, settings_.cost->weight);
    }
    put<std::uint64_t>(os, paths_.size());
    for (const auto& p : paths_) {
      put_vec(os, p.visits);
      put_vec(os, p.first_step);
      put_vec(os, p.cost_points);
      put<std::int32_t>(os, p.failure_step);
    }
    put<std::uint64_t>(os, rows_.size());
    for (const auto& r : rows_) {
      put<double>(os, r.p_target);
      put<double>(os, r.p_unsafe);
      put<double>(os, r.stage_cost);
      put_vec(os, r.cells);
      put_vec(os, r.probs);
    }
  }

  static TransitionModel read(std::istream& is) {
    using detail::get;
    using detail::get_vec;
    if (get<std::uint32_t>(is) != 0x4b524e4cU) throw ArgumentError("kernel file: bad magic");
    TransitionModel m;
    m.mode_ = get<std::int32_t>(is) == 1 ? KernelMode::per_state : KernelMode::translation_invariant;
    m.num_actions_ = get<std::int32_t>(is);
    m.K_ = get<std::int32_t>(is);
    m.ns_ = get<std::int64_t>(is);
    m.zeta_ = get<double>(is);
    m.h_ = get<double>(is);
    m.steps_ = get<std::int64_t>(is);
    m.failures_ = get<std::int64_t>(is);
    m.settings_.mode = m.mode_;
    m.settings_.samples_per_action = m.K_;
    m.settings_.cost_stride = get<std::int32_t>(is);
    if (get<std::uint8_t>(is) != 0) {
      const auto c = get_vec<double>(is);
      StageCost sc;
      sc.center = Eigen::Map<const Vector>(c.data(), static_cast<Index>(c.size()));
      sc.weight = get<double>(is);
      m.settings_.cost = sc;
    }
    m.paths_.resize(get<std::uint64_t>(is));
    for (auto& p : m.paths_) {
      p.visits = get_vec<std::int32_t>(is);
      p.first_step = get_vec<std::int32_t>(is);
      p.cost_points = get_vec<double>(is);
      p.failure_step = get<std::int32_t>(is);
    }
    m.rows_.resize(get<std::uint64_t>(is));
    for (auto& r : m.rows_) {
      r.p_target = get<double>(is);
      r.p_unsafe = get<double>(is);
      r.stage_cost = get<double>(is);
      r.cells = get_vec<Index>(is);
      r.probs = get_vec<double>(is);
    }
    return m;
  }

  /// All rows, ordered by (safe cell position, action).
  KernelTable table(const GridAbstraction& grid, unsigned threads = 1) const {
    KernelTable t;
    t.num_actions = num_actions_;
    t.safe_cells = grid.safe_cells();
    t.rows.resize(t.safe_cells.size() * static_cast<std::size_t>(num_actions_));
    parallel_for(t.safe_cells.size(), threads, [&](std::size_t p) {
      for (int a = 0; a < num_actions_; ++a)
        t.row(static_cast<Index>(p), a) = row_for(grid, t.safe_cells[p], a);
    });
    return t;
  }

 private:
  friend TransitionModel estimate_kernel(const ClosedLoopPlant&, const GridAbstraction&,
                                         const std::vector<CommandParams>&,
                                         const KernelSettings&);

  KernelMode mode_ = KernelMode::translation_invariant;
  int num_actions_ = 0;
  int K_ = 0;
  Index ns_ = 0;
  double zeta_ = 0.0;
  double h_ = 0.0;
  std::int64_t steps_ = 0;
  std::int64_t failures_ = 0;
  KernelSettings settings_;
  std::vector<SampledPath> paths_;
  std::vector<SparseRow> rows_;
};

/// Samples K closed-loop blocks per action. Every sample uses the stream
/// derived from (seed, action, sample), so both modes and any thread count
/// see the same noise. A controller failure ends the sample; it counts as
/// leaving the safe set unless the path was absorbed earlier.
inline TransitionModel estimate_kernel(const ClosedLoopPlant& plant, const GridAbstraction& grid,
                                       const std::vector<CommandParams>& actions,
                                       const KernelSettings& settings) {
  const Index ns = plant.n_s();
  require(!actions.empty(), "estimate_kernel: no actions");
  require(settings.samples_per_action > 0, "estimate_kernel: need at least one sample");
  require(settings.cost_stride > 0 &&
              plant.grid.fine_steps_per_block() % settings.cost_stride == 0,
          "estimate_kernel: cost_stride must divide the fine steps per block");
  require(grid.dim() == ns, "estimate_kernel: grid dimension != n_s");
  require(plant.mpc->mode == MpcMode::robust, "estimate_kernel: kernel sampling needs robust MPC");
  require(plant.mpc->family.zero_terminal(),
          "estimate_kernel: blocks start from x^d = 0, which needs the zero terminal set");
  require(std::abs(plant.mpc->zeta - grid.zeta()) <= 1e-12 * grid.zeta(),
          "estimate_kernel: MPC cell width differs from the grid");
  if (settings.cost) require(settings.cost->center.size() == ns, "estimate_kernel: cost center size");
  if (settings.mode == KernelMode::translation_invariant)
    require(stochastic_states_decoupled(plant.sys),
            "estimate_kernel: translation invariance needs x^s to be absent from the dynamics");

  TransitionModel model;
  model.mode_ = settings.mode;
  model.num_actions_ = static_cast<int>(actions.size());
  model.K_ = settings.samples_per_action;
  model.ns_ = ns;
  model.zeta_ = grid.zeta();
  model.h_ = plant.grid.sim_step();
  model.steps_ = plant.grid.fine_steps_per_block();
  model.settings_ = settings;

  const int A = model.num_actions_;
  const int K = model.K_;
  const bool ti = settings.mode == KernelMode::translation_invariant;
  const std::size_t per_start = static_cast<std::size_t>(A) * static_cast<std::size_t>(K);
  const unsigned workers = worker_count(per_start * (ti ? 1 : grid.safe_cells().size()),
                                        settings.threads);
  std::vector<std::unique_ptr<TrackingMpc>> ctl(workers);
  std::vector<BlockWorkspace> ws(workers);
  for (auto& c : ctl) c = std::make_unique<TrackingMpc>(plant.mpc);

  // Samples every (action, sample) pair for starts [first, first + count).
  // Start p is the origin in translation-invariant mode and the center of
  // safe cell p otherwise.
  auto sample = [&](std::size_t first, std::size_t count) {
    std::vector<SampledPath> paths(count * per_start);
    parallel_for(paths.size(), workers, [&](std::size_t task, unsigned w) {
      const std::size_t start = first + task / per_start;
      const auto a = static_cast<int>((task / static_cast<std::size_t>(K)) % static_cast<std::size_t>(A));
      const auto s = static_cast<int>(task % static_cast<std::size_t>(K));
      RandomStream rng(settings.seed,
                       {static_cast<std::uint64_t>(a), static_cast<std::uint64_t>(s)});
      Vector center = Vector::Zero(ns);
      if (!ti) center = grid.center(grid.safe_cells()[start]);
      Vector x = Vector::Zero(plant.n());
      x.head(ns) = center;
      SampledPath& path = paths[task];
      std::vector<std::int32_t> cur(static_cast<std::size_t>(ns));
      std::vector<std::int32_t> prev;
      Index prev_cell = std::numeric_limits<Index>::min();
      std::int64_t done = 0;
      auto observe = [&](std::int64_t i, const Vector& xs) {
        done = i;
        if (ti) {
          for (Index k = 0; k < ns; ++k)
            cur[static_cast<std::size_t>(k)] = lattice_offset(xs[k], grid.zeta());
          if (cur != prev) {
            path.visits.insert(path.visits.end(), cur.begin(), cur.end());
            path.first_step.push_back(static_cast<std::int32_t>(i));
            prev = cur;
          }
        } else {
          const Index c = grid.locate(xs.data());
          if (c != prev_cell) {
            path.visits.push_back(static_cast<std::int32_t>(c));
            path.first_step.push_back(static_cast<std::int32_t>(i));
            prev_cell = c;
          }
        }
        if (settings.cost && i % settings.cost_stride == 0 && i < model.steps_)
          for (Index k = 0; k < ns; ++k) path.cost_points.push_back(xs[k]);
        return true;
      };
      try {
        simulate_block(plant, *ctl[w], 0, x, actions[static_cast<std::size_t>(a)], center, rng,
                       ws[w], observe);
      } catch (const MpcInfeasible&) {
        path.failure_step = static_cast<std::int32_t>(done);
      }
    });
    for (const auto& p : paths)
      if (p.failure_step >= 0) ++model.failures_;
    return paths;
  };

  if (ti) {
    model.paths_ = sample(0, 1);
    return model;
  }

  // Per-state rows straight from the global cells, in chunks to bound memory.
  const std::size_t nsafe = grid.safe_cells().size();
  model.rows_.resize(nsafe * static_cast<std::size_t>(A));
  const std::size_t chunk = std::max<std::size_t>(1, 8192 / per_start);
  for (std::size_t first = 0; first < nsafe; first += chunk) {
    const std::size_t count = std::min(chunk, nsafe - first);
    const auto paths = sample(first, count);
    for (std::size_t local = 0; local < count; ++local) {
      const std::size_t pos = first + local;
      for (int a = 0; a < A; ++a) {
        detail::RowAccumulator acc;
        for (int s = 0; s < K; ++s) {
          const SampledPath& path =
              paths[local * per_start + static_cast<std::size_t>(a) * static_cast<std::size_t>(K) +
                    static_cast<std::size_t>(s)];
          std::int64_t absorbed_at = -1;
          bool hit_target = false;
          Index last = grid.safe_cells()[pos];
          for (std::size_t v = 0; v < path.visits.size(); ++v) {
            const Index dst = path.visits[v];
            const CellClass cls = dst < 0 ? CellClass::unsafe : grid.cell_class(dst);
            if (cls != CellClass::safe) {
              absorbed_at = path.first_step[v];
              hit_target = cls == CellClass::target;
              break;
            }
            last = dst;
          }
          if (absorbed_at < 0 && path.failure_step >= 0) absorbed_at = path.failure_step;
          if (absorbed_at < 0)
            acc.ends.push_back(last);
          else if (hit_target)
            ++acc.target;
          else
            ++acc.unsafe;
          if (settings.cost) {
            const std::int64_t stop = absorbed_at < 0 ? model.steps_ : absorbed_at;
            const std::size_t npts = path.cost_points.size() / static_cast<std::size_t>(ns);
            for (std::size_t m = 0; m < npts; ++m) {
              if (static_cast<std::int64_t>(m) * settings.cost_stride >= stop) break;
              acc.cost += (*settings.cost)(path.cost_points.data() +
                                           m * static_cast<std::size_t>(ns)) *
                          settings.cost_stride * model.h_;
            }
          }
        }
        model.rows_[pos * static_cast<std::size_t>(A) + static_cast<std::size_t>(a)] =
            acc.finish(K);
      }
    }
  }
  return model;
}

}  // namespace reachctl
