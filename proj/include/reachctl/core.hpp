#pragma once

// Shared vocabulary: linear-algebra aliases, error types, seeded random
// streams and a deterministic parallel loop.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <initializer_list>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <type_traits>
#include <vector>

#include <Eigen/Dense>

namespace reachctl {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using Index = Eigen::Index;

/// Raised on violated preconditions of a public operation.
class ArgumentError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a numerical routine cannot produce a usable answer.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void require(bool condition, const std::string& message) {
  if (!condition) throw ArgumentError(message);
}

inline bool all_finite(const Matrix& m) { return m.allFinite(); }

// ---------------------------------------------------------------------------
// Random streams

/// SplitMix64 finalizer; used to derive independent child seeds.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Derives the seed of the stream addressed by `path` under `root`.
/// Every (root, path) pair names a distinct, reproducible stream, so work
/// can be split across threads without shared generator state.
inline std::uint64_t derive_seed(std::uint64_t root,
                                 std::initializer_list<std::uint64_t> path) {
  std::uint64_t s = mix64(root ^ 0x5851f42d4c957f2dULL);
  for (std::uint64_t p : path) s = mix64(s ^ mix64(p + 0x632be59bd9b4e019ULL));
  return s;
}

/// A seeded random stream. Copyable; copies replay the same numbers.
class RandomStream {
 public:
  explicit RandomStream(std::uint64_t seed) : engine_(seed) {}
  RandomStream(std::uint64_t root, std::initializer_list<std::uint64_t> path)
      : engine_(derive_seed(root, path)) {}

  double normal() { return normal_(engine_); }
  double uniform(double lo, double hi) {
    return lo + (hi - lo) * std::generate_canonical<double, 53>(engine_);
  }
  std::uint64_t next_u64() { return engine_(); }
  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

// ---------------------------------------------------------------------------
// Parallel loop

inline unsigned default_thread_count() {
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1U : hw;
}

/// Number of workers parallel_for will actually start.
inline unsigned worker_count(std::size_t n, unsigned threads) {
  if (n == 0) return 1U;
  return std::max(1U, std::min<unsigned>(threads, static_cast<unsigned>(n)));
}

/// Runs body(i) or body(i, worker) for i in [0, n) on up to `threads` workers
/// using a static interleaved schedule. The body must only write to slots
/// owned by i or by its worker. If several indices throw, the exception of the
/// lowest index is rethrown.
template <class Body>
void parallel_for(std::size_t n, unsigned threads, Body&& body) {
  auto call = [&body](std::size_t i, unsigned worker) {
    if constexpr (std::is_invocable_v<Body&, std::size_t, unsigned>)
      body(i, worker);
    else
      body(i);
  };
  if (n == 0) return;
  threads = worker_count(n, threads);
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) call(i, 0U);
    return;
  }
  std::vector<std::exception_ptr> errors(threads);
  std::vector<std::size_t> error_index(threads, n);
  std::vector<std::thread> pool;
  pool.reserve(threads);
  for (unsigned t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      for (std::size_t i = t; i < n; i += threads) {
        try {
          call(i, t);
        } catch (...) {
          errors[t] = std::current_exception();
          error_index[t] = i;
          return;
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  std::size_t best = n;
  std::exception_ptr first;
  for (unsigned t = 0; t < threads; ++t) {
    if (errors[t] && error_index[t] < best) {
      best = error_index[t];
      first = errors[t];
    }
  }
  if (first) std::rethrow_exception(first);
}

}  // namespace reachctl
