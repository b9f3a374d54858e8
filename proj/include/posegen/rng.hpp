#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>

namespace posegen {

// Deterministic splitmix64 generator. The whole state is one u64, which makes
// checkpoint/resume and per-sample stream forking trivial: streams derived
// from (seed, stream_id) are independent of execution order and parallelism.
class Rng {
 public:
  Rng() : state_(0x9e3779b97f4a7c15ull) {}
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ull;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). n must be positive.
  std::int64_t uniform_int(std::int64_t n) {
    return static_cast<std::int64_t>(next_u64() % static_cast<std::uint64_t>(n));
  }

  // Standard normal via Box-Muller. Draws exactly two uniforms per call so the
  // state advance per gaussian is fixed (no cached spare).
  double gaussian() {
    double u1 = std::max(uniform(), 0x1.0p-100);
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
  }

  // Independent stream keyed by (seed, stream). Used for per-sample dataset
  // streams so generation order and thread count cannot change the output.
  static Rng fork(std::uint64_t seed, std::uint64_t stream) {
    Rng mix(seed ^ (stream * 0xd1342543de82ef95ull + 0x2545f4914f6cdd1dull));
    mix.next_u64();
    return mix;
  }

  std::uint64_t state() const { return state_; }
  void set_state(std::uint64_t s) { state_ = s; }

 private:
  std::uint64_t state_;
};

}  // namespace posegen
