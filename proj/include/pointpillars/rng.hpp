#pragma once

#include <cmath>
#include <cstdint>
#include <limits>

#include "pointpillars/core.hpp"

namespace pointpillars {

/// Counter-based generator: the n-th output is the SplitMix64 finalizer applied
/// to seed + n * golden_gamma. The stream depends only on (seed, n), so it is
/// identical on every platform, and sub-streams are derived by hashing the
/// seed with a stream id. Real-valued draws are built from the integer stream
/// with explicit formulas (no std::*_distribution, whose output is
/// implementation-defined).
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed) {}

  static constexpr std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  [[nodiscard]] std::uint64_t seed() const { return seed_; }
  [[nodiscard]] std::uint64_t counter() const { return counter_; }

  /// Independent generator for a parallel task or a pipeline stage.
  [[nodiscard]] Rng derive(std::uint64_t stream) const {
    return Rng(mix(seed_ ^ mix(stream + 0x632BE59BD9B4E019ULL)));
  }

  std::uint64_t next_u64() { return mix(seed_ + (++counter_) * kGamma); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  /// Unbiased integer in [0, n). n must be positive.
  std::uint64_t uniform_int(std::uint64_t n) {
    if (n == 0) throw DomainError("Rng::uniform_int: empty range");
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t v;
    do {
      v = next_u64();
    } while (v >= limit);
    return v % n;
  }

  bool bernoulli(double p) { return uniform01() < p; }

  /// Box-Muller; one output per call (the partner variate is discarded so
  /// every draw consumes exactly two counter steps).
  double normal(double mean, double stddev) {
    double u1 = uniform01();
    while (u1 <= 0.0) u1 = uniform01();
    const double u2 = uniform01();
    return mean + stddev * std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * kPi * u2);
  }

 private:
  static constexpr std::uint64_t kGamma = 0x9E3779B97F4A7C15ULL;
  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
};

}  // namespace pointpillars
