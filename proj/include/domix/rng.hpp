#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <utility>

namespace domix {

// Portable deterministic generator. Distributions are derived from raw
// 64-bit draws so streams are identical across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 1) : engine_(mix(seed)) {}

  // Child stream keyed by (seed, stream); used for per-step dropout and
  // per-epoch shuffles so that resumed runs see the same draws.
  static Rng derive(std::uint64_t seed, std::uint64_t stream) {
    return Rng(mix(seed) ^ mix(stream + 0x9e3779b97f4a7c15ULL));
  }

  std::uint64_t next() { return engine_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). n must be > 0.
  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t r = engine_();
    while (r >= limit) r = engine_();
    return r % n;
  }

  bool bernoulli(double p) { return uniform() < p; }

  template <typename T>
  void shuffle(std::span<T> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::swap(items[i - 1], items[below(i)]);
    }
  }

 private:
  static std::uint64_t mix(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::mt19937_64 engine_;
};

}  // namespace domix
