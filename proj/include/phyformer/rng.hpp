#pragma once

#include <complex>
#include <cstdint>
#include <random>

namespace phyformer {

using cd = std::complex<double>;

// Stateless 64-bit mixer (splitmix64 finalizer).
std::uint64_t mix64(std::uint64_t x);

// Derives an independent stream seed from (seed, index, lane). Streams for
// different trials never share state, so results do not depend on the order
// in which trials are evaluated.
std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t index, std::uint64_t lane = 0);

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  static Rng stream(std::uint64_t seed, std::uint64_t index, std::uint64_t lane = 0) {
    return Rng(stream_seed(seed, index, lane));
  }

  std::uint64_t next() { return engine_(); }
  double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }
  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }
  double normal() { return normal_(engine_); }
  std::uint8_t bit() { return static_cast<std::uint8_t>(engine_() >> 63); }
  // Circularly-symmetric complex Gaussian with E|z|^2 = variance.
  cd complex_normal(double variance);

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

}  // namespace phyformer
