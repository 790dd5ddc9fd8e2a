#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace prunekit {

/// Seeded 64-bit Mersenne twister that counts its draws, so a stream can be
/// persisted as (seed, position) and replayed exactly.
///
/// Distributions are computed here rather than through <random> adaptors,
/// whose output is implementation-defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(seed) {}

  static Rng at_position(std::uint64_t seed, std::uint64_t position) {
    Rng rng(seed);
    rng.engine_.discard(position);
    rng.position_ = position;
    return rng;
  }

  std::uint64_t next() {
    ++position_;
    return engine_();
  }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n). n must be > 0.
  std::uint64_t below(std::uint64_t n) {
    return static_cast<std::uint64_t>(uniform() * static_cast<double>(n)) % n;
  }

  /// Standard normal via Box-Muller; consumes exactly two draws.
  double normal();

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t position() const noexcept { return position_; }

 private:
  std::uint64_t seed_;
  std::uint64_t position_ = 0;
  std::mt19937_64 engine_;
};

/// Derives an independent sub-seed from a root seed and a fixed label.
std::uint64_t derive_seed(std::uint64_t root, std::string_view label);

}  // namespace prunekit
