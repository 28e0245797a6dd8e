#pragma once

#include <cstdint>

namespace gfprune {

/// SplitMix64 stream. Fully specified here so sequences are identical on every
/// platform and standard library:
///   state += 0x9E3779B97F4A7C15
///   z = state; z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9;
///   z = (z ^ (z >> 27)) * 0x94D049BB133111EB; return z ^ (z >> 31)
/// Uniform doubles take the top 53 bits. Normals use the Box-Muller
/// transform, consuming two uniforms per pair and caching the second value.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64();
  /// Uniform in [0, 1).
  double uniform();
  /// Uniform in (0, 1].
  double uniform_open_low();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  double normal();

  /// Independent stream derived from this seed and a tag.
  static Rng derive(std::uint64_t seed, std::uint64_t tag);

  std::uint64_t state() const noexcept { return state_; }

 private:
  std::uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

std::uint64_t mix64(std::uint64_t x);

}  // namespace gfprune
