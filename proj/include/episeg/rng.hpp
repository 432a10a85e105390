#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace episeg {

// Deterministic random stream used everywhere in the project.
//
// The raw generator is std::mt19937_64, whose output sequence is fixed by the
// C++ standard. All derived draws (bounded integers, reals, normals) are
// implemented below instead of going through std:: distributions, so the
// produced values are identical across standard library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform integer in [0, n). Rejection sampling on the raw 64-bit stream.
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) return 0;
    const std::uint64_t threshold = (0 - n) % n;  // 2^64 mod n
    for (;;) {
      const std::uint64_t r = next_u64();
      if (r >= threshold) return r % n;
    }
  }

  // Uniform double in [0, 1) with 53-bit resolution.
  double real01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * real01(); }

  // Standard normal via Box-Muller; consumes exactly two raw draws.
  double normal() {
    const double u1 = 1.0 - real01();  // (0, 1]
    const double u2 = real01();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

 private:
  std::mt19937_64 engine_;
};

// Derives an independent stream seed from a base seed and a tag
// (splitmix64 finalizer over the xor).
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag) {
  std::uint64_t z = seed ^ (tag * 0x9e3779b97f4a7c15ull);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

}  // namespace episeg
