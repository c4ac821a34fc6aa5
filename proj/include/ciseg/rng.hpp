#pragma once

#include <cmath>
#include <cstdint>

namespace ciseg {

// Self-contained RNG so every stream is pinned by this code alone; the
// standard library's distribution sequences are implementation-defined and
// would break byte-identical reruns across toolchains.
struct SplitMix64 {
  uint64_t state;

  explicit SplitMix64(uint64_t seed) : state(seed) {}

  uint64_t next_u64() {
    uint64_t z = (state += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1) with 53 random bits.
  double next_double() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  // Uniform integer in [0, n). Modulo bias is < 2^-50 for any n that fits in
  // 32 bits, irrelevant at the sample counts used here.
  uint64_t next_below(uint64_t n) { return next_u64() % n; }

  int uniform_int(int lo, int hi) {  // inclusive bounds
    return lo + int(next_below(uint64_t(hi - lo + 1)));
  }

  // Box-Muller; consumes two uniforms per call so the stream layout is fixed.
  double normal() {
    double u1 = next_double();
    double u2 = next_double();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
  }
};

// Stable stream derivation: hash-combines tags into a fresh seed. Used to give
// every (run, step, purpose, index) tuple its own independent stream.
inline uint64_t mix_seed(uint64_t a, uint64_t b) {
  SplitMix64 s(a ^ (0x9e3779b97f4a7c15ull + (b << 6) + (b >> 2)));
  s.next_u64();
  return s.next_u64() ^ b;
}

inline uint64_t mix_seed(uint64_t a, uint64_t b, uint64_t c) {
  return mix_seed(mix_seed(a, b), c);
}

inline uint64_t mix_seed(uint64_t a, uint64_t b, uint64_t c, uint64_t d) {
  return mix_seed(mix_seed(a, b, c), d);
}

}  // namespace ciseg
