#pragma once

#include <cstdint>

namespace dai {

// SplitMix64 generator with an explicit bit-to-double mapping, so that a
// given seed produces the same signal on every platform and build.
class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  // Uniform on [0, 1) with 53 significant bits.
  double next_unit() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform on [lo, hi).
  double next_in(double lo, double hi) { return lo + (hi - lo) * next_unit(); }

  // Uniform integer in {0, ..., nvalues-1}.
  std::uint64_t next_index(std::uint64_t nvalues) { return next_u64() % nvalues; }

 private:
  std::uint64_t state_;
};

// Derives an independent stream seed from a base seed and a stream id.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  SplitMix64 g(seed ^ (0xA0761D6478BD642FULL + stream * 0xE7037ED1A0B428DBULL));
  return g.next_u64();
}

}  // namespace dai
