#pragma once

#include <cstdint>

namespace ust {

// Counter-based pseudo-random generator. Every draw is a SplitMix64-style
// integer hash of (key, counter), so a stream is fully determined by its
// key and position, and split() derives an unrelated stream from the same
// seed. All stochastic operations in this project take one of these
// explicitly; there is no hidden global state.
class CounterRng {
 public:
  explicit CounterRng(uint64_t seed, uint64_t stream = 0)
      : key_(mix(seed + 0x9e3779b97f4a7c15ull) ^ mix(stream ^ 0x6a09e667f3bcc909ull)),
        counter_(0) {}

  // Independent stream derived from this generator's key; does not
  // advance the parent.
  CounterRng split(uint64_t stream) const {
    CounterRng child(0);
    child.key_ = mix(key_ ^ mix(stream + 0xbb67ae8584caa73bull));
    child.counter_ = 0;
    return child;
  }

  uint64_t next_u64() {
    ++counter_;
    return mix(key_ + 0x9e3779b97f4a7c15ull * counter_);
  }

  // Uniform in [0, 1) with 53 significant bits.
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n). n must be > 0.
  uint64_t next_below(uint64_t n) {
    // Scaling through the 53-bit double keeps the draw order-stable and is
    // unbiased far beyond the sizes used here (n << 2^53).
    return static_cast<uint64_t>(next_double() * static_cast<double>(n));
  }

  // Standard normal via Box-Muller. Two draws per sample; no spare kept,
  // so the consumption pattern is position-independent.
  double next_normal();

  // Normal(0, std) rejected outside +/-2 std.
  double next_truncated_normal(double stddev);

 private:
  static uint64_t mix(uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  uint64_t key_;
  uint64_t counter_;
};

}  // namespace ust
