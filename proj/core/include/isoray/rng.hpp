#pragma once

#include <cmath>
#include <cstdint>

namespace isoray {

// Counter-based random generator: every draw is a pure function of
// (seed, stream ids, counter), so parallel workers and resumed runs can
// reproduce the exact same sequences by re-deriving their stream.
class CounterRng {
 public:
  explicit CounterRng(std::uint64_t seed, std::uint64_t stream0 = 0,
                      std::uint64_t stream1 = 0) {
    key_ = mix(seed + 0x9e3779b97f4a7c15ull);
    key_ = mix(key_ ^ mix(stream0 + 0xbf58476d1ce4e5b9ull));
    key_ = mix(key_ ^ mix(stream1 + 0x94d049bb133111ebull));
  }

  std::uint64_t next_u64() { return mix(key_ + 0x9e3779b97f4a7c15ull * ++counter_); }

  // independent child stream; unaffected by draws made so far
  CounterRng fork(std::uint64_t tag) const {
    CounterRng child(0);
    child.key_ = mix(key_ ^ mix(tag + 0xd1b54a32d192ed03ull));
    child.counter_ = 0;
    return child;
  }

  // [0,1)
  double next_double() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  // unbiased draw from [0,n)
  std::uint64_t next_below(std::uint64_t n) {
    // rejection from the top to avoid modulo bias
    const std::uint64_t limit = n * (~0ull / n);
    std::uint64_t x = next_u64();
    while (x >= limit) x = next_u64();
    return x % n;
  }

  double normal() {
    // Box-Muller; one value per call keeps the counter mapping simple
    double u1 = next_double();
    double u2 = next_double();
    while (u1 <= 1e-300) u1 = next_double();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

 private:
  static std::uint64_t mix(std::uint64_t x) {
    // splitmix64 finalizer
    x ^= x >> 30;
    x *= 0xbf58476d1ce4e5b9ull;
    x ^= x >> 27;
    x *= 0x94d049bb133111ebull;
    x ^= x >> 31;
    return x;
  }

  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace isoray
