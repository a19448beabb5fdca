#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace citycond {

// Deterministic random stream. All entropy in the project flows from an
// experiment seed through named forks of this generator, so runs replay
// bit-exactly on one platform. Uniform/normal draws are built directly on
// the 64-bit engine output instead of std distributions to keep the draw
// sequence independent of the standard library version.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(splitmix(seed + 0x9e3779b97f4a7c15ull)) {}

  uint64_t next_u64() {
    // xorshift64* keeps the state small and the stream splittable.
    uint64_t x = state_;
    x ^= x >> 12;
    x ^= x << 25;
    x ^= x >> 27;
    state_ = x;
    return x * 0x2545f4914f6cdd1dull;
  }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  uint64_t below(uint64_t n) { return next_u64() % n; }

  // Box-Muller; no cached spare so the draw count per call is fixed.
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Independent stream for a named purpose ("backbone", "batches", ...).
  Rng fork(std::string_view name) const {
    uint64_t h = 0xcbf29ce484222325ull;
    for (char c : name) {
      h ^= static_cast<uint64_t>(static_cast<unsigned char>(c));
      h *= 0x100000001b3ull;
    }
    return Rng(splitmix(state_ ^ h));
  }

  Rng fork(uint64_t index) const { return Rng(splitmix(state_ + 0x9e3779b97f4a7c15ull * (index + 1))); }

  static uint64_t splitmix(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
  }

 private:
  uint64_t state_;
};

}  // namespace citycond
