#pragma once

#include <cstdint>
#include <random>

namespace distgrid {

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

/// Stateless counter-based generator. The same (seed, a, b, c) always yields
/// the same value, independent of call order; used for per-ray sample jitter
/// so replays are reproducible across transports and worker layouts.
inline uint64_t counter_hash(uint64_t seed, uint64_t a, uint64_t b = 0, uint64_t c = 0) {
  uint64_t h = splitmix64(seed ^ 0x6a09e667f3bcc909ull);
  h = splitmix64(h ^ a);
  h = splitmix64(h ^ b);
  h = splitmix64(h ^ c);
  return h;
}

/// Uniform double in [0, 1) from a counter.
inline double counter_uniform(uint64_t seed, uint64_t a, uint64_t b = 0, uint64_t c = 0) {
  return double(counter_hash(seed, a, b, c) >> 11) * 0x1.0p-53;
}

/// Seeded stream for everything that is naturally sequential (init, sampling).
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(splitmix64(seed)) {}

  double uniform() { return double(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  uint64_t uniform_index(uint64_t n) {
    // Rejection-free modulo is fine here; n is tiny relative to 2^64.
    return engine_() % n;
  }
  double normal() {
    // Cached Box-Muller.
    if (has_cached_) {
      has_cached_ = false;
      return cached_;
    }
    double u1 = uniform(), u2 = uniform();
    while (u1 <= 1e-300) u1 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    cached_ = r * std::sin(6.283185307179586 * u2);
    has_cached_ = true;
    return r * std::cos(6.283185307179586 * u2);
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
  bool has_cached_ = false;
  double cached_ = 0.0;
};

}  // namespace distgrid
