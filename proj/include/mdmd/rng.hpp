#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

namespace mdmd {

inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::uint64_t hash_str(std::string_view s) {
  // FNV-1a 64
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Deterministic random stream. Distributions are implemented here rather than
// taken from <random> so the draw sequence is pinned across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  std::uint64_t next_u64() { return eng_(); }

  // [0, 1)
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Unbiased integer in [0, n)
  std::uint64_t uniform_int(std::uint64_t n) {
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
      x = eng_();
    } while (x >= limit);
    return x % n;
  }

  // Standard normal via polar Box-Muller (uncached so state is just the engine)
  double normal() {
    double u, v, s;
    do {
      u = uniform(-1.0, 1.0);
      v = uniform(-1.0, 1.0);
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    return u * std::sqrt(-2.0 * std::log(s) / s);
  }

  // N(0, sigma^2) truncated to [-2 sigma, 2 sigma] by rejection
  double trunc_normal(double sigma) {
    double x;
    do {
      x = normal();
    } while (x < -2.0 || x > 2.0);
    return x * sigma;
  }

  bool bernoulli(double p) { return uniform() < p; }

 private:
  std::mt19937_64 eng_;
};

// Derives an independent stream from (seed, tag, indices...). Pure function of
// its arguments, so draws are reproducible regardless of evaluation order or
// worker count.
inline Rng derive_rng(std::uint64_t seed, std::string_view tag, std::uint64_t a = 0,
                      std::uint64_t b = 0) {
  std::uint64_t s = seed;
  std::uint64_t h = splitmix64(s) ^ hash_str(tag);
  s = h + 0x9e3779b97f4a7c15ULL * (a + 1);
  h = splitmix64(s) ^ (b * 0xda942042e4dd58b5ULL);
  std::uint64_t mixed = splitmix64(h);
  return Rng(mixed);
}

}  // namespace mdmd
