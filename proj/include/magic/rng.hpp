#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace magic {

// Deterministic RNG wrapper. All distribution shaping is done here rather
// than with std:: distributions, whose output sequences are not pinned by the
// standard; this keeps artifacts byte-reproducible for a given seed.
struct Rng {
  std::mt19937_64 eng;
  bool have_spare = false;
  double spare = 0.0;

  explicit Rng(std::uint64_t seed) : eng(seed) {}

  // [0, 1) with 53 random bits
  double uniform() { return static_cast<double>(eng() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // standard normal via Box-Muller
  double normal() {
    if (have_spare) {
      have_spare = false;
      return spare;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.14159265358979323846 * u2;
    spare = r * std::sin(theta);
    have_spare = true;
    return r * std::cos(theta);
  }

  // uniform integer in [0, n) by rejection on the top bits
  std::uint64_t bounded(std::uint64_t n) {
    if (n <= 1) return 0;
    const std::uint64_t limit = ~std::uint64_t(0) - ~std::uint64_t(0) % n;
    std::uint64_t x = eng();
    while (x >= limit) x = eng();
    return x % n;
  }

  bool bernoulli(double p) { return uniform() < p; }

  template <typename V>
  void shuffle(V& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(bounded(i));
      std::swap(v[i - 1], v[j]);
    }
  }
};

// splitmix64 mixing for deriving independent stream seeds from (seed, tags)
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  return mix_seed(mix_seed(a, b), c);
}

}  // namespace magic
