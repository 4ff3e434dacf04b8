#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace metaseg {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Thrown when tensor extents disagree with an operation's contract.
struct SizeError : Error {
  using Error::Error;
};
// Thrown when a scalar was expected or a rank is unsupported.
struct ShapeError : Error {
  using Error::Error;
};
// Thrown on NaN/Inf at op boundaries or diverging optimizations.
struct NumericError : Error {
  using Error::Error;
};
struct ConfigError : Error {
  using Error::Error;
};
struct BoxError : Error {
  using Error::Error;
};
struct StructureError : Error {
  using Error::Error;
};
struct FormatError : Error {
  using Error::Error;
};
struct SequenceError : Error {
  using Error::Error;
};
struct EvalError : Error {
  using Error::Error;
};

template <class E>
inline void require(bool cond, const std::string& msg) {
  if (!cond) throw E(msg);
}

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Mixes a base seed with stream ids so that parallel consumers draw
/// independent, reproducible streams regardless of scheduling.
inline uint64_t derive_seed(uint64_t base, uint64_t a, uint64_t b = 0, uint64_t c = 0) {
  uint64_t h = splitmix64(base ^ 0x8f3a9c1b2d5e7f01ULL);
  h = splitmix64(h ^ a);
  h = splitmix64(h ^ b);
  return splitmix64(h ^ c);
}

/// Deterministic RNG with explicit transforms. std::mt19937_64 output is
/// pinned by the standard; the distributions here are written out so results
/// do not depend on the standard library's (unspecified) implementations.
class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}

  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  int64_t uniform_int(int64_t n) {
    return n <= 1 ? 0 : static_cast<int64_t>(eng_() % static_cast<uint64_t>(n));
  }

  bool bernoulli(double p) { return uniform() < p; }

  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = 0.0, u2 = 0.0;
    do {
      u1 = uniform();
    } while (u1 <= 1e-300);
    u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double two_pi = 6.283185307179586476925286766559;
    spare_ = r * std::sin(two_pi * u2);
    have_spare_ = true;
    return r * std::cos(two_pi * u2);
  }
  double normal(double mean, double sigma) { return mean + sigma * normal(); }

  uint64_t raw() { return eng_(); }

 private:
  std::mt19937_64 eng_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace metaseg
