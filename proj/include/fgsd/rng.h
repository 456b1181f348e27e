#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace fgsd {

// Deterministic counter-free PRNG: splitmix64 state advance, Box-Muller for
// normals. Self-contained so streams are bit-identical across platforms and
// standard-library versions (std::normal_distribution makes no such promise).
class Rng {
public:
  explicit Rng(std::uint64_t seed) : root_(seed), state_(mix_(seed)) {}

  // Independent child stream; used to give each trajectory / worker its own
  // stream derived from one user-facing seed.
  Rng substream(std::uint64_t idx) const {
    return Rng(mix_(root_ ^ (0x9e3779b97f4a7c15ull * (idx + 1))));
  }

  std::uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ull;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // uniform on [0, 1), 53-bit resolution
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  // uniform on [lo, hi)
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // uniform integer in [0, n), n >= 1; modulo bias is < n / 2^64, irrelevant here
  std::int64_t uniform_int(std::int64_t n) {
    return std::int64_t(next_u64() % std::uint64_t(n));
  }

  // standard normal, Box-Muller with cached spare
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    // u1 in (0,1] so the log is finite
    double u1 = 1.0 - uniform();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double t = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(t);
    have_spare_ = true;
    return r * std::cos(t);
  }

private:
  static std::uint64_t mix_(std::uint64_t z) {
    z = (z ^ (z >> 33)) * 0xff51afd7ed558ccdull;
    z = (z ^ (z >> 33)) * 0xc4ceb9fe1a85ec53ull;
    return z ^ (z >> 33);
  }

  std::uint64_t root_;
  std::uint64_t state_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace fgsd
