#pragma once

#include <cstdint>
#include <cmath>
#include <string_view>

namespace lcp {

/// Deterministic 64-bit generator (splitmix64). All randomness in the
/// project flows through this so that runs are reproducible from a single
/// seed on any platform; std::random distributions are avoided on purpose
/// because their output is implementation-defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  /// Uniform double in [0, 1).
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  /// Uniform double in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [lo, hi] inclusive.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
    return lo + static_cast<std::int64_t>(next_u64() % span);
  }

  /// Standard normal via Box-Muller (explicit formula, deterministic).
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
  }

 private:
  std::uint64_t state_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

/// Derives an independent sub-seed from (seed, purpose). FNV-1a over the
/// purpose string, mixed with the master seed through one splitmix round.
/// Every module that needs randomness names its purpose ("init/layer3",
/// "shuffle/epoch7", ...) so one --seed knob pins the whole pipeline.
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view purpose) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : purpose) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  h ^= seed + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
  Rng mix(h);
  return mix.next_u64();
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view purpose,
                                 std::uint64_t index) {
  std::uint64_t h = derive_seed(seed, purpose);
  Rng mix(h ^ (0x9e3779b97f4a7c15ULL * (index + 1)));
  return mix.next_u64();
}

}  // namespace lcp
