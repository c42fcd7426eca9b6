#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>
#include <vector>

namespace oddkit {

/// splitmix64 step; the mixing core of every random stream in the library.
inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Deterministic random stream. All draws are explicit bit manipulations of
/// splitmix64 output, so sequences are identical across platforms and
/// standard-library versions.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {
    // burn-in decorrelates trivially related seeds
    splitmix64(state_);
    splitmix64(state_);
  }

  std::uint64_t next_u64() { return splitmix64(state_); }

  /// Uniform integer in [0, n). Rejection sampling, no modulo bias.
  std::uint64_t next_below(std::uint64_t n) {
    if (n <= 1) return 0;
    std::uint64_t min = (0 - n) % n;  // 2^64 mod n
    for (;;) {
      std::uint64_t x = next_u64();
      if (x >= min) return x % n;
    }
  }

  /// Uniform double in [0, 1).
  double next_unit() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform double in [lo, hi).
  double next_uniform(double lo, double hi) { return lo + (hi - lo) * next_unit(); }

  /// Standard normal via Box-Muller; consumes exactly two draws per value.
  double next_normal() {
    double u1 = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;  // (0, 1]
    double u2 = next_unit();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  bool next_bool() { return (next_u64() & 1u) != 0; }

  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(next_below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::uint64_t state_;
};

/// Builds a stream keyed by (seed, tag, indices...). Streams with different
/// keys are statistically independent; the same key always yields the same
/// stream. This is what makes augmentation and batch order pure functions of
/// their identifiers rather than of execution order.
template <typename... Key>
Rng keyed_rng(std::uint64_t seed, std::string_view tag, Key... key) {
  std::uint64_t state = seed ^ 0x6a09e667f3bcc908ULL;
  splitmix64(state);
  state ^= fnv1a64(tag);
  splitmix64(state);
  ((state ^= static_cast<std::uint64_t>(key), splitmix64(state)), ...);
  return Rng(state);
}

}  // namespace oddkit
