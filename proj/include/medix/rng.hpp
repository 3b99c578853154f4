#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>
#include <vector>

#include "medix/common.hpp"

namespace medix {

/// Splittable xorshift64* generator. The 64-bit seed is scrambled through
/// splitmix64 so any seed (including 0) yields a valid nonzero state, and
/// `split(label, index)` derives an independent child stream from
/// (state, label, index) without consuming from the parent. All shuffles,
/// masks and initializers in this project draw from these streams, which is
/// what makes runs bit-reproducible for a fixed seed.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(scramble(seed)) {}

  std::uint64_t next() {
    state_ ^= state_ >> 12;
    state_ ^= state_ << 25;
    state_ ^= state_ >> 27;
    return state_ * 0x2545F4914F6CDD1DULL;
  }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n). n must be positive.
  std::uint64_t below(std::uint64_t n) { return next() % n; }

  /// Standard normal via Box-Muller (no cached spare, so the stream is a pure
  /// function of the draw count).
  double normal() {
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  /// Child stream keyed by a label; independent of the parent's future draws.
  /// split(l, i) == Rng(stream_seed(l, i)).
  Rng split(std::string_view label, std::uint64_t index = 0) const {
    return Rng(stream_seed(label, index));
  }

  /// A plain 64-bit seed for handing to another component.
  std::uint64_t stream_seed(std::string_view label, std::uint64_t index = 0) const {
    return state_ ^ fnv1a(label) ^ ((index + 1) * 0x9E3779B97F4A7C15ULL);
  }

 private:
  static std::uint64_t scramble(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    x ^= x >> 31;
    return x ? x : 0x9E3779B97F4A7C15ULL;  // xorshift state must be nonzero
  }

  std::uint64_t state_;
};

/// Fisher-Yates shuffle driven by our own stream (libstdc++ distributions are
/// not pinned across implementations).
template <typename T>
void shuffle(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng.below(i));
    std::swap(v[i - 1], v[j]);
  }
}

}  // namespace medix
