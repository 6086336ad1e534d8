// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

namespace switchsim {

namespace detail {

inline constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ull;

// SplitMix64 finalizer; bijective on 64-bit words.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

constexpr std::uint64_t fnv1a(std::string_view s) noexcept {
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001B3ull;
  }
  return h;
}

}  // namespace detail

/// Counter-based random stream. Output `i` is a pure function of
/// (seed, key, i), so draws can be addressed directly by index and
/// substreams derived by label never overlap in evaluation order.
class RngStream {
 public:
  constexpr explicit RngStream(std::uint64_t seed = 0, std::uint64_t key = 0, std::uint64_t counter = 0) noexcept
      : seed_(seed), key_(key), counter_(counter) {}

  constexpr std::uint64_t seed() const noexcept { return seed_; }
  constexpr std::uint64_t key() const noexcept { return key_; }
  constexpr std::uint64_t counter() const noexcept { return counter_; }

  constexpr RngStream derive(std::string_view label) const noexcept {
    return RngStream(seed_, detail::mix64(key_ ^ detail::fnv1a(label)), 0);
  }
  constexpr RngStream derive(std::uint64_t index) const noexcept {
    return RngStream(seed_, detail::mix64(key_ + detail::kGolden * (index + 1)), 0);
  }

  /// Random-access draw that does not advance the counter.
  constexpr std::uint64_t bits_at(std::uint64_t i) const noexcept {
    const std::uint64_t base = detail::mix64(seed_ ^ detail::mix64(key_ ^ 0xD1B54A32D192ED03ull));
    return detail::mix64(base + detail::kGolden * (i + 1));
  }

  /// Uniform on [0, 1) with 53 random bits.
  constexpr double uniform_at(std::uint64_t i) const noexcept {
    return static_cast<double>(bits_at(i) >> 11) * 0x1.0p-53;
  }

  std::uint64_t next_bits() noexcept { return bits_at(counter_++); }
  double uniform() noexcept { return uniform_at(counter_++); }

  /// Standard normal via Box-Muller; consumes two draws.
  double normal() noexcept {
    double u1 = uniform();
    const double u2 = uniform();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) noexcept { return n == 0 ? 0 : next_bits() % n; }

  friend constexpr bool operator==(const RngStream&, const RngStream&) = default;

 private:
  std::uint64_t seed_;
  std::uint64_t key_;
  std::uint64_t counter_;
};

}  // namespace switchsim
