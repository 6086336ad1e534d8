// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <bit>
#include <cstdint>

namespace switchsim::bf16 {

/// Round a binary32 value to the nearest bfloat16 (ties to even) and return
/// it widened back to binary32. Infinities are preserved; NaNs stay NaN.
inline float round(float x) noexcept {
  std::uint32_t bits = std::bit_cast<std::uint32_t>(x);
  if ((bits & 0x7F800000u) == 0x7F800000u && (bits & 0x007FFFFFu) != 0) {
    // quiet the NaN and keep it a NaN after truncation
    return std::bit_cast<float>((bits | 0x00400000u) & 0xFFFF0000u);
  }
  const std::uint32_t lsb = (bits >> 16) & 1u;
  bits += 0x7FFFu + lsb;
  return std::bit_cast<float>(bits & 0xFFFF0000u);
}

inline bool representable(float x) noexcept {
  return (std::bit_cast<std::uint32_t>(x) & 0x0000FFFFu) == 0;
}

/// Upper 16 bits of a value already rounded with round().
inline std::uint16_t to_bits(float rounded) noexcept {
  return static_cast<std::uint16_t>(std::bit_cast<std::uint32_t>(rounded) >> 16);
}

inline float from_bits(std::uint16_t b) noexcept {
  return std::bit_cast<float>(static_cast<std::uint32_t>(b) << 16);
}

}  // namespace switchsim::bf16
