// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>

#include "switchsim/rng.hpp"
#include "switchsim/tensor.hpp"

namespace switchsim::testing {

/// Uniform(-a, a) entries, drawn from a labeled substream.
template <typename T = float>
TensorT<T> random_tensor(const Shape& shape, std::uint64_t seed, double a = 1.0, const char* label = "t") {
  const RngStream s = RngStream(seed).derive(label);
  TensorT<T> t(shape);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(a * (2.0 * s.uniform_at(i) - 1.0));
  return t;
}

/// Like random_tensor but every entry has magnitude at least `gap`, keeping
/// ReLU inputs away from the kink.
template <typename T = float>
TensorT<T> random_away_from_zero(const Shape& shape, std::uint64_t seed, double a = 1.0, double gap = 0.05) {
  TensorT<T> t = random_tensor<T>(shape, seed, a);
  for (auto& v : t.storage())
    if (std::abs(v) < gap) v = static_cast<T>(v < 0 ? -gap : gap);
  return t;
}

}  // namespace switchsim::testing
