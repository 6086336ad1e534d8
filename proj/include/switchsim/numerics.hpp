// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <string>
#include <vector>

#include "switchsim/rng.hpp"
#include "switchsim/tensor.hpp"

namespace switchsim {

/// Draw from normal(0, sqrt(scale / fan_in)) truncated to +-2 sigma by
/// resampling.
Tensor trunc_normal_init(const Shape& shape, double scale, std::int64_t fan_in, RngStream& rng);

/// Round every element to bfloat16 (ties to even) and tag the result.
template <typename T>
TensorT<T> quantize_bf16(const TensorT<T>& x) {
  TensorT<T> y = x;
  for (auto& v : y.storage()) v = static_cast<T>(bf16::round(static_cast<float>(v)));
  y.set_precision(Precision::bf16);
  return y;
}

/// Inverted dropout scale factors: 0 with probability `rate`, otherwise
/// 1/(1-rate). Element (r, j) uses counter row_ids[r] * cols + j of `rng`,
/// so the mask for a token does not depend on where its row is stored.
template <typename T>
TensorT<T> dropout_scale(std::int64_t rows, std::int64_t cols, double rate, const RngStream& rng,
                         const std::vector<std::int64_t>* row_ids = nullptr) {
  if (!(rate >= 0.0 && rate < 1.0)) throw InvalidArgument("dropout rate must be in [0,1), got " + std::to_string(rate));
  TensorT<T> s({rows, cols}, T(1));
  if (rate == 0.0) return s;
  const T keep = static_cast<T>(1.0 / (1.0 - rate));
  for (std::int64_t r = 0; r < rows; ++r) {
    const std::int64_t id = row_ids ? (*row_ids)[static_cast<std::size_t>(r)] : r;
    for (std::int64_t j = 0; j < cols; ++j) {
      const double u = rng.uniform_at(static_cast<std::uint64_t>(id * cols + j));
      s.at(r, j) = u < rate ? T(0) : keep;
    }
  }
  return s;
}

struct ParamError {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

struct GradReport {
  std::vector<ParamError> params;
  double tolerance = 0.0;
  bool passed = true;

  double max_rel_error() const;
  std::string summary() const;
};

/// One parameter tensor under test: its live storage (perturbed in place)
/// and the analytic gradient computed at the unperturbed point.
struct GradParam {
  std::string name;
  TensorD* value = nullptr;
  TensorD analytic;
};

inline constexpr double kGradCheckStep = 1e-3;
inline constexpr double kGradCheckTol = 1e-4;
inline constexpr double kGradCheckAbsFloor = 1e-8;

/// Central differences (f(p+h) - f(p-h)) / 2h per coordinate against the
/// analytic gradient; relative error uses max(|a|, |b|, 1e-8).
GradReport grad_check(const std::function<double()>& loss, std::vector<GradParam>& params,
                      double h = kGradCheckStep, double tol = kGradCheckTol);

}  // namespace switchsim
