// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "switchsim/bf16.hpp"
#include "switchsim/errors.hpp"

namespace switchsim {

using Shape = std::vector<std::int64_t>;

enum class Precision : std::uint8_t { full = 0, bf16 = 1 };

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) {
    if (d < 0) throw InvalidArgument("negative extent in shape " + shape_str(s));
    n *= d;
  }
  return n;
}

/// Dense row-major array. Extents are non-negative; a zero extent yields an
/// empty tensor (used for experts that received no tokens).
template <typename T>
class TensorT {
 public:
  using value_type = T;

  TensorT() = default;

  explicit TensorT(Shape shape, T fill = T(0))
      : shape_(std::move(shape)), data_(static_cast<std::size_t>(shape_numel(shape_)), fill) {}

  TensorT(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_numel(shape_) != static_cast<std::int64_t>(data_.size()))
      throw InvalidArgument("tensor data length " + std::to_string(data_.size()) +
                            " does not match shape " + shape_str(shape_));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::int64_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  std::vector<T>& storage() noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  T& at(std::int64_t i, std::int64_t j) noexcept { return data_[static_cast<std::size_t>(i * shape_[1] + j)]; }
  const T& at(std::int64_t i, std::int64_t j) const noexcept {
    return data_[static_cast<std::size_t>(i * shape_[1] + j)];
  }
  T& at(std::int64_t i, std::int64_t j, std::int64_t k) noexcept {
    return data_[static_cast<std::size_t>((i * shape_[1] + j) * shape_[2] + k)];
  }
  const T& at(std::int64_t i, std::int64_t j, std::int64_t k) const noexcept {
    return data_[static_cast<std::size_t>((i * shape_[1] + j) * shape_[2] + k)];
  }

  /// Row `i` of a rank-2 tensor.
  std::span<T> row(std::int64_t i) noexcept {
    return std::span<T>(data_).subspan(static_cast<std::size_t>(i * shape_[1]), static_cast<std::size_t>(shape_[1]));
  }
  std::span<const T> row(std::int64_t i) const noexcept {
    return std::span<const T>(data_).subspan(static_cast<std::size_t>(i * shape_[1]),
                                             static_cast<std::size_t>(shape_[1]));
  }

  Precision precision() const noexcept { return precision_; }
  void set_precision(Precision p) noexcept { precision_ = p; }

  TensorT reshaped(Shape shape) const {
    if (shape_numel(shape) != static_cast<std::int64_t>(data_.size()))
      throw InvalidArgument("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    TensorT out(std::move(shape), data_);
    out.precision_ = precision_;
    return out;
  }

  template <typename U>
  TensorT<U> cast() const {
    if (shape_.empty() && data_.empty()) return TensorT<U>();
    std::vector<U> d(data_.begin(), data_.end());
    TensorT<U> out(shape_, std::move(d));
    out.set_precision(precision_);
    return out;
  }

  bool all_finite() const noexcept {
    for (const T& v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  friend bool operator==(const TensorT& a, const TensorT& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_ && a.precision_ == b.precision_;
  }

 private:
  Shape shape_;
  std::vector<T> data_;
  Precision precision_ = Precision::full;
};

using Tensor = TensorT<float>;
using TensorD = TensorT<double>;

template <typename T>
void require_rank(const TensorT<T>& t, std::size_t rank, const char* what) {
  if (t.rank() != rank)
    throw InvalidArgument(std::string(what) + ": expected rank " + std::to_string(rank) + ", got shape " +
                          shape_str(t.shape()));
}

template <typename T>
void require_same_shape(const TensorT<T>& a, const TensorT<T>& b, const char* what) {
  if (a.shape() != b.shape())
    throw InvalidArgument(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                          shape_str(b.shape()));
}

/// Max |a - b| over elements; shapes must agree.
template <typename T>
double max_abs_diff(const TensorT<T>& a, const TensorT<T>& b) {
  require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
  return m;
}

/// Bitwise equality of contents, ignoring the precision tag.
template <typename T>
bool bit_equal(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.shape() != b.shape()) return false;
  return a.empty() || std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(T)) == 0;
}

}  // namespace switchsim
