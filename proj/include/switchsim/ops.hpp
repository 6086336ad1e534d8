// SPDX-License-Identifier: Apache-2.0
//
// Primitive tensor operations and their backward passes. Every backward
// takes the upstream gradient of a scalar loss and returns the gradient with
// respect to each forward input.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "switchsim/tensor.hpp"

namespace switchsim::ops {

namespace detail {

struct AxisSplit {
  std::int64_t outer = 1;
  std::int64_t extent = 1;
  std::int64_t inner = 1;
};

inline AxisSplit split_axis(const Shape& s, int axis, const char* what) {
  const int r = static_cast<int>(s.size());
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r)
    throw InvalidArgument(std::string(what) + ": axis " + std::to_string(axis) + " invalid for shape " + shape_str(s));
  AxisSplit a;
  for (int i = 0; i < axis; ++i) a.outer *= s[i];
  a.extent = s[axis];
  for (int i = axis + 1; i < r; ++i) a.inner *= s[i];
  return a;
}

}  // namespace detail

template <typename T>
struct BinaryGrad {
  TensorT<T> da;
  TensorT<T> db;
};

// ---- matmul ---------------------------------------------------------------

template <typename T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw InvalidArgument("matmul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  TensorT<T> c({m, n});
  for (std::int64_t i = 0; i < m; ++i) {
    T* crow = c.data().data() + i * n;
    for (std::int64_t p = 0; p < k; ++p) {
      const T av = a[static_cast<std::size_t>(i * k + p)];
      const T* brow = b.data().data() + p * n;
      for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  return c;
}

/// a^T b for a [k, m], b [k, n].
template <typename T>
TensorT<T> matmul_tn(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(0) != b.dim(0))
    throw InvalidArgument("matmul_tn: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const std::int64_t k = a.dim(0), m = a.dim(1), n = b.dim(1);
  TensorT<T> c({m, n});
  for (std::int64_t p = 0; p < k; ++p) {
    const T* arow = a.data().data() + p * m;
    const T* brow = b.data().data() + p * n;
    for (std::int64_t i = 0; i < m; ++i) {
      const T av = arow[i];
      T* crow = c.data().data() + i * n;
      for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  return c;
}

/// a b^T for a [m, k], b [n, k].
template <typename T>
TensorT<T> matmul_nt(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1))
    throw InvalidArgument("matmul_nt: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  TensorT<T> c({m, n});
  for (std::int64_t i = 0; i < m; ++i) {
    const T* arow = a.data().data() + i * k;
    for (std::int64_t j = 0; j < n; ++j) {
      const T* brow = b.data().data() + j * k;
      T acc = T(0);
      for (std::int64_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      c[static_cast<std::size_t>(i * n + j)] = acc;
    }
  }
  return c;
}

template <typename T>
BinaryGrad<T> matmul_backward(const TensorT<T>& a, const TensorT<T>& b, const TensorT<T>& dc) {
  if (dc.rank() != 2 || dc.dim(0) != a.dim(0) || dc.dim(1) != b.dim(1))
    throw InvalidArgument("matmul_backward: upstream shape " + shape_str(dc.shape()) + " vs operands " +
                          shape_str(a.shape()) + ", " + shape_str(b.shape()));
  return {matmul_nt(dc, b), matmul_tn(a, dc)};
}

// ---- elementwise ------------------------------------------------------------

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
  require_same_shape(a, b, "add");
  TensorT<T> c = a;
  c.set_precision(Precision::full);
  for (std::size_t i = 0; i < c.size(); ++i) c[i] += b[i];
  return c;
}

template <typename T>
BinaryGrad<T> add_backward(const TensorT<T>& dc) {
  return {dc, dc};
}

template <typename T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
  require_same_shape(a, b, "mul");
  TensorT<T> c = a;
  c.set_precision(Precision::full);
  for (std::size_t i = 0; i < c.size(); ++i) c[i] *= b[i];
  return c;
}

template <typename T>
BinaryGrad<T> mul_backward(const TensorT<T>& a, const TensorT<T>& b, const TensorT<T>& dc) {
  require_same_shape(a, dc, "mul_backward");
  return {mul(dc, b), mul(dc, a)};
}

template <typename T>
TensorT<T> scale(const TensorT<T>& a, T s) {
  TensorT<T> c = a;
  c.set_precision(Precision::full);
  for (auto& v : c.storage()) v *= s;
  return c;
}

template <typename T>
TensorT<T> scale_backward(const TensorT<T>& dc, T s) {
  return scale(dc, s);
}

template <typename T>
TensorT<T> relu(const TensorT<T>& x) {
  TensorT<T> y = x;
  y.set_precision(Precision::full);
  for (auto& v : y.storage()) v = v > T(0) ? v : T(0);
  return y;
}

/// Gradient of relu at `x`; zero at and below the kink.
template <typename T>
TensorT<T> relu_backward(const TensorT<T>& x, const TensorT<T>& dy) {
  require_same_shape(x, dy, "relu_backward");
  TensorT<T> dx(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) dx[i] = x[i] > T(0) ? dy[i] : T(0);
  return dx;
}

// ---- reductions -------------------------------------------------------------

/// Sum over `axis`; the reduced axis is removed from the shape.
template <typename T>
TensorT<T> reduce_sum(const TensorT<T>& x, int axis) {
  const auto a = detail::split_axis(x.shape(), axis, "reduce_sum");
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + (axis < 0 ? axis + static_cast<int>(x.rank()) : axis));
  TensorT<T> y(out_shape);
  for (std::int64_t o = 0; o < a.outer; ++o)
    for (std::int64_t i = 0; i < a.extent; ++i)
      for (std::int64_t in = 0; in < a.inner; ++in)
        y[static_cast<std::size_t>(o * a.inner + in)] += x[static_cast<std::size_t>((o * a.extent + i) * a.inner + in)];
  return y;
}

template <typename T>
TensorT<T> reduce_mean(const TensorT<T>& x, int axis) {
  const auto a = detail::split_axis(x.shape(), axis, "reduce_mean");
  if (a.extent == 0) throw InvalidArgument("reduce_mean: empty axis in shape " + shape_str(x.shape()));
  return scale(reduce_sum(x, axis), T(1) / static_cast<T>(a.extent));
}

/// Broadcast the reduced gradient `dy` back over `axis` of `input_shape`.
template <typename T>
TensorT<T> reduce_sum_backward(const Shape& input_shape, int axis, const TensorT<T>& dy) {
  const auto a = detail::split_axis(input_shape, axis, "reduce_sum_backward");
  if (static_cast<std::int64_t>(dy.size()) != a.outer * a.inner)
    throw InvalidArgument("reduce_sum_backward: upstream shape " + shape_str(dy.shape()) + " vs input " +
                          shape_str(input_shape));
  TensorT<T> dx(input_shape);
  for (std::int64_t o = 0; o < a.outer; ++o)
    for (std::int64_t i = 0; i < a.extent; ++i)
      for (std::int64_t in = 0; in < a.inner; ++in)
        dx[static_cast<std::size_t>((o * a.extent + i) * a.inner + in)] = dy[static_cast<std::size_t>(o * a.inner + in)];
  return dx;
}

template <typename T>
TensorT<T> reduce_mean_backward(const Shape& input_shape, int axis, const TensorT<T>& dy) {
  const auto a = detail::split_axis(input_shape, axis, "reduce_mean_backward");
  return scale(reduce_sum_backward(input_shape, axis, dy), T(1) / static_cast<T>(a.extent));
}

/// Inclusive prefix sum along `axis`.
template <typename T>
TensorT<T> cumsum(const TensorT<T>& x, int axis) {
  const auto a = detail::split_axis(x.shape(), axis, "cumsum");
  TensorT<T> y(x.shape());
  for (std::int64_t o = 0; o < a.outer; ++o)
    for (std::int64_t in = 0; in < a.inner; ++in) {
      T run = T(0);
      for (std::int64_t i = 0; i < a.extent; ++i) {
        const auto idx = static_cast<std::size_t>((o * a.extent + i) * a.inner + in);
        run += x[idx];
        y[idx] = run;
      }
    }
  return y;
}

/// Reverse prefix sum: dx_i = sum_{j >= i} dy_j.
template <typename T>
TensorT<T> cumsum_backward(const TensorT<T>& dy, int axis) {
  const auto a = detail::split_axis(dy.shape(), axis, "cumsum_backward");
  TensorT<T> dx(dy.shape());
  for (std::int64_t o = 0; o < a.outer; ++o)
    for (std::int64_t in = 0; in < a.inner; ++in) {
      T run = T(0);
      for (std::int64_t i = a.extent - 1; i >= 0; --i) {
        const auto idx = static_cast<std::size_t>((o * a.extent + i) * a.inner + in);
        run += dy[idx];
        dx[idx] = run;
      }
    }
  return dx;
}

template <typename T = float>
TensorT<T> one_hot(const std::vector<int>& indices, int depth) {
  if (depth < 1) throw InvalidArgument("one_hot: depth must be >= 1, got " + std::to_string(depth));
  TensorT<T> y({static_cast<std::int64_t>(indices.size()), depth});
  for (std::size_t t = 0; t < indices.size(); ++t) {
    const int k = indices[t];
    if (k < 0 || k >= depth)
      throw InvalidArgument("one_hot: index " + std::to_string(k) + " out of range [0," + std::to_string(depth) + ")");
    y.at(static_cast<std::int64_t>(t), k) = T(1);
  }
  return y;
}

// ---- softmax ----------------------------------------------------------------

template <typename T>
TensorT<T> softmax(const TensorT<T>& x, int axis = -1) {
  const auto a = detail::split_axis(x.shape(), axis, "softmax");
  if (a.extent < 1) throw InvalidArgument("softmax: empty axis in shape " + shape_str(x.shape()));
  if (!x.all_finite()) throw NumericError("softmax: non-finite input");
  TensorT<T> y(x.shape());
  for (std::int64_t o = 0; o < a.outer; ++o)
    for (std::int64_t in = 0; in < a.inner; ++in) {
      auto idx = [&](std::int64_t i) { return static_cast<std::size_t>((o * a.extent + i) * a.inner + in); };
      T mx = x[idx(0)];
      for (std::int64_t i = 1; i < a.extent; ++i) mx = std::max(mx, x[idx(i)]);
      T sum = T(0);
      for (std::int64_t i = 0; i < a.extent; ++i) {
        const T e = std::exp(x[idx(i)] - mx);
        y[idx(i)] = e;
        sum += e;
      }
      for (std::int64_t i = 0; i < a.extent; ++i) y[idx(i)] /= sum;
    }
  return y;
}

/// Backward of softmax given its output `y`.
template <typename T>
TensorT<T> softmax_backward(const TensorT<T>& y, const TensorT<T>& dy, int axis = -1) {
  require_same_shape(y, dy, "softmax_backward");
  const auto a = detail::split_axis(y.shape(), axis, "softmax_backward");
  TensorT<T> dx(y.shape());
  for (std::int64_t o = 0; o < a.outer; ++o)
    for (std::int64_t in = 0; in < a.inner; ++in) {
      auto idx = [&](std::int64_t i) { return static_cast<std::size_t>((o * a.extent + i) * a.inner + in); };
      T dot = T(0);
      for (std::int64_t i = 0; i < a.extent; ++i) dot += y[idx(i)] * dy[idx(i)];
      for (std::int64_t i = 0; i < a.extent; ++i) dx[idx(i)] = y[idx(i)] * (dy[idx(i)] - dot);
    }
  return dx;
}

/// Row-wise log-softmax of a rank-2 tensor.
template <typename T>
TensorT<T> log_softmax_rows(const TensorT<T>& x) {
  require_rank(x, 2, "log_softmax_rows");
  if (!x.all_finite()) throw NumericError("log_softmax: non-finite input");
  TensorT<T> y(x.shape());
  for (std::int64_t r = 0; r < x.dim(0); ++r) {
    auto in = x.row(r);
    auto out = y.row(r);
    const T mx = *std::max_element(in.begin(), in.end());
    T sum = T(0);
    for (T v : in) sum += std::exp(v - mx);
    const T lse = mx + std::log(sum);
    for (std::size_t j = 0; j < in.size(); ++j) out[j] = in[j] - lse;
  }
  return y;
}

}  // namespace switchsim::ops
