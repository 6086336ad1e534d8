// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <bit>
#include <cmath>
#include <limits>

#include "switchsim/numerics.hpp"
#include "switchsim/ops.hpp"
#include "test_helpers.hpp"

namespace ss = switchsim;
using ss::Tensor;
using ss::TensorD;

namespace {

// Independent bfloat16 reference: pick the nearer of the two bfloat16
// neighbours of x in binary64, ties to the even mantissa.
float bf16_oracle(float x) {
  const std::uint32_t bits = std::bit_cast<std::uint32_t>(x);
  const std::uint32_t lo_bits = bits & 0xFFFF0000u;
  if (lo_bits == bits) return x;
  const std::uint32_t hi_bits = lo_bits + 0x10000u;
  const double v = x;
  const double lo = std::bit_cast<float>(lo_bits);
  // stepping past the largest finite magnitude lands on 2^128, which IEEE
  // rounding treats as the overflow threshold
  const bool hi_inf = (hi_bits & 0x7FFFFFFFu) == 0x7F800000u;
  const double hi = hi_inf ? std::copysign(std::ldexp(1.0, 128), v) : static_cast<double>(std::bit_cast<float>(hi_bits));
  const double dlo = std::abs(v - lo), dhi = std::abs(hi - v);
  std::uint32_t pick;
  if (dlo < dhi) pick = lo_bits;
  else if (dhi < dlo) pick = hi_bits;
  else pick = ((lo_bits >> 16) & 1u) == 0 ? lo_bits : hi_bits;
  return std::bit_cast<float>(pick);
}

// Variance of the standard normal truncated to [-2, 2], by composite Simpson.
double truncated_std_factor() {
  const int n = 20000;
  const double a = -2.0, b = 2.0, h = (b - a) / n;
  auto pdf = [](double z) { return std::exp(-0.5 * z * z); };
  double mass = 0.0, second = 0.0;
  for (int i = 0; i <= n; ++i) {
    const double z = a + i * h;
    const double w = (i == 0 || i == n) ? 1.0 : (i % 2 ? 4.0 : 2.0);
    mass += w * pdf(z);
    second += w * z * z * pdf(z);
  }
  return std::sqrt(second / mass);
}

}  // namespace

TEST(Tensor, ShapeInvariant) {
  EXPECT_THROW(Tensor({2, 3}, std::vector<float>(5)), ss::InvalidArgument);
  Tensor t({2, 3});
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.precision(), ss::Precision::full);
  EXPECT_THROW(t.reshaped({4, 2}), ss::InvalidArgument);
}

TEST(TruncNormal, BoundAtSmallScale) {
  ss::RngStream rng(7);
  const Tensor t = ss::trunc_normal_init({100, 100}, 0.1, 1000, rng);
  for (float v : t.storage()) EXPECT_LE(std::abs(v), 0.02f);
}

TEST(TruncNormal, MeanNearZero) {
  ss::RngStream rng(11);
  const Tensor t = ss::trunc_normal_init({100000}, 1.0, 1, rng);
  double sum = 0.0;
  for (float v : t.storage()) {
    sum += v;
    ASSERT_LE(std::abs(v), 2.0f);
  }
  EXPECT_NEAR(sum / 1e5, 0.0, 0.02);
}

TEST(TruncNormal, StdMatchesQuadrature) {
  const double factor = truncated_std_factor();
  EXPECT_NEAR(factor, 0.8796, 1e-4);
  ss::RngStream rng(3);
  const Tensor t = ss::trunc_normal_init({100000}, 0.1, 10, rng);
  double s1 = 0.0, s2 = 0.0;
  for (float v : t.storage()) {
    s1 += v;
    s2 += static_cast<double>(v) * v;
  }
  const double mean = s1 / 1e5;
  const double sd = std::sqrt(s2 / 1e5 - mean * mean);
  const double expected = factor * std::sqrt(0.1 / 10);
  EXPECT_NEAR(sd / expected, 1.0, 0.02);
}

TEST(TruncNormal, RejectsBadArguments) {
  ss::RngStream rng(1);
  EXPECT_THROW(ss::trunc_normal_init({2}, 0.0, 1, rng), ss::InvalidArgument);
  EXPECT_THROW(ss::trunc_normal_init({2}, -1.0, 1, rng), ss::InvalidArgument);
  EXPECT_THROW(ss::trunc_normal_init({2}, 0.1, 0, rng), ss::InvalidArgument);
}

TEST(TruncNormal, DeterministicGivenState) {
  ss::RngStream a(42), b(42);
  EXPECT_TRUE(ss::bit_equal(ss::trunc_normal_init({5, 5}, 0.1, 5, a), ss::trunc_normal_init({5, 5}, 0.1, 5, b)));
}

TEST(Softmax, Uniform) {
  const Tensor y = ss::ops::softmax(Tensor({3}, {0, 0, 0}));
  for (float v : y.storage()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-7);
}

TEST(Softmax, KnownValues) {
  const Tensor y = ss::ops::softmax(Tensor({3}, {2, 1, 0}));
  // e^h / sum e^h evaluated in long double
  const long double z = std::exp(2.0L) + std::exp(1.0L) + 1.0L;
  const long double ref[3] = {std::exp(2.0L) / z, std::exp(1.0L) / z, 1.0L / z};
  const double frozen[3] = {0.66524, 0.24473, 0.09003};
  for (int i = 0; i < 3; ++i) {
    EXPECT_NEAR(frozen[i], static_cast<double>(ref[i]), 1e-5);
    EXPECT_NEAR(y[static_cast<std::size_t>(i)], frozen[i], 1e-5);
  }
}

TEST(Softmax, LargeLogitsStayFinite) {
  const Tensor y = ss::ops::softmax(Tensor({2}, {1000, 0}));
  EXPECT_EQ(y[0], 1.0f);
  EXPECT_EQ(y[1], 0.0f);
}

TEST(Softmax, NonFiniteInputIsNumericError) {
  EXPECT_THROW(ss::ops::softmax(Tensor({2}, {std::numeric_limits<float>::infinity(), 0})), ss::NumericError);
  EXPECT_THROW(ss::ops::softmax(Tensor({2}, {std::nanf(""), 0})), ss::NumericError);
}

TEST(Softmax, SumsToOneAlongAxis) {
  const Tensor x = ss::testing::random_tensor({4, 5, 3}, 9, 20.0);
  for (int axis = 0; axis < 3; ++axis) {
    const Tensor y = ss::ops::softmax(x, axis);
    const Tensor s = ss::ops::reduce_sum(y, axis);
    for (float v : s.storage()) EXPECT_NEAR(v, 1.0f, 1e-6f);
  }
}

TEST(Bf16, ExactValues) {
  EXPECT_EQ(ss::bf16::round(1.0f), 1.0f);
  EXPECT_EQ(ss::bf16::round(1.00390625f), 1.0f);
  EXPECT_EQ(ss::bf16::round(1.01171875f), 1.015625f);  // tie with odd lower neighbour rounds up
  EXPECT_EQ(ss::bf16::round(std::numeric_limits<float>::infinity()), std::numeric_limits<float>::infinity());
  EXPECT_TRUE(std::isnan(ss::bf16::round(std::nanf(""))));
}

TEST(Bf16, MatchesBitOracle) {
  const ss::RngStream s(2024);
  int checked = 0;
  for (std::uint64_t i = 0; checked < 100000; ++i) {
    const auto bits = static_cast<std::uint32_t>(s.bits_at(i));
    const float x = std::bit_cast<float>(bits);
    if (!std::isfinite(x)) continue;
    ASSERT_EQ(std::bit_cast<std::uint32_t>(ss::bf16::round(x)), std::bit_cast<std::uint32_t>(bf16_oracle(x)))
        << "x bits " << std::hex << bits;
    ++checked;
  }
}

TEST(Bf16, QuantizeIdempotentAndTagged) {
  const Tensor x = ss::testing::random_tensor({10000}, 5, 100.0);
  const Tensor q = ss::quantize_bf16(x);
  EXPECT_EQ(q.precision(), ss::Precision::bf16);
  EXPECT_TRUE(ss::bit_equal(ss::quantize_bf16(q), q));
  for (float v : q.storage()) EXPECT_TRUE(ss::bf16::representable(v));
}

TEST(Bf16, Monotone) {
  Tensor x = ss::testing::random_tensor({20000}, 6, 10.0);
  std::sort(x.storage().begin(), x.storage().end());
  const Tensor q = ss::quantize_bf16(x);
  for (std::size_t i = 1; i < q.size(); ++i) EXPECT_LE(q[i - 1], q[i]);
}

TEST(Rng, SubstreamsAreReproducibleAndDistinct) {
  const ss::RngStream a(5), b(5);
  EXPECT_EQ(a.derive("x").bits_at(3), b.derive("x").bits_at(3));
  EXPECT_NE(a.derive("x").bits_at(3), a.derive("y").bits_at(3));
  EXPECT_NE(a.derive(std::uint64_t{1}).bits_at(0), a.derive(std::uint64_t{2}).bits_at(0));
  ss::RngStream c(5);
  const auto first = c.next_bits();
  EXPECT_EQ(first, a.bits_at(0));
  EXPECT_EQ(c.counter(), 1u);
}

TEST(Ops, ReluBackwardAtKinkAndPositive) {
  const Tensor x({2}, {-1.0f, 2.0f});
  const Tensor g = ss::ops::relu_backward(x, Tensor({2}, {5.0f, 7.0f}));
  EXPECT_EQ(g[0], 0.0f);
  EXPECT_EQ(g[1], 7.0f);
}

TEST(Ops, CumsumOfOnes) {
  const Tensor y = ss::ops::cumsum(Tensor({3}, {1, 1, 1}), 0);
  EXPECT_EQ(y.storage(), (std::vector<float>{1, 2, 3}));
}

TEST(Ops, ShapeMismatchNamesBothShapes) {
  try {
    ss::ops::matmul(Tensor({3, 4}), Tensor({3, 2}));
    FAIL() << "expected InvalidArgument";
  } catch (const ss::InvalidArgument& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[3,4]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[3,2]"), std::string::npos) << msg;
  }
  try {
    ss::ops::add(Tensor({2}), Tensor({3}));
    FAIL() << "expected InvalidArgument";
  } catch (const ss::InvalidArgument& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2]"), std::string::npos);
    EXPECT_NE(msg.find("[3]"), std::string::npos);
  }
}

TEST(Ops, OneHot) {
  const Tensor y = ss::ops::one_hot<float>({2, 0}, 3);
  EXPECT_EQ(y.storage(), (std::vector<float>{0, 0, 1, 1, 0, 0}));
  EXPECT_THROW(ss::ops::one_hot<float>({3}, 3), ss::InvalidArgument);
}

// ---- gradient checks of each primitive -------------------------------------------

namespace {

double weighted_sum(const TensorD& y, const TensorD& w) {
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * w[i];
  return s;
}

}  // namespace

TEST(GradCheck, Matmul) {
  TensorD a = ss::testing::random_tensor<double>({3, 4}, 1);
  TensorD b = ss::testing::random_tensor<double>({4, 2}, 2);
  const TensorD w = ss::testing::random_tensor<double>({3, 2}, 3);
  auto g = ss::ops::matmul_backward(a, b, w);
  std::vector<ss::GradParam> ps{{"a", &a, g.da}, {"b", &b, g.db}};
  const auto r = ss::grad_check([&] { return weighted_sum(ss::ops::matmul(a, b), w); }, ps);
  EXPECT_TRUE(r.passed) << r.summary();
  EXPECT_LT(r.max_rel_error(), 1e-4);
}

TEST(GradCheck, ElementwiseAndReductions) {
  TensorD a = ss::testing::random_away_from_zero<double>({3, 4}, 4);
  TensorD b = ss::testing::random_tensor<double>({3, 4}, 5);
  const TensorD w4 = ss::testing::random_tensor<double>({3, 4}, 6);
  const TensorD w3 = ss::testing::random_tensor<double>({3}, 7);
  const TensorD w_4 = ss::testing::random_tensor<double>({4}, 8);
  namespace o = ss::ops;

  auto check = [](const char* what, auto f, TensorD& x, const TensorD& analytic) {
    std::vector<ss::GradParam> ps{{what, &x, analytic}};
    const auto r = ss::grad_check(f, ps);
    EXPECT_TRUE(r.passed) << r.summary();
  };
  {
    auto g = o::add_backward(w4);
    check("add.a", [&] { return weighted_sum(o::add(a, b), w4); }, a, g.da);
    check("add.b", [&] { return weighted_sum(o::add(a, b), w4); }, b, g.db);
  }
  {
    auto g = o::mul_backward(a, b, w4);
    check("mul.a", [&] { return weighted_sum(o::mul(a, b), w4); }, a, g.da);
    check("mul.b", [&] { return weighted_sum(o::mul(a, b), w4); }, b, g.db);
  }
  check("scale", [&] { return weighted_sum(o::scale(a, 1.7), w4); }, a, o::scale_backward(w4, 1.7));
  check("relu", [&] { return weighted_sum(o::relu(a), w4); }, a, o::relu_backward(a, w4));
  check("reduce_sum", [&] { return weighted_sum(o::reduce_sum(a, 1), w3); }, a,
        o::reduce_sum_backward(a.shape(), 1, w3));
  check("reduce_mean", [&] { return weighted_sum(o::reduce_mean(a, 0), w_4); }, a,
        o::reduce_mean_backward(a.shape(), 0, w_4));
  check("cumsum", [&] { return weighted_sum(o::cumsum(a, 1), w4); }, a, o::cumsum_backward(w4, 1));
  {
    const TensorD y = o::softmax(a, 1);
    check("softmax", [&] { return weighted_sum(o::softmax(a, 1), w4); }, a, o::softmax_backward(y, w4, 1));
  }
}

TEST(GradCheck, QuadraticIsExact) {
  TensorD x({2}, {1.0, 2.0});
  std::vector<ss::GradParam> ps{{"x", &x, TensorD({2}, {2.0, 4.0})}};
  const auto r = ss::grad_check([&] { return x[0] * x[0] + x[1] * x[1]; }, ps);
  EXPECT_TRUE(r.passed);
  EXPECT_LT(r.max_rel_error(), 1e-6);
}

TEST(GradCheck, SoftmaxCrossEntropyComposite) {
  TensorD logits = ss::testing::random_tensor<double>({4, 5}, 12, 2.0);
  const std::vector<int> target{1, 4, 0, 2};
  auto loss = [&] {
    const TensorD lp = ss::ops::log_softmax_rows(logits);
    double s = 0.0;
    for (int t = 0; t < 4; ++t) s -= lp.at(t, target[static_cast<std::size_t>(t)]);
    return s / 4.0;
  };
  TensorD grad = ss::ops::softmax(logits, -1);
  for (int t = 0; t < 4; ++t) grad.at(t, target[static_cast<std::size_t>(t)]) -= 1.0;
  grad = ss::ops::scale(grad, 0.25);
  std::vector<ss::GradParam> ps{{"logits", &logits, grad}};
  const auto r = ss::grad_check(loss, ps);
  EXPECT_TRUE(r.passed) << r.summary();
}

TEST(GradCheck, CorruptedGradientFails) {
  TensorD x({2}, {1.0, 2.0});
  std::vector<ss::GradParam> ps{{"x", &x, TensorD({2}, {2.0, 4.1})}};
  const auto r = ss::grad_check([&] { return x[0] * x[0] + x[1] * x[1]; }, ps);
  EXPECT_FALSE(r.passed);
}

TEST(GradCheck, NonFiniteLossIsNumericError) {
  TensorD x({1}, {1.0});
  std::vector<ss::GradParam> ps{{"x", &x, TensorD({1}, {0.0})}};
  EXPECT_THROW(ss::grad_check([] { return std::numeric_limits<double>::infinity(); }, ps), ss::NumericError);
}

TEST(Dropout, ZeroRateIsIdentityAndInvertedScaling) {
  const ss::RngStream rng(3);
  const Tensor s0 = ss::dropout_scale<float>(4, 4, 0.0, rng);
  for (float v : s0.storage()) EXPECT_EQ(v, 1.0f);
  const Tensor s = ss::dropout_scale<float>(1000, 100, 0.4, rng);
  double mean = 0.0;
  for (float v : s.storage()) {
    EXPECT_TRUE(v == 0.0f || std::abs(v - 1.0f / 0.6f) < 1e-6f);
    mean += v;
  }
  EXPECT_NEAR(mean / 1e5, 1.0, 0.01);
}
