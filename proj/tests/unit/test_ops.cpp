#include <gtest/gtest.h>

#include <cmath>

#include "sponge/error.hpp"
#include "sponge/ops.hpp"
#include "sponge/probe.hpp"
#include "test_util.hpp"

namespace sponge {
namespace {

using testing::random_bn;
using testing::random_tensor;

// Straight nested loops, written independently of the im2col path.
Tensor conv_oracle(const Tensor& in, const Tensor& w, const std::vector<double>& bias,
                   std::size_t stride, std::size_t pad) {
  const std::size_t C = in.dim(0), H = in.dim(1), W = in.dim(2);
  const std::size_t O = w.dim(0), K = w.dim(2), L = w.dim(3);
  const std::size_t Ho = (H + 2 * pad - K) / stride + 1;
  const std::size_t Wo = (W + 2 * pad - L) / stride + 1;
  Tensor out({O, Ho, Wo});
  for (std::size_t o = 0; o < O; ++o)
    for (std::size_t y = 0; y < Ho; ++y)
      for (std::size_t x = 0; x < Wo; ++x) {
        double acc = bias.empty() ? 0.0 : bias[o];
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t i = 0; i < K; ++i)
            for (std::size_t j = 0; j < L; ++j) {
              const long iy = static_cast<long>(y * stride + i) - static_cast<long>(pad);
              const long ix = static_cast<long>(x * stride + j) - static_cast<long>(pad);
              if (iy < 0 || ix < 0 || iy >= static_cast<long>(H) || ix >= static_cast<long>(W)) continue;
              acc += w[((o * C + c) * K + i) * L + j] * in.at(c, iy, ix);
            }
        out.at(o, y, x) = acc;
      }
  return out;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  EXPECT_EQ(a.dims(), b.dims());
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

TEST(Conv2d, OneByOneKernelScales) {
  const Tensor out = ops::conv2d(Tensor::filled({1, 3, 3}, 1.0), Tensor::filled({1, 1, 1, 1}, 2.0),
                                 {}, {1, 0});
  ASSERT_EQ(out.dims(), (Shape{1, 3, 3}));
  for (double v : out.data()) EXPECT_EQ(v, 2.0);
}

TEST(Conv2d, ConstantInputCollapsesToKernelSum) {
  const Tensor k = random_tensor({1, 1, 3, 3}, 5);
  double ksum = 0.0;
  for (double v : k.data()) ksum += v;
  const Tensor out = ops::conv2d(Tensor::filled({1, 6, 6}, 0.7), k, {}, {1, 0});
  for (double v : out.data()) EXPECT_NEAR(v, 0.7 * ksum, 1e-12);
}

TEST(Conv2d, MatchesLoopOracleStrideTwoPadOne) {
  const Tensor in = random_tensor({2, 5, 5}, 6);
  const Tensor w = random_tensor({3, 2, 3, 3}, 7);
  const std::vector<double> bias{0.1, -0.2, 0.3};
  EXPECT_LT(max_abs_diff(ops::conv2d(in, w, bias, {2, 1}), conv_oracle(in, w, bias, 2, 1)), 1e-12);
  EXPECT_LT(max_abs_diff(ops::conv2d(in, w, {}, {1, 0}), conv_oracle(in, w, {}, 1, 0)), 1e-12);
}

TEST(Conv2d, ConstantInputGivesConstantInterior) {
  const Tensor k = random_tensor({2, 3, 3, 3}, 8);
  const Tensor out = ops::conv2d(Tensor::filled({3, 8, 8}, 0.4), k, {}, {1, 1});
  for (std::size_t o = 0; o < 2; ++o)
    for (std::size_t y = 1; y + 1 < 8; ++y)
      for (std::size_t x = 1; x + 1 < 8; ++x) EXPECT_NEAR(out.at(o, y, x), out.at(o, 1, 1), 1e-12);
}

TEST(Conv2d, ShapeErrors) {
  EXPECT_THROW(ops::conv2d(Tensor({2, 4, 4}), Tensor({1, 3, 3, 3}), {}, {1, 0}), ShapeError);
  EXPECT_THROW(ops::conv2d(Tensor({1, 2, 2}), Tensor({1, 1, 3, 3}), {}, {1, 0}), ShapeError);
  EXPECT_THROW(ops::conv2d(Tensor({1, 4, 4}), Tensor({2, 1, 3, 3}), std::vector<double>{1.0}, {1, 0}),
               ShapeError);
}

TEST(BatchNorm, IdentityParameters) {
  BnParams p = BnParams::identity(2);
  p.sigma_hat = {1.0 - p.eps, 1.0 - p.eps};
  const Tensor z = random_tensor({2, 3, 3}, 9);
  EXPECT_LT(max_abs_diff(ops::batchnorm_infer(z, p), z), 1e-15);
}

TEST(BatchNorm, CenteredInputReturnsBeta) {
  BnParams p = BnParams::identity(1);
  p.mu_hat = {0.5};
  p.gamma = {-3.7};
  p.beta = {0.7};
  const Tensor out = ops::batchnorm_infer(Tensor::filled({1, 2, 2}, 0.5), p);
  for (double v : out.data()) EXPECT_EQ(v, 0.7);
}

TEST(BatchNorm, JustAboveThresholdIsPositive) {
  BnParams p = random_bn(4, 10);
  for (double& g : p.gamma) g = std::abs(g);
  for (std::size_t c = 0; c < 4; ++c) {
    const double theta = zero_threshold(p, c).theta;
    Tensor z({4, 1, 1});
    z[c] = theta + 1e-6;
    EXPECT_GT(ops::batchnorm_infer(z, p)[c], 0.0);
  }
}

TEST(BatchNorm, IsAffine) {
  const BnParams p = random_bn(3, 11);
  const Tensor z1 = random_tensor({3, 4, 4}, 12, -3, 3);
  const Tensor z2 = random_tensor({3, 4, 4}, 13, -3, 3);
  for (double a : {0.0, 0.25, 0.5, 0.9, 1.0}) {
    Tensor mix(z1.dims());
    for (std::size_t i = 0; i < mix.size(); ++i) mix[i] = a * z1[i] + (1 - a) * z2[i];
    const Tensor lhs = ops::batchnorm_infer(mix, p);
    const Tensor b1 = ops::batchnorm_infer(z1, p), b2 = ops::batchnorm_infer(z2, p);
    for (std::size_t i = 0; i < lhs.size(); ++i) EXPECT_NEAR(lhs[i], a * b1[i] + (1 - a) * b2[i], 1e-12);
  }
}

TEST(BatchNorm, ChannelMismatch) {
  EXPECT_THROW(ops::batchnorm_infer(Tensor({3, 2, 2}), BnParams::identity(2)), ShapeError);
}

TEST(Relu, Basics) {
  EXPECT_EQ(ops::relu(Tensor::from_values({3}, {-1, 0, 2})), Tensor::from_values({3}, {0, 0, 2}));
  const Tensor neg = random_tensor({10}, 14, -2, -0.1);
  const Tensor zeroed = ops::relu(neg);
  for (double v : zeroed.data()) EXPECT_EQ(v, 0.0);
  const Tensor x = random_tensor({4, 5}, 15);
  EXPECT_TRUE(bit_equal(ops::relu(ops::relu(x)), ops::relu(x)));
}

TEST(Pooling, SmallExamples) {
  const Tensor q = Tensor::from_values({1, 2, 2}, {1, 2, 3, 4});
  EXPECT_EQ(ops::maxpool2d(q, 2, 2)[0], 4.0);
  const Tensor g = ops::global_avg_pool(Tensor::filled({3, 5, 5}, 0.3));
  ASSERT_EQ(g.dims(), (Shape{3}));
  for (double v : g.data()) EXPECT_NEAR(v, 0.3, 1e-15);
}

TEST(Pooling, AvgPoolMatchesLoopOracle) {
  const Tensor in = random_tensor({2, 7, 6}, 16);
  const std::size_t win = 3, stride = 2;
  const Tensor out = ops::avgpool2d(in, win, stride);
  ASSERT_EQ(out.dims(), (Shape{2, 3, 2}));
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t y = 0; y < 3; ++y)
      for (std::size_t x = 0; x < 2; ++x) {
        double s = 0.0;
        for (std::size_t i = 0; i < win; ++i)
          for (std::size_t j = 0; j < win; ++j) s += in.at(c, y * stride + i, x * stride + j);
        EXPECT_NEAR(out.at(c, y, x), s / 9.0, 1e-14);
      }
}

TEST(LinearAdd, ValuesAndShapeErrors) {
  const Tensor w = Tensor::from_values({2, 3}, {1, 2, 3, -1, 0, 1});
  const Tensor y = ops::linear(Tensor::from_values({3}, {1, 1, 2}), w, std::vector<double>{0.5, 0});
  EXPECT_EQ(y, Tensor::from_values({2}, {9.5, 1}));
  EXPECT_THROW(ops::linear(Tensor({4}), w, {}), ShapeError);
  EXPECT_THROW(ops::add(Tensor({2, 2}), Tensor({4})), ShapeError);
}

// --- finite-difference checks for every vector-Jacobian product ------------------

double dot(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

void expect_grad_close(const std::vector<double>& numeric, const Tensor& analytic, double tol = 1e-6) {
  ASSERT_EQ(numeric.size(), analytic.size());
  for (std::size_t i = 0; i < numeric.size(); ++i)
    EXPECT_LT(std::abs(numeric[i] - analytic[i]), tol * std::max(1.0, std::abs(numeric[i]))) << "coord " << i;
}

TEST(OpGradients, Conv2dInputWeightBias) {
  const Tensor in = random_tensor({2, 5, 5}, 20);
  const Tensor w = random_tensor({3, 2, 3, 3}, 21);
  const ops::ConvGeometry g{2, 1};
  const Tensor probe = random_tensor(ops::conv2d(in, w, {}, g).dims(), 22);
  const Tensor gi = ops::conv2d_grad_input(probe, w, in.dims(), g);
  expect_grad_close(testing::numeric_gradient([&](const Tensor& x) { return dot(probe, ops::conv2d(x, w, {}, g)); }, in), gi);
  const Tensor gw = ops::conv2d_grad_weight(probe, in, w.dims(), g);
  expect_grad_close(testing::numeric_gradient([&](const Tensor& k) { return dot(probe, ops::conv2d(in, k, {}, g)); }, w), gw);
  const Tensor gb = ops::conv2d_grad_bias(probe);
  const Tensor b0({3});
  expect_grad_close(testing::numeric_gradient(
                        [&](const Tensor& b) { return dot(probe, ops::conv2d(in, w, b.values(), g)); }, b0),
                    gb);
}

TEST(OpGradients, BatchNormInputGammaBeta) {
  const BnParams p = random_bn(3, 23);
  const Tensor z = random_tensor({3, 4, 4}, 24);
  const Tensor probe = random_tensor(z.dims(), 25);
  const ops::BnGrads g = ops::batchnorm_backward(probe, z, p);
  expect_grad_close(testing::numeric_gradient([&](const Tensor& x) { return dot(probe, ops::batchnorm_infer(x, p)); }, z),
                    g.input);
  const Tensor gamma = Tensor(Shape{3}, p.gamma);
  expect_grad_close(testing::numeric_gradient(
                        [&](const Tensor& t) {
                          BnParams q = p;
                          q.gamma = t.values();
                          return dot(probe, ops::batchnorm_infer(z, q));
                        },
                        gamma),
                    g.gamma);
  const Tensor beta = Tensor(Shape{3}, p.beta);
  expect_grad_close(testing::numeric_gradient(
                        [&](const Tensor& t) {
                          BnParams q = p;
                          q.beta = t.values();
                          return dot(probe, ops::batchnorm_infer(z, q));
                        },
                        beta),
                    g.beta);
}

TEST(OpGradients, BatchNormInputGradientIsGammaOverSd) {
  const BnParams p = random_bn(3, 26);
  const Tensor z = random_tensor({3, 2, 2}, 27);
  const ops::BnGrads g = ops::batchnorm_backward(Tensor::filled(z.dims(), 1.0), z, p);
  for (std::size_t c = 0; c < 3; ++c)
    for (double v : g.input.channel(c)) EXPECT_EQ(v, p.gamma[c] / std::sqrt(p.sigma_hat[c] + p.eps));
}

TEST(OpGradients, ReluAwayFromKinks) {
  Tensor x = random_tensor({30}, 28);
  for (double& v : x.data())
    if (std::abs(v) < 1e-3) v = 0.5;
  const Tensor probe = random_tensor(x.dims(), 29);
  expect_grad_close(testing::numeric_gradient([&](const Tensor& t) { return dot(probe, ops::relu(t)); }, x),
                    ops::relu_backward(probe, x));
  EXPECT_EQ(ops::relu_backward(Tensor::filled({1}, 1.0), Tensor({1}))[0], 0.0);
}

TEST(OpGradients, Pools) {
  const Tensor in = random_tensor({2, 6, 6}, 30);
  const Tensor pm = random_tensor({2, 3, 3}, 31);
  expect_grad_close(testing::numeric_gradient([&](const Tensor& t) { return dot(pm, ops::maxpool2d(t, 2, 2)); }, in),
                    ops::maxpool2d_backward(pm, in, 2, 2));
  const Tensor pa = random_tensor({2, 2, 2}, 32);
  expect_grad_close(testing::numeric_gradient([&](const Tensor& t) { return dot(pa, ops::avgpool2d(t, 3, 3)); }, in),
                    ops::avgpool2d_backward(pa, in.dims(), 3, 3));
  const Tensor pg = random_tensor({2}, 33);
  expect_grad_close(testing::numeric_gradient([&](const Tensor& t) { return dot(pg, ops::global_avg_pool(t)); }, in),
                    ops::global_avg_pool_backward(pg, in.dims()));
}

TEST(OpGradients, Linear) {
  const Tensor x = random_tensor({5}, 34);
  const Tensor w = random_tensor({3, 5}, 35);
  const Tensor probe = random_tensor({3}, 36);
  const ops::LinearGrads g = ops::linear_backward(probe, x, w);
  expect_grad_close(testing::numeric_gradient([&](const Tensor& t) { return dot(probe, ops::linear(t, w, {})); }, x),
                    g.input);
  expect_grad_close(testing::numeric_gradient([&](const Tensor& t) { return dot(probe, ops::linear(x, t, {})); }, w),
                    g.weight);
  EXPECT_EQ(g.bias, probe);
}

}  // namespace
}  // namespace sponge
