// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "kurtq/quant.hpp"
#include "kurtq/rng.hpp"
#include "oracles.hpp"

namespace kurtq::quant {
namespace {

TEST(Scale, MaxAbsExamples) {
  EXPECT_FLOAT_EQ(compute_scale_maxabs(Tensor::vector({0.1f, -0.2f, 1.27f})), 0.01f);
  EXPECT_EQ(compute_scale_maxabs(Tensor::zeros({4})), 1.0f);
  EXPECT_EQ(compute_scale_maxabs(Tensor::vector({-254.0f})), 2.0f);
}

TEST(Quantize, Examples) {
  auto q = quantize(Tensor::vector({0.1f, -0.2f, 1.27f}), 0.01f);
  EXPECT_EQ(q.values, (std::vector<std::int8_t>{10, -20, 127}));
  EXPECT_EQ(quantize(Tensor::vector({2 * 0.5f * 127}), 0.5f).values[0], 127);
  EXPECT_EQ(quantize(Tensor::vector({-2 * 0.5f * 127}), 0.5f).values[0], -127);
  auto z = quantize(Tensor::zeros({5}), 0.3f);
  for (auto v : z.values) EXPECT_EQ(v, 0);
}

TEST(Quantize, TiesGoToEven) {
  auto q = quantize(Tensor::vector({0.5f, 1.5f, 2.5f, -0.5f, -2.5f}), 1.0f);
  EXPECT_EQ(q.values, (std::vector<std::int8_t>{0, 2, 2, 0, -2}));
}

TEST(Quantize, RejectsNonPositiveScale) {
  EXPECT_THROW(quantize(Tensor::vector({1}), 0.0f), ParameterError);
  EXPECT_THROW(quantize(Tensor::vector({1}), -1.0f), ParameterError);
  EXPECT_THROW(fake_quant_values(Tensor::vector({1}), 0.0f), ParameterError);
}

TEST(Dequantize, Examples) {
  QTensor q{{3}, {10, -20, 127}, 0.01f};
  auto t = dequantize(q);
  EXPECT_FLOAT_EQ(t[0], 0.1f);
  EXPECT_FLOAT_EQ(t[1], -0.2f);
  EXPECT_FLOAT_EQ(t[2], 1.27f);
  EXPECT_EQ(dequantize(QTensor{{2}, {0, 0}, 0.7f}), Tensor::zeros({2}));
}

TEST(Quantize, RoundTripBoundAndSymmetry) {
  Rng rng(17);
  for (int trial = 0; trial < 500; ++trial) {
    Tensor t = rand_tensor(rng, {1 + rng.below(64)}, NormalDist{0, std::exp(rng.uniform(-8, 4))});
    const float s = compute_scale_maxabs(t);
    QTensor q = quantize(t, s);
    QTensor qn = quantize(scale(t, -1.0f), s);
    for (std::size_t i = 0; i < t.numel(); ++i) {
      ASSERT_NE(q.values[i], -128);
      const double err = std::abs(double(t[i]) - double(q.values[i]) * double(s));
      ASSERT_LE(err, double(s) / 2) << "trial " << trial;
      ASSERT_EQ(qn.values[i], -q.values[i]);
    }
  }
}

TEST(FakeQuant, Examples) {
  EXPECT_NEAR(fake_quant_values(Tensor::vector({0.104f}), 0.01f)[0], 0.10f, 1e-7);
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    Tensor t = rand_tensor(rng, {32}, NormalDist{0, 3});
    const float s = float(rng.uniform(0.001, 0.1));
    Tensor once = fake_quant_values(t, s);
    EXPECT_EQ(fake_quant_values(once, s), once);
  }
}

TEST(FakeQuant, StraightThroughGradient) {
  ad::Tape tape;
  ad::Var x = tape.leaf(Tensor::vector({0.104f, 10.0f, -1.27f, -1.28f}));
  ad::Var y = ad::fake_quant(tape, x, 0.01f);
  ad::Var w = tape.constant(Tensor::vector({2, 3, 4, 5}));
  tape.backward(ad::sum(tape, ad::mul(tape, y, w)));
  // In range passes upstream, out of range (|x| > 1.27) is blocked.
  EXPECT_EQ(tape.grad(x), Tensor::vector({2, 0, 4, 0}));
}

TEST(FakeQuant, GradientEqualsMaskedIdentity) {
  Rng rng(21);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor xv = rand_tensor(rng, {6, 5}, NormalDist{0, 2});
    Tensor up = rand_tensor(rng, {6, 5}, NormalDist{});
    const float s = float(rng.uniform(0.005, 0.02));
    ad::Tape tape;
    ad::Var x = tape.leaf(xv);
    tape.backward(ad::sum(tape, ad::mul(tape, ad::fake_quant(tape, x, s), tape.constant(up))));
    for (std::size_t i = 0; i < xv.numel(); ++i) {
      const float expected = std::abs(xv[i]) <= 127 * s ? up[i] : 0.0f;
      ASSERT_EQ(tape.grad(x)[i], expected);
    }
  }
}

TEST(Int8Matmul, Examples) {
  QTensor a{{1, 1}, {127}, 1.0f / 127};
  auto out = int8_matmul(a, a);
  EXPECT_NEAR(out[0], 1.0f, 1e-6);
  QTensor z{{1, 1}, {0}, 0.5f};
  EXPECT_EQ(int8_matmul(z, a)[0], 0.0f);
  EXPECT_THROW(int8_matmul(QTensor{{2, 3}, std::vector<std::int8_t>(6), 1}, QTensor{{2, 3}, std::vector<std::int8_t>(6), 1}),
               DimensionError);
}

TEST(Int8Matmul, MatchesDequantizedReference) {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = trial % 2 ? 8 : 16;
    QTensor a = quantize_maxabs(rand_tensor(rng, {n, n}, NormalDist{}));
    QTensor b = quantize_maxabs(rand_tensor(rng, {n, n}, UniformDist{-3, 3}));
    Tensor got = int8_matmul(a, b);
    const auto ref = testing::reference_matmul(dequantize(a), dequantize(b));
    double num = 0, den = 0;
    for (std::size_t i = 0; i < ref.size(); ++i) {
      num = std::max(num, std::abs(got[i] - ref[i]));
      den = std::max(den, std::abs(ref[i]));
    }
    EXPECT_LT(num / den, 1e-5);
  }
}

TEST(Int8Matmul, EqualsFakeQuantMatmul) {
  Rng rng(6);
  for (int trial = 0; trial < 100; ++trial) {
    Tensor a = rand_tensor(rng, {16, 16}, NormalDist{});
    Tensor b = rand_tensor(rng, {16, 16}, NormalDist{0, 0.02});
    const float sa = compute_scale_maxabs(a), sb = compute_scale_maxabs(b);
    Tensor got = int8_matmul(quantize(a, sa), quantize(b, sb));
    Tensor ref = matmul(fake_quant_values(a, sa), fake_quant_values(b, sb));
    for (std::size_t i = 0; i < ref.numel(); ++i) {
      EXPECT_LE(std::abs(got[i] - ref[i]), 1e-5 * (std::abs(ref[i]) + 127 * 127 * sa * sb));
    }
  }
}

TEST(Calibrator, Examples) {
  ActCalibrator pure(1.0f);
  for (float v : {1.0f, 3.0f, 2.0f}) pure.observe(Tensor::vector({v}));
  EXPECT_EQ(pure.running_absmax(), 3.0f);

  ActCalibrator decayed(0.9f);
  decayed.observe(Tensor::vector({10}));
  decayed.observe(Tensor::zeros({3}));
  EXPECT_FLOAT_EQ(decayed.running_absmax(), 9.0f);

  ActCalibrator fresh;
  fresh.observe(Tensor::zeros({2}));
  EXPECT_EQ(fresh.scale(), 1.0f);
  EXPECT_THROW(ActCalibrator(0.0f), ParameterError);
}

TEST(Calibrator, PureMaxIsMonotone) {
  Rng rng(8);
  ActCalibrator c(1.0f);
  float prev = 0;
  for (int i = 0; i < 200; ++i) {
    c.observe(rand_tensor(rng, {4}, NormalDist{0, rng.uniform(0.1, 5)}));
    EXPECT_GE(c.running_absmax(), prev);
    prev = c.running_absmax();
  }
}

}  // namespace
}  // namespace kurtq::quant
