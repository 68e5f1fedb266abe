// Copyright (c) 2026, The vlmae-desk Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "grad_check.hpp"
#include "vlmae/errors.hpp"
#include "vlmae/ops.hpp"

namespace vlmae {
namespace {

using testing::random_tensor;

void expect_values(const Tensor& t, const std::vector<double>& want, double tol = 0.0) {
  ASSERT_EQ(t.size(), want.size());
  for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(t[i], want[i], tol) << "entry " << i;
}

TEST(Matmul, Identity) {
  const Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  const Tensor m = Tensor::from({2, 2}, {1, 2, 3, 4});
  expect_values(matmul(eye, m), {1, 2, 3, 4});
}

TEST(Matmul, Projector) {
  const Tensor p = Tensor::from({2, 2}, {1, 0, 0, 0});
  const Tensor m = Tensor::from({2, 2}, {5, 6, 7, 8});
  expect_values(matmul(p, m), {5, 6, 0, 0});
}

TEST(Matmul, ShapeErrorNamesBothShapes) {
  try {
    matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3}));
    FAIL();
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
  }
}

TEST(Matmul, GradientThreeByFourTimesFourByTwo) {
  Rng rng(3);
  const Tensor w = random_tensor({3, 2}, rng);
  const auto res = testing::grad_check(
      [&](const std::vector<Tensor>& in) { return sum(mul(matmul(in[0], in[1]), w)); },
      {random_tensor({3, 4}, rng), random_tensor({4, 2}, rng)});
  EXPECT_LT(res.max_rel_error, 1e-6) << res.worst;
}

TEST(Matmul, Associative) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const Tensor a = random_tensor({3, 5}, rng), b = random_tensor({5, 4}, rng), c = random_tensor({4, 2}, rng);
    const Tensor left = matmul(matmul(a, b), c);
    const Tensor right = matmul(a, matmul(b, c));
    for (std::size_t i = 0; i < left.size(); ++i) EXPECT_NEAR(left[i], right[i], 1e-9);
  }
}

TEST(Softmax, Symmetric) { expect_values(softmax(Tensor::from({2}, {0, 0}), 0), {0.5, 0.5}); }

TEST(Softmax, LargeShiftDoesNotOverflow) {
  expect_values(softmax(Tensor::from({2}, {1e4, 1e4}), 0), {0.5, 0.5});
}

TEST(Softmax, HighPrecisionReference) {
  // 40-digit reference values of exp(k) / (e + e^2 + e^3).
  expect_values(softmax(Tensor::from({3}, {1, 2, 3}), 0),
                {0.0900305731703804579980221, 0.2447284710547976524729596, 0.6652409557748218895290183}, 1e-15);
}

TEST(Softmax, SlicesSumToOneOnEveryAxis) {
  Rng rng(11);
  const Tensor x = random_tensor({3, 4, 5}, rng, 5.0);
  for (std::size_t axis = 0; axis < 3; ++axis) {
    const Tensor y = softmax(x, axis);
    const std::size_t len = x.dim(axis);
    std::size_t inner = 1;
    for (std::size_t d = axis + 1; d < 3; ++d) inner *= x.dim(d);
    const std::size_t outer = x.size() / (len * inner);
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t i = 0; i < inner; ++i) {
        double s = 0.0;
        for (std::size_t k = 0; k < len; ++k) {
          const double v = y[o * len * inner + k * inner + i];
          EXPECT_GE(v, 0.0);
          s += v;
        }
        EXPECT_NEAR(s, 1.0, 1e-9);
      }
    }
  }
}

TEST(Softmax, AxisOutOfRangeIsDimensionError) { EXPECT_THROW(softmax(Tensor::zeros({2}), 1), DimensionError); }

TEST(LayerNorm, ConstantInputGivesZeros) {
  const Tensor y = layernorm(Tensor::from({3}, {2.5, 2.5, 2.5}), Tensor::full({3}, 1.0), Tensor::zeros({3}));
  expect_values(y, {0, 0, 0});
}

TEST(LayerNorm, TwoPoint) {
  const Tensor y = layernorm(Tensor::from({2}, {1, 3}), Tensor::full({2}, 1.0), Tensor::zeros({2}));
  expect_values(y, {-1, 1}, 1e-6);
}

TEST(LayerNorm, NormalisedMoments) {
  Rng rng(5);
  const std::size_t d = 7;
  const Tensor x = random_tensor({6, d}, rng, 3.0);
  const Tensor y = layernorm(x, Tensor::full({d}, 1.0), Tensor::zeros({d}));
  for (std::size_t r = 0; r < 6; ++r) {
    double mu = 0.0, var = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += y[r * d + j];
    mu /= d;
    for (std::size_t j = 0; j < d; ++j) var += (y[r * d + j] - mu) * (y[r * d + j] - mu);
    var /= d;
    EXPECT_NEAR(mu, 0.0, 1e-7);
    EXPECT_NEAR(var, 1.0, 1e-5);
  }
}

TEST(LayerNorm, GradientOfRandomVector) {
  Rng rng(8);
  const Tensor w = random_tensor({6}, rng);
  const auto res = testing::grad_check(
      [&](const std::vector<Tensor>& in) { return sum(mul(layernorm(in[0], in[1], in[2]), w)); },
      {random_tensor({6}, rng), random_tensor({6}, rng), random_tensor({6}, rng)});
  EXPECT_LT(res.max_rel_error, 1e-5) << res.worst;
}

TEST(Gelu, Zero) { EXPECT_EQ(gelu(Tensor::scalar(0.0)).item(), 0.0); }

TEST(Gelu, SaturatesToIdentity) { EXPECT_NEAR(gelu(Tensor::scalar(10.0)).item(), 10.0, 1e-6); }

TEST(Gelu, HighPrecisionReferenceOfTanhForm) {
  // 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))) at x = 0.5, to 25 digits.
  EXPECT_NEAR(gelu(Tensor::scalar(0.5)).item(), 0.3457140098251439220377573, 1e-15);
}

TEST(Gelu, NegativeTailIsSmall) {
  EXPECT_NEAR(gelu(Tensor::scalar(-10.0)).item(), 0.0, 1e-12);
  EXPECT_NEAR(gelu(Tensor::scalar(-40.0)).item(), 0.0, 1e-12);
}

TEST(Elementwise, Values) {
  const Tensor a = Tensor::from({2}, {1, 4});
  const Tensor b = Tensor::from({2}, {2, 8});
  expect_values(add(a, b), {3, 12});
  expect_values(sub(a, b), {-1, -4});
  expect_values(mul(a, b), {2, 32});
  expect_values(div(a, b), {0.5, 0.5});
  expect_values(scale(a, -2), {-2, -8});
}

TEST(Broadcast, TrailingDimensionsOnly) {
  const Tensor a = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  expect_values(add(a, Tensor::from({3}, {10, 20, 30})), {11, 22, 33, 14, 25, 36});
  expect_values(mul(a, Tensor::scalar(2)), {2, 4, 6, 8, 10, 12});
  EXPECT_THROW(add(a, Tensor::from({2}, {1, 2})), DimensionError);
}

TEST(Transpose, SwapsLastTwoAxes) {
  const Tensor a = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  const Tensor t = transpose(a);
  EXPECT_EQ(t.shape(), (Shape{3, 2}));
  expect_values(t, {1, 4, 2, 5, 3, 6});
}

TEST(Concat, AlongEachAxis) {
  const Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
  const Tensor b = Tensor::from({2, 1}, {9, 8});
  const Tensor parts1[] = {a, b};
  expect_values(concat(parts1, 1), {1, 2, 9, 3, 4, 8});
  const Tensor parts0[] = {a, transpose(b)};
  expect_values(concat(parts0, 0), {1, 2, 3, 4, 9, 8});
  EXPECT_THROW(concat(parts1, 0), DimensionError);
}

TEST(Gather, RowsWithRepeats) {
  const Tensor a = Tensor::from({3, 2}, {1, 2, 3, 4, 5, 6});
  const std::size_t idx[] = {2, 0, 2};
  expect_values(take_rows(a, idx), {5, 6, 1, 2, 5, 6});
  const std::size_t bad[] = {3};
  EXPECT_THROW(take_rows(a, bad), DimensionError);
}

TEST(Gather, RepeatedRowsAccumulateGradient) {
  Tensor a = Tensor::from({3, 2}, {1, 2, 3, 4, 5, 6}, true);
  const std::size_t idx[] = {2, 0, 2};
  backward(sum(take_rows(a, idx)));
  expect_values(Tensor::from({6}, a.grad()), {1, 1, 0, 0, 2, 2});
}

TEST(Embedding, LooksUpRows) {
  const Tensor table = Tensor::from({3, 2}, {0, 1, 10, 11, 20, 21});
  const std::size_t ids[] = {1, 1, 2};
  expect_values(embedding(table, ids), {10, 11, 10, 11, 20, 21});
}

TEST(Reductions, SumAndMean) {
  const Tensor a = Tensor::from({2, 2}, {1, 2, 3, 6});
  EXPECT_EQ(sum(a).item(), 12.0);
  EXPECT_EQ(mean(a).item(), 3.0);
}

TEST(CrossEntropy, UniformLogitsGiveLogClasses) {
  const std::size_t labels[] = {0, 2};
  EXPECT_NEAR(cross_entropy(Tensor::zeros({2, 3}), labels).item(), std::log(3.0), 1e-15);
}

TEST(CrossEntropy, LabelOutOfRange) {
  const std::size_t labels[] = {3};
  EXPECT_ANY_THROW(cross_entropy(Tensor::zeros({1, 3}), labels));
}

TEST(Regression, MseAndMae) {
  const Tensor p = Tensor::from({2, 2}, {1, 2, 3, 4});
  const Tensor t = Tensor::from({2, 2}, {0, 2, 5, 4});
  EXPECT_DOUBLE_EQ(mse(p, t).item(), (1.0 + 4.0) / 4.0);
  EXPECT_DOUBLE_EQ(mae(p, t).item(), (1.0 + 2.0) / 4.0);
}

TEST(Attention, RowsAreStochasticAndMaskedKeysGetZero) {
  Rng rng(21);
  const std::size_t batch = 2, sq = 3, sk = 5, width = 8, heads = 2;
  std::vector<std::uint8_t> valid(batch * sk, 1);
  valid[3] = 0;
  valid[sk + 1] = 0;
  valid[sk + 4] = 0;
  std::vector<double> probs;
  attention(random_tensor({batch, sq, width}, rng, 3.0), random_tensor({batch, sk, width}, rng, 3.0),
            random_tensor({batch, sk, width}, rng), valid, heads, &probs);
  ASSERT_EQ(probs.size(), batch * heads * sq * sk);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t q = 0; q < sq; ++q) {
        const double* row = probs.data() + ((b * heads + h) * sq + q) * sk;
        double s = 0.0;
        for (std::size_t k = 0; k < sk; ++k) {
          if (!valid[b * sk + k]) {
            EXPECT_EQ(row[k], 0.0);
          }
          s += row[k];
        }
        EXPECT_NEAR(s, 1.0, 1e-9);
      }
    }
  }
}

TEST(Attention, MaskedKeysDoNotChangeOutput) {
  Rng rng(22);
  const Tensor q = random_tensor({1, 2, 4}, rng);
  const Tensor k = random_tensor({1, 3, 4}, rng);
  const Tensor v = random_tensor({1, 3, 4}, rng);
  const std::uint8_t valid[] = {1, 1, 0};
  const Tensor y1 = attention(q, k, v, valid, 2);
  Tensor k2 = k.detach(), v2 = v.detach();
  for (std::size_t j = 8; j < 12; ++j) {
    k2.data()[j] = 100.0;
    v2.data()[j] = -50.0;
  }
  const Tensor y2 = attention(q, k2, v2, valid, 2);
  for (std::size_t i = 0; i < y1.size(); ++i) EXPECT_EQ(y1[i], y2[i]);
}

TEST(L2Normalize, UnitRows) {
  Rng rng(9);
  const Tensor y = l2_normalize(random_tensor({4, 5}, rng));
  for (std::size_t r = 0; r < 4; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < 5; ++j) s += y[r * 5 + j] * y[r * 5 + j];
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Linear, EqualsMatmulPlusBias) {
  Rng rng(10);
  const Tensor x = random_tensor({2, 3, 4}, rng), w = random_tensor({4, 5}, rng), b = random_tensor({5}, rng);
  const Tensor y1 = linear(x, w, b);
  const Tensor y2 = add(matmul(x, w), b);
  for (std::size_t i = 0; i < y1.size(); ++i) EXPECT_NEAR(y1[i], y2[i], 1e-12);
}

}  // namespace
}  // namespace vlmae
