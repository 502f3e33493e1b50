#include <gtest/gtest.h>

#include "oracles.hpp"

using namespace vfn;
using namespace vfn::testing;

TEST(DepthwiseConv2d, MatchesNestedLoopOracle) {
  Rng rng(11);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t N = 1 + rng.index(3), H = 1 + rng.index(7), W = 1 + rng.index(7), C = 1 + rng.index(5);
    const std::size_t k = 1 + 2 * rng.index(4);
    auto x = random_tensor({N, H, W, C}, rng);
    auto ker = random_tensor({k, k, C}, rng);
    EXPECT_LE(max_abs_diff(depthwise_conv2d(x, ker), oracle_dwconv2d(x, ker)), 1e-12) << "trial " << trial;
  }
}

TEST(DepthwiseConv2d, IdentityKernelAndErrors) {
  Rng rng(1);
  auto x = random_tensor({1, 4, 4, 2}, rng);
  auto id = Tensor<double>::zeros({3, 3, 2});
  id.mutable_data()[(1 * 3 + 1) * 2 + 0] = 1.0;
  id.mutable_data()[(1 * 3 + 1) * 2 + 1] = 1.0;
  EXPECT_TRUE(bit_equal(depthwise_conv2d(x, id), x));
  EXPECT_THROW(depthwise_conv2d(x, Tensor<double>::zeros({2, 2, 2})), ConfigError);
  EXPECT_THROW(depthwise_conv2d(x, Tensor<double>::zeros({3, 3, 3})), DimensionError);
}

TEST(DepthwiseConv1d, MatchesOracleOnRank3And5) {
  Rng rng(12);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t B = 1 + rng.index(3), L = 1 + rng.index(9), C = 1 + rng.index(5), k = 1 + 2 * rng.index(3);
    auto ker = random_tensor({k, C}, rng);
    auto x3 = random_tensor({B, L, C}, rng);
    EXPECT_LE(max_abs_diff(depthwise_conv1d(x3, ker), oracle_dwconv1d(x3, ker)), 1e-12);
    auto x5 = random_tensor({B, L, 2, 3, C}, rng);
    EXPECT_LE(max_abs_diff(depthwise_conv1d(x5, ker), oracle_dwconv1d(x5, ker)), 1e-12);
  }
}

TEST(GatedAggregate, MatchesSumOverLevels) {
  Rng rng(13);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t nl = 1 + rng.index(4), C = 1 + rng.index(6);
    const Shape s{2, 1 + rng.index(4), 1 + rng.index(4), C};
    std::vector<Tensor<double>> levels;
    for (std::size_t l = 0; l < nl; ++l) levels.push_back(random_tensor(s, rng));
    Shape gs = s;
    gs.back() = nl;
    auto gates = random_tensor(gs, rng);
    EXPECT_LE(max_abs_diff(gated_aggregate(levels, gates), oracle_gated(levels, gates)), 1e-12);
  }
}

TEST(GatedAggregate, OneHotGateSelectsLevelExactly) {
  Rng rng(14);
  std::vector<Tensor<double>> levels{random_tensor({3, 4}, rng), random_tensor({3, 4}, rng),
                                     random_tensor({3, 4}, rng)};
  for (std::size_t pick = 0; pick < 3; ++pick) {
    auto gates = Tensor<double>::zeros({3, 3});
    for (std::size_t r = 0; r < 3; ++r) gates.mutable_data()[r * 3 + pick] = 1.0;
    EXPECT_TRUE(bit_equal(gated_aggregate(levels, gates), levels[pick]));
  }
}

TEST(Linear, MatchesDotProductsIncludingRowTails) {
  Rng rng(15);
  for (std::size_t M : {1u, 3u, 4u, 5u, 9u}) {
    auto x = random_tensor({M, 7}, rng);
    auto w = random_tensor({7, 5}, rng);
    auto b = random_tensor({5}, rng);
    auto y = linear(x, w, b);
    for (std::size_t i = 0; i < M; ++i)
      for (std::size_t j = 0; j < 5; ++j) {
        double s = b[j];
        for (std::size_t k = 0; k < 7; ++k) s += x[i * 7 + k] * w[k * 5 + j];
        EXPECT_NEAR(y[i * 5 + j], s, 1e-13);
      }
  }
}

TEST(Linear, RowResultDoesNotDependOnPositionInBatch) {
  Rng rng(16);
  auto w = random_tensor({6, 3}, rng);
  auto row = random_tensor({1, 6}, rng);
  auto batch = random_tensor({7, 6}, rng);
  for (std::size_t pos = 0; pos < 7; ++pos) {
    auto b = batch.clone();
    std::copy(row.data().begin(), row.data().end(), b.mutable_data().begin() + static_cast<long>(pos * 6));
    auto y = linear(b, w);
    auto y1 = linear(row, w);
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(y[pos * 3 + j], y1[j]);
  }
}

TEST(Mean, FixedPointReductionIsPermutationInvariantBitwise) {
  Rng rng(17);
  auto x = random_tensor({1, 6, 3}, rng, -1e3, 1e3);
  auto m = mean(x, {1});
  auto r = reverse_frames(x);
  EXPECT_TRUE(bit_equal(m, mean(r, {1})));
  for (std::size_t c = 0; c < 3; ++c) {
    double s = 0;
    for (std::size_t t = 0; t < 6; ++t) s += x[t * 3 + c];
    EXPECT_NEAR(m[c], s / 6, 1e-10);
  }
}

TEST(Mean, FloatSumsAreOrderFreeAndAccurate) {
  Rng rng(19);
  Tensor<float> x({2, 4096});
  for (auto& v : x.mutable_data()) v = static_cast<float>(rng.uniform(-1, 1) * std::pow(10.0, rng.uniform(-6, 3)));
  Tensor<float> r({2, 4096});
  for (std::size_t i = 0; i < 4096; ++i) {
    r.mutable_data()[i] = x[4095 - i];
    r.mutable_data()[4096 + i] = x[4096 + (i * 7 + 3) % 4096];
  }
  auto m = mean(x, {1});
  EXPECT_TRUE(bit_equal(m, mean(r, {1})));
  for (std::size_t b = 0; b < 2; ++b) {
    double s = 0, mag = 0;
    for (std::size_t i = 0; i < 4096; ++i) {
      s += x[b * 4096 + i];
      mag += std::abs(x[b * 4096 + i]);
    }
    EXPECT_LE(std::abs(m[b] - s / 4096), 1e-7 * mag / 4096 + 1e-30);
  }
}

TEST(Mean, LongDoubleReductionKeepsFullPrecision) {
  Rng rng(23);
  auto x = random_tensor({1 << 18}, rng, -1, 1);
  auto m = mean(x, {0});
  long double s = 0;
  for (double v : x.data()) s += v;
  EXPECT_NEAR(m[0], static_cast<double>(s / (1 << 18)), 1e-17);
}

TEST(Mean, NonFiniteValuesPropagate) {
  auto x = Tensor<float>::of({2, 3}, {1.0f, std::numeric_limits<float>::infinity(), 2.0f, 1.0f, NAN, 0.0f});
  auto m = mean(x, {1});
  EXPECT_TRUE(std::isinf(m[0]));
  EXPECT_TRUE(std::isnan(m[1]));
  auto ok = Tensor<float>::of({2, 2}, {1.0f, 2.0f, 0.0f, 0.0f});
  auto z = mean(ok, {1});
  EXPECT_EQ(z[0], 1.5f);
  EXPECT_EQ(z[1], 0.0f);
}

TEST(NormalCdf, SinglePrecisionTracksDouble) {
  std::vector<float> xf(4001), cdf(4001), pdf(4001);
  for (std::size_t i = 0; i < xf.size(); ++i) xf[i] = -10.0f + 0.005f * static_cast<float>(i);
  kernels::normal_cdf(xf.data(), cdf.data(), xf.size());
  kernels::normal_pdf(xf.data(), pdf.data(), xf.size());
  for (std::size_t i = 0; i < xf.size(); ++i) {
    const double x = xf[i];
    EXPECT_NEAR(cdf[i], 0.5 * std::erfc(-x / std::sqrt(2.0)), 3e-7) << x;
    EXPECT_NEAR(pdf[i], std::exp(-0.5 * x * x) / std::sqrt(2 * std::numbers::pi), 2e-7) << x;
  }
  // a lane's value does not depend on where it sits in the buffer
  float one = 0;
  kernels::normal_cdf(xf.data() + 1234, &one, 1);
  EXPECT_EQ(one, cdf[1234]);
}

TEST(Gelu, ExactErfForm) {
  auto x = Tensor<double>::of({3}, {-1.0, 0.0, 1.0});
  auto y = gelu(x);
  EXPECT_NEAR(y[0], -0.15865525393145707, 1e-15);
  EXPECT_EQ(y[1], 0.0);
  EXPECT_NEAR(y[2], 0.8413447460685429, 1e-15);
}

TEST(LayerNorm, NormalizesEachRow) {
  Rng rng(18);
  auto x = random_tensor({4, 16}, rng, -3, 5);
  auto y = layer_norm(x, Tensor<double>::full({16}, 1.0), Tensor<double>::zeros({16}));
  for (std::size_t r = 0; r < 4; ++r) {
    double m = 0, v = 0;
    for (std::size_t c = 0; c < 16; ++c) m += y[r * 16 + c];
    m /= 16;
    for (std::size_t c = 0; c < 16; ++c) v += (y[r * 16 + c] - m) * (y[r * 16 + c] - m);
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(v / 16, 1.0, 1e-3);  // eps = 1e-5 shrinks the variance slightly
  }
}

TEST(Patchify, FeatureOrderIsTimeRowColumnChannel) {
  std::vector<double> v(2 * 4 * 4 * 1);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<double>(i);
  Tensor<double> x({1, 2, 4, 4, 1}, v);
  auto p = patchify(x, 2, 2, 2);  // [1,1,2,2,8]
  ASSERT_EQ(p.shape(), (Shape{1, 1, 2, 2, 8}));
  // token (0,0): t0 y0 x0, t0 y0 x1, t0 y1 x0, t0 y1 x1, then t1 ...
  const double expect[8] = {0, 1, 4, 5, 16, 17, 20, 21};
  for (std::size_t f = 0; f < 8; ++f) EXPECT_EQ(p[f], expect[f]);
  EXPECT_THROW(patchify(x, 3, 2, 2), ConfigError);
}

TEST(Broadcast, AddExpandsSizeOneAxes) {
  auto a = Tensor<double>::of({2, 1}, {1, 2});
  auto b = Tensor<double>::of({1, 3}, {10, 20, 30});
  auto c = add(a, b);
  ASSERT_EQ(c.shape(), (Shape{2, 3}));
  EXPECT_EQ(c[0], 11);
  EXPECT_EQ(c[5], 32);
  EXPECT_THROW(add(a, Tensor<double>::zeros({3, 3})), DimensionError);
}

TEST(Loss, SmoothedTargetsSumToOne) {
  for (std::size_t K : {2u, 4u, 10u, 400u}) {
    for (double eps : {0.0, 0.1, 0.3}) {
      auto t = smoothed_targets<double>({0, static_cast<int>(K - 1)}, K, eps);
      for (std::size_t b = 0; b < 2; ++b) {
        double s = 0;
        for (std::size_t k = 0; k < K; ++k) s += t[b * K + k];
        EXPECT_NEAR(s, 1.0, 4 * K * std::numeric_limits<double>::epsilon());
      }
    }
  }
  EXPECT_THROW(smoothed_targets<double>({4}, 4, 0.1), DimensionError);
}

TEST(Loss, CrossEntropyOfUniformLogitsIsLogK) {
  auto logits = Tensor<double>::zeros({3, 4});
  auto loss = softmax_cross_entropy(logits, std::vector<int>{0, 1, 2}, 0.0);
  EXPECT_NEAR(loss.item(), std::log(4.0), 1e-15);
}
