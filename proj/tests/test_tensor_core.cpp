#include <gtest/gtest.h>

#include <numeric>

#include "idn/accounting.hpp"
#include "idn/ops.hpp"
#include "idn/random.hpp"
#include "oracles.hpp"

using namespace idn;

namespace {

std::vector<double> to_vec(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

}  // namespace

TEST(Tensor, DataLengthMatchesDims) {
  Tensor t({2, 3, 4, 5});
  EXPECT_EQ(t.size(), 120u);
  EXPECT_THROW(Tensor({1, 2, 2, 2}, std::vector<float>(7)), ShapeError);
}

TEST(Tensor, RowMajorNchwLayout) {
  Tensor t({2, 3, 4, 5});
  EXPECT_EQ(t.offset(1, 2, 3, 4), 119u);
  EXPECT_EQ(t.offset(0, 1, 0, 0), 20u);
}

TEST(ConvDepthwise, DeltaKernelIsIdentity) {
  Tensor x({1, 1, 3, 3}, 1.0f);
  Tensor w({1, 1, 3, 3});
  w.at(0, 0, 1, 1) = 1;
  const Tensor y = ops::conv2d_depthwise<float>(x, w, {}, {1, 1});
  EXPECT_EQ(y.dims(), x.dims());
  EXPECT_EQ(max_abs_diff(x, y), 0.0f);
}

TEST(ConvDepthwise, StrideTwoShape) {
  Tensor x({1, 8, 224, 224});
  const Tensor y = ops::conv2d_depthwise<float>(x, Tensor({8, 1, 3, 3}), {}, {2, 1});
  EXPECT_EQ(y.dims(), (Dims{1, 8, 112, 112}));
}

TEST(ConvDepthwise, ChannelMismatchNamesDimension) {
  try {
    ops::conv2d_depthwise<float>(Tensor({1, 4, 5, 5}), Tensor({3, 1, 3, 3}), {}, {1, 1});
    FAIL() << "expected a shape error";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("channel"), std::string::npos) << e.what();
  }
}

TEST(ConvDepthwise, MatchesNestedLoopOracle) {
  Rng rng(1);
  const Tensor x = rand_uniform<float>({1, 2, 8, 8}, rng);
  const Tensor w = rand_uniform<float>({2, 1, 3, 3}, rng);
  const Tensor b = rand_uniform<float>({1, 2, 1, 1}, rng);
  const Tensor y = ops::conv2d_depthwise<float>(x, w, b.values(), {1, 1});
  EXPECT_LE(max_abs_diff(y, oracle::conv_depthwise(x, w, to_vec(b), 1, 1)), 1e-5f);
}

TEST(ConvDepthwise, ChannelPermutationEquivariance) {
  Rng rng(2);
  const Tensor x = rand_uniform<float>({1, 4, 6, 6}, rng);
  const Tensor w = rand_uniform<float>({4, 1, 3, 3}, rng);
  const std::size_t perm[4] = {2, 0, 3, 1};
  Tensor xp(x.dims()), wp(w.dims());
  for (std::size_t c = 0; c < 4; ++c) {
    std::copy(x.plane(0, perm[c]), x.plane(0, perm[c]) + 36, xp.plane(0, c));
    std::copy(w.plane(perm[c], 0), w.plane(perm[c], 0) + 9, wp.plane(c, 0));
  }
  const Tensor y = ops::conv2d_depthwise<float>(x, w, {}, {2, 1});
  const Tensor yp = ops::conv2d_depthwise<float>(xp, wp, {}, {2, 1});
  for (std::size_t c = 0; c < 4; ++c) {
    for (std::size_t i = 0; i < 9; ++i) EXPECT_EQ(yp.plane(0, c)[i], y.plane(0, perm[c])[i]);
  }
}

TEST(ConvPointwise, IdentityMatrix) {
  Rng rng(3);
  const Tensor x = rand_uniform<float>({1, 4, 5, 5}, rng);
  Tensor w({4, 4, 1, 1});
  for (std::size_t i = 0; i < 4; ++i) w.at(i, i, 0, 0) = 1;
  EXPECT_EQ(max_abs_diff(ops::conv2d_pointwise<float>(x, w, {}), x), 0.0f);
}

TEST(ConvPointwise, ZeroKernelGivesBias) {
  const Tensor x({1, 3, 4, 4}, 2.0f);
  const std::vector<float> b = {0.5f, -1.0f};
  const Tensor y = ops::conv2d_pointwise<float>(x, Tensor({2, 3, 1, 1}), b);
  for (std::size_t j = 0; j < 2; ++j)
    for (std::size_t i = 0; i < 16; ++i) EXPECT_EQ(y.plane(0, j)[i], b[j]);
}

TEST(ConvPointwise, MatchesPerPixelMatVec) {
  Rng rng(4);
  const Tensor x = rand_uniform<float>({1, 4, 6, 6}, rng);
  const Tensor w = rand_uniform<float>({8, 4, 1, 1}, rng);
  EXPECT_LE(max_abs_diff(ops::conv2d_pointwise<float>(x, w, {}), oracle::conv_pointwise(x, w, {})), 1e-5f);
}

TEST(ConvPointwise, ChannelMismatchRejected) {
  EXPECT_THROW(ops::conv2d_pointwise<float>(Tensor({1, 3, 2, 2}), Tensor({2, 4, 1, 1}), {}), ShapeError);
}

TEST(ConvStandard, OneByOneEqualsPointwise) {
  Rng rng(5);
  const Tensor x = rand_uniform<float>({2, 5, 7, 7}, rng);
  const Tensor w = rand_uniform<float>({3, 5, 1, 1}, rng);
  const Tensor b = rand_uniform<float>({1, 3, 1, 1}, rng);
  const Tensor a = ops::conv2d_standard<float>(x, w, b.values(), {1, 0});
  const Tensor p = ops::conv2d_pointwise<float>(x, w, b.values());
  EXPECT_LE(max_abs_diff(a, p), 1e-6f);
}

TEST(ConvStandard, DiagonalDeltaReproducesInput) {
  Rng rng(6);
  const Tensor x = rand_uniform<float>({1, 3, 5, 5}, rng);
  Tensor w({3, 3, 3, 3});
  for (std::size_t c = 0; c < 3; ++c) w.at(c, c, 1, 1) = 1;
  EXPECT_EQ(max_abs_diff(ops::conv2d_standard<float>(x, w, {}, {1, 1}), x), 0.0f);
}

TEST(ConvStandard, MatchesNestedLoopOracle) {
  Rng rng(7);
  for (int rep = 0; rep < 20; ++rep) {
    const std::size_t k = rep % 2 ? 3 : 4, s = 1 + rep % 2, p = rep % 3 ? 1 : 0;
    const Tensor x = rand_uniform<float>({2, 3, 9, 9}, rng);
    const Tensor w = rand_uniform<float>({4, 3, k, k}, rng);
    const Tensor b = rand_uniform<float>({1, 4, 1, 1}, rng);
    const Tensor y = ops::conv2d_standard<float>(x, w, b.values(), {s, p});
    EXPECT_LE(max_abs_diff(y, oracle::conv_standard(x, w, to_vec(b), s, p)), 1e-5f);
  }
}

TEST(ConvTranspose, MatchesScatterOracle) {
  Rng rng(8);
  const Tensor x = rand_uniform<float>({1, 3, 4, 5}, rng);
  const Tensor w = rand_uniform<float>({3, 2, 3, 3}, rng);
  const Tensor y = ops::conv_transpose2d<float>(x, w, {}, 2);
  EXPECT_LE(max_abs_diff(y, oracle::conv_transpose(x, w, 2)), 1e-5f);
}

TEST(Ops, UpsampleFactorOneIsIdentity) {
  Rng rng(9);
  const Tensor x = rand_uniform<float>({1, 2, 3, 4}, rng);
  EXPECT_EQ(max_abs_diff(ops::upsample_nearest(x, 1), x), 0.0f);
}

TEST(Ops, UpsampleNearestRepeats) {
  Tensor x({1, 1, 1, 2});
  x[0] = 1, x[1] = 2;
  const Tensor y = ops::upsample_nearest(x, 2);
  EXPECT_EQ(y.dims(), (Dims{1, 1, 2, 4}));
  EXPECT_EQ(to_vec(y), (std::vector<double>{1, 1, 2, 2, 1, 1, 2, 2}));
}

TEST(Ops, ActivationFixedPoints) {
  Tensor x({1, 1, 1, 2});
  x[0] = 0, x[1] = -1;
  EXPECT_FLOAT_EQ(ops::activation(x, Activation::sigmoid)[0], 0.5f);
  EXPECT_FLOAT_EQ(ops::activation(x, Activation::tanh)[0], 0.0f);
  EXPECT_FLOAT_EQ(ops::activation(x, Activation::relu)[1], 0.0f);
  EXPECT_FLOAT_EQ(ops::activation(x, Activation::leaky_relu)[1], -0.2f);
}

TEST(Ops, FullyConnectedIdentity) {
  Rng rng(10);
  const Tensor v = rand_uniform<float>({1, 6, 1, 1}, rng);
  Tensor w({6, 6, 1, 1});
  for (std::size_t i = 0; i < 6; ++i) w.at(i, i, 0, 0) = 1;
  EXPECT_EQ(max_abs_diff(ops::fully_connected<float>(v, w, {}), v), 0.0f);
}

TEST(Ops, Deterministic) {
  Rng rng(11);
  const Tensor x = rand_uniform<float>({1, 4, 16, 16}, rng);
  const Tensor w = rand_uniform<float>({6, 4, 3, 3}, rng);
  const Tensor a = ops::conv2d_standard<float>(x, w, {}, {2, 1});
  const Tensor b = ops::conv2d_standard<float>(x, w, {}, {2, 1});
  EXPECT_EQ(std::memcmp(a.data(), b.data(), a.size() * 4), 0);
}

TEST(Accounting, DepthwiseParams) {
  LayerSpec s{"dw", LayerKind::depthwise, 8, 8, 3, 1, 1, true};
  EXPECT_EQ(count_params(s), 80u);
}

TEST(Accounting, PointwiseMacs) {
  LayerSpec s{"pw", LayerKind::pointwise, 8, 16, 1, 1, 0, false};
  EXPECT_EQ(count_macs(s, {1, 8, 4, 4}), 2048u);
}

TEST(Accounting, StandardOneByOneEqualsPointwise) {
  LayerSpec st{"st", LayerKind::standard, 12, 7, 1, 1, 0, true};
  LayerSpec pw{"pw", LayerKind::pointwise, 12, 7, 1, 1, 0, true};
  EXPECT_EQ(count_params(st), count_params(pw));
  EXPECT_EQ(count_macs(st, {1, 12, 9, 9}), count_macs(pw, {1, 12, 9, 9}));
}

TEST(Accounting, StandardMacsByHand) {
  // 3x3, 4 -> 5 channels, stride 2 pad 1 on 8x8: 4x4 outputs.
  LayerSpec s{"st", LayerKind::standard, 4, 5, 3, 2, 1, true};
  EXPECT_EQ(count_macs(s, {1, 4, 8, 8}), 5u * 16 * 4 * 9);
  EXPECT_EQ(count_params(s), 5u * 4 * 9 + 5);
}

TEST(Accounting, FreeLayersCostNothing) {
  LayerSpec up{"up", LayerKind::upsample, 4, 4};
  up.factor = 2;
  LayerSpec act{"act", LayerKind::activation, 4, 4};
  EXPECT_EQ(count_params(up) + count_params(act), 0u);
  EXPECT_EQ(count_macs(up, {1, 4, 8, 8}) + count_macs(act, {1, 4, 8, 8}), 0u);
}
