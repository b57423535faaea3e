// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "testing.hpp"

using namespace uwfuse;
using namespace uwfuse::testing;

TEST(Conv2d, OneByOneScales) {
  Tensor y = conv2d(Tensor::from({1, 1, 1, 1}, {3.0f}), Conv2dParams{Tensor::from({1, 1, 1, 1}, {2.0f}),
                                                                       Tensor::zeros({1}), 1, 0});
  EXPECT_EQ(y.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_EQ(y.item(), 6.0f);
}

TEST(Conv2d, CenterTapIsIdentity) {
  std::mt19937_64 rng(1);
  Tensor x = random_tensor({1, 1, 5, 6}, rng);
  Tensor w = Tensor::zeros({1, 1, 3, 3});
  w.mutable_data()[4] = 1.0f;
  Tensor y = conv2d(x, Conv2dParams{w, Tensor::zeros({1}), 1, 1});
  EXPECT_TRUE(y.same_values(x));
}

TEST(Conv2d, MatchesNestedLoopOracleExactly) {
  std::mt19937_64 rng(2);
  Tensor x = random_tensor({1, 1, 4, 4}, rng);
  Tensor w = random_tensor({1, 1, 3, 3}, rng);
  Tensor y = conv2d(x, w, Tensor(), 1, 0);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 2, 2}));
  // Same tap order as the kernel, accumulated in float.
  for (int oy = 0; oy < 2; ++oy)
    for (int ox = 0; ox < 2; ++ox) {
      float s = 0.0f;
      for (int ky = 0; ky < 3; ++ky)
        for (int kx = 0; kx < 3; ++kx) s += x.at(0, 0, oy + ky, ox + kx) * w.at(0, 0, ky, kx);
      EXPECT_EQ(y.at(0, 0, oy, ox), s);
    }
}

TEST(Conv2d, RandomGeometriesMatchDoubleOracle) {
  std::mt19937_64 rng(3);
  for (int i = 0; i < 50; ++i) {
    const int N = rand_int(rng, 1, 2), C = rand_int(rng, 1, 4), O = rand_int(rng, 1, 4);
    const int H = rand_int(rng, 2, 9), W = rand_int(rng, 2, 9), s = rand_int(rng, 1, 3), p = rand_int(rng, 0, 2);
    const int K = rand_int(rng, 1, std::min(H, W) + 2 * p > 5 ? 5 : std::min(H, W) + 2 * p);
    Tensor x = random_tensor({N, C, H, W}, rng), w = random_tensor({O, C, K, K}, rng), b = random_tensor({O}, rng);
    Tensor y = conv2d(x, w, b, s, p);
    auto ref = reference_conv2d(x, w, b, s, p);
    ASSERT_EQ(y.numel(), ref.size());
    for (std::size_t k = 0; k < ref.size(); ++k) EXPECT_NEAR(y.data()[k], ref[k], 1e-5);
  }
}

TEST(Conv2d, ShapeErrors) {
  EXPECT_THROW(conv2d(Tensor::zeros({1, 2, 4, 4}), Tensor::zeros({1, 3, 3, 3}), Tensor(), 1, 0), ShapeError);
  EXPECT_THROW(conv2d(Tensor::zeros({1, 1, 2, 2}), Tensor::zeros({1, 1, 5, 5}), Tensor(), 1, 0), ShapeError);
}

TEST(ConvTranspose2d, SingleTapSpreadsValue) {
  Tensor y = conv_transpose2d(Tensor::from({1, 1, 1, 1}, {1.5f}), Tensor::ones({1, 1, 2, 2}), Tensor::zeros({1}),
                              2, 0);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 2, 2}));
  for (float v : y.data()) EXPECT_EQ(v, 1.5f);
}

TEST(ConvTranspose2d, ZeroInputGivesBias) {
  std::mt19937_64 rng(4);
  Tensor b = random_tensor({3}, rng);
  Tensor y = conv_transpose2d(Tensor::zeros({1, 2, 3, 3}), random_tensor({2, 3, 4, 4}, rng), b, 2, 1);
  EXPECT_EQ(y.shape(), (Shape{1, 3, 6, 6}));
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < 36; ++i) EXPECT_EQ(y.data()[c * 36 + i], b[c]);
}

TEST(ConvTranspose2d, IsAdjointOfConv2d) {
  std::mt19937_64 rng(5);
  for (int i = 0; i < 50; ++i) {
    const int N = rand_int(rng, 1, 2), C = rand_int(rng, 1, 4), O = rand_int(rng, 1, 4);
    const int H = rand_int(rng, 3, 10), W = rand_int(rng, 3, 10), s = rand_int(rng, 1, 3), p = rand_int(rng, 0, 2);
    const int K = rand_int(rng, 1, std::min(5, std::min(H, W) + 2 * p));
    // Non-negative operands keep both inner products free of cancellation.
    Tensor x = random_tensor({N, C, H, W}, rng, 0.0f, 1.0f), w = random_tensor({O, C, K, K}, rng, 0.0f, 1.0f);
    Tensor cx = conv2d(x, w, Tensor(), s, p);
    Tensor y = random_tensor(cx.shape(), rng, 0.0f, 1.0f);
    Tensor ty = conv_transpose2d(y, w, Tensor(), s, p, H, W);
    ASSERT_EQ(ty.shape(), x.shape());
    const double lhs = weighted_sum(cx, y), rhs = weighted_sum(x, ty);
    EXPECT_LE(std::abs(lhs - rhs), 1e-5 * std::max(std::abs(lhs), 1e-3)) << lhs << " vs " << rhs;
  }
}

TEST(Activations, Definitions) {
  Tensor x = Tensor::from({3}, {1.0f, -1.0f, 0.0f});
  Tensor l = leaky_relu(x, 0.2f);
  EXPECT_EQ(l[0], 1.0f);
  EXPECT_EQ(l[1], -0.2f);
  EXPECT_EQ(relu(x)[1], 0.0f);
  EXPECT_EQ(tanh(x)[2], 0.0f);
}

TEST(Activations, LeakyReluGradientAtMinusTwo) {
  Tape tape;
  Tensor x = tape.leaf(Tensor::scalar(-2.0f));
  EXPECT_EQ(tape.grad(leaky_relu(x, 0.2f), std::vector<Tensor>{x})[0].item(), 0.2f);
  const float h = 1e-3f;
  const double fd = (leaky_relu(Tensor::scalar(-2.0f + h), 0.2f).item() -
                     static_cast<double>(leaky_relu(Tensor::scalar(-2.0f - h), 0.2f).item())) /
                    (2.0 * h);
  EXPECT_NEAR(fd, 0.2, 1e-4);
}

TEST(InstanceNorm, ConstantChannelIsZero) {
  Tensor y = instance_norm(Tensor::full({1, 2, 4, 4}, 0.5f), Tensor::ones({2}), Tensor::zeros({2}));
  for (float v : y.data()) EXPECT_EQ(v, 0.0f);
  // Mean rounding leaves a residue far below the eps-limited scale.
  y = instance_norm(Tensor::full({1, 2, 3, 3}, 0.7f), Tensor::ones({2}), Tensor::zeros({2}));
  for (float v : y.data()) EXPECT_LE(std::abs(v), 1e-4f);
}

TEST(InstanceNorm, MatchesTwoPassOracle) {
  std::mt19937_64 rng(6);
  Tensor x = random_tensor({2, 3, 4, 4}, rng, -2.0f, 3.0f);
  Tensor gain = random_tensor({3}, rng, 0.5f, 2.0f), shift = random_tensor({3}, rng);
  Tensor y = instance_norm(x, gain, shift);
  Tensor plain = instance_norm(x, Tensor::ones({3}), Tensor::zeros({3}));
  for (int n = 0; n < 2; ++n)
    for (int c = 0; c < 3; ++c) {
      double m = 0.0, v = 0.0, pm = 0.0;
      for (int i = 0; i < 16; ++i) m += x.at(n, c, i / 4, i % 4);
      m /= 16;
      for (int i = 0; i < 16; ++i) v += (x.at(n, c, i / 4, i % 4) - m) * (x.at(n, c, i / 4, i % 4) - m);
      v /= 16;
      for (int i = 0; i < 16; ++i) {
        const double want = (x.at(n, c, i / 4, i % 4) - m) / std::sqrt(v + 1e-5) * gain[c] + shift[c];
        const double got = y.at(n, c, i / 4, i % 4);
        EXPECT_LE(std::abs(got - want), 1e-5 * std::max(1.0, std::abs(want)));
        pm += plain.at(n, c, i / 4, i % 4);
      }
      EXPECT_LE(std::abs(pm / 16), 1e-6);
    }
}

TEST(InstanceNorm, RejectsSinglePixel) {
  EXPECT_THROW(instance_norm(Tensor::zeros({1, 2, 1, 1}), Tensor::ones({2}), Tensor::zeros({2})), ShapeError);
}

ResidualParams zero_residual(int C) {
  return ResidualParams{Conv2dParams{Tensor::zeros({C, C, 3, 3}), Tensor::zeros({C}), 1, 1},
                        NormParams{Tensor::ones({C}), Tensor::zeros({C})},
                        Conv2dParams{Tensor::zeros({C, C, 3, 3}), Tensor::zeros({C}), 1, 1},
                        NormParams{Tensor::zeros({C}), Tensor::zeros({C})}};
}

TEST(ResidualBlock, ZeroBranchIsIdentity) {
  std::mt19937_64 rng(7);
  Tensor x = random_tensor({1, 8, 16, 16}, rng);
  ResidualParams p = zero_residual(8);
  p.norm2.gain = Tensor::ones({8});
  Tensor y = residual_block(x, p);
  EXPECT_EQ(y.shape(), x.shape());
  EXPECT_TRUE(y.same_values(x));
}

TEST(ResidualBlock, ShapePreservedWithRandomWeights) {
  std::mt19937_64 rng(8);
  ResidualParams p{Conv2dParams{random_tensor({8, 8, 3, 3}, rng), random_tensor({8}, rng), 1, 1},
                   NormParams{Tensor::ones({8}), Tensor::zeros({8})},
                   Conv2dParams{random_tensor({8, 8, 3, 3}, rng), random_tensor({8}, rng), 1, 1},
                   NormParams{Tensor::ones({8}), Tensor::zeros({8})}};
  EXPECT_EQ(residual_block(random_tensor({1, 8, 16, 16}, rng), p).shape(), (Shape{1, 8, 16, 16}));
}

TEST(ResidualBlock, ZeroBranchJacobianIsIdentity) {
  std::mt19937_64 rng(9);
  Tensor x0 = random_tensor({1, 2, 3, 3}, rng);
  const ResidualParams p = zero_residual(2);
  Tape tape;
  Tensor x = tape.leaf(x0);
  Tensor W = random_tensor(x0.shape(), rng);
  Tensor g = tape.grad(sum(mul(residual_block(x, p), W)), std::vector<Tensor>{x})[0];
  EXPECT_TRUE(g.same_values(W));
  const float h = 1e-3f;
  for (std::size_t j = 0; j < x0.numel(); ++j) {
    Tensor a = x0.detach(), b = x0.detach();
    a.mutable_data()[j] += h;
    b.mutable_data()[j] -= h;
    const double fd = (weighted_sum(residual_block(a, p), W) - weighted_sum(residual_block(b, p), W)) /
                      (static_cast<double>(a[j]) - b[j]);
    EXPECT_NEAR(fd, W[j], 1e-3);
  }
}

TEST(FuseGlobal, HandComputedConstantEleven) {
  Tensor f_l = Tensor::from({1, 1, 2, 2}, {0.1f, 0.2f, 0.3f, 0.4f});
  Tensor f_g = Tensor::from({1, 2, 1, 1}, {1.0f, 2.0f});
  FusionUnit u{Conv2dParams{Tensor::from({1, 2, 1, 1}, {3.0f, 4.0f}), Tensor::zeros({1}), 1, 0}};
  Tensor y = fuse_global(f_l, f_g, u);
  ASSERT_EQ(y.shape(), (Shape{1, 2, 2, 2}));
  for (int i = 0; i < 4; ++i) {
    EXPECT_EQ(y.data()[i], f_l.data()[i]);
    EXPECT_EQ(y.data()[4 + i], 11.0f);
  }
}

TEST(FuseGlobal, ZeroGlobalFeaturesAppendZeros) {
  std::mt19937_64 rng(10);
  const int c = 3;
  Tensor eye = Tensor::zeros({c, c, 1, 1});
  for (int i = 0; i < c; ++i) eye.mutable_data()[i * c + i] = 1.0f;
  Tensor f_l = random_tensor({1, c, 4, 4}, rng);
  Tensor y = fuse_global(f_l, Tensor::zeros({1, c, 1, 1}), FusionUnit{Conv2dParams{eye, Tensor::zeros({c}), 1, 0}});
  for (std::size_t i = 0; i < f_l.numel(); ++i) {
    EXPECT_EQ(y.data()[i], f_l.data()[i]);
    EXPECT_EQ(y.data()[f_l.numel() + i], 0.0f);
  }
}

TEST(FuseGlobal, ShapeContract) {
  std::mt19937_64 rng(11);
  FusionUnit u{Conv2dParams{random_tensor({16, 128, 1, 1}, rng), Tensor::zeros({16}), 1, 0}};
  EXPECT_EQ(fuse_global(Tensor::zeros({1, 16, 8, 8}), Tensor::zeros({1, 128, 1, 1}), u).shape(),
            (Shape{1, 32, 8, 8}));
}

TEST(FuseGlobal, InvariantsOnRandomConfigurations) {
  std::mt19937_64 rng(12);
  for (int i = 0; i < 100; ++i) {
    const int n = rand_int(rng, 1, 3), ci = rand_int(rng, 1, 8), cg = rand_int(rng, 1, 8);
    const int h = rand_int(rng, 1, 8), w = rand_int(rng, 1, 8);
    Tensor f_l = random_tensor({n, ci, h, w}, rng), f_g = random_tensor({n, cg, 1, 1}, rng);
    FusionUnit u{Conv2dParams{random_tensor({ci, cg, 1, 1}, rng), random_tensor({ci}, rng), 1, 0}};
    Tensor y = fuse_global(f_l, f_g, u);
    ASSERT_EQ(y.shape(), (Shape{n, 2 * ci, h, w}));
    for (int b = 0; b < n; ++b)
      for (int c = 0; c < ci; ++c)
        for (int yy = 0; yy < h; ++yy)
          for (int xx = 0; xx < w; ++xx) {
            ASSERT_EQ(y.at(b, c, yy, xx), f_l.at(b, c, yy, xx));
            ASSERT_EQ(y.at(b, ci + c, yy, xx), y.at(b, ci + c, 0, 0));
          }
  }
}

TEST(FuseGlobal, Errors) {
  FusionUnit u{Conv2dParams{Tensor::zeros({2, 3, 1, 1}), Tensor::zeros({2}), 1, 0}};
  EXPECT_THROW(fuse_global(Tensor::zeros({1, 4, 2, 2}), Tensor::zeros({1, 3, 1, 1}), u), ShapeError);
  EXPECT_THROW(fuse_global(Tensor::zeros({1, 2, 2, 2}), Tensor::zeros({1, 3, 2, 2}), u), ShapeError);
  FusionUnit big{Conv2dParams{Tensor::zeros({2, 3, 3, 3}), Tensor::zeros({2}), 1, 1}};
  EXPECT_THROW(fuse_global(Tensor::zeros({1, 2, 2, 2}), Tensor::zeros({1, 3, 1, 1}), big), ShapeError);
}

TEST(Init, NormalTensorIsSeededAndScaled) {
  std::mt19937_64 a(5), b(5);
  Tensor x = normal_tensor({4000}, 0.02f, a);
  EXPECT_TRUE(x.same_values(normal_tensor({4000}, 0.02f, b)));
  double s = 0.0, ss = 0.0;
  for (float v : x.data()) {
    s += v;
    ss += static_cast<double>(v) * v;
  }
  const double m = s / 4000, sd = std::sqrt(ss / 4000 - m * m);
  EXPECT_NEAR(m, 0.0, 0.002);
  EXPECT_NEAR(sd, 0.02, 0.002);
}
