// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "critics.hpp"
#include "testing.hpp"

using namespace uwfuse;
using namespace uwfuse::testing;

namespace {

float penalty_value(const std::vector<Tensor>& params, const Tensor& x, const Tensor& y, const Tensor& g,
                    std::span<const float> eps) {
  Tape tape;
  return gradient_penalty(tape, TinyCritic{params}, x, y, g, eps).item();
}

}  // namespace

TEST(GradientPenalty, LinearCriticClosedFormExact) {
  Tensor w = Tensor::zeros({3, 2, 2});
  for (int i : {0, 3, 5, 10}) w.mutable_data()[i] = 0.75f;  // ||w|| = 1.5
  std::mt19937_64 rng(1);
  Tensor x = random_tensor({3, 3, 2, 2}, rng), y = random_tensor({3, 3, 2, 2}, rng), g = random_tensor({3, 3, 2, 2}, rng);
  const std::vector<float> eps{0.1f, 0.5f, 0.9f};
  Tape tape;
  EXPECT_EQ(gradient_penalty(tape, LinearCritic{w}, x, y, g, eps).item(), 0.25f);
}

TEST(GradientPenalty, LinearCriticRandomWeights) {
  std::mt19937_64 rng(2);
  for (int t = 0; t < 20; ++t) {
    Tensor w = random_tensor({3, 4, 4}, rng);
    double n2 = 0.0;
    for (float v : w.data()) n2 += static_cast<double>(v) * v;
    const double want = (std::sqrt(n2) - 1.0) * (std::sqrt(n2) - 1.0);
    Tensor x = random_tensor({2, 3, 4, 4}, rng), y = random_tensor({2, 3, 4, 4}, rng), g = random_tensor({2, 3, 4, 4}, rng);
    Tape tape;
    Tensor gp = gradient_penalty(tape, LinearCritic{w}, x, y, g, draw_interpolation_weights(2, rng));
    EXPECT_NEAR(gp.item(), want, 1e-5 * std::max(1.0, want));
  }
}

TEST(GradientPenalty, ConstantCriticGivesOne) {
  std::mt19937_64 rng(3);
  Tensor x = random_tensor({2, 3, 4, 4}, rng), y = random_tensor({2, 3, 4, 4}, rng), g = random_tensor({2, 3, 4, 4}, rng);
  const std::vector<float> eps{0.3f, 0.7f};
  Tape t1;
  auto off_tape = [](const Tensor& c, const Tensor&) { return Tensor::full({c.dim(0), 1, 2, 2}, 3.0f); };
  EXPECT_EQ(gradient_penalty(t1, off_tape, x, y, g, eps).item(), 1.0f);
  // Linked to x-hat but with zero gradient.
  Tape t2;
  auto flat = [](const Tensor&, const Tensor& v) { return sum_to(scale(v, 0.0f), Shape{v.dim(0), 1, 1, 1}); };
  Tensor gp = gradient_penalty(t2, flat, x, y, g, eps);
  EXPECT_EQ(gp.item(), 1.0f);
}

TEST(GradientPenalty, ParameterGradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 3; ++trial) {
    const std::vector<Tensor> params = tiny_params(rng);
    Tensor x = random_tensor({2, 3, 4, 4}, rng), y = random_tensor({2, 3, 4, 4}, rng), g = random_tensor({2, 3, 4, 4}, rng);
    const std::vector<float> eps = draw_interpolation_weights(2, rng);
    Tape tape;
    std::vector<Tensor> leaves;
    for (const Tensor& p : params) leaves.push_back(tape.leaf(p));
    Tensor gp = gradient_penalty(tape, TinyCritic{leaves}, x, y, g, eps);
    ASSERT_TRUE(std::isfinite(gp.item()));
    auto grads = tape.grad(gp, leaves);
    for (std::size_t k = 0; k < params.size(); ++k) {
      std::vector<double> analytic(grads[k].data().begin(), grads[k].data().end()), numeric;
      for (std::size_t j = 0; j < params[k].numel(); ++j) {
        std::vector<Tensor> a = params, b = params;
        a[k] = params[k].detach();
        b[k] = params[k].detach();
        a[k].mutable_data()[j] += 1e-3f;
        b[k].mutable_data()[j] -= 1e-3f;
        numeric.push_back((static_cast<double>(penalty_value(a, x, y, g, eps)) - penalty_value(b, x, y, g, eps)) /
                          (static_cast<double>(a[k][j]) - b[k][j]));
      }
      EXPECT_LE(norm_rel_error(analytic, numeric), 1e-2) << "param " << k << " trial " << trial;
    }
  }
}

TEST(GradientPenalty, NonNegativeAndFinite) {
  std::mt19937_64 rng(5);
  for (int t = 0; t < 10; ++t) {
    Tensor x = random_tensor({2, 3, 4, 4}, rng), y = random_tensor({2, 3, 4, 4}, rng), g = random_tensor({2, 3, 4, 4}, rng);
    Tape tape;
    std::vector<Tensor> leaves;
    for (const Tensor& p : tiny_params(rng)) leaves.push_back(tape.leaf(p));
    Tensor gp = gradient_penalty(tape, TinyCritic{leaves}, x, y, g, draw_interpolation_weights(2, rng));
    EXPECT_GE(gp.item(), 0.0f);
    for (const Tensor& d : tape.grad(gp, leaves))
      for (float v : d.data()) ASSERT_TRUE(std::isfinite(v));
  }
}

TEST(GradientPenalty, Errors) {
  Tensor a = Tensor::zeros({2, 3, 4, 4});
  Tape tape;
  LinearCritic c{Tensor::ones({3, 4, 4})};
  EXPECT_THROW(gradient_penalty(tape, c, a, a, a, std::vector<float>{0.5f}), ShapeError);
  EXPECT_THROW(gradient_penalty(tape, c, a, a, a, std::vector<float>{0.5f, 1.5f}), Error);
  EXPECT_THROW(gradient_penalty(tape, c, a, a, Tensor::zeros({2, 3, 4, 2}), std::vector<float>{0.5f, 0.5f}),
               ShapeError);
}

TEST(CriticLoss, FixedScoresArithmetic) {
  // Linear critic with ||w|| = 1.2 (penalty 0.04); y and g chosen for mean
  // scores 2.0 and 0.5.
  Tensor w = Tensor::zeros({3, 2, 2});
  w.mutable_data()[0] = 0.72f;
  w.mutable_data()[1] = 0.96f;
  Tensor y = Tensor::zeros({1, 3, 2, 2}), g = Tensor::zeros({1, 3, 2, 2});
  y.mutable_data()[0] = 2.0f / 0.72f;
  g.mutable_data()[1] = 0.5f / 0.96f;
  Tape tape;
  const std::vector<float> eps{0.5f};
  CriticLoss l = critic_loss(tape, LinearCritic{w}, y, y, g, LossWeights{10.0f, 10.0f}, eps);
  EXPECT_NEAR(l.real.item(), 2.0f, 1e-6);
  EXPECT_NEAR(l.fake.item(), 0.5f, 1e-6);
  EXPECT_NEAR(l.penalty.item(), 0.04f, 1e-6);
  EXPECT_NEAR(l.total.item(), -1.1f, 1e-5);
}

TEST(CriticLoss, IdenticalBatchesWithoutPenaltyIsZero) {
  std::mt19937_64 rng(6);
  Tensor x = random_tensor({2, 3, 4, 4}, rng), y = random_tensor({2, 3, 4, 4}, rng);
  Tape tape;
  CriticLoss l = critic_loss(tape, TinyCritic{tiny_params(rng)}, x, y, y, LossWeights{0.0f, 10.0f},
                             std::vector<float>{0.5f, 0.5f});
  EXPECT_EQ(l.total.item(), 0.0f);
}

TEST(CriticLoss, AntisymmetricWithoutPenalty) {
  std::mt19937_64 rng(7);
  for (int t = 0; t < 10; ++t) {
    Tensor x = random_tensor({2, 3, 4, 4}, rng), y = random_tensor({2, 3, 4, 4}, rng), g = random_tensor({2, 3, 4, 4}, rng);
    TinyCritic c{tiny_params(rng)};
    Tape tape;
    const std::vector<float> eps{0.5f, 0.5f};
    const float a = critic_loss(tape, c, x, y, g, LossWeights{0.0f, 10.0f}, eps).total.item();
    const float b = critic_loss(tape, c, x, g, y, LossWeights{0.0f, 10.0f}, eps).total.item();
    EXPECT_EQ(a, -b);
  }
}

TEST(CriticLoss, MatchesRecomputationFromPatchMaps) {
  std::mt19937_64 rng(8);
  Tensor x = random_tensor({2, 3, 4, 4}, rng), y = random_tensor({2, 3, 4, 4}, rng), g = random_tensor({2, 3, 4, 4}, rng);
  TinyCritic c{tiny_params(rng)};
  const std::vector<float> eps{0.25f, 0.75f};
  Tape tape;
  CriticLoss l = critic_loss(tape, c, x, y, g, LossWeights{10.0f, 10.0f}, eps);
  auto avg = [](const Tensor& t) {
    double s = 0.0;
    for (float v : t.data()) s += v;
    return s / static_cast<double>(t.numel());
  };
  Tape t2;
  const double gp = gradient_penalty(t2, c, x, y, g, eps).item();
  const double want = avg(c(x, g)) - avg(c(x, y)) + 10.0 * gp;
  EXPECT_NEAR(l.total.item(), want, 1e-5 * std::max(1.0, std::abs(want)));
}

TEST(CriticLoss, GeneratorOutputIsDetached) {
  std::mt19937_64 rng(9);
  Tape tape;
  Tensor x = random_tensor({1, 3, 4, 4}, rng), y = random_tensor({1, 3, 4, 4}, rng);
  Tensor g = tape.leaf(random_tensor({1, 3, 4, 4}, rng));
  std::vector<Tensor> leaves;
  for (const Tensor& p : tiny_params(rng)) leaves.push_back(tape.leaf(p));
  CriticLoss l = critic_loss(tape, TinyCritic{leaves}, x, y, g, LossWeights{}, std::vector<float>{0.5f});
  Tensor dg = tape.grad(l.total, std::vector<Tensor>{g})[0];
  for (float v : dg.data()) EXPECT_EQ(v, 0.0f);
}

TEST(GeneratorLoss, PerfectGeneratorHasZeroL1) {
  std::mt19937_64 rng(10);
  Tensor x = random_tensor({2, 3, 4, 4}, rng), y = random_tensor({2, 3, 4, 4}, rng);
  GeneratorLoss l = generator_loss(TinyCritic{tiny_params(rng)}, x, y, y, LossWeights{});
  EXPECT_EQ(l.l1.item(), 0.0f);
  EXPECT_EQ(l.total.item(), l.adv.item());
}

TEST(GeneratorLoss, ConstantOffsetArithmetic) {
  Tensor y = Tensor::full({2, 3, 4, 4}, 0.25f), gx = Tensor::full({2, 3, 4, 4}, -0.25f);
  auto zero_critic = [](const Tensor& c, const Tensor&) { return Tensor::zeros({c.dim(0), 1, 1, 1}); };
  GeneratorLoss l = generator_loss(zero_critic, y, y, gx, LossWeights{10.0f, 10.0f});
  EXPECT_EQ(l.adv.item(), 0.0f);
  EXPECT_EQ(l.l1.item(), 0.5f);
  EXPECT_EQ(l.total.item(), 5.0f);
}

TEST(GeneratorLoss, TotalIsAdvPlusWeightedL1BitExact) {
  std::mt19937_64 rng(11);
  for (int t = 0; t < 10; ++t) {
    Tensor x = random_tensor({2, 3, 4, 4}, rng), y = random_tensor({2, 3, 4, 4}, rng), gx = random_tensor({2, 3, 4, 4}, rng);
    GeneratorLoss l = generator_loss(TinyCritic{tiny_params(rng)}, x, y, gx, LossWeights{10.0f, 10.0f});
    EXPECT_EQ(l.total.item(), l.adv.item() + 10.0f * l.l1.item());
  }
}

TEST(GeneratorLoss, GradientsReachGeneratorOutputOnly) {
  std::mt19937_64 rng(12);
  Tape tape;
  Tensor x = random_tensor({1, 3, 4, 4}, rng), y = random_tensor({1, 3, 4, 4}, rng);
  Tensor gx = tape.leaf(random_tensor({1, 3, 4, 4}, rng));
  GeneratorLoss l = generator_loss(TinyCritic{tiny_params(rng)}, x, y, gx, LossWeights{});
  Tensor d = tape.grad(l.total, std::vector<Tensor>{gx})[0];
  double s = 0.0;
  for (float v : d.data()) s += std::abs(v);
  EXPECT_GT(s, 0.0);
}

TEST(PixelLosses, L1AndMseMatchDirectSums) {
  std::mt19937_64 rng(13);
  Tensor a = random_tensor({2, 3, 5, 5}, rng), b = random_tensor({2, 3, 5, 5}, rng);
  double l1 = 0.0, l2 = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double d = static_cast<double>(b[i]) - a[i];
    l1 += std::abs(d);
    l2 += d * d;
  }
  l1 /= static_cast<double>(a.numel());
  l2 /= static_cast<double>(a.numel());
  EXPECT_NEAR(l1_loss(a, b).item(), l1, 1e-6 * l1);
  EXPECT_NEAR(mse_loss(a, b).item(), l2, 1e-6 * l2);
}

TEST(PixelLosses, ClosedForms) {
  Tensor a = Tensor::full({1, 3, 2, 2}, 0.3f);
  EXPECT_EQ(mse_loss(a, a).item(), 0.0f);
  EXPECT_NEAR(mse_loss(a, Tensor::full({1, 3, 2, 2}, 0.4f)).item(), 0.01f, 1e-7);
  EXPECT_THROW(mse_loss(a, Tensor::zeros({1, 3, 2, 1})), ShapeError);
  EXPECT_THROW(l1_loss(a, Tensor::zeros({1, 3, 2, 1})), ShapeError);
}
