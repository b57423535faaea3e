// SPDX-License-Identifier: Apache-2.0
//
// Conditional Wasserstein critic objective with gradient penalty, the L1
// reconstruction term, the combined generator objective, and plain MSE.
//
// Sign convention: the critic minimizes  mean D(x, G(x)) - mean D(x, y) + lambda_gp * GP
// and the generator minimizes  -mean D(x, G(x)) + lambda_l1 * L1.
#pragma once

#include <random>
#include <span>
#include <vector>

#include "uwfuse/autodiff.hpp"

namespace uwfuse {

struct LossWeights {
  float lambda_gp = 10.0f;
  float lambda_l1 = 10.0f;
};

struct CriticLoss {
  Tensor total;
  Tensor real;     // mean critic score on (x, y)
  Tensor fake;     // mean critic score on (x, g)
  Tensor penalty;  // unweighted gradient penalty
};

struct GeneratorLoss {
  Tensor total;
  Tensor adv;
  Tensor l1;
};

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(what) + ": shape mismatch between " + to_string(a.shape()) + " and " +
                     to_string(b.shape()));
}

/// One uniform [0, 1) interpolation weight per sample.
template <class Rng>
std::vector<float> draw_interpolation_weights(int batch, Rng& rng) {
  std::vector<float> eps(static_cast<std::size_t>(batch));
  for (float& e : eps) e = static_cast<float>(uniform01(rng));
  return eps;
}

/// Mean over the batch of (||grad_xhat D(x, xhat)||_2 - 1)^2 at
/// xhat = eps * y + (1 - eps) * g. The input gradient is taken with
/// create_graph so the penalty stays differentiable in the critic parameters.
template <class Critic>
Tensor gradient_penalty(Tape& tape, Critic&& critic, const Tensor& x, const Tensor& y, const Tensor& g,
                        std::span<const float> eps) {
  check_same_shape(x, y, "gradient_penalty");
  check_same_shape(y, g, "gradient_penalty");
  if (y.rank() < 1) throw ShapeError("gradient_penalty: expected a batch dimension");
  const int N = y.dim(0);
  if (eps.size() != static_cast<std::size_t>(N))
    throw ShapeError("gradient_penalty: need one interpolation weight per sample");
  for (float e : eps)
    if (!(e >= 0.0f && e <= 1.0f)) throw Error("gradient_penalty: interpolation weight outside [0, 1]");

  const std::size_t per = y.numel() / static_cast<std::size_t>(N);
  std::vector<float> mixed(y.numel());
  auto yv = y.data();
  auto gv = g.data();
  for (int n = 0; n < N; ++n) {
    const float e = eps[static_cast<std::size_t>(n)];
    for (std::size_t i = n * per; i < (n + 1) * per; ++i) mixed[i] = e * yv[i] + (1.0f - e) * gv[i];
  }
  Tensor xhat = tape.leaf(Tensor(y.shape(), std::move(mixed)));
  Tensor scores = critic(x.detach(), xhat);
  if (scores.rank() < 1 || scores.dim(0) != N) throw ShapeError("gradient_penalty: critic output lost the batch");
  // Sum over samples of each sample's mean patch score.
  const float per_sample = static_cast<float>(scores.numel() / static_cast<std::size_t>(N));
  Tensor total = scale(sum(scores), 1.0f / per_sample);
  Tensor grad_xhat = total.requires_grad() ? tape.grad(total, std::span<const Tensor>(&xhat, 1), true)[0]
                                           : Tensor::zeros(xhat.shape());
  Tensor norms = l2_norm_per_sample(grad_xhat);
  return mean(square(add_scalar(norms, -1.0f)));
}

/// Critic objective; `g` must be the generator output (it is detached here).
template <class Critic>
CriticLoss critic_loss(Tape& tape, Critic&& critic, const Tensor& x, const Tensor& y, const Tensor& g,
                       const LossWeights& w, std::span<const float> eps) {
  check_same_shape(x, y, "critic_loss");
  check_same_shape(y, g, "critic_loss");
  CriticLoss out;
  const Tensor fake_in = g.detach();
  out.real = mean(critic(x, y));
  out.fake = mean(critic(x, fake_in));
  out.penalty = w.lambda_gp != 0.0f ? gradient_penalty(tape, critic, x, y, fake_in, eps) : Tensor::scalar(0.0f);
  out.total = add(sub(out.fake, out.real), scale(out.penalty, w.lambda_gp));
  return out;
}

inline Tensor l1_loss(const Tensor& pred, const Tensor& target) {
  check_same_shape(pred, target, "l1_loss");
  return mean(abs(sub(target, pred)));
}

inline Tensor mse_loss(const Tensor& pred, const Tensor& target) {
  check_same_shape(pred, target, "mse_loss");
  return mean(square(sub(pred, target)));
}

/// Generator objective given its output `gx` (linked to the generator's tape)
/// and a critic whose parameters are bound as constants.
template <class Critic>
GeneratorLoss generator_loss(Critic&& critic, const Tensor& x, const Tensor& y, const Tensor& gx,
                             const LossWeights& w) {
  check_same_shape(x, gx, "generator_loss");
  check_same_shape(y, gx, "generator_loss");
  GeneratorLoss out;
  out.adv = neg(mean(critic(x, gx)));
  out.l1 = l1_loss(gx, y);
  out.total = add(out.adv, scale(out.l1, w.lambda_l1));
  return out;
}

}  // namespace uwfuse
