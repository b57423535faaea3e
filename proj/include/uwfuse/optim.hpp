// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "uwfuse/layers.hpp"

namespace uwfuse {

struct AdamState {
  float lr = 2e-4f;
  float beta1 = 0.5f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
  std::int64_t step = 0;
  std::vector<Tensor> m;  // aligned with ParameterStore order
  std::vector<Tensor> v;

  static AdamState for_params(const ParameterStore& params, float lr, float beta1, float beta2,
                              float eps = 1e-8f) {
    AdamState s{lr, beta1, beta2, eps, 0, {}, {}};
    for (const Tensor& p : params.values()) {
      s.m.push_back(Tensor::zeros(p.shape()));
      s.v.push_back(Tensor::zeros(p.shape()));
    }
    return s;
  }

  bool operator==(const AdamState& o) const {
    if (lr != o.lr || beta1 != o.beta1 || beta2 != o.beta2 || eps != o.eps || step != o.step) return false;
    if (m.size() != o.m.size() || v.size() != o.v.size()) return false;
    for (std::size_t i = 0; i < m.size(); ++i)
      if (!m[i].same_values(o.m[i]) || !v[i].same_values(o.v[i])) return false;
    return true;
  }
};

/// One bias-corrected Adam update of every parameter in `params`.
inline void adam_step(AdamState& s, ParameterStore& params, std::span<const Tensor> grads) {
  auto& values = params.mutable_values();
  if (grads.size() != values.size() || s.m.size() != values.size())
    throw ShapeError("adam_step: " + std::to_string(grads.size()) + " gradients for " +
                     std::to_string(values.size()) + " parameters");
  for (std::size_t k = 0; k < values.size(); ++k)
    if (grads[k].shape() != values[k].shape() || s.m[k].shape() != values[k].shape())
      throw ShapeError("adam_step: gradient shape " + to_string(grads[k].shape()) + " does not match parameter " +
                       params.names()[k] + " " + to_string(values[k].shape()));
  s.step += 1;
  const auto t = static_cast<double>(s.step);
  const float bc1 = static_cast<float>(1.0 - std::pow(static_cast<double>(s.beta1), t));
  const float bc2 = static_cast<float>(1.0 - std::pow(static_cast<double>(s.beta2), t));
  for (std::size_t k = 0; k < values.size(); ++k) {
    auto g = grads[k].data();
    auto theta = values[k].mutable_data();
    auto m = s.m[k].mutable_data();
    auto v = s.v[k].mutable_data();
    for (std::size_t i = 0; i < theta.size(); ++i) {
      m[i] = s.beta1 * m[i] + (1.0f - s.beta1) * g[i];
      v[i] = s.beta2 * v[i] + (1.0f - s.beta2) * (g[i] * g[i]);
      const float mhat = m[i] / bc1;
      const float vhat = v[i] / bc2;
      theta[i] -= s.lr * mhat / (std::sqrt(vhat) + s.eps);
    }
  }
}

}  // namespace uwfuse
