// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <random>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "uwfuse/autodiff.hpp"

namespace uwfuse {

/// Named parameter values in creation order.
class ParameterStore {
 public:
  void add(std::string name, Tensor value) {
    if (index_.count(name)) throw Error("duplicate parameter '" + name + "'");
    index_.emplace(name, values_.size());
    names_.push_back(std::move(name));
    values_.push_back(value.detach());
  }

  bool contains(std::string_view name) const { return index_.count(std::string(name)) != 0; }

  const Tensor& get(std::string_view name) const { return values_.at(position(name)); }

  void set(std::string_view name, Tensor value) {
    Tensor& slot = values_.at(position(name));
    if (slot.shape() != value.shape())
      throw ShapeError("parameter '" + std::string(name) + "' expects shape " + to_string(slot.shape()) +
                       ", got " + to_string(value.shape()));
    slot = value.detach();
  }

  const std::vector<std::string>& names() const { return names_; }
  const std::vector<Tensor>& values() const { return values_; }
  std::vector<Tensor>& mutable_values() { return values_; }
  std::size_t size() const { return names_.size(); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const Tensor& t : values_) n += t.numel();
    return n;
  }

  bool operator==(const ParameterStore& other) const {
    if (names_ != other.names_) return false;
    for (std::size_t i = 0; i < values_.size(); ++i)
      if (!values_[i].same_values(other.values_[i])) return false;
    return true;
  }

 private:
  std::size_t position(std::string_view name) const {
    auto it = index_.find(std::string(name));
    if (it == index_.end()) throw Error("unknown parameter '" + std::string(name) + "'");
    return it->second;
  }

  std::vector<std::string> names_;
  std::vector<Tensor> values_;
  std::map<std::string, std::size_t> index_;
};

/// Parameters as seen by one forward pass: leaves of `tape`, or constants when
/// no tape is given.
class BoundParams {
 public:
  BoundParams(const ParameterStore& store, Tape* tape) : store_(&store) {
    bound_.reserve(store.size());
    for (const Tensor& v : store.values()) bound_.push_back(tape ? tape->leaf(v) : v.detach());
  }

  const Tensor& operator()(std::string_view name) const {
    const auto& names = store_->names();
    for (std::size_t i = 0; i < names.size(); ++i)
      if (names[i] == name) return bound_[i];
    throw Error("unknown parameter '" + std::string(name) + "'");
  }

  const std::vector<Tensor>& tensors() const { return bound_; }

 private:
  const ParameterStore* store_;
  std::vector<Tensor> bound_;
};

struct Conv2dParams {
  Tensor weight;  // (C_out, C_in, K, K); for transposed use (C_in, C_out, K, K)
  Tensor bias;
  int stride = 1;
  int padding = 0;
};

struct NormParams {
  Tensor gain;
  Tensor shift;
};

struct ResidualParams {
  Conv2dParams conv1;
  NormParams norm1;
  Conv2dParams conv2;
  NormParams norm2;
};

/// Global-to-local fusion: a 1x1 projection from c_g to c_i channels.
struct FusionUnit {
  Conv2dParams proj;
};

inline Tensor conv2d(const Tensor& x, const Conv2dParams& p) {
  if (x.rank() == 4 && p.weight.rank() == 4 && x.dim(1) != p.weight.dim(1))
    throw ShapeError("conv2d: input has " + std::to_string(x.dim(1)) + " channels, weight expects " +
                     std::to_string(p.weight.dim(1)));
  return conv2d(x, p.weight, p.bias, p.stride, p.padding);
}

inline Tensor conv_transpose2d(const Tensor& x, const Conv2dParams& p, int out_h = 0, int out_w = 0) {
  return conv_transpose2d(x, p.weight, p.bias, p.stride, p.padding, out_h, out_w);
}

inline Tensor instance_norm(const Tensor& x, const Tensor& gain, const Tensor& shift, float eps = 1e-5f) {
  if (x.rank() != 4) throw ShapeError("instance_norm: expected (N,C,H,W), got " + to_string(x.shape()));
  const int N = x.dim(0), C = x.dim(1);
  const int hw = x.dim(2) * x.dim(3);
  if (hw < 2) throw ShapeError("instance_norm: needs H*W >= 2, got " + to_string(x.shape()));
  if (gain.shape() != Shape{C} || shift.shape() != Shape{C})
    throw ShapeError("instance_norm: gain/shift must have shape (" + std::to_string(C) + ",)");
  const Shape stats{N, C, 1, 1};
  const float inv = 1.0f / static_cast<float>(hw);
  Tensor centered = sub(x, scale(sum_to(x, stats), inv));
  Tensor var = scale(sum_to(square(centered), stats), inv);
  Tensor normed = div(centered, sqrt(add_scalar(var, eps)));
  return add(mul(normed, reshape(gain, {1, C, 1, 1})), reshape(shift, {1, C, 1, 1}));
}

inline Tensor instance_norm(const Tensor& x, const NormParams& p, float eps = 1e-5f) {
  return instance_norm(x, p.gain, p.shift, eps);
}

/// out = x + F(x), F = conv3x3 -> norm -> leaky_relu -> conv3x3 -> norm.
inline Tensor residual_block(const Tensor& x, const ResidualParams& p, float slope = 0.2f) {
  Tensor h = leaky_relu(instance_norm(conv2d(x, p.conv1), p.norm1), slope);
  h = instance_norm(conv2d(h, p.conv2), p.norm2);
  if (h.shape() != x.shape())
    throw ShapeError("residual_block: branch changed shape " + to_string(x.shape()) + " -> " +
                     to_string(h.shape()));
  return add(x, h);
}

/// Concatenates f_l with the projected global descriptor copied to every
/// spatial position of f_l.
inline Tensor fuse_global(const Tensor& f_l, const Tensor& f_g, const FusionUnit& u) {
  if (f_l.rank() != 4 || f_g.rank() != 4)
    throw ShapeError("fuse_global: expected rank-4 features, got " + to_string(f_l.shape()) + " and " +
                     to_string(f_g.shape()));
  if (f_g.dim(2) != 1 || f_g.dim(3) != 1)
    throw ShapeError("fuse_global: global features must be 1x1, got " + to_string(f_g.shape()));
  const Tensor& w = u.proj.weight;
  if (w.rank() != 4 || w.dim(2) != 1 || w.dim(3) != 1 || u.proj.stride != 1 || u.proj.padding != 0)
    throw ShapeError("fuse_global: projection must be a 1x1 stride-1 convolution");
  if (w.dim(0) != f_l.dim(1))
    throw ShapeError("fuse_global: projection outputs " + std::to_string(w.dim(0)) +
                     " channels but local features have " + std::to_string(f_l.dim(1)));
  if (w.dim(1) != f_g.dim(1))
    throw ShapeError("fuse_global: projection expects " + std::to_string(w.dim(1)) +
                     " global channels, got " + std::to_string(f_g.dim(1)));
  if (f_l.dim(0) != f_g.dim(0)) throw ShapeError("fuse_global: batch mismatch");
  Tensor projected = conv2d(f_g, u.proj);
  return concat({f_l, broadcast_spatial(projected, f_l.dim(2), f_l.dim(3))});
}

/// Zero-mean normal initialization with the given standard deviation.
template <class Rng>
Tensor normal_tensor(Shape shape, float stddev, Rng& rng) {
  std::vector<float> v(numel(shape));
  for (float& x : v) x = static_cast<float>(standard_normal(rng) * stddev);
  return Tensor(std::move(shape), std::move(v));
}

}  // namespace uwfuse
