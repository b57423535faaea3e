// SPDX-License-Identifier: Apache-2.0
//
// Reverse-mode automatic differentiation over dense f32 tensors.
//
// Every primitive's backward rule is written with the same public primitives
// used in forward passes. Running backward with create_graph=true therefore
// records the gradient computation on the tape, and the gradients can be
// differentiated again.
#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "uwfuse/kernels.hpp"
#include "uwfuse/tensor.hpp"

namespace uwfuse {

struct OpAttrs {
  float scalar = 0.0f;
  int stride = 1;
  int padding = 0;
  int kernel = 0;
  int out_h = 0;
  int out_w = 0;
  bool trans_a = false;
  bool trans_b = false;
  int start = 0;
  int count = 0;
  Shape shape;
};

struct Primitive {
  const char* name;
  Tensor (*forward)(std::span<const Tensor> in, const OpAttrs& attrs);
  /// One entry per input; undefined where `needed[i]` is false. Null for
  /// primitives whose output is treated as a constant (masks).
  std::vector<Tensor> (*backward)(std::span<const Tensor> in, const Tensor& out, const Tensor& grad,
                                  const OpAttrs& attrs, const std::vector<bool>& needed);
};

/// Gradients of leaves, keyed by tape node id.
using GradMap = std::map<int, Tensor>;

/// Explicit per-step computation tape. Tensors returned by a tape keep a raw
/// pointer to it, so the tape must outlive every tensor it produced.
class Tape {
 public:
  struct Node {
    const Primitive* op = nullptr;  // null for leaves
    std::vector<Tensor> inputs;
    OpAttrs attrs;
    Tensor value;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Registers `value` as a differentiable leaf.
  Tensor leaf(const Tensor& value) {
    if (!value.defined()) throw Error("leaf: undefined tensor");
    nodes_.push_back(Node{nullptr, {}, {}, value.detach()});
    return link(static_cast<int>(nodes_.size()) - 1);
  }

  Tensor record(const Primitive& op, std::span<const Tensor> inputs, const OpAttrs& attrs, Tensor value) {
    nodes_.push_back(Node{&op, std::vector<Tensor>(inputs.begin(), inputs.end()), attrs, value.detach()});
    return link(static_cast<int>(nodes_.size()) - 1);
  }

  std::size_t size() const { return nodes_.size(); }
  const Node& node(int id) const { return nodes_.at(static_cast<std::size_t>(id)); }

  /// d(loss)/d(leaf) for every leaf reached from `loss`.
  GradMap backward(const Tensor& loss, bool create_graph = false) {
    std::vector<Tensor> grads = sweep(loss, create_graph);
    GradMap out;
    for (std::size_t i = 0; i < grads.size(); ++i)
      if (grads[i].defined() && nodes_[i].op == nullptr) out.emplace(static_cast<int>(i), grads[i]);
    return out;
  }

  /// d(loss)/d(t) for each t in `wrt` (zeros where t does not influence loss).
  std::vector<Tensor> grad(const Tensor& loss, std::span<const Tensor> wrt, bool create_graph = false) {
    std::vector<Tensor> grads = sweep(loss, create_graph);
    std::vector<Tensor> out;
    out.reserve(wrt.size());
    for (const Tensor& t : wrt) {
      if (t.tape() != this) throw Error("grad: tensor is not on this tape");
      const auto id = static_cast<std::size_t>(t.node());
      out.push_back(id < grads.size() && grads[id].defined() ? grads[id] : Tensor::zeros(t.shape()));
    }
    return out;
  }

  /// Recomputes every recorded primitive from its stored inputs and checks the
  /// result is bit-identical to the recorded output.
  bool replay_matches() const {
    for (const Node& n : nodes_) {
      if (!n.op) continue;
      if (!n.op->forward(n.inputs, n.attrs).same_values(n.value)) return false;
    }
    return true;
  }

 private:
  Tensor link(int id) const {
    Tensor t = nodes_[static_cast<std::size_t>(id)].value;
    t.tape_ = const_cast<Tape*>(this);
    t.node_ = id;
    return t;
  }

  std::vector<Tensor> sweep(const Tensor& loss, bool create_graph);

  std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Public primitive API.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor square(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor abs(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor leaky_relu(const Tensor& a, float slope);
Tensor relu(const Tensor& a);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor sum_to(const Tensor& a, const Shape& shape);
Tensor broadcast_to(const Tensor& a, const Shape& shape);
Tensor reshape(const Tensor& a, const Shape& shape);
Tensor concat(std::span<const Tensor> parts);
Tensor slice_channels(const Tensor& a, int start, int count);
Tensor pad(const Tensor& a, int padding);
Tensor crop(const Tensor& a, int padding);
Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a = false, bool trans_b = false);
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int padding);
Tensor conv_transpose2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int padding,
                        int out_h = 0, int out_w = 0);
Tensor conv2d_weight_grad(const Tensor& x, const Tensor& grad_out, int kernel, int stride, int padding);

// Non-differentiable helpers used inside backward rules.
Tensor leaky_mask(const Tensor& a, float slope);
Tensor sign(const Tensor& a);

inline Tensor concat(std::initializer_list<Tensor> parts) {
  return concat(std::span<const Tensor>(parts.begin(), parts.size()));
}
inline Tensor scale(const Tensor& a, float c) { return mul(a, Tensor::scalar(c)); }
inline Tensor add_scalar(const Tensor& a, float c) { return add(a, Tensor::scalar(c)); }
inline Tensor neg(const Tensor& a) { return scale(a, -1.0f); }

/// (N, C, 1, 1) -> (N, C, h, w) by copying each channel value h*w times.
Tensor broadcast_spatial(const Tensor& g, int target_h, int target_w);

/// Per-sample L2 norm over all non-batch elements, shape (N,). A zero sample
/// has norm 0 and a finite gradient.
Tensor l2_norm_per_sample(const Tensor& t);

/// Generic entry point by primitive name.
Tensor record(std::string_view name, std::span<const Tensor> inputs, const OpAttrs& attrs = {});

// ---------------------------------------------------------------------------

namespace detail {

inline Tape* common_tape(std::span<const Tensor> inputs, const char* name) {
  Tape* tape = nullptr;
  for (const Tensor& t : inputs) {
    if (!t.defined()) continue;
    if (t.tape()) {
      if (tape && tape != t.tape()) throw Error(std::string(name) + ": inputs live on different tapes");
      tape = t.tape();
    }
  }
  return tape;
}

inline Tensor apply(const Primitive& op, std::span<const Tensor> inputs, const OpAttrs& attrs = {}) {
  Tensor value = op.forward(inputs, attrs);
  Tape* tape = op.backward ? common_tape(inputs, op.name) : nullptr;
  if (!tape) return value;
  return tape->record(op, inputs, attrs, std::move(value));
}

inline Tensor apply(const Primitive& op, std::initializer_list<Tensor> inputs, const OpAttrs& attrs = {}) {
  return apply(op, std::span<const Tensor>(inputs.begin(), inputs.size()), attrs);
}

inline void require_rank(const Tensor& t, int rank, const char* name) {
  if (t.rank() != rank)
    throw ShapeError(std::string(name) + ": expected rank " + std::to_string(rank) + ", got shape " +
                     to_string(t.shape()));
}

template <class F>
Tensor binary_forward(const Tensor& a, const Tensor& b, const char* name, F f) {
  if (a.shape() == b.shape()) {
    std::vector<float> out(a.numel());
    auto x = a.data();
    auto y = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i], y[i]);
    return Tensor(a.shape(), std::move(out));
  }
  Shape shape = kernels::broadcast_shapes(a.shape(), b.shape(), name);
  std::vector<float> out(numel(shape));
  auto x = a.data();
  auto y = b.data();
  if (shape == a.shape() && b.numel() == 1) {
    const float s = y[0];
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i], s);
  } else if (shape == b.shape() && a.numel() == 1) {
    const float s = x[0];
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(s, y[i]);
  } else {
    auto ia = kernels::broadcast_index(a.shape(), shape);
    auto ib = kernels::broadcast_index(b.shape(), shape);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[ia[i]], y[ib[i]]);
  }
  return Tensor(std::move(shape), std::move(out));
}

template <class F>
Tensor unary_forward(const Tensor& a, F f) {
  std::vector<float> out(a.numel());
  auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i]);
  return Tensor(a.shape(), std::move(out));
}

inline kernels::ConvGeometry conv_geometry(const Shape& in, int kernel, int stride, int padding, const char* name) {
  if (kernel < 1) throw ShapeError(std::string(name) + ": kernel size must be >= 1");
  if (stride < 1) throw ShapeError(std::string(name) + ": stride must be >= 1");
  if (padding < 0) throw ShapeError(std::string(name) + ": padding must be >= 0");
  kernels::ConvGeometry g;
  g.batch = in[0];
  g.in_channels = in[1];
  g.in_h = in[2];
  g.in_w = in[3];
  g.kernel = kernel;
  g.stride = stride;
  g.padding = padding;
  if (g.in_h + 2 * padding < kernel || g.in_w + 2 * padding < kernel)
    throw ShapeError(std::string(name) + ": kernel " + std::to_string(kernel) + " larger than padded input " +
                     to_string(in));
  g.out_h = (g.in_h + 2 * padding - kernel) / stride + 1;
  g.out_w = (g.in_w + 2 * padding - kernel) / stride + 1;
  return g;
}

inline std::vector<bool> needed_inputs(std::span<const Tensor> inputs) {
  std::vector<bool> n(inputs.size());
  for (std::size_t i = 0; i < inputs.size(); ++i) n[i] = inputs[i].defined() && inputs[i].requires_grad();
  return n;
}

// --- elementwise -----------------------------------------------------------

inline const Primitive kAdd{
    "add",
    [](std::span<const Tensor> in, const OpAttrs&) {
      return binary_forward(in[0], in[1], "add", [](float x, float y) { return x + y; });
    },
    [](std::span<const Tensor> in, const Tensor&, const Tensor& g, const OpAttrs&, const std::vector<bool>& need) {
      std::vector<Tensor> r(2);
      if (need[0]) r[0] = sum_to(g, in[0].shape());
      if (need[1]) r[1] = sum_to(g, in[1].shape());
      return r;
    }};

inline const Primitive kSub{
    "sub",
    [](std::span<const Tensor> in, const OpAttrs&) {
      return binary_forward(in[0], in[1], "sub", [](float x, float y) { return x - y; });
    },
    [](std::span<const Tensor> in, const Tensor&, const Tensor& g, const OpAttrs&, const std::vector<bool>& need) {
      std::vector<Tensor> r(2);
      if (need[0]) r[0] = sum_to(g, in[0].shape());
      if (need[1]) r[1] = sum_to(neg(g), in[1].shape());
      return r;
    }};

inline const Primitive kMul{
    "mul",
    [](std::span<const Tensor> in, const OpAttrs&) {
      return binary_forward(in[0], in[1], "mul", [](float x, float y) { return x * y; });
    },
    [](std::span<const Tensor> in, const Tensor&, const Tensor& g, const OpAttrs&, const std::vector<bool>& need) {
      std::vector<Tensor> r(2);
      if (need[0]) r[0] = sum_to(mul(g, in[1]), in[0].shape());
      if (need[1]) r[1] = sum_to(mul(g, in[0]), in[1].shape());
      return r;
    }};

inline const Primitive kDiv{
    "div",
    [](std::span<const Tensor> in, const OpAttrs&) {
      return binary_forward(in[0], in[1], "div", [](float x, float y) { return x / y; });
    },
    [](std::span<const Tensor> in, const Tensor& out, const Tensor& g, const OpAttrs&,
       const std::vector<bool>& need) {
      std::vector<Tensor> r(2);
      if (need[0]) r[0] = sum_to(div(g, in[1]), in[0].shape());
      if (need[1]) r[1] = sum_to(neg(mul(g, div(out, in[1]))), in[1].shape());
      return r;
    }};

inline const Primitive kSquare{
    "square",
    [](std::span<const Tensor> in, const OpAttrs&) { return unary_forward(in[0], [](float x) { return x * x; }); },
    [](std::span<const Tensor> in, const Tensor&, const Tensor& g, const OpAttrs&, const std::vector<bool>&) {
      return std::vector<Tensor>{mul(g, scale(in[0], 2.0f))};
    }};

inline const Primitive kSqrt{
    "sqrt",
    [](std::span<const Tensor> in, const OpAttrs&) {
      return unary_forward(in[0], [](float x) { return std::sqrt(x); });
    },
    // d/dx sqrt(x) = 1 / (2 sqrt(x)); at x == 0 the denominator is replaced by 1
    // so a zero input yields a finite gradient.
    [](std::span<const Tensor>, const Tensor& out, const Tensor& g, const OpAttrs&, const std::vector<bool>&) {
      Tensor at_zero = sub(Tensor::scalar(1.0f), sign(out.detach()));
      return std::vector<Tensor>{div(g, add(scale(out, 2.0f), at_zero))};
    }};

inline const Primitive kAbs{
    "abs",
    [](std::span<const Tensor> in, const OpAttrs&) {
      return unary_forward(in[0], [](float x) { return std::fabs(x); });
    },
    [](std::span<const Tensor> in, const Tensor&, const Tensor& g, const OpAttrs&, const std::vector<bool>&) {
      return std::vector<Tensor>{mul(g, sign(in[0].detach()))};
    }};

inline const Primitive kTanh{
    "tanh",
    [](std::span<const Tensor> in, const OpAttrs&) {
      return unary_forward(in[0], [](float x) { return std::tanh(x); });
    },
    [](std::span<const Tensor>, const Tensor& out, const Tensor& g, const OpAttrs&, const std::vector<bool>&) {
      return std::vector<Tensor>{mul(g, sub(Tensor::scalar(1.0f), square(out)))};
    }};

inline const Primitive kLeakyRelu{
    "leaky_relu",
    [](std::span<const Tensor> in, const OpAttrs& at) {
      const float s = at.scalar;
      return unary_forward(in[0], [s](float x) { return x > 0.0f ? x : x * s; });
    },
    [](std::span<const Tensor> in, const Tensor&, const Tensor& g, const OpAttrs& at, const std::vector<bool>&) {
      return std::vector<Tensor>{mul(g, leaky_mask(in[0].detach(), at.scalar))};
    }};

inline const Primitive kRelu{
    "relu",
    [](std::span<const Tensor> in, const OpAttrs&) {
      return unary_forward(in[0], [](float x) { return x > 0.0f ? x : 0.0f; });
    },
    [](std::span<const Tensor> in, const Tensor&, const Tensor& g, const OpAttrs&, const std::vector<bool>&) {
      return std::vector<Tensor>{mul(g, leaky_mask(in[0].detach(), 0.0f))};
    }};

inline const Primitive kLeakyMask{
    "leaky_mask",
    [](std::span<const Tensor> in, const OpAttrs& at) {
      const float s = at.scalar;
      return unary_forward(in[0], [s](float x) { return x > 0.0f ? 1.0f : s; });
    },
    nullptr};

inline const Primitive kSign{
    "sign",
    [](std::span<const Tensor> in, const OpAttrs&) {
      return unary_forward(in[0], [](float x) { return x > 0.0f ? 1.0f : (x < 0.0f ? -1.0f : 0.0f); });
    },
    nullptr};

// --- reductions and broadcasting --------------------------------------------

inline const Primitive kSum{
    "sum",
    [](std::span<const Tensor> in, const OpAttrs&) {
      float s = 0.0f;
      for (float v : in[0].data()) s += v;
      return Tensor::scalar(s);
    },
    [](std::span<const Tensor> in, const Tensor&, const Tensor& g, const OpAttrs&, const std::vector<bool>&) {
      return std::vector<Tensor>{broadcast_to(g, in[0].shape())};
    }};

inline const Primitive kMean{
    "mean",
    [](std::span<const Tensor> in, const OpAttrs&) {
      if (in[0].numel() == 0) throw ShapeError("mean: empty tensor");
      float s = 0.0f;
      for (float v : in[0].data()) s += v;
      return Tensor::scalar(s / static_cast<float>(in[0].numel()));
    },
    [](std::span<const Tensor> in, const Tensor&, const Tensor& g, const OpAttrs&, const std::vector<bool>&) {
      return std::vector<Tensor>{
          broadcast_to(scale(g, 1.0f / static_cast<float>(in[0].numel())), in[0].shape())};
    }};

inline const Primitive kSumTo{
    "sum_to",
    [](std::span<const Tensor> in, const OpAttrs& at) {
      const Tensor& a = in[0];
      if (kernels::broadcast_shapes(at.shape, a.shape(), "sum_to") != a.shape())
        throw ShapeError("sum_to: cannot reduce " + to_string(a.shape()) + " to " + to_string(at.shape));
      std::vector<float> out(numel(at.shape), 0.0f);
      auto idx = kernels::broadcast_index(at.shape, a.shape());
      auto x = a.data();
      for (std::size_t i = 0; i < x.size(); ++i) out[idx[i]] += x[i];
      return Tensor(at.shape, std::move(out));
    },
    [](std::span<const Tensor> in, const Tensor&, const Tensor& g, const OpAttrs&, const std::vector<bool>&) {
      return std::vector<Tensor>{broadcast_to(g, in[0].shape())};
    }};

inline const Primitive kBroadcastTo{
    "broadcast_to",
    [](std::span<const Tensor> in, const OpAttrs& at) {
      const Tensor& a = in[0];
      if (kernels::broadcast_shapes(a.shape(), at.shape, "broadcast_to") != at.shape)
        throw ShapeError("broadcast_to: cannot broadcast " + to_string(a.shape()) + " to " + to_string(at.shape));
      std::vector<float> out(numel(at.shape));
      auto x = a.data();
      if (a.numel() == 1) {
        std::fill(out.begin(), out.end(), x[0]);
      } else {
        auto idx = kernels::broadcast_index(a.shape(), at.shape);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[idx[i]];
      }
      return Tensor(at.shape, std::move(out));
    },
    [](std::span<const Tensor> in, const Tensor&, const Tensor& g, const OpAttrs&, const std::vector<bool>&) {
      return std::vector<Tensor>{sum_to(g, in[0].shape())};
    }};

// --- layout -----------------------------------------------------------------

inline const Primitive kReshape{
    "reshape",
    [](std::span<const Tensor> in, const OpAttrs& at) {
      if (numel(at.shape) != in[0].numel())
        throw ShapeError("reshape: shape mismatch between " + to_string(in[0].shape()) + " and " +
                         to_string(at.shape));
      return in[0].detach().reshaped_value(at.shape);
    },
    [](std::span<const Tensor> in, const Tensor&, const Tensor& g, const OpAttrs&, const std::vector<bool>&) {
      return std::vector<Tensor>{reshape(g, in[0].shape())};
    }};

inline const Primitive kConcat{
    "concat",
    [](std::span<const Tensor> in, const OpAttrs&) {
      if (in.empty()) throw ShapeError("concat: no inputs");
      const Shape& s0 = in[0].shape();
      require_rank(in[0], 4, "concat");
      int channels = 0;
      for (const Tensor& t : in) {
        const Shape& s = t.shape();
        if (s.size() != 4 || s[0] != s0[0] || s[2] != s0[2] || s[3] != s0[3])
          throw ShapeError("concat: shape mismatch between " + to_string(s0) + " and " + to_string(s));
        channels += s[1];
      }
      const std::size_t plane = static_cast<std::size_t>(s0[2]) * s0[3];
      std::vector<float> out;
      out.reserve(static_cast<std::size_t>(s0[0]) * channels * plane);
      for (int n = 0; n < s0[0]; ++n)
        for (const Tensor& t : in) {
          const std::size_t chunk = static_cast<std::size_t>(t.dim(1)) * plane;
          auto d = t.data().subspan(static_cast<std::size_t>(n) * chunk, chunk);
          out.insert(out.end(), d.begin(), d.end());
        }
      return Tensor(Shape{s0[0], channels, s0[2], s0[3]}, std::move(out));
    },
    [](std::span<const Tensor> in, const Tensor&, const Tensor& g, const OpAttrs&, const std::vector<bool>& need) {
      std::vector<Tensor> r(in.size());
      int offset = 0;
      for (std::size_t i = 0; i < in.size(); ++i) {
        if (need[i]) r[i] = slice_channels(g, offset, in[i].dim(1));
        offset += in[i].dim(1);
      }
      return r;
    }};

inline const Primitive kSliceChannels{
    "slice_channels",
    [](std::span<const Tensor> in, const OpAttrs& at) {
      const Tensor& a = in[0];
      require_rank(a, 4, "slice_channels");
      if (at.start < 0 || at.count < 0 || at.start + at.count > a.dim(1))
        throw ShapeError("slice_channels: range [" + std::to_string(at.start) + ", " +
                         std::to_string(at.start + at.count) + ") outside " + to_string(a.shape()));
      const std::size_t plane = static_cast<std::size_t>(a.dim(2)) * a.dim(3);
      std::vector<float> out;
      out.reserve(static_cast<std::size_t>(a.dim(0)) * at.count * plane);
      for (int n = 0; n < a.dim(0); ++n) {
        auto d = a.data().subspan((static_cast<std::size_t>(n) * a.dim(1) + at.start) * plane,
                                  static_cast<std::size_t>(at.count) * plane);
        out.insert(out.end(), d.begin(), d.end());
      }
      return Tensor(Shape{a.dim(0), at.count, a.dim(2), a.dim(3)}, std::move(out));
    },
    [](std::span<const Tensor> in, const Tensor&, const Tensor& g, const OpAttrs& at, const std::vector<bool>&) {
      const Shape& s = in[0].shape();
      std::vector<Tensor> parts;
      if (at.start > 0) parts.push_back(Tensor::zeros({s[0], at.start, s[2], s[3]}));
      parts.push_back(g);
      const int after = s[1] - at.start - at.count;
      if (after > 0) parts.push_back(Tensor::zeros({s[0], after, s[2], s[3]}));
      return std::vector<Tensor>{parts.size() == 1 ? g : concat(parts)};
    }};

inline const Primitive kPad{
    "pad",
    [](std::span<const Tensor> in, const OpAttrs& at) {
      const Tensor& a = in[0];
      require_rank(a, 4, "pad");
      if (at.padding < 0) throw ShapeError("pad: negative padding");
      const int p = at.padding;
      const int H = a.dim(2), W = a.dim(3);
      const int OH = H + 2 * p, OW = W + 2 * p;
      std::vector<float> out(static_cast<std::size_t>(a.dim(0)) * a.dim(1) * OH * OW, 0.0f);
      auto x = a.data();
      for (std::size_t nc = 0; nc < static_cast<std::size_t>(a.dim(0)) * a.dim(1); ++nc)
        for (int h = 0; h < H; ++h)
          std::copy_n(x.data() + (nc * H + h) * W, W, out.data() + (nc * OH + h + p) * OW + p);
      return Tensor(Shape{a.dim(0), a.dim(1), OH, OW}, std::move(out));
    },
    [](std::span<const Tensor>, const Tensor&, const Tensor& g, const OpAttrs& at, const std::vector<bool>&) {
      return std::vector<Tensor>{crop(g, at.padding)};
    }};

inline const Primitive kCrop{
    "crop",
    [](std::span<const Tensor> in, const OpAttrs& at) {
      const Tensor& a = in[0];
      require_rank(a, 4, "crop");
      const int p = at.padding;
      const int H = a.dim(2), W = a.dim(3);
      if (p < 0 || 2 * p >= H || 2 * p >= W) throw ShapeError("crop: invalid crop for " + to_string(a.shape()));
      const int OH = H - 2 * p, OW = W - 2 * p;
      std::vector<float> out(static_cast<std::size_t>(a.dim(0)) * a.dim(1) * OH * OW);
      auto x = a.data();
      for (std::size_t nc = 0; nc < static_cast<std::size_t>(a.dim(0)) * a.dim(1); ++nc)
        for (int h = 0; h < OH; ++h)
          std::copy_n(x.data() + (nc * H + h + p) * W + p, OW, out.data() + (nc * OH + h) * OW);
      return Tensor(Shape{a.dim(0), a.dim(1), OH, OW}, std::move(out));
    },
    [](std::span<const Tensor>, const Tensor&, const Tensor& g, const OpAttrs& at, const std::vector<bool>&) {
      return std::vector<Tensor>{pad(g, at.padding)};
    }};

// --- linear maps ------------------------------------------------------------

inline const Primitive kMatmul{
    "matmul",
    [](std::span<const Tensor> in, const OpAttrs& at) {
      const Tensor& a = in[0];
      const Tensor& b = in[1];
      require_rank(a, 2, "matmul");
      require_rank(b, 2, "matmul");
      const int m = at.trans_a ? a.dim(1) : a.dim(0);
      const int ka = at.trans_a ? a.dim(0) : a.dim(1);
      const int kb = at.trans_b ? b.dim(1) : b.dim(0);
      const int n = at.trans_b ? b.dim(0) : b.dim(1);
      if (ka != kb)
        throw ShapeError("matmul: shape mismatch between " + to_string(a.shape()) + " and " + to_string(b.shape()));
      std::vector<float> out(static_cast<std::size_t>(m) * n);
      kernels::matmul(a.data(), b.data(), m, n, ka, at.trans_a, at.trans_b, out);
      return Tensor(Shape{m, n}, std::move(out));
    },
    [](std::span<const Tensor> in, const Tensor&, const Tensor& g, const OpAttrs& at,
       const std::vector<bool>& need) {
      const Tensor& a = in[0];
      const Tensor& b = in[1];
      std::vector<Tensor> r(2);
      if (!at.trans_a && !at.trans_b) {
        if (need[0]) r[0] = matmul(g, b, false, true);
        if (need[1]) r[1] = matmul(a, g, true, false);
      } else if (!at.trans_a && at.trans_b) {
        if (need[0]) r[0] = matmul(g, b, false, false);
        if (need[1]) r[1] = matmul(g, a, true, false);
      } else if (at.trans_a && !at.trans_b) {
        if (need[0]) r[0] = matmul(b, g, false, true);
        if (need[1]) r[1] = matmul(a, g, false, false);
      } else {
        if (need[0]) r[0] = matmul(b, g, true, true);
        if (need[1]) r[1] = matmul(g, a, true, true);
      }
      return r;
    }};

inline Tensor bias_grad(const Tensor& g) {
  return reshape(sum_to(g, Shape{1, g.dim(1), 1, 1}), Shape{g.dim(1)});
}

inline void check_bias(std::span<const Tensor> in, int channels, const char* name) {
  if (in.size() > 2 && in[2].defined() && (in[2].rank() != 1 || in[2].dim(0) != channels))
    throw ShapeError(std::string(name) + ": bias shape " + to_string(in[2].shape()) + " does not match " +
                     std::to_string(channels) + " output channels");
}

inline std::span<const float> bias_data(std::span<const Tensor> in) {
  return in.size() > 2 && in[2].defined() ? in[2].data() : std::span<const float>();
}

inline const Primitive kConv2d{
    "conv2d",
    [](std::span<const Tensor> in, const OpAttrs& at) {
      const Tensor& x = in[0];
      const Tensor& w = in[1];
      require_rank(x, 4, "conv2d");
      require_rank(w, 4, "conv2d");
      if (w.dim(1) != x.dim(1) || w.dim(2) != w.dim(3))
        throw ShapeError("conv2d: shape mismatch between input " + to_string(x.shape()) + " and weight " +
                         to_string(w.shape()));
      check_bias(in, w.dim(0), "conv2d");
      auto g = conv_geometry(x.shape(), w.dim(2), at.stride, at.padding, "conv2d");
      std::vector<float> out(static_cast<std::size_t>(g.batch) * w.dim(0) * g.positions());
      kernels::conv2d_forward(x.data(), w.data(), bias_data(in), w.dim(0), g, out);
      return Tensor(Shape{g.batch, w.dim(0), g.out_h, g.out_w}, std::move(out));
    },
    [](std::span<const Tensor> in, const Tensor&, const Tensor& g, const OpAttrs& at,
       const std::vector<bool>& need) {
      const Tensor& x = in[0];
      const Tensor& w = in[1];
      std::vector<Tensor> r(in.size());
      if (need[0]) r[0] = conv_transpose2d(g, w, Tensor(), at.stride, at.padding, x.dim(2), x.dim(3));
      if (need[1]) r[1] = conv2d_weight_grad(x, g, w.dim(2), at.stride, at.padding);
      if (in.size() > 2 && need[2]) r[2] = bias_grad(g);
      return r;
    }};

inline const Primitive kConvTranspose2d{
    "conv_transpose2d",
    [](std::span<const Tensor> in, const OpAttrs& at) {
      const Tensor& x = in[0];
      const Tensor& w = in[1];
      require_rank(x, 4, "conv_transpose2d");
      require_rank(w, 4, "conv_transpose2d");
      if (w.dim(0) != x.dim(1) || w.dim(2) != w.dim(3))
        throw ShapeError("conv_transpose2d: shape mismatch between input " + to_string(x.shape()) +
                         " and weight " + to_string(w.shape()));
      check_bias(in, w.dim(1), "conv_transpose2d");
      const int K = w.dim(2);
      if (at.stride < 1 || at.padding < 0) throw ShapeError("conv_transpose2d: invalid stride or padding");
      const int base_h = (x.dim(2) - 1) * at.stride - 2 * at.padding + K;
      const int base_w = (x.dim(3) - 1) * at.stride - 2 * at.padding + K;
      const int oh = at.out_h > 0 ? at.out_h : base_h;
      const int ow = at.out_w > 0 ? at.out_w : base_w;
      if (oh < 1 || ow < 1 || oh < base_h || ow < base_w || oh >= base_h + at.stride || ow >= base_w + at.stride)
        throw ShapeError("conv_transpose2d: output size " + std::to_string(oh) + "x" + std::to_string(ow) +
                         " incompatible with input " + to_string(x.shape()));
      auto g = conv_geometry(Shape{x.dim(0), w.dim(1), oh, ow}, K, at.stride, at.padding, "conv_transpose2d");
      std::vector<float> out(static_cast<std::size_t>(x.dim(0)) * w.dim(1) * oh * ow);
      kernels::conv_transpose2d_forward(x.data(), w.data(), bias_data(in), x.dim(1), g, out);
      return Tensor(Shape{x.dim(0), w.dim(1), oh, ow}, std::move(out));
    },
    [](std::span<const Tensor> in, const Tensor&, const Tensor& g, const OpAttrs& at,
       const std::vector<bool>& need) {
      const Tensor& x = in[0];
      const Tensor& w = in[1];
      std::vector<Tensor> r(in.size());
      if (need[0]) r[0] = conv2d(g, w, Tensor(), at.stride, at.padding);
      if (need[1]) r[1] = conv2d_weight_grad(g, x, w.dim(2), at.stride, at.padding);
      if (in.size() > 2 && need[2]) r[2] = bias_grad(g);
      return r;
    }};

inline const Primitive kConv2dWeightGrad{
    "conv2d_weight_grad",
    [](std::span<const Tensor> in, const OpAttrs& at) {
      const Tensor& x = in[0];
      const Tensor& gy = in[1];
      require_rank(x, 4, "conv2d_weight_grad");
      require_rank(gy, 4, "conv2d_weight_grad");
      auto g = conv_geometry(x.shape(), at.kernel, at.stride, at.padding, "conv2d_weight_grad");
      if (gy.dim(0) != g.batch || gy.dim(2) != g.out_h || gy.dim(3) != g.out_w)
        throw ShapeError("conv2d_weight_grad: shape mismatch between " + to_string(x.shape()) + " and " +
                         to_string(gy.shape()));
      const int O = gy.dim(1);
      std::vector<float> out(static_cast<std::size_t>(O) * g.rows());
      kernels::conv2d_weight_grad(x.data(), gy.data(), O, g, out);
      return Tensor(Shape{O, g.in_channels, at.kernel, at.kernel}, std::move(out));
    },
    [](std::span<const Tensor> in, const Tensor&, const Tensor& g, const OpAttrs& at,
       const std::vector<bool>& need) {
      const Tensor& x = in[0];
      const Tensor& gy = in[1];
      std::vector<Tensor> r(2);
      if (need[0]) r[0] = conv_transpose2d(gy, g, Tensor(), at.stride, at.padding, x.dim(2), x.dim(3));
      if (need[1]) r[1] = conv2d(x, g, Tensor(), at.stride, at.padding);
      return r;
    }};

inline const Primitive* const kAllPrimitives[] = {
    &kAdd,       &kSub,     &kMul,          &kDiv,         &kSquare,         &kSqrt,
    &kAbs,       &kTanh,    &kLeakyRelu,    &kRelu,        &kLeakyMask,      &kSign,
    &kSum,       &kMean,    &kSumTo,        &kBroadcastTo, &kReshape,        &kConcat,
    &kSliceChannels, &kPad, &kCrop,         &kMatmul,      &kConv2d,         &kConvTranspose2d,
    &kConv2dWeightGrad};

}  // namespace detail

// ---------------------------------------------------------------------------

inline std::vector<Tensor> Tape::sweep(const Tensor& loss, bool create_graph) {
  if (!loss.defined() || loss.numel() != 1)
    throw ShapeError("backward: loss must have exactly one element, got shape " + to_string(loss.shape()));
  if (loss.tape() != this) throw Error("backward: loss is not on this tape");
  const int end = loss.node();
  std::vector<Tensor> grads(static_cast<std::size_t>(end) + 1);
  grads[static_cast<std::size_t>(end)] = Tensor::ones(loss.shape());
  for (int i = end; i >= 0; --i) {
    Tensor g = grads[static_cast<std::size_t>(i)];
    if (!g.defined()) continue;
    // Copy what we need: recording during create_graph may grow nodes_.
    const Primitive* op = nodes_[static_cast<std::size_t>(i)].op;
    if (!op) continue;
    std::vector<Tensor> inputs = nodes_[static_cast<std::size_t>(i)].inputs;
    const OpAttrs attrs = nodes_[static_cast<std::size_t>(i)].attrs;
    const std::vector<bool> need = detail::needed_inputs(inputs);
    if (std::none_of(need.begin(), need.end(), [](bool b) { return b; })) continue;
    Tensor out;
    if (create_graph) {
      out = link(i);
    } else {
      out = nodes_[static_cast<std::size_t>(i)].value;
      g = g.detach();
      for (Tensor& t : inputs) t = t.detach();
    }
    std::vector<Tensor> gin = op->backward(inputs, out, g, attrs, need);
    const auto& orig = nodes_[static_cast<std::size_t>(i)].inputs;
    for (std::size_t k = 0; k < orig.size(); ++k) {
      if (!need[k] || !gin[k].defined()) continue;
      if (gin[k].shape() != orig[k].shape())
        throw ShapeError(std::string(op->name) + ": backward produced gradient of shape " +
                         to_string(gin[k].shape()) + " for input of shape " + to_string(orig[k].shape()));
      Tensor& slot = grads[static_cast<std::size_t>(orig[k].node())];
      slot = slot.defined() ? add(slot, gin[k]) : gin[k];
    }
  }
  return grads;
}

inline Tensor add(const Tensor& a, const Tensor& b) { return detail::apply(detail::kAdd, {a, b}); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return detail::apply(detail::kSub, {a, b}); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return detail::apply(detail::kMul, {a, b}); }
inline Tensor div(const Tensor& a, const Tensor& b) { return detail::apply(detail::kDiv, {a, b}); }
inline Tensor square(const Tensor& a) { return detail::apply(detail::kSquare, {a}); }
inline Tensor sqrt(const Tensor& a) { return detail::apply(detail::kSqrt, {a}); }
inline Tensor abs(const Tensor& a) { return detail::apply(detail::kAbs, {a}); }
inline Tensor tanh(const Tensor& a) { return detail::apply(detail::kTanh, {a}); }

inline Tensor leaky_relu(const Tensor& a, float slope) {
  OpAttrs at;
  at.scalar = slope;
  return detail::apply(detail::kLeakyRelu, {a}, at);
}

inline Tensor relu(const Tensor& a) { return detail::apply(detail::kRelu, {a}); }

inline Tensor leaky_mask(const Tensor& a, float slope) {
  OpAttrs at;
  at.scalar = slope;
  return detail::apply(detail::kLeakyMask, {a}, at);
}

inline Tensor sign(const Tensor& a) { return detail::apply(detail::kSign, {a}); }
inline Tensor sum(const Tensor& a) { return detail::apply(detail::kSum, {a}); }
inline Tensor mean(const Tensor& a) { return detail::apply(detail::kMean, {a}); }

inline Tensor sum_to(const Tensor& a, const Shape& shape) {
  if (a.shape() == shape) return a;
  OpAttrs at;
  at.shape = shape;
  return detail::apply(detail::kSumTo, {a}, at);
}

inline Tensor broadcast_to(const Tensor& a, const Shape& shape) {
  if (a.shape() == shape) return a;
  OpAttrs at;
  at.shape = shape;
  return detail::apply(detail::kBroadcastTo, {a}, at);
}

inline Tensor reshape(const Tensor& a, const Shape& shape) {
  if (a.shape() == shape) return a;
  OpAttrs at;
  at.shape = shape;
  return detail::apply(detail::kReshape, {a}, at);
}

inline Tensor concat(std::span<const Tensor> parts) { return detail::apply(detail::kConcat, parts); }

inline Tensor slice_channels(const Tensor& a, int start, int count) {
  OpAttrs at;
  at.start = start;
  at.count = count;
  return detail::apply(detail::kSliceChannels, {a}, at);
}

inline Tensor pad(const Tensor& a, int padding) {
  OpAttrs at;
  at.padding = padding;
  return detail::apply(detail::kPad, {a}, at);
}

inline Tensor crop(const Tensor& a, int padding) {
  OpAttrs at;
  at.padding = padding;
  return detail::apply(detail::kCrop, {a}, at);
}

inline Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b) {
  OpAttrs at;
  at.trans_a = trans_a;
  at.trans_b = trans_b;
  return detail::apply(detail::kMatmul, {a, b}, at);
}

inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int padding) {
  OpAttrs at;
  at.stride = stride;
  at.padding = padding;
  if (bias.defined()) return detail::apply(detail::kConv2d, {x, w, bias}, at);
  return detail::apply(detail::kConv2d, {x, w}, at);
}

inline Tensor conv_transpose2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int padding,
                               int out_h, int out_w) {
  OpAttrs at;
  at.stride = stride;
  at.padding = padding;
  at.out_h = out_h;
  at.out_w = out_w;
  if (bias.defined()) return detail::apply(detail::kConvTranspose2d, {x, w, bias}, at);
  return detail::apply(detail::kConvTranspose2d, {x, w}, at);
}

inline Tensor conv2d_weight_grad(const Tensor& x, const Tensor& grad_out, int kernel, int stride, int padding) {
  OpAttrs at;
  at.kernel = kernel;
  at.stride = stride;
  at.padding = padding;
  return detail::apply(detail::kConv2dWeightGrad, {x, grad_out}, at);
}

inline Tensor broadcast_spatial(const Tensor& g, int target_h, int target_w) {
  if (g.rank() != 4 || g.dim(2) != 1 || g.dim(3) != 1)
    throw ShapeError("broadcast_spatial: expected (N,C,1,1), got " + to_string(g.shape()));
  if (target_h < 1 || target_w < 1)
    throw ShapeError("broadcast_spatial: target dims must be positive, got " + std::to_string(target_h) + "x" +
                     std::to_string(target_w));
  return broadcast_to(g, Shape{g.dim(0), g.dim(1), target_h, target_w});
}

inline Tensor l2_norm_per_sample(const Tensor& t) {
  if (t.rank() < 1) throw ShapeError("l2_norm_per_sample: expected a batch dimension");
  Shape reduced(t.shape().size(), 1);
  reduced[0] = t.dim(0);
  Tensor s = sum_to(square(t), reduced);
  return reshape(sqrt(s), Shape{t.dim(0)});
}

inline Tensor record(std::string_view name, std::span<const Tensor> inputs, const OpAttrs& attrs) {
  auto arity = [&](std::size_t lo, std::size_t hi) {
    if (inputs.size() < lo || inputs.size() > hi)
      throw Error(std::string(name) + ": expected " + std::to_string(lo) + (lo == hi ? "" : "-" + std::to_string(hi)) +
                  " inputs, got " + std::to_string(inputs.size()));
  };
  if (name == "broadcast_spatial") {
    arity(1, 1);
    return broadcast_spatial(inputs[0], attrs.out_h, attrs.out_w);
  }
  if (name == "l2_norm_per_sample") {
    arity(1, 1);
    return l2_norm_per_sample(inputs[0]);
  }
  for (const Primitive* p : detail::kAllPrimitives) {
    if (name != p->name) continue;
    const std::string_view n = p->name;
    if (n == "concat") arity(1, inputs.size() ? inputs.size() : 1);
    else if (n == "conv2d" || n == "conv_transpose2d") arity(2, 3);
    else if (n == "add" || n == "sub" || n == "mul" || n == "div" || n == "matmul" || n == "conv2d_weight_grad")
      arity(2, 2);
    else arity(1, 1);
    return detail::apply(*p, inputs, attrs);
  }
  throw Error("unknown primitive '" + std::string(name) + "'");
}

}  // namespace uwfuse
