// SPDX-License-Identifier: Apache-2.0
//
// Raw f32 kernels behind the autodiff primitives. Every output element is
// accumulated in a fixed order, so results are bit-reproducible run to run.
#pragma once

#include <algorithm>
#include <cstddef>
#include <span>
#include <vector>

#include "uwfuse/tensor.hpp"

namespace uwfuse::kernels {

struct ConvGeometry {
  int batch = 0;
  int in_channels = 0;
  int in_h = 0, in_w = 0;
  int kernel = 1;
  int stride = 1;
  int padding = 0;
  int out_h = 0, out_w = 0;

  std::size_t rows() const { return static_cast<std::size_t>(in_channels) * kernel * kernel; }
  std::size_t positions() const { return static_cast<std::size_t>(out_h) * out_w; }
};

// col[r][n * P + p] with r = (c * K + kh) * K + kw and p = oh * OW + ow.
inline void im2col(std::span<const float> x, const ConvGeometry& g, std::vector<float>& col) {
  const std::size_t P = g.positions();
  const std::size_t NP = P * g.batch;
  col.assign(g.rows() * NP, 0.0f);
  for (int c = 0; c < g.in_channels; ++c)
    for (int kh = 0; kh < g.kernel; ++kh)
      for (int kw = 0; kw < g.kernel; ++kw) {
        const std::size_t r = (static_cast<std::size_t>(c) * g.kernel + kh) * g.kernel + kw;
        float* row = col.data() + r * NP;
        for (int n = 0; n < g.batch; ++n) {
          const float* plane = x.data() + (static_cast<std::size_t>(n) * g.in_channels + c) * g.in_h * g.in_w;
          float* dst = row + static_cast<std::size_t>(n) * P;
          for (int oh = 0; oh < g.out_h; ++oh) {
            const int ih = oh * g.stride - g.padding + kh;
            if (ih < 0 || ih >= g.in_h) continue;
            for (int ow = 0; ow < g.out_w; ++ow) {
              const int iw = ow * g.stride - g.padding + kw;
              if (iw < 0 || iw >= g.in_w) continue;
              dst[oh * g.out_w + ow] = plane[ih * g.in_w + iw];
            }
          }
        }
      }
}

// Transposed layout: colT[n * P + p][r].
inline void im2col_t(std::span<const float> x, const ConvGeometry& g, std::vector<float>& colt) {
  const std::size_t R = g.rows();
  const std::size_t P = g.positions();
  colt.assign(R * P * g.batch, 0.0f);
  for (int n = 0; n < g.batch; ++n)
    for (int oh = 0; oh < g.out_h; ++oh)
      for (int ow = 0; ow < g.out_w; ++ow) {
        float* dst = colt.data() + (static_cast<std::size_t>(n) * P + oh * g.out_w + ow) * R;
        for (int c = 0; c < g.in_channels; ++c) {
          const float* plane = x.data() + (static_cast<std::size_t>(n) * g.in_channels + c) * g.in_h * g.in_w;
          for (int kh = 0; kh < g.kernel; ++kh) {
            const int ih = oh * g.stride - g.padding + kh;
            if (ih < 0 || ih >= g.in_h) continue;
            for (int kw = 0; kw < g.kernel; ++kw) {
              const int iw = ow * g.stride - g.padding + kw;
              if (iw < 0 || iw >= g.in_w) continue;
              dst[(static_cast<std::size_t>(c) * g.kernel + kh) * g.kernel + kw] = plane[ih * g.in_w + iw];
            }
          }
        }
      }
}

/// y = conv(x, w) + b. x: (N, C, H, W), w: (O, C, K, K), y: (N, O, OH, OW).
/// Each output starts from its bias and adds taps in (c, kh, kw) order.
inline void conv2d_forward(std::span<const float> x, std::span<const float> w, std::span<const float> bias,
                           int out_channels, const ConvGeometry& g, std::span<float> y) {
  std::vector<float> col;
  im2col(x, g, col);
  const std::size_t R = g.rows();
  const std::size_t P = g.positions();
  const std::size_t NP = P * g.batch;
  std::vector<float> acc(static_cast<std::size_t>(out_channels) * NP);
  for (int o = 0; o < out_channels; ++o) {
    float* out = acc.data() + static_cast<std::size_t>(o) * NP;
    const float b0 = bias.empty() ? 0.0f : bias[o];
    std::fill(out, out + NP, b0);
    const float* wrow = w.data() + static_cast<std::size_t>(o) * R;
    for (std::size_t r = 0; r < R; ++r) {
      const float wv = wrow[r];
      const float* src = col.data() + r * NP;
      for (std::size_t q = 0; q < NP; ++q) out[q] += wv * src[q];
    }
  }
  for (int n = 0; n < g.batch; ++n)
    for (int o = 0; o < out_channels; ++o)
      std::copy_n(acc.data() + static_cast<std::size_t>(o) * NP + static_cast<std::size_t>(n) * P, P,
                  y.data() + (static_cast<std::size_t>(n) * out_channels + o) * P);
}

/// Adjoint of conv2d_forward in its input argument, plus bias.
/// x: (N, Cx, H, W) plays the role of the conv output, w: (Cx, Cy, K, K),
/// y: (N, Cy, OH, OW) plays the role of the conv input; geometry `g` describes
/// the forward convolution y -> x (in_* = y dims, out_* = x dims).
inline void conv_transpose2d_forward(std::span<const float> x, std::span<const float> w,
                                     std::span<const float> bias, int x_channels, const ConvGeometry& g,
                                     std::span<float> y) {
  const std::size_t R = g.rows();          // Cy * K * K
  const std::size_t P = g.positions();     // H * W of x
  const std::size_t NP = P * g.batch;
  std::vector<float> xs(static_cast<std::size_t>(x_channels) * NP);
  for (int n = 0; n < g.batch; ++n)
    for (int i = 0; i < x_channels; ++i)
      std::copy_n(x.data() + (static_cast<std::size_t>(n) * x_channels + i) * P, P,
                  xs.data() + static_cast<std::size_t>(i) * NP + static_cast<std::size_t>(n) * P);
  std::vector<float> col(R * NP, 0.0f);
  for (std::size_t r = 0; r < R; ++r) {
    float* dst = col.data() + r * NP;
    for (int i = 0; i < x_channels; ++i) {
      const float wv = w[static_cast<std::size_t>(i) * R + r];
      const float* src = xs.data() + static_cast<std::size_t>(i) * NP;
      for (std::size_t q = 0; q < NP; ++q) dst[q] += wv * src[q];
    }
  }
  const std::size_t plane = static_cast<std::size_t>(g.in_h) * g.in_w;
  for (int n = 0; n < g.batch; ++n)
    for (int c = 0; c < g.in_channels; ++c) {
      float* out = y.data() + (static_cast<std::size_t>(n) * g.in_channels + c) * plane;
      std::fill(out, out + plane, bias.empty() ? 0.0f : bias[c]);
      for (int kh = 0; kh < g.kernel; ++kh)
        for (int kw = 0; kw < g.kernel; ++kw) {
          const std::size_t r = (static_cast<std::size_t>(c) * g.kernel + kh) * g.kernel + kw;
          const float* src = col.data() + r * NP + static_cast<std::size_t>(n) * P;
          for (int oh = 0; oh < g.out_h; ++oh) {
            const int ih = oh * g.stride - g.padding + kh;
            if (ih < 0 || ih >= g.in_h) continue;
            for (int ow = 0; ow < g.out_w; ++ow) {
              const int iw = ow * g.stride - g.padding + kw;
              if (iw < 0 || iw >= g.in_w) continue;
              out[ih * g.in_w + iw] += src[oh * g.out_w + ow];
            }
          }
        }
    }
}

/// gw[o][c][kh][kw] = sum_{n, p} gy[n, o, p] * x[n, c, tap(p, kh, kw)], i.e. the
/// weight gradient of conv2d with input x and output gradient gy.
inline void conv2d_weight_grad(std::span<const float> x, std::span<const float> gy, int out_channels,
                               const ConvGeometry& g, std::span<float> gw) {
  std::vector<float> colt;
  im2col_t(x, g, colt);
  const std::size_t R = g.rows();
  const std::size_t P = g.positions();
  std::fill(gw.begin(), gw.end(), 0.0f);
  for (int o = 0; o < out_channels; ++o) {
    float* dst = gw.data() + static_cast<std::size_t>(o) * R;
    for (int n = 0; n < g.batch; ++n) {
      const float* grow = gy.data() + (static_cast<std::size_t>(n) * out_channels + o) * P;
      for (std::size_t p = 0; p < P; ++p) {
        const float gv = grow[p];
        const float* src = colt.data() + (static_cast<std::size_t>(n) * P + p) * R;
        for (std::size_t r = 0; r < R; ++r) dst[r] += gv * src[r];
      }
    }
  }
}

/// C (M x N) = op(A) * op(B); A is (M x K) or (K x M) when transposed, etc.
inline void matmul(std::span<const float> a, std::span<const float> b, int m, int n, int k, bool trans_a,
                   bool trans_b, std::span<float> c) {
  std::vector<float> at, bt;
  const float* A = a.data();
  const float* B = b.data();
  if (trans_a) {
    at.resize(static_cast<std::size_t>(m) * k);
    for (int i = 0; i < k; ++i)
      for (int j = 0; j < m; ++j) at[static_cast<std::size_t>(j) * k + i] = a[static_cast<std::size_t>(i) * m + j];
    A = at.data();
  }
  if (trans_b) {
    bt.resize(static_cast<std::size_t>(k) * n);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < k; ++j) bt[static_cast<std::size_t>(j) * n + i] = b[static_cast<std::size_t>(i) * k + j];
    B = bt.data();
  }
  std::fill(c.begin(), c.end(), 0.0f);
  for (int i = 0; i < m; ++i) {
    float* crow = c.data() + static_cast<std::size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const float av = A[static_cast<std::size_t>(i) * k + p];
      const float* brow = B + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

/// Numpy-style broadcast of two shapes (right-aligned).
inline Shape broadcast_shapes(const Shape& a, const Shape& b, const char* op) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const int da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const int db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1)
      throw ShapeError(std::string(op) + ": shapes " + to_string(a) + " and " + to_string(b) +
                       " are not broadcast-compatible");
    out[i] = da == 1 ? db : da;
  }
  return out;
}

/// For each flat index of `out_shape`, the flat index into a tensor of shape
/// `in_shape` broadcast to it.
inline std::vector<std::size_t> broadcast_index(const Shape& in_shape, const Shape& out_shape) {
  const std::size_t r = out_shape.size();
  std::vector<std::size_t> stride(r, 0);
  std::size_t s = 1;
  for (std::size_t i = in_shape.size(); i-- > 0;) {
    const std::size_t oi = i + (r - in_shape.size());
    stride[oi] = in_shape[i] == 1 ? 0 : s;
    s *= static_cast<std::size_t>(in_shape[i]);
  }
  const std::size_t total = numel(out_shape);
  std::vector<std::size_t> idx(total);
  std::vector<int> counter(r, 0);
  std::size_t off = 0;
  for (std::size_t q = 0; q < total; ++q) {
    idx[q] = off;
    for (std::size_t d = r; d-- > 0;) {
      if (++counter[d] < out_shape[d]) {
        off += stride[d];
        break;
      }
      off -= stride[d] * static_cast<std::size_t>(counter[d] - 1);
      counter[d] = 0;
    }
  }
  return idx;
}

}  // namespace uwfuse::kernels
