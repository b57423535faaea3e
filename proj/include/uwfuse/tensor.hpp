// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace uwfuse {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

using Shape = std::vector<int>;

inline std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  if (shape.size() == 1) os << ',';
  os << ')';
  return os.str();
}

class Tape;

/// Dense row-major f32 tensor. Storage is shared and copy-on-write; a tensor
/// that belongs to a Tape carries the id of the node that produced it.
class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<float> values)
      : shape_(std::move(shape)),
        buf_(std::make_shared<std::vector<float>>(std::move(values))) {
    for (int d : shape_)
      if (d < 0) throw ShapeError("negative dimension in " + to_string(shape_));
    if (buf_->size() != uwfuse::numel(shape_))
      throw ShapeError("element count " + std::to_string(buf_->size()) +
                       " does not match shape " + to_string(shape_));
  }

  static Tensor full(Shape shape, float value) {
    std::size_t n = uwfuse::numel(shape);
    return Tensor(std::move(shape), std::vector<float>(n, value));
  }
  static Tensor zeros(Shape shape) { return full(std::move(shape), 0.0f); }
  static Tensor ones(Shape shape) { return full(std::move(shape), 1.0f); }
  static Tensor scalar(float v) { return Tensor(Shape{}, {v}); }
  static Tensor from(Shape shape, std::initializer_list<float> v) {
    return Tensor(std::move(shape), std::vector<float>(v));
  }

  bool defined() const { return buf_ != nullptr; }
  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_.at(static_cast<std::size_t>(i < 0 ? rank() + i : i)); }
  std::size_t numel() const { return buf_ ? buf_->size() : 0; }

  std::span<const float> data() const {
    return buf_ ? std::span<const float>(*buf_) : std::span<const float>();
  }

  /// Mutable view; detaches from any tape and clones shared storage first.
  std::span<float> mutable_data() {
    if (!buf_) return {};
    if (buf_.use_count() > 1) buf_ = std::make_shared<std::vector<float>>(*buf_);
    tape_ = nullptr;
    node_ = -1;
    return std::span<float>(*buf_);
  }

  float operator[](std::size_t i) const { return (*buf_)[i]; }
  float item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape_));
    return (*buf_)[0];
  }
  float at(int n, int c, int h, int w) const {
    return (*buf_)[((static_cast<std::size_t>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }

  bool requires_grad() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  int node() const { return node_; }

  Tensor detach() const {
    Tensor t = *this;
    t.tape_ = nullptr;
    t.node_ = -1;
    return t;
  }

  /// Same storage, different shape; no tape linkage.
  Tensor reshaped_value(Shape shape) const {
    if (uwfuse::numel(shape) != numel())
      throw ShapeError("cannot view " + to_string(shape_) + " as " + to_string(shape));
    Tensor t;
    t.shape_ = std::move(shape);
    t.buf_ = buf_;
    return t;
  }

  bool same_values(const Tensor& other) const {
    return shape_ == other.shape_ && (buf_ == other.buf_ || (buf_ && other.buf_ && *buf_ == *other.buf_));
  }

 private:
  friend class Tape;
  Shape shape_;
  std::shared_ptr<std::vector<float>> buf_;
  Tape* tape_ = nullptr;
  int node_ = -1;
};

// Deterministic random helpers. Built on mt19937_64 raw output so that draws are
// identical across standard library implementations.

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
  return splitmix64(splitmix64(splitmix64(seed) ^ a) ^ (b * 0x632be59bd9b4e019ULL));
}

template <class Rng>
double uniform01(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

template <class Rng>
double standard_normal(Rng& rng) {
  // Box-Muller; the second variate is dropped to keep the stream stateless.
  double u1 = uniform01(rng);
  double u2 = uniform01(rng);
  if (u1 < 1e-300) u1 = 1e-300;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

template <class Rng>
std::size_t uniform_index(Rng& rng, std::size_t n) {
  return static_cast<std::size_t>(uniform01(rng) * static_cast<double>(n)) % n;
}

}  // namespace uwfuse
