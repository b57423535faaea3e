// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "uwfuse/tensor.hpp"

namespace uwfuse {

/// Channel-major float image with values nominally in [0, 1].
struct Image {
  int channels = 3;
  int height = 0;
  int width = 0;
  std::vector<float> data;

  Image() = default;
  Image(int c, int h, int w, float fill = 0.0f)
      : channels(c), height(h), width(w), data(static_cast<std::size_t>(c) * h * w, fill) {}

  float& at(int c, int y, int x) { return data[(static_cast<std::size_t>(c) * height + y) * width + x]; }
  float at(int c, int y, int x) const { return data[(static_cast<std::size_t>(c) * height + y) * width + x]; }
  bool same_size(const Image& o) const { return channels == o.channels && height == o.height && width == o.width; }
};

inline std::uint8_t to_byte(float v) {
  const float c = std::clamp(v, 0.0f, 1.0f);
  return static_cast<std::uint8_t>(std::lround(c * 255.0f));
}

inline float from_byte(std::uint8_t b) { return static_cast<float>(b) / 255.0f; }

/// Rounds every value to the nearest 8-bit level (what a PNG round trip keeps).
inline Image quantize(const Image& img) {
  Image out = img;
  for (float& v : out.data) v = from_byte(to_byte(v));
  return out;
}

/// Interleaved RGB bytes.
inline std::vector<std::uint8_t> to_rgb_bytes(const Image& img) {
  if (img.channels != 3) throw Error("expected a 3-channel image");
  std::vector<std::uint8_t> bytes(static_cast<std::size_t>(img.height) * img.width * 3);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c)
        bytes[(static_cast<std::size_t>(y) * img.width + x) * 3 + c] = to_byte(img.at(c, y, x));
  return bytes;
}

inline Image read_png(const std::filesystem::path& path) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.string().c_str()))
    throw Error("cannot decode '" + path.string() + "': " + png.message);
  png.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, buf.data(), 0, nullptr)) {
    std::string msg = png.message;
    png_image_free(&png);
    throw Error("cannot decode '" + path.string() + "': " + msg);
  }
  Image img(3, static_cast<int>(png.height), static_cast<int>(png.width));
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c)
        img.at(c, y, x) = from_byte(buf[(static_cast<std::size_t>(y) * img.width + x) * 3 + c]);
  return img;
}

/// Writes an 8-bit RGB PNG; values are clamped to [0, 1] and rounded.
inline void write_png(const std::filesystem::path& path, const Image& img) {
  auto bytes = to_rgb_bytes(img);
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(img.width);
  png.height = static_cast<png_uint_32>(img.height);
  png.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&png, path.string().c_str(), 0, bytes.data(), 0, nullptr))
    throw Error("cannot write '" + path.string() + "': " + png.message);
}

/// Bilinear resize with half-pixel centers: output pixel (y, x) samples the
/// source at ((y + 0.5) * H_in / H_out - 0.5, ...), clamped to the image, and
/// blends as a + t * (b - a) so constant regions stay exactly constant.
inline Image resize_bilinear(const Image& src, int out_h, int out_w) {
  if (out_h < 1 || out_w < 1) throw Error("resize: target size must be positive");
  if (src.height < 1 || src.width < 1) throw Error("resize: empty source image");
  if (src.height == out_h && src.width == out_w) return src;
  struct Tap {
    int i0, i1;
    float t;
  };
  auto taps = [](int in, int out) {
    std::vector<Tap> v(static_cast<std::size_t>(out));
    const double scale = static_cast<double>(in) / out;
    for (int o = 0; o < out; ++o) {
      double s = (o + 0.5) * scale - 0.5;
      s = std::clamp(s, 0.0, static_cast<double>(in - 1));
      const int i0 = static_cast<int>(std::floor(s));
      const int i1 = std::min(i0 + 1, in - 1);
      v[static_cast<std::size_t>(o)] = {i0, i1, static_cast<float>(s - i0)};
    }
    return v;
  };
  const auto ty = taps(src.height, out_h);
  const auto tx = taps(src.width, out_w);
  Image out(src.channels, out_h, out_w);
  for (int c = 0; c < src.channels; ++c)
    for (int y = 0; y < out_h; ++y) {
      const Tap& a = ty[static_cast<std::size_t>(y)];
      for (int x = 0; x < out_w; ++x) {
        const Tap& b = tx[static_cast<std::size_t>(x)];
        const float top = src.at(c, a.i0, b.i0) + b.t * (src.at(c, a.i0, b.i1) - src.at(c, a.i0, b.i0));
        const float bot = src.at(c, a.i1, b.i0) + b.t * (src.at(c, a.i1, b.i1) - src.at(c, a.i1, b.i0));
        out.at(c, y, x) = top + a.t * (bot - top);
      }
    }
  return out;
}

/// [0, 1] -> [-1, 1] via 2v - 1; result has shape (C, H, W).
inline Tensor to_normalized_tensor(const Image& img) {
  std::vector<float> v(img.data.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = 2.0f * img.data[i] - 1.0f;
  return Tensor(Shape{img.channels, img.height, img.width}, std::move(v));
}

/// Clamps to [-1, 1] then maps back to [0, 1]. Accepts (C, H, W) or a single
/// sample `index` of an (N, C, H, W) batch.
inline Image from_normalized_tensor(const Tensor& t, int index = 0) {
  const Shape& s = t.shape();
  int C, H, W;
  std::size_t offset = 0;
  if (s.size() == 3) {
    C = s[0], H = s[1], W = s[2];
  } else if (s.size() == 4) {
    C = s[1], H = s[2], W = s[3];
    offset = static_cast<std::size_t>(index) * C * H * W;
  } else {
    throw ShapeError("from_normalized_tensor: expected rank 3 or 4, got " + to_string(s));
  }
  Image img(C, H, W);
  auto d = t.data();
  for (std::size_t i = 0; i < img.data.size(); ++i)
    img.data[i] = (std::clamp(d[offset + i], -1.0f, 1.0f) + 1.0f) * 0.5f;
  return img;
}

}  // namespace uwfuse
