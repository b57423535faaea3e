// SPDX-License-Identifier: Apache-2.0
//
// Generator variants (two-scale, U-Net family, and the full multi-scale
// encoder-decoder with global feature fusion) and the conditional patch critic.
#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "uwfuse/layers.hpp"

namespace uwfuse {

enum class GeneratorVariant { G2, UNet, UNetRB, UNetGF, OursNoGF, Ours };

inline constexpr std::array<GeneratorVariant, 6> kAllVariants = {
    GeneratorVariant::G2,     GeneratorVariant::UNet,     GeneratorVariant::UNetRB,
    GeneratorVariant::UNetGF, GeneratorVariant::OursNoGF, GeneratorVariant::Ours};

inline std::string_view variant_name(GeneratorVariant v) {
  switch (v) {
    case GeneratorVariant::G2: return "G2";
    case GeneratorVariant::UNet: return "UNet";
    case GeneratorVariant::UNetRB: return "UNetRB";
    case GeneratorVariant::UNetGF: return "UNetGF";
    case GeneratorVariant::OursNoGF: return "OursNoGF";
    case GeneratorVariant::Ours: return "Ours";
  }
  return "?";
}

/// Column label used in ablation tables.
inline std::string_view variant_label(GeneratorVariant v) {
  switch (v) {
    case GeneratorVariant::G2: return "G-2";
    case GeneratorVariant::UNet: return "U-Net";
    case GeneratorVariant::UNetRB: return "UNet+RB";
    case GeneratorVariant::UNetGF: return "UNet+GF";
    case GeneratorVariant::OursNoGF: return "Ours-GF";
    case GeneratorVariant::Ours: return "Ours";
  }
  return "?";
}

inline GeneratorVariant parse_variant(std::string_view s) {
  for (GeneratorVariant v : kAllVariants)
    if (s == variant_name(v) || s == variant_label(v)) return v;
  throw Error("unknown generator variant '" + std::string(s) + "'");
}

struct ModelConfig {
  int input_size = 32;
  int in_channels = 3;
  int base_channels = 16;
  int max_channels = 128;
  int disc_layers = 3;
  GeneratorVariant variant = GeneratorVariant::Ours;

  bool operator==(const ModelConfig&) const = default;
};

inline int log2_exact(int v) {
  int s = 0;
  while ((1 << s) < v) ++s;
  return (1 << s) == v ? s : -1;
}

struct VariantTraits {
  int scales = 0;
  bool residual = false;
  bool global_fusion = false;
  bool pooled_global = false;  // f_g from spatial mean of the deepest feature
};

inline VariantTraits variant_traits(GeneratorVariant v, int input_size) {
  const int full = std::max(log2_exact(input_size), 0);
  const int unet = input_size >= 32 ? 5 : full;
  switch (v) {
    case GeneratorVariant::G2: return {2, false, false, false};
    case GeneratorVariant::UNet: return {unet, false, false, false};
    case GeneratorVariant::UNetRB: return {unet, true, false, false};
    case GeneratorVariant::UNetGF: return {unet, false, true, true};
    case GeneratorVariant::OursNoGF: return {full, true, false, false};
    case GeneratorVariant::Ours: return {full, true, true, false};
  }
  return {};
}

inline void validate(const ModelConfig& cfg) {
  const int lg = log2_exact(cfg.input_size);
  if (cfg.input_size < 4 || lg < 0)
    throw Error("input_size must be a power of two >= 4, got " + std::to_string(cfg.input_size));
  if (cfg.in_channels != 3) throw Error("in_channels must be 3");
  if (cfg.base_channels < 1 || cfg.max_channels < cfg.base_channels)
    throw Error("channel widths must satisfy 1 <= base_channels <= max_channels");
  const int scales = variant_traits(cfg.variant, cfg.input_size).scales;
  if (scales < 2 || cfg.input_size < (1 << scales))
    throw Error("input_size " + std::to_string(cfg.input_size) + " too small for " +
                std::string(variant_name(cfg.variant)) + " (" + std::to_string(scales) + " scales)");
  if (cfg.disc_layers < 1 || (cfg.input_size >> cfg.disc_layers) < 1)
    throw Error("disc_layers " + std::to_string(cfg.disc_layers) + " too deep for input_size " +
                std::to_string(cfg.input_size));
}

inline int scale_channels(const ModelConfig& cfg, int i) {
  long c = static_cast<long>(cfg.base_channels) << std::min(i, 30);
  return static_cast<int>(std::min<long>(c, cfg.max_channels));
}

namespace detail {

constexpr float kInitStd = 0.02f;
/// Written into checkpoints; loading refuses any other value.
inline const std::string kInitScheme = "normal(0, 0.02) weights, zero bias, unit gain";

template <class Rng>
void add_conv(ParameterStore& s, const std::string& name, int a, int b, int k, int bias_channels, Rng& rng) {
  s.add(name + ".weight", normal_tensor({a, b, k, k}, kInitStd, rng));
  s.add(name + ".bias", Tensor::zeros({bias_channels}));
}

inline void add_norm(ParameterStore& s, const std::string& name, int c) {
  s.add(name + ".gain", Tensor::ones({c}));
  s.add(name + ".shift", Tensor::zeros({c}));
}

inline Conv2dParams conv_params(const BoundParams& p, const std::string& name, int stride, int padding) {
  return Conv2dParams{p(name + ".weight"), p(name + ".bias"), stride, padding};
}

inline NormParams norm_params(const BoundParams& p, const std::string& name) {
  return NormParams{p(name + ".gain"), p(name + ".shift")};
}

}  // namespace detail

/// Multi-scale encoder-decoder generator. Encoder stages are 4x4 stride-2
/// convolutions; the decoder mirrors them with transposed convolutions and
/// concatenates the (optionally fused) encoder feature at each resolution.
class Generator {
 public:
  Generator(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    validate(cfg);
    traits_ = variant_traits(cfg.variant, cfg.input_size);
    std::mt19937_64 rng(seed);
    const int S = traits_.scales;
    for (int i = 0; i < S; ++i) {
      const int in = i == 0 ? cfg.in_channels : channels(i - 1);
      const std::string p = "enc" + std::to_string(i);
      detail::add_conv(params_, p + ".conv", channels(i), in, 4, channels(i), rng);
      if (has_norm(i)) detail::add_norm(params_, p + ".norm", channels(i));
      if (has_residual(i)) {
        detail::add_conv(params_, p + ".res.conv1", channels(i), channels(i), 3, channels(i), rng);
        detail::add_norm(params_, p + ".res.norm1", channels(i));
        detail::add_conv(params_, p + ".res.conv2", channels(i), channels(i), 3, channels(i), rng);
        detail::add_norm(params_, p + ".res.norm2", channels(i));
      }
    }
    if (traits_.global_fusion)
      for (int i = 0; i + 1 < S; ++i)
        detail::add_conv(params_, "fuse" + std::to_string(i) + ".proj", channels(i), global_channels(), 1,
                         channels(i), rng);
    for (int j = S - 2; j >= 0; --j) {
      const std::string p = "dec" + std::to_string(j);
      detail::add_conv(params_, p + ".convt", decoder_in(j), channels(j), 4, channels(j), rng);
      detail::add_norm(params_, p + ".norm", channels(j));
    }
    detail::add_conv(params_, "out.convt", channels(0) + skip_channels(0), cfg.in_channels, 4, cfg.in_channels,
                     rng);
  }

  const ModelConfig& config() const { return cfg_; }
  const VariantTraits& traits() const { return traits_; }
  const ParameterStore& params() const { return params_; }
  ParameterStore& params() { return params_; }

  int channels(int scale) const { return scale_channels(cfg_, scale); }
  int global_channels() const { return channels(traits_.scales - 1); }
  int spatial(int scale) const { return cfg_.input_size >> (scale + 1); }
  int skip_channels(int scale) const { return channels(scale) * (traits_.global_fusion ? 2 : 1); }

  /// Forward pass; x is (N, 3, H, W) in [-1, 1] with H = W = input_size.
  Tensor forward(const BoundParams& p, const Tensor& x) const {
    if (x.rank() != 4 || x.dim(1) != cfg_.in_channels || x.dim(2) != cfg_.input_size ||
        x.dim(3) != cfg_.input_size)
      throw ShapeError("generator: expected input (N," + std::to_string(cfg_.in_channels) + "," +
                       std::to_string(cfg_.input_size) + "," + std::to_string(cfg_.input_size) + "), got " +
                       to_string(x.shape()));
    const int S = traits_.scales;
    std::vector<Tensor> feats;
    Tensor h = x;
    for (int i = 0; i < S; ++i) {
      const std::string name = "enc" + std::to_string(i);
      h = conv2d(h, detail::conv_params(p, name + ".conv", 2, 1));
      if (has_norm(i)) h = instance_norm(h, detail::norm_params(p, name + ".norm"));
      h = leaky_relu(h, 0.2f);
      if (has_residual(i)) {
        ResidualParams rp{detail::conv_params(p, name + ".res.conv1", 1, 1),
                          detail::norm_params(p, name + ".res.norm1"),
                          detail::conv_params(p, name + ".res.conv2", 1, 1),
                          detail::norm_params(p, name + ".res.norm2")};
        h = residual_block(h, rp);
      }
      feats.push_back(h);
    }
    std::vector<Tensor> skips = feats;
    if (traits_.global_fusion) {
      Tensor f_g = global_features(feats.back());
      for (int i = 0; i + 1 < S; ++i)
        skips[i] = fuse_global(feats[i], f_g,
                               FusionUnit{detail::conv_params(p, "fuse" + std::to_string(i) + ".proj", 1, 0)});
    }
    Tensor d = feats.back();
    for (int j = S - 2; j >= 0; --j) {
      const std::string name = "dec" + std::to_string(j);
      d = conv_transpose2d(d, detail::conv_params(p, name + ".convt", 2, 1));
      d = relu(instance_norm(d, detail::norm_params(p, name + ".norm")));
      d = concat({d, skips[j]});
    }
    return tanh(conv_transpose2d(d, detail::conv_params(p, "out.convt", 2, 1)));
  }

  /// Inference without a tape.
  Tensor operator()(const Tensor& x) const { return forward(BoundParams(params_, nullptr), x); }

 private:
  bool has_norm(int i) const { return i > 0 && spatial(i) >= 2; }
  bool has_residual(int i) const { return traits_.residual && spatial(i) >= 2; }
  int decoder_in(int j) const {
    return j == traits_.scales - 2 ? channels(j + 1) : channels(j + 1) + skip_channels(j + 1);
  }

  Tensor global_features(const Tensor& deepest) const {
    if (!traits_.pooled_global) return deepest;
    const float inv = 1.0f / static_cast<float>(deepest.dim(2) * deepest.dim(3));
    return scale(sum_to(deepest, Shape{deepest.dim(0), deepest.dim(1), 1, 1}), inv);
  }

  ModelConfig cfg_;
  VariantTraits traits_;
  ParameterStore params_;
};

/// Conditional patch critic: scores (condition, candidate) pairs with an
/// unbounded per-patch map. No normalization layers, so each score depends
/// only on its receptive field.
class Discriminator {
 public:
  Discriminator(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    validate(cfg);
    std::mt19937_64 rng(seed);
    for (int l = 0; l < cfg.disc_layers; ++l) {
      const int in = l == 0 ? 2 * cfg.in_channels : channels(l - 1);
      detail::add_conv(params_, "l" + std::to_string(l) + ".conv", channels(l), in, 4, channels(l), rng);
    }
    detail::add_conv(params_, "head.conv", 1, channels(cfg.disc_layers - 1), 3, 1, rng);
  }

  const ModelConfig& config() const { return cfg_; }
  const ParameterStore& params() const { return params_; }
  ParameterStore& params() { return params_; }
  int channels(int l) const { return scale_channels(cfg_, l); }

  /// Patch score map (N, 1, H / 2^L, W / 2^L) for condition x and candidate.
  Tensor forward(const BoundParams& p, const Tensor& condition, const Tensor& candidate) const {
    if (condition.shape() != candidate.shape())
      throw ShapeError("discriminator: condition " + to_string(condition.shape()) + " and candidate " +
                       to_string(candidate.shape()) + " differ");
    return forward_pair(p, concat({condition, candidate}));
  }

  /// Same map for an already concatenated (N, 6, H, W) input.
  Tensor forward_pair(const BoundParams& p, const Tensor& pair) const {
    if (pair.rank() != 4 || pair.dim(1) != 2 * cfg_.in_channels)
      throw ShapeError("discriminator: expected 6-channel input, got " + to_string(pair.shape()));
    Tensor h = pair;
    for (int l = 0; l < cfg_.disc_layers; ++l)
      h = leaky_relu(conv2d(h, detail::conv_params(p, "l" + std::to_string(l) + ".conv", 2, 1)), 0.2f);
    return conv2d(h, detail::conv_params(p, "head.conv", 1, 1));
  }

 private:
  ModelConfig cfg_;
  ParameterStore params_;
};

}  // namespace uwfuse
