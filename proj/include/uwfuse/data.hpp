// SPDX-License-Identifier: Apache-2.0
//
// Synthetic underwater pairs: a clean image is attenuated per channel with
// distance and mixed with a veiling background color,
//
//   out_c = clean_c * exp(-beta_c * d) + B_c * (1 - exp(-beta_c * d)) + noise,
//
// then clamped to [0, 1]. A manifest records everything needed to regenerate
// each degraded image bit-exactly from its clean source.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "uwfuse/image.hpp"
#include "uwfuse/text.hpp"

namespace uwfuse {

namespace fs = std::filesystem;

struct DegradeParams {
  std::array<float, 3> beta{0.40f, 0.12f, 0.06f};
  std::array<float, 3> background{0.05f, 0.35f, 0.45f};
  float depth_min = 0.5f;
  float depth_max = 3.0f;
  float noise_sigma = 0.01f;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(beta[0] > beta[1] && beta[1] > beta[2] && beta[2] > 0.0f))
      throw Error("attenuation must satisfy beta_r > beta_g > beta_b > 0");
    for (float b : background)
      if (!(b >= 0.0f && b <= 1.0f)) throw Error("background channels must lie in [0, 1]");
    if (!(depth_min >= 0.0f && depth_max >= depth_min)) throw Error("depth range must satisfy 0 <= min <= max");
    if (!(noise_sigma >= 0.0f)) throw Error("noise_sigma must be >= 0");
  }

  bool operator==(const DegradeParams&) const = default;
};

/// Applies the attenuation/veiling model at distance `d`, adds Gaussian noise
/// drawn from `noise_seed`, and clamps to [0, 1].
inline Image degrade(const Image& clean, const DegradeParams& p, double d, std::uint64_t noise_seed) {
  if (!(d >= 0.0)) throw Error("degrade: distance must be >= 0");
  if (clean.channels != 3) throw Error("degrade: expected an RGB image");
  Image out(3, clean.height, clean.width);
  std::mt19937_64 rng(noise_seed);
  const std::size_t plane = static_cast<std::size_t>(clean.height) * clean.width;
  for (int c = 0; c < 3; ++c) {
    const double t = std::exp(-static_cast<double>(p.beta[static_cast<std::size_t>(c)]) * d);
    const double veil = static_cast<double>(p.background[static_cast<std::size_t>(c)]) * (1.0 - t);
    for (std::size_t i = 0; i < plane; ++i) {
      double v = static_cast<double>(clean.data[c * plane + i]) * t + veil;
      if (p.noise_sigma > 0.0f) v += p.noise_sigma * standard_normal(rng);
      out.data[c * plane + i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  }
  return out;
}

/// Built-in clean scene: a two-color gradient, a smooth value-noise field and
/// a handful of flat shapes.
template <class Rng>
Image procedural_texture(int size, Rng& rng) {
  auto color = [&] {
    std::array<double, 3> c{};
    for (double& v : c) v = uniform01(rng);
    return c;
  };
  Image img(3, size, size);
  const auto c0 = color();
  const auto c1 = color();
  const double angle = uniform01(rng) * 6.283185307179586;
  const double dx = std::cos(angle), dy = std::sin(angle);
  constexpr int kGrid = 5;
  std::array<double, kGrid * kGrid> noise{};
  for (double& v : noise) v = uniform01(rng) - 0.5;
  const double amp = 0.1 + 0.2 * uniform01(rng);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const double u = (x + 0.5) / size, v = (y + 0.5) / size;
      const double s = std::clamp(0.5 + (u - 0.5) * dx + (v - 0.5) * dy, 0.0, 1.0);
      const double gx = u * (kGrid - 1), gy = v * (kGrid - 1);
      const int ix = std::min(static_cast<int>(gx), kGrid - 2), iy = std::min(static_cast<int>(gy), kGrid - 2);
      const double fx = gx - ix, fy = gy - iy;
      const double n = (noise[iy * kGrid + ix] * (1 - fx) + noise[iy * kGrid + ix + 1] * fx) * (1 - fy) +
                       (noise[(iy + 1) * kGrid + ix] * (1 - fx) + noise[(iy + 1) * kGrid + ix + 1] * fx) * fy;
      for (int c = 0; c < 3; ++c) {
        const auto k = static_cast<std::size_t>(c);
        img.at(c, y, x) = static_cast<float>(std::clamp(c0[k] * (1 - s) + c1[k] * s + amp * n, 0.0, 1.0));
      }
    }
  const int shapes = 2 + static_cast<int>(uniform_index(rng, 4));
  for (int k = 0; k < shapes; ++k) {
    const auto col = color();
    const bool circle = uniform01(rng) < 0.5;
    const double cx = uniform01(rng) * size, cy = uniform01(rng) * size;
    const double r = (0.08 + 0.2 * uniform01(rng)) * size;
    const double hw = (0.05 + 0.2 * uniform01(rng)) * size, hh = (0.05 + 0.2 * uniform01(rng)) * size;
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        const double px = x + 0.5 - cx, py = y + 0.5 - cy;
        const bool inside = circle ? px * px + py * py <= r * r : std::abs(px) <= hw && std::abs(py) <= hh;
        if (inside)
          for (int c = 0; c < 3; ++c) img.at(c, y, x) = static_cast<float>(col[static_cast<std::size_t>(c)]);
      }
  }
  return img;
}

// ---------------------------------------------------------------------------
// Manifest: `id<TAB>clean-path<TAB>degraded-path<TAB>d<TAB>noise-seed` per
// line, paths relative to the manifest's directory. Leading `# key = value`
// lines carry the DegradeParams.

struct ManifestEntry {
  std::string id;
  std::string clean_path;
  std::string degraded_path;
  double distance = 0.0;
  std::uint64_t noise_seed = 0;
};

struct Manifest {
  DegradeParams params;
  std::vector<ManifestEntry> entries;
  fs::path root;  // directory the relative paths resolve against

  fs::path clean_file(const ManifestEntry& e) const { return root / e.clean_path; }
  fs::path degraded_file(const ManifestEntry& e) const { return root / e.degraded_path; }
};

inline std::string format_triple(const std::array<float, 3>& v) {
  return text::format(v[0]) + " " + text::format(v[1]) + " " + text::format(v[2]);
}

inline void write_manifest(const fs::path& path, const Manifest& m) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write manifest '" + path.string() + "'");
  out << "# uwfuse manifest v1\n";
  out << "# beta = " << format_triple(m.params.beta) << "\n";
  out << "# background = " << format_triple(m.params.background) << "\n";
  out << "# depth_range = " << text::format(m.params.depth_min) << " " << text::format(m.params.depth_max) << "\n";
  out << "# noise_sigma = " << text::format(m.params.noise_sigma) << "\n";
  out << "# seed = " << m.params.seed << "\n";
  for (const ManifestEntry& e : m.entries)
    out << e.id << '\t' << e.clean_path << '\t' << e.degraded_path << '\t' << text::format(e.distance) << '\t'
        << e.noise_seed << '\n';
  out.flush();
  if (!out) throw Error("failed writing manifest '" + path.string() + "'");
}

inline std::array<float, 3> parse_triple(const std::string& s, const char* what) {
  auto w = text::words(s);
  if (w.size() != 3) throw Error(std::string("manifest: expected three values for ") + what);
  return {text::parse<float>(w[0], what), text::parse<float>(w[1], what), text::parse<float>(w[2], what)};
}

inline Manifest read_manifest(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open manifest '" + path.string() + "'");
  Manifest m;
  m.root = path.parent_path();
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line[0] == '#') {
      const auto eq = line.find('=');
      if (eq == std::string::npos) continue;
      const std::string key(text::trim(std::string_view(line).substr(1, eq - 1)));
      const std::string value(text::trim(std::string_view(line).substr(eq + 1)));
      if (key == "beta") m.params.beta = parse_triple(value, "beta");
      else if (key == "background") m.params.background = parse_triple(value, "background");
      else if (key == "depth_range") {
        auto w = text::words(value);
        if (w.size() != 2) throw Error("manifest: depth_range needs two values");
        m.params.depth_min = text::parse<float>(w[0], "depth_range");
        m.params.depth_max = text::parse<float>(w[1], "depth_range");
      } else if (key == "noise_sigma") m.params.noise_sigma = text::parse<float>(value, "noise_sigma");
      else if (key == "seed") m.params.seed = text::parse<std::uint64_t>(value, "seed");
      continue;
    }
    auto f = text::split(line, '\t');
    if (f.size() != 5)
      throw Error("manifest '" + path.string() + "' line " + std::to_string(lineno) + ": expected 5 fields");
    m.entries.push_back(ManifestEntry{f[0], f[1], f[2], text::parse<double>(f[3], "distance"),
                                      text::parse<std::uint64_t>(f[4], "noise seed")});
  }
  return m;
}

// ---------------------------------------------------------------------------

struct SynthOptions {
  int count = 1;
  int size = 64;
  std::optional<fs::path> source_dir;  // procedural textures when empty
  DegradeParams params;
};

inline std::uint64_t pair_noise_seed(const DegradeParams& p, std::size_t i) { return mix_seed(p.seed, 0x6e6f, i); }

inline double pair_distance(const DegradeParams& p, std::size_t i) {
  std::mt19937_64 rng(mix_seed(p.seed, 0xd157, i));
  return p.depth_min + uniform01(rng) * (static_cast<double>(p.depth_max) - p.depth_min);
}

/// Regenerates the degraded image of `e` from its stored clean image.
inline Image regenerate_degraded(const Manifest& m, const ManifestEntry& e) {
  return quantize(degrade(read_png(m.clean_file(e)), m.params, e.distance, e.noise_seed));
}

/// Writes `clean/`, `degraded/` and `manifest.tsv` under `out_dir`. All inputs
/// are validated (and sources decoded) before anything is written.
inline Manifest synth_dataset(const SynthOptions& opt, const fs::path& out_dir) {
  if (opt.count < 1) throw Error("synth: count must be >= 1");
  if (opt.size < 1) throw Error("synth: size must be >= 1");
  opt.params.validate();
  std::vector<Image> sources;
  if (opt.source_dir) {
    if (!fs::is_directory(*opt.source_dir))
      throw Error("synth: source directory '" + opt.source_dir->string() + "' is not readable");
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(*opt.source_dir)) {
      auto ext = entry.path().extension().string();
      std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
      if (entry.is_regular_file() && ext == ".png") files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) throw Error("synth: no PNG images in '" + opt.source_dir->string() + "'");
    for (const auto& f : files) sources.push_back(resize_bilinear(read_png(f), opt.size, opt.size));
  }

  std::error_code ec;
  fs::create_directories(out_dir / "clean", ec);
  fs::create_directories(out_dir / "degraded", ec);
  if (!fs::is_directory(out_dir / "clean") || !fs::is_directory(out_dir / "degraded"))
    throw Error("synth: cannot create output directories under '" + out_dir.string() + "'");

  Manifest m;
  m.params = opt.params;
  m.root = out_dir;
  for (int i = 0; i < opt.count; ++i) {
    const auto k = static_cast<std::size_t>(i);
    char id[32];
    std::snprintf(id, sizeof id, "pair_%05d", i);
    Image clean;
    if (sources.empty()) {
      std::mt19937_64 rng(mix_seed(opt.params.seed, 0x7e47, k));
      clean = procedural_texture(opt.size, rng);
    } else {
      clean = sources[k % sources.size()];
    }
    clean = quantize(clean);
    ManifestEntry e{id, std::string("clean/") + id + ".png", std::string("degraded/") + id + ".png",
                    pair_distance(opt.params, k), pair_noise_seed(opt.params, k)};
    write_png(m.clean_file(e), clean);
    write_png(m.degraded_file(e), degrade(clean, opt.params, e.distance, e.noise_seed));
    m.entries.push_back(std::move(e));
  }
  write_manifest(out_dir / "manifest.tsv", m);
  return m;
}

// ---------------------------------------------------------------------------

struct ImagePair {
  std::string id;
  Tensor x;  // degraded, (3, H, W) in [-1, 1]
  Tensor y;  // clean
};

struct Dataset {
  std::vector<ImagePair> pairs;
  std::size_t skipped = 0;
  int size = 0;

  Dataset subset(std::span<const std::size_t> indices) const {
    Dataset d;
    d.size = size;
    for (std::size_t i : indices) d.pairs.push_back(pairs.at(i));
    return d;
  }
};

/// Decodes, resizes to `target_size` and normalizes every pair. Undecodable
/// pairs are skipped with a warning and counted.
inline Dataset load_pairs(const Manifest& m, int target_size) {
  if (target_size < 1) throw Error("load_pairs: target size must be positive");
  Dataset d;
  d.size = target_size;
  for (const ManifestEntry& e : m.entries) {
    try {
      Image x = resize_bilinear(read_png(m.degraded_file(e)), target_size, target_size);
      Image y = resize_bilinear(read_png(m.clean_file(e)), target_size, target_size);
      d.pairs.push_back(ImagePair{e.id, to_normalized_tensor(x), to_normalized_tensor(y)});
    } catch (const Error& err) {
      std::cerr << "warning: skipping pair '" << e.id << "': " << err.what() << "\n";
      ++d.skipped;
    }
  }
  return d;
}

inline Dataset load_pairs(const fs::path& manifest, int target_size) {
  return load_pairs(read_manifest(manifest), target_size);
}

/// Seeded Fisher-Yates permutation of [0, n) for one epoch.
inline std::vector<std::size_t> epoch_permutation(std::size_t n, std::uint64_t seed, std::uint64_t epoch) {
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  std::mt19937_64 rng(mix_seed(seed, 0x5e9, epoch));
  for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[uniform_index(rng, i)]);
  return perm;
}

/// Train/held-out split: shuffle with `seed`, hold out the last 12.5%.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> holdout_split(std::size_t n,
                                                                                    std::uint64_t seed) {
  auto perm = epoch_permutation(n, seed, 0x401d);
  const std::size_t held = std::max<std::size_t>(1, n / 8);
  if (held >= n) throw Error("holdout_split: need at least 2 pairs");
  std::vector<std::size_t> train(perm.begin(), perm.end() - static_cast<std::ptrdiff_t>(held));
  std::vector<std::size_t> test(perm.end() - static_cast<std::ptrdiff_t>(held), perm.end());
  return {std::move(train), std::move(test)};
}

/// Stacks the selected pairs into (B, 3, H, W) input and target tensors.
inline std::pair<Tensor, Tensor> make_batch(const Dataset& d, std::span<const std::size_t> indices) {
  if (indices.empty()) throw Error("make_batch: empty batch");
  const Shape& s = d.pairs.at(indices[0]).x.shape();
  std::vector<float> xs, ys;
  xs.reserve(indices.size() * numel(s));
  ys.reserve(indices.size() * numel(s));
  for (std::size_t i : indices) {
    const ImagePair& p = d.pairs.at(i);
    xs.insert(xs.end(), p.x.data().begin(), p.x.data().end());
    ys.insert(ys.end(), p.y.data().begin(), p.y.data().end());
  }
  Shape bs{static_cast<int>(indices.size()), s[0], s[1], s[2]};
  return {Tensor(bs, std::move(xs)), Tensor(bs, std::move(ys))};
}

}  // namespace uwfuse
