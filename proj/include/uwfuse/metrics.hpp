// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "uwfuse/image.hpp"
#include "uwfuse/text.hpp"

namespace uwfuse {

inline void check_same_size(const Image& a, const Image& b, const char* what) {
  if (!a.same_size(b))
    throw ShapeError(std::string(what) + ": image sizes differ (" + std::to_string(a.channels) + "x" +
                     std::to_string(a.height) + "x" + std::to_string(a.width) + " vs " +
                     std::to_string(b.channels) + "x" + std::to_string(b.height) + "x" + std::to_string(b.width) +
                     ")");
}

/// Mean squared error over all channels jointly.
inline double mse(const Image& a, const Image& b) {
  check_same_size(a, b, "mse");
  double s = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const double d = static_cast<double>(a.data[i]) - b.data[i];
    s += d * d;
  }
  return a.data.empty() ? 0.0 : s / static_cast<double>(a.data.size());
}

/// Peak 1.0; identical images give +infinity.
inline double psnr(const Image& a, const Image& b) {
  const double e = mse(a, b);
  if (e == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / e);
}

struct SsimOptions {
  int window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double range = 1.0;
};

inline std::vector<double> gaussian_window(int size, double sigma) {
  std::vector<double> w(static_cast<std::size_t>(size));
  const double c = (size - 1) / 2.0;
  double total = 0.0;
  for (int i = 0; i < size; ++i) {
    w[static_cast<std::size_t>(i)] = std::exp(-((i - c) * (i - c)) / (2.0 * sigma * sigma));
    total += w[static_cast<std::size_t>(i)];
  }
  for (double& v : w) v /= total;
  return w;
}

namespace detail {

// Valid-mode separable filtering of one plane.
inline std::vector<double> filter_valid(const std::vector<double>& plane, int h, int w,
                                        const std::vector<double>& k) {
  const int n = static_cast<int>(k.size());
  const int ow = w - n + 1, oh = h - n + 1;
  std::vector<double> tmp(static_cast<std::size_t>(h) * ow);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < ow; ++x) {
      double s = 0.0;
      for (int i = 0; i < n; ++i) s += k[static_cast<std::size_t>(i)] * plane[static_cast<std::size_t>(y) * w + x + i];
      tmp[static_cast<std::size_t>(y) * ow + x] = s;
    }
  std::vector<double> out(static_cast<std::size_t>(oh) * ow);
  for (int y = 0; y < oh; ++y)
    for (int x = 0; x < ow; ++x) {
      double s = 0.0;
      for (int i = 0; i < n; ++i) s += k[static_cast<std::size_t>(i)] * tmp[static_cast<std::size_t>(y + i) * ow + x];
      out[static_cast<std::size_t>(y) * ow + x] = s;
    }
  return out;
}

}  // namespace detail

/// Gaussian-window SSIM (11x11, sigma 1.5, K1 0.01, K2 0.03, L 1), evaluated at
/// every valid window position per channel, averaged over positions then
/// channels.
inline double ssim(const Image& a, const Image& b, const SsimOptions& o = {}) {
  check_same_size(a, b, "ssim");
  if (a.height < o.window || a.width < o.window)
    throw ShapeError("ssim: image " + std::to_string(a.height) + "x" + std::to_string(a.width) +
                     " smaller than the " + std::to_string(o.window) + "x" + std::to_string(o.window) + " window");
  const auto k = gaussian_window(o.window, o.sigma);
  const double c1 = (o.k1 * o.range) * (o.k1 * o.range);
  const double c2 = (o.k2 * o.range) * (o.k2 * o.range);
  const std::size_t plane = static_cast<std::size_t>(a.height) * a.width;
  double total = 0.0;
  for (int c = 0; c < a.channels; ++c) {
    std::vector<double> pa(plane), pb(plane), paa(plane), pbb(plane), pab(plane);
    for (std::size_t i = 0; i < plane; ++i) {
      pa[i] = a.data[c * plane + i];
      pb[i] = b.data[c * plane + i];
      paa[i] = pa[i] * pa[i];
      pbb[i] = pb[i] * pb[i];
      pab[i] = pa[i] * pb[i];
    }
    const auto ma = detail::filter_valid(pa, a.height, a.width, k);
    const auto mb = detail::filter_valid(pb, a.height, a.width, k);
    const auto saa = detail::filter_valid(paa, a.height, a.width, k);
    const auto sbb = detail::filter_valid(pbb, a.height, a.width, k);
    const auto sab = detail::filter_valid(pab, a.height, a.width, k);
    double acc = 0.0;
    for (std::size_t i = 0; i < ma.size(); ++i) {
      const double va = saa[i] - ma[i] * ma[i];
      const double vb = sbb[i] - mb[i] * mb[i];
      const double cov = sab[i] - ma[i] * mb[i];
      acc += ((2.0 * ma[i] * mb[i] + c1) * (2.0 * cov + c2)) /
             ((ma[i] * ma[i] + mb[i] * mb[i] + c1) * (va + vb + c2));
    }
    total += acc / static_cast<double>(ma.size());
  }
  return total / a.channels;
}

struct MetricRow {
  std::string id;
  double psnr = 0.0;
  double ssim = 0.0;
  double mse = 0.0;
};

struct MetricReport {
  std::vector<MetricRow> rows;

  std::size_t count() const { return rows.size(); }
  double mean_psnr() const { return mean_of(&MetricRow::psnr); }
  double mean_ssim() const { return mean_of(&MetricRow::ssim); }
  double mean_mse() const { return mean_of(&MetricRow::mse); }

  void add(std::string id, const Image& output, const Image& target) {
    rows.push_back(MetricRow{std::move(id), psnr(output, target), ssim(output, target), mse(output, target)});
  }

 private:
  double mean_of(double MetricRow::*field) const {
    if (rows.empty()) return std::numeric_limits<double>::quiet_NaN();
    double s = 0.0;
    for (const MetricRow& r : rows) s += r.*field;
    return s / static_cast<double>(rows.size());
  }
};

inline constexpr const char* kSsimVariant = "gaussian-11x11-sigma1.5-k1=0.01-k2=0.03-L=1";

/// `id<TAB>psnr<TAB>ssim<TAB>mse` per image, then a `MEAN` line.
inline void write_report(const std::filesystem::path& path, const MetricReport& r) {
  if (r.rows.empty()) throw Error("refusing to write an empty metric report");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write report '" + path.string() + "'");
  out << "# ssim=" << kSsimVariant << " psnr-peak=1\n";
  for (const MetricRow& row : r.rows)
    out << row.id << '\t' << text::format(row.psnr) << '\t' << text::format(row.ssim) << '\t'
        << text::format(row.mse) << '\n';
  out << "MEAN\t" << text::format(r.mean_psnr()) << '\t' << text::format(r.mean_ssim()) << '\t'
      << text::format(r.mean_mse()) << '\n';
  out.flush();
  if (!out) throw Error("failed writing report '" + path.string() + "'");
}

}  // namespace uwfuse
