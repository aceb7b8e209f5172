#pragma once

// Image complexity from superpixel colour contrast.
//
// The image is over-segmented with SLIC into about 200 superpixels. Each
// superpixel gets a contrast value, the mean Lab distance from its mean colour
// to every other superpixel's, min-max normalized over the image. The score is
// the mean binary entropy of those values: images whose regions split into
// clearly "near" and "far" groups score low, cluttered ones score high.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

#include "ebsal/data/image.hpp"
#include "ebsal/metrics.hpp"

namespace ebsal {

struct SlicConfig {
  std::size_t superpixels = 200;
  double compactness = 10.0;
  int iterations = 10;
};

struct Segmentation {
  std::size_t height = 0, width = 0, count = 0;
  std::vector<int> labels;  // row-major, values in [0, count)
};

namespace detail {

inline double srgb_to_linear(double c) {
  return c <= 0.04045 ? c / 12.92 : std::pow((c + 0.055) / 1.055, 2.4);
}

inline double lab_f(double t) {
  constexpr double d = 6.0 / 29.0;
  return t > d * d * d ? std::cbrt(t) : t / (3 * d * d) + 4.0 / 29.0;
}

}  // namespace detail

// sRGB in [0,1] to CIE L*a*b* under D65.
inline std::array<double, 3> rgb_to_lab(double r, double g, double b) {
  r = detail::srgb_to_linear(std::clamp(r, 0.0, 1.0));
  g = detail::srgb_to_linear(std::clamp(g, 0.0, 1.0));
  b = detail::srgb_to_linear(std::clamp(b, 0.0, 1.0));
  const double x = (0.4124564 * r + 0.3575761 * g + 0.1804375 * b) / 0.95047;
  const double y = 0.2126729 * r + 0.7151522 * g + 0.0721750 * b;
  const double z = (0.0193339 * r + 0.1191920 * g + 0.9503041 * b) / 1.08883;
  const double fx = detail::lab_f(x), fy = detail::lab_f(y), fz = detail::lab_f(z);
  return {116 * fy - 16, 500 * (fx - fy), 200 * (fy - fz)};
}

// Planar Lab image (3 x h x w) of an RGB image.
inline Image to_lab(const Image& rgb) {
  if (rgb.channels != 3) throw DimensionError("Lab conversion needs an RGB image");
  Image lab(3, rgb.height, rgb.width);
  const std::size_t n = rgb.pixels();
  for (std::size_t i = 0; i < n; ++i) {
    const auto v = rgb_to_lab(rgb.data[i], rgb.data[n + i], rgb.data[2 * n + i]);
    for (int c = 0; c < 3; ++c) lab.data[c * n + i] = v[c];
  }
  return lab;
}

// SLIC superpixels: k-means in (L, a, b, x, y) restricted to 2S x 2S windows
// around grid-seeded centres, followed by merging of small disconnected
// fragments into a neighbour.
inline Segmentation slic(const Image& rgb, const SlicConfig& cfg = {}) {
  if (rgb.channels != 3) throw DimensionError("SLIC needs an RGB image");
  if (cfg.superpixels == 0) throw std::invalid_argument("SLIC needs at least one superpixel");
  const Image lab = to_lab(rgb);
  const int h = static_cast<int>(rgb.height), w = static_cast<int>(rgb.width);
  const std::size_t n = rgb.pixels();
  auto L = [&](int c, int y, int x) { return lab.data[c * n + static_cast<std::size_t>(y) * w + x]; };

  const double step = std::sqrt(static_cast<double>(n) / static_cast<double>(cfg.superpixels));
  struct Centre {
    double l, a, b, y, x;
  };
  std::vector<Centre> centres;
  for (double cy = step / 2; cy < h; cy += step)
    for (double cx = step / 2; cx < w; cx += step) {
      int by = static_cast<int>(cy), bx = static_cast<int>(cx);
      // Move the seed to the lowest colour gradient in its 3x3 neighbourhood.
      double best = std::numeric_limits<double>::max();
      int sy = by, sx = bx;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const int y = by + dy, x = bx + dx;
          if (y < 1 || y >= h - 1 || x < 1 || x >= w - 1) continue;
          double g = 0;
          for (int c = 0; c < 3; ++c) {
            g += std::pow(L(c, y, x + 1) - L(c, y, x - 1), 2) + std::pow(L(c, y + 1, x) - L(c, y - 1, x), 2);
          }
          if (g < best) {
            best = g;
            sy = y;
            sx = x;
          }
        }
      centres.push_back({L(0, sy, sx), L(1, sy, sx), L(2, sy, sx), double(sy), double(sx)});
    }

  std::vector<int> labels(n, -1);
  std::vector<double> dist(n);
  const int radius = static_cast<int>(std::ceil(step));
  const double spatial = (cfg.compactness / step) * (cfg.compactness / step);
  for (int it = 0; it < cfg.iterations; ++it) {
    std::fill(dist.begin(), dist.end(), std::numeric_limits<double>::max());
    for (std::size_t k = 0; k < centres.size(); ++k) {
      const auto& c = centres[k];
      const int y0 = std::max(0, static_cast<int>(c.y) - radius), y1 = std::min(h, static_cast<int>(c.y) + radius + 1);
      const int x0 = std::max(0, static_cast<int>(c.x) - radius), x1 = std::min(w, static_cast<int>(c.x) + radius + 1);
      for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x) {
          const double dc = std::pow(L(0, y, x) - c.l, 2) + std::pow(L(1, y, x) - c.a, 2) + std::pow(L(2, y, x) - c.b, 2);
          const double ds = (y - c.y) * (y - c.y) + (x - c.x) * (x - c.x);
          const double d = dc + ds * spatial;
          const std::size_t i = static_cast<std::size_t>(y) * w + x;
          if (d < dist[i]) {
            dist[i] = d;
            labels[i] = static_cast<int>(k);
          }
        }
    }
    std::vector<Centre> sum(centres.size(), Centre{0, 0, 0, 0, 0});
    std::vector<double> count(centres.size(), 0);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const int k = labels[static_cast<std::size_t>(y) * w + x];
        if (k < 0) continue;
        sum[k].l += L(0, y, x);
        sum[k].a += L(1, y, x);
        sum[k].b += L(2, y, x);
        sum[k].y += y;
        sum[k].x += x;
        count[k] += 1;
      }
    for (std::size_t k = 0; k < centres.size(); ++k) {
      if (count[k] == 0) continue;
      centres[k] = {sum[k].l / count[k], sum[k].a / count[k], sum[k].b / count[k], sum[k].y / count[k],
                    sum[k].x / count[k]};
    }
  }

  // Connected components in 4-connectivity; fragments below a quarter of the
  // nominal superpixel size join the previously labelled adjacent segment.
  Segmentation seg;
  seg.height = rgb.height;
  seg.width = rgb.width;
  seg.labels.assign(n, -1);
  const std::size_t min_size = std::max<std::size_t>(1, n / centres.size() / 4);
  const int dy4[4] = {-1, 0, 1, 0}, dx4[4] = {0, -1, 0, 1};
  std::vector<std::size_t> members;
  int next = 0;
  for (std::size_t start = 0; start < n; ++start) {
    if (seg.labels[start] >= 0) continue;
    const int y0 = static_cast<int>(start) / w, x0 = static_cast<int>(start) % w;
    int adjacent = -1;
    for (int d = 0; d < 4; ++d) {
      const int y = y0 + dy4[d], x = x0 + dx4[d];
      if (y >= 0 && y < h && x >= 0 && x < w && seg.labels[y * w + x] >= 0) adjacent = seg.labels[y * w + x];
    }
    members.assign(1, start);
    seg.labels[start] = next;
    for (std::size_t q = 0; q < members.size(); ++q) {
      const int y = static_cast<int>(members[q]) / w, x = static_cast<int>(members[q]) % w;
      for (int d = 0; d < 4; ++d) {
        const int yy = y + dy4[d], xx = x + dx4[d];
        if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
        const std::size_t j = static_cast<std::size_t>(yy) * w + xx;
        if (seg.labels[j] < 0 && labels[j] == labels[start]) {
          seg.labels[j] = next;
          members.push_back(j);
        }
      }
    }
    if (members.size() < min_size && adjacent >= 0) {
      for (auto j : members) seg.labels[j] = adjacent;
    } else {
      ++next;
    }
  }
  seg.count = static_cast<std::size_t>(next);
  return seg;
}

// Binary entropy in bits with h(0) = h(1) = 0.
inline double binary_entropy(double c) {
  if (c <= 0 || c >= 1) return 0.0;
  return -c * std::log2(c) - (1 - c) * std::log2(1 - c);
}

// Per-superpixel contrast values, min-max normalized to [0,1]. A zero range
// gives all zeros.
inline std::vector<double> contrast_vector(const Image& rgb, const Segmentation& seg) {
  const Image lab = to_lab(rgb);
  const std::size_t n = rgb.pixels(), k = seg.count;
  std::vector<std::array<double, 3>> mean(k, {0, 0, 0});
  std::vector<double> count(k, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const int s = seg.labels[i];
    for (int c = 0; c < 3; ++c) mean[s][c] += lab.data[c * n + i];
    count[s] += 1;
  }
  for (std::size_t s = 0; s < k; ++s)
    for (int c = 0; c < 3; ++c) mean[s][c] /= count[s];
  std::vector<double> contrast(k, 0.0);
  if (k < 2) return contrast;
  for (std::size_t i = 0; i < k; ++i) {
    double total = 0;
    for (std::size_t j = 0; j < k; ++j) {
      if (i == j) continue;
      total += std::hypot(mean[i][0] - mean[j][0], mean[i][1] - mean[j][1], mean[i][2] - mean[j][2]);
    }
    contrast[i] = total / static_cast<double>(k - 1);
  }
  const auto [lo, hi] = std::minmax_element(contrast.begin(), contrast.end());
  const double low = *lo, range = *hi - *lo;
  // Differences at rounding level count as a flat image.
  if (!(range > 1e-9)) return std::vector<double>(k, 0.0);
  for (auto& c : contrast) c = (c - low) / range;
  return contrast;
}

inline double complexity_score(const Image& rgb, const SlicConfig& cfg = {}) {
  if (rgb.channels != 3) throw DimensionError("complexity score needs an RGB image");
  if (std::min(rgb.height, rgb.width) < 32) {
    throw MetricError("image too small to segment: minimum side is 32, got " +
                      std::to_string(std::min(rgb.height, rgb.width)));
  }
  const auto contrast = contrast_vector(rgb, slic(rgb, cfg));
  double total = 0;
  for (double c : contrast) total += binary_entropy(c);
  return total / static_cast<double>(contrast.size());
}

}  // namespace ebsal
