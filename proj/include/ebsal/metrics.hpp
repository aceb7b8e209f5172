#pragma once

// Saliency evaluation measures on single-channel maps in [0,1].
//
// Ground truth is binarized at gt > 0.5 wherever a measure needs a binary
// mask. Threshold sweeps use t = k/255, k = 1..255, with pred >= t.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "ebsal/data/image.hpp"

namespace ebsal {

class MetricError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct MetricsReport {
  double s_measure = 0, mean_f = 0, mean_e = 0, mae = 0;
};

inline nlohmann::ordered_json to_json(const MetricsReport& r) {
  return {{"s_measure", r.s_measure}, {"mean_f", r.mean_f}, {"mean_e", r.mean_e}, {"mae", r.mae}};
}

namespace detail {

inline constexpr double kEps = std::numeric_limits<double>::epsilon();
inline constexpr int kThresholds = 255;

inline void check_maps(const Image& pred, const Image& gt) {
  if (pred.channels != 1 || gt.channels != 1) throw DimensionError("metrics expect single-channel maps");
  if (pred.height != gt.height || pred.width != gt.width) {
    throw DimensionError("prediction is " + std::to_string(pred.height) + "x" + std::to_string(pred.width) +
                         ", ground truth is " + std::to_string(gt.height) + "x" + std::to_string(gt.width));
  }
  if (pred.data.empty()) throw MetricError("empty maps");
}

inline std::vector<unsigned char> binarize_gt(const Image& gt) {
  std::vector<unsigned char> b(gt.data.size());
  for (std::size_t i = 0; i < b.size(); ++i) b[i] = gt.data[i] > 0.5;
  return b;
}

inline double threshold(int k) { return static_cast<double>(k) / kThresholds; }

// Mean and sample standard deviation of pred over pixels where mask == want.
inline std::pair<double, double> region_stats(const std::vector<double>& v) {
  double mean = 0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  if (v.size() < 2) return {mean, 0.0};
  double ss = 0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return {mean, std::sqrt(ss / static_cast<double>(v.size() - 1))};
}

inline double object_score(const std::vector<double>& values) {
  const auto [x, sigma] = region_stats(values);
  return 2 * x / (x * x + 1 + sigma + kEps);
}

inline double s_object(const Image& pred, const std::vector<unsigned char>& gt) {
  std::vector<double> fg, bg;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (gt[i]) fg.push_back(pred.data[i]);
    else bg.push_back(1 - pred.data[i]);
  }
  const double u = static_cast<double>(fg.size()) / static_cast<double>(gt.size());
  return u * object_score(fg) + (1 - u) * object_score(bg);
}

// Structural similarity of one rectangular block.
inline double block_ssim(const Image& pred, const std::vector<unsigned char>& gt, std::size_t y0, std::size_t y1,
                         std::size_t x0, std::size_t x1) {
  const std::size_t w = pred.width;
  const double n = static_cast<double>((y1 - y0) * (x1 - x0));
  double mx = 0, my = 0;
  for (std::size_t y = y0; y < y1; ++y)
    for (std::size_t x = x0; x < x1; ++x) {
      mx += pred.data[y * w + x];
      my += gt[y * w + x];
    }
  mx /= n;
  my /= n;
  double sx = 0, sy = 0, sxy = 0;
  for (std::size_t y = y0; y < y1; ++y)
    for (std::size_t x = x0; x < x1; ++x) {
      const double a = pred.data[y * w + x] - mx, b = gt[y * w + x] - my;
      sx += a * a;
      sy += b * b;
      sxy += a * b;
    }
  sx /= n - 1 + kEps;
  sy /= n - 1 + kEps;
  sxy /= n - 1 + kEps;
  const double alpha = 4 * mx * my * sxy;
  const double beta = (mx * mx + my * my) * (sx + sy);
  if (alpha != 0) return alpha / (beta + kEps);
  return beta == 0 ? 1.0 : 0.0;
}

inline double s_region(const Image& pred, const std::vector<unsigned char>& gt) {
  const std::size_t h = pred.height, w = pred.width;
  // Rounded foreground centroid, as a split position counted from 1.
  double sy = 0, sx = 0, count = 0;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      if (gt[y * w + x]) {
        sy += static_cast<double>(y);
        sx += static_cast<double>(x);
        count += 1;
      }
  std::size_t cx, cy;
  if (count == 0) {
    cx = static_cast<std::size_t>(std::round(w / 2.0));
    cy = static_cast<std::size_t>(std::round(h / 2.0));
  } else {
    cx = static_cast<std::size_t>(std::round(sx / count)) + 1;
    cy = static_cast<std::size_t>(std::round(sy / count)) + 1;
  }
  cx = std::min(cx, w);
  cy = std::min(cy, h);
  const double area = static_cast<double>(h * w);
  double score = 0;
  const std::array<std::array<std::size_t, 4>, 4> blocks{{{0, cy, 0, cx}, {0, cy, cx, w}, {cy, h, 0, cx}, {cy, h, cx, w}}};
  for (const auto& b : blocks) {
    const double weight = static_cast<double>((b[1] - b[0]) * (b[3] - b[2])) / area;
    if (weight == 0) continue;
    score += weight * block_ssim(pred, gt, b[0], b[1], b[2], b[3]);
  }
  return score;
}

}  // namespace detail

inline double mae(const Image& pred, const Image& gt) {
  detail::check_maps(pred, gt);
  double s = 0;
  for (std::size_t i = 0; i < pred.data.size(); ++i) s += std::abs(pred.data[i] - gt.data[i]);
  return s / static_cast<double>(pred.data.size());
}

// F_beta with beta^2 = 0.3 averaged over the 255 thresholds; 0/0 counts as 0.
inline double mean_f_measure(const Image& pred, const Image& gt) {
  detail::check_maps(pred, gt);
  const auto g = detail::binarize_gt(gt);
  constexpr double beta2 = 0.3;
  double total = 0;
  for (int k = 1; k <= detail::kThresholds; ++k) {
    const double t = detail::threshold(k);
    double tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const bool p = pred.data[i] >= t;
      tp += p && g[i];
      fp += p && !g[i];
      fn += !p && g[i];
    }
    const double precision = tp + fp > 0 ? tp / (tp + fp) : 0.0;
    const double recall = tp + fn > 0 ? tp / (tp + fn) : 0.0;
    const double denom = beta2 * precision + recall;
    total += denom > 0 ? (1 + beta2) * precision * recall / denom : 0.0;
  }
  return total / detail::kThresholds;
}

// Structure measure with equal object and region weights.
inline double s_measure(const Image& pred, const Image& gt) {
  detail::check_maps(pred, gt);
  const auto g = detail::binarize_gt(gt);
  double fg = 0, mean_pred = 0;
  for (std::size_t i = 0; i < g.size(); ++i) {
    fg += g[i];
    mean_pred += pred.data[i];
  }
  const double n = static_cast<double>(g.size());
  fg /= n;
  mean_pred /= n;
  if (fg == 0) return 1 - mean_pred;
  if (fg == 1) return mean_pred;
  const double s = 0.5 * detail::s_object(pred, g) + 0.5 * detail::s_region(pred, g);
  return std::max(0.0, s);
}

// Enhanced-alignment measure averaged over the 255 thresholds. Each
// threshold scores the mean of the enhanced alignment matrix.
inline double mean_e_measure(const Image& pred, const Image& gt) {
  detail::check_maps(pred, gt);
  const auto g = detail::binarize_gt(gt);
  const std::size_t n = g.size();
  double fg = 0;
  for (auto v : g) fg += v;
  const bool all_fg = fg == static_cast<double>(n), all_bg = fg == 0;
  const double gt_mean = fg / static_cast<double>(n);
  double total = 0;
  std::vector<unsigned char> b(n);
  for (int k = 1; k <= detail::kThresholds; ++k) {
    const double t = detail::threshold(k);
    double on = 0;
    for (std::size_t i = 0; i < n; ++i) on += b[i] = pred.data[i] >= t;
    double sum = 0;
    if (all_fg) {
      sum = on;
    } else if (all_bg) {
      sum = static_cast<double>(n) - on;
    } else {
      const double pm = on / static_cast<double>(n);
      for (std::size_t i = 0; i < n; ++i) {
        const double dp = b[i] - pm, dg = g[i] - gt_mean;
        const double align = 2 * dp * dg / (dp * dp + dg * dg + detail::kEps);
        sum += (align + 1) * (align + 1) / 4;
      }
    }
    total += sum / static_cast<double>(n);
  }
  return total / detail::kThresholds;
}

inline MetricsReport evaluate(const Image& pred, const Image& gt) {
  return {s_measure(pred, gt), mean_f_measure(pred, gt), mean_e_measure(pred, gt), mae(pred, gt)};
}

// Pixels whose Chebyshev distance to the other side of the binarized gt
// boundary is at most band_px: dilation minus erosion with a square window.
inline std::vector<unsigned char> boundary_band(const Image& gt, int band_px) {
  if (band_px < 1) throw MetricError("band width must be >= 1");
  const auto g = detail::binarize_gt(gt);
  const int h = static_cast<int>(gt.height), w = static_cast<int>(gt.width);
  std::vector<unsigned char> band(g.size(), 0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      bool any = false, all = true;
      for (int dy = -band_px; dy <= band_px; ++dy)
        for (int dx = -band_px; dx <= band_px; ++dx) {
          const int yy = y + dy, xx = x + dx;
          if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
          const bool v = g[yy * w + xx];
          any = any || v;
          all = all && v;
        }
      band[y * w + x] = any && !all;
    }
  return band;
}

// Mean uncertainty inside and outside the gt boundary band. When the band
// covers the whole image the outside mean is reported as 0.
inline std::pair<double, double> uncertainty_boundary_stat(const Image& uncertainty, const Image& gt, int band_px) {
  detail::check_maps(uncertainty, gt);
  const auto band = boundary_band(gt, band_px);
  double in = 0, out = 0, n_in = 0, n_out = 0;
  for (std::size_t i = 0; i < band.size(); ++i) {
    if (band[i]) {
      in += uncertainty.data[i];
      n_in += 1;
    } else {
      out += uncertainty.data[i];
      n_out += 1;
    }
  }
  if (n_in == 0) throw MetricError("ground truth has no boundary band");
  return {in / n_in, n_out > 0 ? out / n_out : 0.0};
}

}  // namespace ebsal
