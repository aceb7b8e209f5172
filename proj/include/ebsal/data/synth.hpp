#pragma once

// Synthetic image/mask pairs: one to three filled shapes on a flat, noisy or
// striped background. The mask edge is displaced by a random offset in
// [-sigma_b, sigma_b] pixels from the shape edge in the image and then blurred
// with a Gaussian of standard deviation sigma_b, so larger sigma_b means a
// less certain boundary. sigma_b = 0 gives exact binary masks.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "ebsal/data/image.hpp"
#include "ebsal/random.hpp"

namespace ebsal {

enum class ShapeKind { ellipse, polygon, rectangle };
enum class Background { flat, noise, stripes };

inline std::string to_string(ShapeKind k) {
  switch (k) {
    case ShapeKind::ellipse: return "ellipse";
    case ShapeKind::polygon: return "polygon";
    default: return "rectangle";
  }
}

inline std::string to_string(Background b) {
  switch (b) {
    case Background::flat: return "flat";
    case Background::noise: return "noise";
    default: return "stripes";
  }
}

inline Background background_from_string(const std::string& s) {
  if (s == "flat") return Background::flat;
  if (s == "noise" || s == "gaussian-noise") return Background::noise;
  if (s == "stripes") return Background::stripes;
  throw std::invalid_argument("unknown background '" + s + "' (expected flat, noise or stripes)");
}

struct SynthConfig {
  std::size_t count = 200;
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t min_shapes = 1;
  std::size_t max_shapes = 3;
  std::vector<Background> backgrounds{Background::flat, Background::noise, Background::stripes};
  double boundary_softness = 0.0;
  double contrast = 0.5;
  std::uint64_t seed = 0;

  static constexpr double min_coverage = 0.05;
  static constexpr double max_coverage = 0.6;
  static constexpr int max_attempts = 100;

  void validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("synth config: " + m); };
    if (height < 8 || width < 8) fail("image size must be at least 8x8");
    if (min_shapes < 1 || max_shapes > 3 || min_shapes > max_shapes) fail("shape count range must lie in [1, 3]");
    if (backgrounds.empty()) fail("at least one background kind is required");
    if (!(boundary_softness >= 0) || !std::isfinite(boundary_softness)) fail("boundary_softness must be >= 0");
    if (!(contrast > 0 && contrast <= 1)) fail("contrast must lie in (0, 1]");
  }
};

struct Sample {
  Image image;  // 3 x h x w
  Image mask;   // 1 x h x w
  nlohmann::ordered_json meta = nlohmann::ordered_json::object();
};

class GenerationError : public DataError {
 public:
  using DataError::DataError;
};

namespace detail {

struct Shape2d {
  ShapeKind kind;
  double cx, cy, a, b, angle;
  std::vector<std::array<double, 2>> vertices;  // polygon and rectangle, image coordinates

  // Signed distance to the outline, negative inside. Exact for polygons,
  // first order for ellipses.
  double distance(double x, double y) const {
    if (kind == ShapeKind::ellipse) {
      const double c = std::cos(angle), s = std::sin(angle);
      const double u = c * (x - cx) + s * (y - cy), v = -s * (x - cx) + c * (y - cy);
      const double k = std::hypot(u / a, v / b);
      if (k < 1e-9) return -std::min(a, b);
      const double gu = u / (a * a * k), gv = v / (b * b * k);
      return (k - 1) / std::hypot(gu, gv);
    }
    double best = std::numeric_limits<double>::max();
    bool inside = false;
    const std::size_t n = vertices.size();
    for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
      const auto& p = vertices[i];
      const auto& q = vertices[j];
      const double ex = q[0] - p[0], ey = q[1] - p[1];
      const double t = std::clamp(((x - p[0]) * ex + (y - p[1]) * ey) / (ex * ex + ey * ey), 0.0, 1.0);
      best = std::min(best, std::hypot(x - p[0] - t * ex, y - p[1] - t * ey));
      if ((p[1] > y) != (q[1] > y) && x < p[0] + (y - p[1]) * (q[0] - p[0]) / (q[1] - p[1])) inside = !inside;
    }
    return inside ? -best : best;
  }

  nlohmann::ordered_json json() const {
    nlohmann::ordered_json j{{"kind", to_string(kind)}, {"cx", cx}, {"cy", cy}, {"a", a}, {"b", b}, {"angle", angle}};
    if (!vertices.empty()) j["vertices"] = vertices;
    return j;
  }
};

inline Shape2d random_shape(Rng& rng, std::size_t h, std::size_t w) {
  const double side = static_cast<double>(std::min(h, w));
  Shape2d s;
  s.kind = static_cast<ShapeKind>(uniform_index(rng, 3));
  s.cx = uniform(rng, 0.2, 0.8) * w;
  s.cy = uniform(rng, 0.2, 0.8) * h;
  const double r = uniform(rng, 0.1, 0.28) * side;
  s.a = r * uniform(rng, 0.6, 1.4);
  s.b = r * uniform(rng, 0.6, 1.4);
  s.angle = uniform(rng, 0, std::numbers::pi);
  const double c = std::cos(s.angle), sn = std::sin(s.angle);
  auto place = [&](double u, double v) { return std::array<double, 2>{s.cx + c * u - sn * v, s.cy + sn * u + c * v}; };
  if (s.kind == ShapeKind::rectangle) {
    s.vertices = {place(-s.a, -s.b), place(s.a, -s.b), place(s.a, s.b), place(-s.a, s.b)};
  } else if (s.kind == ShapeKind::polygon) {
    const std::size_t k = 3 + uniform_index(rng, 5);
    std::vector<double> angles(k);
    for (auto& t : angles) t = uniform(rng, 0, 2 * std::numbers::pi);
    std::sort(angles.begin(), angles.end());
    for (double t : angles) {
      const double rad = r * uniform(rng, 0.7, 1.2);
      s.vertices.push_back(place(rad * std::cos(t), rad * std::sin(t)));
    }
  }
  return s;
}

// Separable Gaussian blur of a single-channel image with replicated borders.
inline void gaussian_blur(Image& im, double sigma) {
  if (sigma <= 0) return;
  const int radius = static_cast<int>(std::ceil(3 * sigma));
  std::vector<double> kernel(2 * radius + 1);
  double total = 0;
  for (int i = -radius; i <= radius; ++i) total += kernel[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& k : kernel) k /= total;
  const int h = static_cast<int>(im.height), w = static_cast<int>(im.width);
  std::vector<double> tmp(im.data.size());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0;
      for (int i = -radius; i <= radius; ++i) acc += kernel[i + radius] * im.data[y * w + std::clamp(x + i, 0, w - 1)];
      tmp[y * w + x] = acc;
    }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0;
      for (int i = -radius; i <= radius; ++i) acc += kernel[i + radius] * tmp[std::clamp(y + i, 0, h - 1) * w + x];
      im.data[y * w + x] = std::clamp(acc, 0.0, 1.0);
    }
}

inline std::array<double, 3> foreground_colour(Rng& rng, const std::array<double, 3>& bg, double contrast) {
  std::array<double, 3> dir{};
  double norm = 0;
  while (norm < 1e-6) {
    for (auto& d : dir) d = normal_vector<double>(rng, 1)[0];
    norm = std::hypot(dir[0], dir[1], dir[2]);
  }
  std::array<double, 3> fg{};
  for (int c = 0; c < 3; ++c) {
    // Push each channel towards the side with more room so the full step fits.
    const double step = std::abs(dir[c]) / norm * contrast;
    fg[c] = bg[c] + (bg[c] < 0.5 ? step : -step);
  }
  return fg;
}

}  // namespace detail

// Draws sample `index` of the dataset defined by cfg. Deterministic in
// (cfg, index).
inline Sample synth_sample(const SynthConfig& cfg, std::size_t index) {
  const std::size_t h = cfg.height, w = cfg.width;
  const double sigma = cfg.boundary_softness;
  auto rng = make_rng(derive_stream(cfg.seed, "synth", {index}));
  for (int attempt = 1; attempt <= SynthConfig::max_attempts; ++attempt) {
    const std::size_t count = cfg.min_shapes + uniform_index(rng, cfg.max_shapes - cfg.min_shapes + 1);
    std::vector<detail::Shape2d> shapes;
    for (std::size_t k = 0; k < count; ++k) shapes.push_back(detail::random_shape(rng, h, w));
    const double offset = sigma > 0 ? uniform(rng, -sigma, sigma) : 0.0;

    std::vector<double> dist(h * w);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        double d = std::numeric_limits<double>::max();
        for (const auto& s : shapes) d = std::min(d, s.distance(x + 0.5, y + 0.5));
        dist[y * w + x] = d;
      }

    Sample out;
    out.mask = Image(1, h, w);
    for (std::size_t i = 0; i < h * w; ++i) out.mask.data[i] = dist[i] < offset ? 1.0 : 0.0;
    detail::gaussian_blur(out.mask, sigma);
    double coverage = 0;
    for (double v : out.mask.data) coverage += v;
    coverage /= static_cast<double>(h * w);
    if (coverage < SynthConfig::min_coverage || coverage > SynthConfig::max_coverage) continue;

    const Background bg_kind = cfg.backgrounds[uniform_index(rng, cfg.backgrounds.size())];
    std::array<double, 3> bg{}, bg2{};
    for (auto& c : bg) c = uniform(rng, 0.15, 0.85);
    const auto fg = detail::foreground_colour(rng, bg, cfg.contrast);
    for (int c = 0; c < 3; ++c) bg2[c] = std::clamp(bg[c] + uniform(rng, -0.2, 0.2), 0.0, 1.0);
    const double period = uniform(rng, 6, 16), stripe_angle = uniform(rng, 0, std::numbers::pi);

    out.image = Image(3, h, w);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const std::size_t i = y * w + x;
        const double along = std::cos(stripe_angle) * x + std::sin(stripe_angle) * y;
        const bool alt = bg_kind == Background::stripes && std::fmod(along / period + 1e3, 1.0) < 0.5;
        // Anti-aliased coverage of the true outline.
        const double alpha = std::clamp(0.5 - dist[i], 0.0, 1.0);
        for (int c = 0; c < 3; ++c) {
          double v = alt ? bg2[c] : bg[c];
          if (bg_kind == Background::noise) v += normal_vector<double>(rng, 1, 0.08)[0];
          v = (1 - alpha) * v + alpha * (fg[c] + normal_vector<double>(rng, 1, 0.02)[0]);
          out.image.at(c, y, x) = std::clamp(v, 0.0, 1.0);
        }
      }

    nlohmann::ordered_json shape_meta = nlohmann::ordered_json::array();
    for (const auto& s : shapes) shape_meta.push_back(s.json());
    out.meta = {{"index", index},        {"background", to_string(bg_kind)}, {"shapes", shape_meta},
                {"sigma_b", sigma},      {"offset", offset},                 {"contrast", cfg.contrast},
                {"coverage", coverage},  {"attempts", attempt}};
    return out;
  }
  throw GenerationError("sample " + std::to_string(index) + ": mask coverage outside [" +
                        std::to_string(SynthConfig::min_coverage) + ", " + std::to_string(SynthConfig::max_coverage) +
                        "] after " + std::to_string(SynthConfig::max_attempts) + " attempts");
}

inline std::vector<Sample> synth_generate(const SynthConfig& cfg) {
  cfg.validate();
  std::vector<Sample> out;
  out.reserve(cfg.count);
  for (std::size_t i = 0; i < cfg.count; ++i) out.push_back(synth_sample(cfg, i));
  return out;
}

}  // namespace ebsal
