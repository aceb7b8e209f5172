#pragma once

// Stochastic saliency prediction. Latent codes are drawn from the learned
// prior, each is decoded once, and the clamped maps give a mean and a
// per-pixel population variance.

#include <algorithm>
#include <stdexcept>
#include <vector>

#include "ebsal/data/image.hpp"
#include "ebsal/generator/generator.hpp"
#include "ebsal/langevin.hpp"
#include "ebsal/parallel.hpp"
#include "ebsal/trainer.hpp"

namespace ebsal {

struct PredictionBundle {
  std::vector<Image> samples;
  Image mean_map;
  Image uncertainty;
};

// Mean and population variance of equally sized maps, accumulated as
// offsets from the first map so identical samples give exactly zero.
inline void summarize_samples(const std::vector<Image>& samples, Image& mean, Image& variance) {
  if (samples.empty()) throw std::invalid_argument("need at least one sample");
  const auto& first = samples.front();
  mean = first;
  variance = Image(first.channels, first.height, first.width);
  const double n = static_cast<double>(samples.size());
  for (std::size_t i = 0; i < first.data.size(); ++i) {
    double s1 = 0, s2 = 0;
    for (const auto& s : samples) {
      const double d = s.data[i] - first.data[i];
      s1 += d;
      s2 += d * d;
    }
    s1 /= n;
    mean.data[i] = first.data[i] + s1;
    variance.data[i] = std::max(0.0, s2 / n - s1 * s1);
  }
}

template <typename T>
Image clamped_map(const Tensor<T>& t) {
  auto im = Image::from_tensor(t);
  for (auto& v : im.data) v = std::clamp(v, 0.0, 1.0);
  return im;
}

// Decodes one map per latent code.
template <typename T, typename G>
std::vector<Image> decode_latents(const Model<T, G>& model, const Tensor<T>& image,
                                  const std::vector<std::vector<T>>& latents) {
  const auto cache = model.generator.prepare(image);
  std::vector<Image> out(latents.size());
  parallel_for(latents.size(), [&](std::size_t i) {
    Tape<T> tape;
    Graph<T> g{tape, false};
    auto z = tape.constant(Tensor<T>({latents[i].size()}, latents[i]));
    out[i] = clamped_map(model.generator.decode(g, cache, z).value());
  });
  return out;
}

// N prior draws with the sampler `cfg` (its stream seeds the chains).
template <typename T, typename G>
PredictionBundle predict_stochastic(const Model<T, G>& model, const Tensor<T>& image, std::size_t n,
                                    const LangevinConfig& cfg) {
  if (n < 1) throw std::invalid_argument("predict_stochastic needs at least one sample");
  PredictionBundle b;
  b.samples = decode_latents(model, image, sample_prior(model.prior, cfg, n));
  summarize_samples(b.samples, b.mean_map, b.uncertainty);
  return b;
}

// Single decode at z = 0, clamped.
template <typename T, typename G>
Image predict_point(const Model<T, G>& model, const Tensor<T>& image) {
  return decode_latents(model, image, {std::vector<T>(model.prior.latent_dim(), T(0))}).front();
}

}  // namespace ebsal
