#pragma once

// Short-run unadjusted Langevin samplers for the latent prior and posterior.
//
//   z_{t+1} = z_t - delta * grad(z_t) + sqrt(2 delta) * e_t,   e_t ~ N(0, I)
//
// Prior chains follow grad E(z). Posterior chains follow the gradient of
//   J(z) = E(z) + |s - T(I, z)|^2 / (2 sigma_eps^2).
// Every chain starts from N(0, sigma_z^2 I) and draws from its own stream.

#include <cmath>
#include <concepts>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "ebsal/ebm_prior.hpp"
#include "ebsal/parallel.hpp"
#include "ebsal/random.hpp"
#include "ebsal/tensor/graph.hpp"
#include "ebsal/tensor/ops.hpp"

namespace ebsal {

class SamplerDivergence : public std::runtime_error {
 public:
  SamplerDivergence(const std::string& what, std::size_t step) : std::runtime_error(what), step_(step) {}
  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

struct LangevinConfig {
  std::size_t steps = 5;
  double step_size = 0.1;
  std::uint64_t stream = 0;
  // Tests only: row t replaces the Gaussian noise of step t.
  std::vector<std::vector<double>> deterministic_noise;

  void validate() const {
    if (steps > 0 && !(step_size > 0)) throw std::invalid_argument("Langevin step size must be positive");
    if (!deterministic_noise.empty() && deterministic_noise.size() < steps) {
      throw std::invalid_argument("deterministic noise has fewer rows than Langevin steps");
    }
  }
};

// Any generator exposing the cached decode used by the samplers.
template <typename G, typename T>
concept LatentGenerator = requires(const G& g, const Graph<T>& graph, const Tensor<T>& image,
                                   const typename G::Cache& cache, const Var<T>& z) {
  { g.prepare(image) } -> std::same_as<typename G::Cache>;
  { g.decode(graph, cache, z) } -> std::same_as<Var<T>>;
  { g.forward(graph, image, z) } -> std::same_as<Var<T>>;
  { g.latent_dim() } -> std::convertible_to<std::size_t>;
  { g.output_shape() } -> std::convertible_to<Shape>;
};

template <typename T>
std::vector<T> langevin_step(std::span<const T> z, std::span<const T> grad, double delta, std::span<const T> noise,
                             std::size_t step = 0) {
  if (grad.size() != z.size() || noise.size() != z.size()) {
    throw DimensionError("langevin_step: z, grad and noise lengths differ");
  }
  if (!all_finite<T>(grad)) {
    throw SamplerDivergence("non-finite drift at Langevin step " + std::to_string(step), step);
  }
  const T d = static_cast<T>(delta), amp = static_cast<T>(std::sqrt(2 * delta));
  std::vector<T> out(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) out[i] = z[i] - d * grad[i] + amp * noise[i];
  return out;
}

// Runs cfg.steps updates from z using grad_fn(z, out). Throws
// SamplerDivergence once |z| exceeds 1e3 * sigma_z * sqrt(d).
template <typename T, typename GradFn>
std::vector<T> run_chain(GradFn&& grad_fn, std::vector<T> z, const LangevinConfig& cfg, Rng& rng, double sigma_z) {
  const double limit = 1e3 * sigma_z * std::sqrt(static_cast<double>(z.size()));
  std::vector<T> grad(z.size()), noise(z.size());
  for (std::size_t t = 0; t < cfg.steps; ++t) {
    grad_fn(std::span<const T>(z), std::span<T>(grad));
    if (cfg.deterministic_noise.empty()) {
      fill_normal<T>(rng, noise);
    } else {
      const auto& row = cfg.deterministic_noise[t];
      if (row.size() != z.size()) throw DimensionError("deterministic noise row has the wrong length");
      for (std::size_t i = 0; i < z.size(); ++i) noise[i] = static_cast<T>(row[i]);
    }
    z = langevin_step<T>(z, grad, cfg.step_size, noise, t);
    double norm = 0;
    for (T v : z) norm += static_cast<double>(v) * static_cast<double>(v);
    if (!std::isfinite(norm) || std::sqrt(norm) > limit) {
      throw SamplerDivergence("latent norm exceeded " + std::to_string(limit) + " at Langevin step " +
                                  std::to_string(t),
                              t);
    }
  }
  return z;
}

// Stream of chain `index` under a sampler stream.
inline Rng chain_rng(std::uint64_t stream, std::string_view label, std::size_t index) {
  return make_rng(derive_stream(stream, label, {index}));
}

template <typename T>
std::vector<T> initial_latent(Rng& rng, std::size_t d, double sigma_z) {
  return normal_vector<T>(rng, d, sigma_z);
}

// One prior chain: z_0 ~ N(0, sigma_z^2 I), then cfg.steps updates.
template <typename T>
std::vector<T> sample_prior_chain(const EbmPrior<T>& prior, const LangevinConfig& cfg, Rng& rng) {
  auto z0 = initial_latent<T>(rng, prior.latent_dim(), prior.sigma_z);
  return run_chain<T>([&](std::span<const T> z, std::span<T> g) { prior.grad_energy_z(z, g); }, std::move(z0), cfg,
                      rng, prior.sigma_z);
}

// `count` independent prior chains; chain i draws from stream (cfg.stream, i).
template <typename T>
std::vector<std::vector<T>> sample_prior(const EbmPrior<T>& prior, const LangevinConfig& cfg, std::size_t count) {
  cfg.validate();
  std::vector<std::vector<T>> out(count);
  parallel_for(count, [&](std::size_t i) {
    auto rng = chain_rng(cfg.stream, "prior", i);
    out[i] = sample_prior_chain(prior, cfg, rng);
  });
  return out;
}

// Gradient of J(z) = E(z) + |s - T(I, z)|^2 / (2 sigma_eps^2) with respect to
// z; returns J. The generator part is differentiated on a fresh tape.
template <typename T, typename G>
  requires LatentGenerator<G, T>
T posterior_gradient(const EbmPrior<T>& prior, const G& gen, const typename G::Cache& cache, const Tensor<T>& target,
                     double sigma_eps, std::span<const T> z, std::span<T> grad) {
  Tape<T> tape;
  Graph<T> graph{tape, false};
  auto zv = tape.variable(Tensor<T>({z.size()}, std::vector<T>(z.begin(), z.end())));
  auto out = gen.decode(graph, cache, zv);
  if (out.shape() != target.shape()) {
    throw DimensionError("posterior: target " + shape_str(target.shape()) + " does not match generator output " +
                         shape_str(out.shape()));
  }
  auto loss = ops::scale(ops::square_norm(ops::sub(tape.ref(target), out)), T(1 / (2 * sigma_eps * sigma_eps)));
  tape.backward(loss);
  prior.grad_energy_z(z, grad);
  const auto gz = tape.grad(zv);
  for (std::size_t i = 0; i < z.size(); ++i) grad[i] += gz[i];
  return loss.value()[0] + prior.energy(z);
}

template <typename T, typename G>
  requires LatentGenerator<G, T>
std::vector<T> sample_posterior(const EbmPrior<T>& prior, const G& gen, const typename G::Cache& cache,
                                const Tensor<T>& target, double sigma_eps, const LangevinConfig& cfg, Rng& rng) {
  if (!(sigma_eps > 0)) throw std::invalid_argument("sigma_eps must be positive");
  if (prior.latent_dim() != gen.latent_dim()) throw DimensionError("prior and generator latent sizes differ");
  cfg.validate();
  auto z0 = initial_latent<T>(rng, prior.latent_dim(), prior.sigma_z);
  return run_chain<T>(
      [&](std::span<const T> z, std::span<T> g) { posterior_gradient(prior, gen, cache, target, sigma_eps, z, g); },
      std::move(z0), cfg, rng, prior.sigma_z);
}

// Posterior chain for one (image, target) pair drawing from cfg.stream.
template <typename T, typename G>
  requires LatentGenerator<G, T>
std::vector<T> sample_posterior(const EbmPrior<T>& prior, const G& gen, const Tensor<T>& image,
                                const Tensor<T>& target, double sigma_eps, const LangevinConfig& cfg) {
  auto rng = chain_rng(cfg.stream, "posterior", 0);
  return sample_posterior(prior, gen, gen.prepare(image), target, sigma_eps, cfg, rng);
}

}  // namespace ebsal
