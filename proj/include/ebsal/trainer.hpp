#pragma once

// Maximum-likelihood learning of the prior (alpha) and generator (theta).
//
// Per batch:
//   z-  ~ prior Langevin           (Gaussian mode: z- ~ N(0, sigma_z^2 I))
//   z+  ~ posterior Langevin
//   grad alpha = mean dU(z-)/dalpha - mean dU(z+)/dalpha
//   grad theta = -d/dtheta mean |s - T(I, z+)|^2 / (2 sigma_eps^2)
// Both are ascent directions applied with Adam.

#include <chrono>
#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "ebsal/data/batches.hpp"
#include "ebsal/data/example.hpp"
#include "ebsal/ebm_prior.hpp"
#include "ebsal/langevin.hpp"
#include "ebsal/parallel.hpp"
#include "ebsal/tensor/checkpoint.hpp"
#include "ebsal/tensor/parameters.hpp"

namespace ebsal {

struct TrainConfig {
  std::size_t epochs = 50;
  std::size_t batch_size = 10;
  double lr_alpha = 2.5e-5;
  double lr_theta = 2.5e-5;
  double sigma_eps = 1.0;
  double sigma_z = 1.0;
  std::size_t latent_dim = 32;
  std::size_t prior_hidden = 60;
  std::size_t prior_steps = 5;
  double prior_step_size = 0.4;
  std::size_t posterior_steps = 5;
  double posterior_step_size = 0.1;
  PriorMode prior_mode = PriorMode::ebm;
  std::uint64_t seed = 0;
  std::size_t chains_per_datum = 1;
  double prior_init_std = 0.01;
  bool clip_gradients = false;
  double clip_norm = 100.0;

  LangevinConfig prior_sampler() const { return {prior_steps, prior_step_size, 0, {}}; }
  LangevinConfig posterior_sampler() const { return {posterior_steps, posterior_step_size, 0, {}}; }

  void validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("train config: " + m); };
    if (batch_size < 1) fail("batch_size must be >= 1");
    if (!(lr_alpha > 0) || !(lr_theta > 0)) fail("learning rates must be positive");
    if (!(sigma_eps > 0) || !(sigma_z > 0)) fail("sigma_eps and sigma_z must be positive");
    if (latent_dim < 1 || prior_hidden < 1) fail("latent_dim and prior_hidden must be >= 1");
    if (chains_per_datum < 1) fail("chains_per_datum must be >= 1");
    if (!(prior_init_std > 0)) fail("prior_init_std must be positive");
    if (clip_gradients && !(clip_norm > 0)) fail("clip_norm must be positive");
    prior_sampler().validate();
    posterior_sampler().validate();
  }
};

template <typename T, typename G>
struct Model {
  EbmPrior<T> prior;
  G generator;
};

// ----------------------------------------------------------------------- Adam

template <typename T>
struct AdamState {
  Gradients<T> m, v;
  std::size_t step = 0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  AdamState() = default;
  explicit AdamState(const ParamList<T>& params) : m(zeros_like(params)), v(zeros_like(params)) {}
};

// One Adam step with bias correction. maximize=true ascends along grads.
template <typename T>
void adam_update(const ParamList<T>& params, const Gradients<T>& grads, AdamState<T>& state, double lr,
                 bool maximize) {
  if (grads.size() != params.size() || state.m.size() != params.size()) {
    throw DimensionError("adam_update: parameter, gradient and state counts differ");
  }
  state.step += 1;
  const double b1 = state.beta1, b2 = state.beta2;
  const double c1 = 1 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1 - std::pow(b2, static_cast<double>(state.step));
  const double dir = maximize ? 1.0 : -1.0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = *params[k].tensor;
    if (grads[k].shape() != p.shape() || state.m[k].shape() != p.shape()) {
      throw DimensionError("adam_update: shape mismatch for " + params[k].name);
    }
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double g = static_cast<double>(grads[k][i]);
      const double m = b1 * static_cast<double>(state.m[k][i]) + (1 - b1) * g;
      const double v = b2 * static_cast<double>(state.v[k][i]) + (1 - b2) * g * g;
      state.m[k][i] = static_cast<T>(m);
      state.v[k][i] = static_cast<T>(v);
      p[i] = static_cast<T>(static_cast<double>(p[i]) + dir * lr * (m / c1) / (std::sqrt(v / c2) + state.eps));
    }
  }
}

// -------------------------------------------------------------- estimators

// mean dU(z-)/dalpha - mean dU(z+)/dalpha.
template <typename T>
Gradients<T> ebm_gradient(const EbmPrior<T>& prior, const std::vector<std::vector<T>>& z_plus,
                          const std::vector<std::vector<T>>& z_minus) {
  if (z_plus.empty() || z_minus.empty()) throw std::invalid_argument("ebm_gradient: empty sample list");
  if (z_plus.size() != z_minus.size()) throw std::invalid_argument("ebm_gradient: sample lists differ in length");
  auto sum_grads = [&](const std::vector<std::vector<T>>& zs) {
    auto acc = prior.grad_u_params(zs[0]);
    for (std::size_t i = 1; i < zs.size(); ++i) axpy(acc, T(1), prior.grad_u_params(zs[i]));
    return acc;
  };
  auto neg = sum_grads(z_minus);
  const auto pos = sum_grads(z_plus);
  const T n = static_cast<T>(z_plus.size());
  scale_in_place(neg, T(1) / n);
  axpy(neg, T(-1) / n, pos);
  return neg;
}

// Ascent gradient -d/dtheta mean_i |s_i - T(I_i, z_i)|^2 / (2 sigma_eps^2).
// Also returns the mean per-element squared residual.
template <typename T, typename G>
  requires LatentGenerator<G, T>
std::pair<Gradients<T>, double> generator_gradient(G& gen, const std::vector<const Example<T>*>& batch,
                                                   const std::vector<std::vector<T>>& z, double sigma_eps) {
  if (batch.empty()) throw std::invalid_argument("generator_gradient: empty batch");
  if (z.size() != batch.size()) throw DimensionError("generator_gradient: one latent per example required");
  auto params = gen.parameters();
  std::vector<Gradients<T>> per(batch.size());
  std::vector<double> sq(batch.size());
  const T inv = static_cast<T>(1 / (2 * sigma_eps * sigma_eps));
  parallel_for(batch.size(), [&](std::size_t i) {
    Tape<T> tape;
    Graph<T> graph{tape, true};
    auto zv = tape.constant(Tensor<T>({z[i].size()}, z[i]));
    auto out = gen.forward(graph, batch[i]->input, zv);
    if (out.shape() != batch[i]->target.shape()) {
      throw DimensionError("generator_gradient: target " + shape_str(batch[i]->target.shape()) +
                           " does not match output " + shape_str(out.shape()));
    }
    auto r2 = ops::square_norm(ops::sub(tape.ref(batch[i]->target), out));
    sq[i] = static_cast<double>(r2.value()[0]) / static_cast<double>(out.size());
    tape.backward(ops::scale(r2, inv), false);
    per[i] = zeros_like(params);
    accumulate_leaf_gradients(tape, params, per[i]);
  });
  auto total = zeros_like(params);
  double mse = 0;
  const T w = T(-1) / static_cast<T>(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    axpy(total, w, per[i]);
    mse += sq[i] / static_cast<double>(batch.size());
  }
  return {std::move(total), mse};
}

// ------------------------------------------------------------------ training

struct EpochRecord {
  std::size_t epoch = 0;
  double mse = 0;
  double mean_energy_prior = 0;
  double mean_energy_posterior = 0;
  std::optional<double> grad_norm_alpha;
  double grad_norm_theta = 0;
  std::size_t clipped = 0;
  double wall_time_ms = 0;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["epoch"] = epoch;
    j["mse"] = mse;
    j["mean_energy_prior"] = mean_energy_prior;
    j["mean_energy_posterior"] = mean_energy_posterior;
    if (grad_norm_alpha) j["grad_norm_alpha"] = *grad_norm_alpha;
    j["grad_norm_theta"] = grad_norm_theta;
    if (clipped) j["clipped"] = clipped;
    j["wall_time_ms"] = wall_time_ms;
    return j;
  }
};

struct TrainCallbacks {
  std::function<void(const EpochRecord&)> on_epoch;
};

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(const std::string& what, std::size_t epoch, std::size_t batch)
      : std::runtime_error(what), epoch_(epoch), batch_(batch) {}
  std::size_t epoch() const noexcept { return epoch_; }
  std::size_t batch() const noexcept { return batch_; }

 private:
  std::size_t epoch_, batch_;
};

// Rescales g to norm `limit` when it is larger; returns whether it did.
template <typename T>
bool clip_global_norm(Gradients<T>& g, double limit) {
  const double n = global_norm(g);
  if (n <= limit) return false;
  scale_in_place(g, static_cast<T>(limit / n));
  return true;
}

template <typename T>
EbmPrior<T> make_prior(const TrainConfig& cfg) {
  auto rng = make_rng(derive_stream(cfg.seed, "init.prior"));
  return EbmPrior<T>::initialized(cfg.latent_dim, cfg.prior_hidden, static_cast<T>(cfg.sigma_z), cfg.prior_mode, rng,
                                  cfg.prior_init_std);
}

template <typename T, typename G>
  requires LatentGenerator<G, T>
class Trainer {
 public:
  Trainer(Model<T, G>& model, TrainConfig cfg)
      : model_(model),
        cfg_(std::move(cfg)),
        alpha_params_(model.prior.parameters()),
        theta_params_(model.generator.parameters()),
        adam_alpha_(alpha_params_),
        adam_theta_(theta_params_) {
    cfg_.validate();
    if (model.prior.latent_dim() != model.generator.latent_dim()) {
      throw DimensionError("prior and generator latent sizes differ");
    }
    if (cfg_.prior_mode != model.prior.mode) throw std::invalid_argument("prior mode of model and config differ");
  }

  const TrainConfig& config() const { return cfg_; }

  // Runs epochs [first_epoch, first_epoch + cfg.epochs).
  std::vector<EpochRecord> run(const std::vector<Example<T>>& data, const TrainCallbacks& cb = {},
                               std::size_t first_epoch = 0) {
    if (data.empty()) throw std::invalid_argument("training data is empty");
    std::vector<EpochRecord> log;
    for (std::size_t e = first_epoch; e < first_epoch + cfg_.epochs; ++e) {
      log.push_back(run_epoch(data, e));
      if (cb.on_epoch) cb.on_epoch(log.back());
    }
    return log;
  }

  EpochRecord run_epoch(const std::vector<Example<T>>& data, std::size_t epoch) {
    const auto start = std::chrono::steady_clock::now();
    EpochRecord rec;
    rec.epoch = epoch;
    const auto batches = batch_indices(data.size(), cfg_.batch_size, cfg_.seed, epoch);
    double alpha_norm = 0, theta_norm = 0;
    std::size_t samples = 0;
    for (std::size_t b = 0; b < batches.size(); ++b) {
      try {
        auto s = step(data, batches[b], epoch);
        rec.mse += s.mse * static_cast<double>(batches[b].size());
        rec.mean_energy_prior += s.energy_prior * static_cast<double>(batches[b].size());
        rec.mean_energy_posterior += s.energy_posterior * static_cast<double>(batches[b].size());
        alpha_norm += s.alpha_norm;
        theta_norm += s.theta_norm;
        rec.clipped += s.clipped;
        samples += batches[b].size();
      } catch (const SamplerDivergence& err) {
        throw TrainingDiverged(std::string(err.what()) + " (epoch " + std::to_string(epoch) + ", batch " +
                                   std::to_string(b) + ")",
                               epoch, b);
      } catch (const NumericError& err) {
        throw TrainingDiverged(std::string(err.what()) + " (epoch " + std::to_string(epoch) + ", batch " +
                                   std::to_string(b) + ")",
                               epoch, b);
      }
    }
    const double n = static_cast<double>(samples), nb = static_cast<double>(batches.size());
    rec.mse /= n;
    rec.mean_energy_prior /= n;
    rec.mean_energy_posterior /= n;
    if (!model_.prior.is_gaussian()) rec.grad_norm_alpha = alpha_norm / nb;
    rec.grad_norm_theta = theta_norm / nb;
    for (double v : {rec.mse, rec.mean_energy_prior, rec.mean_energy_posterior, rec.grad_norm_theta,
                     rec.grad_norm_alpha.value_or(0.0)}) {
      if (!std::isfinite(v)) throw TrainingDiverged("non-finite training statistic", epoch, batches.size());
    }
    rec.wall_time_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    return rec;
  }

  struct StepStats {
    double mse = 0, energy_prior = 0, energy_posterior = 0, alpha_norm = 0, theta_norm = 0;
    std::size_t clipped = 0;
  };

  // One Algorithm-1 iteration on the examples `idx` of `data`.
  StepStats step(const std::vector<Example<T>>& data, const std::vector<std::size_t>& idx, std::size_t epoch) {
    const std::size_t m = cfg_.chains_per_datum, n = idx.size();
    const auto& prior = model_.prior;
    std::vector<std::vector<T>> z_minus(n * m), z_plus(n * m);
    std::vector<const Example<T>*> batch(n * m);

    auto prior_cfg = cfg_.prior_sampler();
    auto post_cfg = cfg_.posterior_sampler();
    parallel_for(n * m, [&](std::size_t k) {
      const std::size_t i = idx[k / m], c = k % m;
      auto rng_minus = make_rng(derive_stream(cfg_.seed, "prior", {epoch, i, c}));
      if (prior.is_gaussian()) {
        z_minus[k] = initial_latent<T>(rng_minus, prior.latent_dim(), prior.sigma_z);
      } else {
        z_minus[k] = sample_prior_chain(prior, prior_cfg, rng_minus);
      }
      auto rng_plus = make_rng(derive_stream(cfg_.seed, "posterior", {epoch, i, c}));
      const auto& ex = data[i];
      z_plus[k] = sample_posterior(prior, model_.generator, model_.generator.prepare(ex.input), ex.target,
                                   cfg_.sigma_eps, post_cfg, rng_plus);
      batch[k] = &ex;
    });

    StepStats s;
    for (std::size_t k = 0; k < n * m; ++k) {
      s.energy_prior += static_cast<double>(prior.energy(z_minus[k])) / static_cast<double>(n * m);
      s.energy_posterior += static_cast<double>(prior.energy(z_plus[k])) / static_cast<double>(n * m);
    }

    if (!prior.is_gaussian()) {
      auto ga = ebm_gradient(prior, z_plus, z_minus);
      s.alpha_norm = global_norm(ga);
      if (cfg_.clip_gradients && clip_global_norm(ga, cfg_.clip_norm)) ++s.clipped;
      adam_update(alpha_params_, ga, adam_alpha_, cfg_.lr_alpha, true);
    }

    auto [gt, mse] = generator_gradient(model_.generator, batch, z_plus, cfg_.sigma_eps);
    s.mse = mse;
    s.theta_norm = global_norm(gt);
    if (cfg_.clip_gradients && clip_global_norm(gt, cfg_.clip_norm)) ++s.clipped;
    adam_update(theta_params_, gt, adam_theta_, cfg_.lr_theta, true);
    return s;
  }

 private:
  Model<T, G>& model_;
  TrainConfig cfg_;
  ParamList<T> alpha_params_, theta_params_;
  AdamState<T> adam_alpha_, adam_theta_;
};

template <typename T, typename G>
std::vector<EpochRecord> train(Model<T, G>& model, const std::vector<Example<T>>& data, const TrainConfig& cfg,
                               const TrainCallbacks& cb = {}) {
  Trainer<T, G> trainer(model, cfg);
  return trainer.run(data, cb);
}

// ------------------------------------------------------ estimating equations

struct Residuals {
  double alpha_norm = 0, alpha_se = 0;
  double theta_norm = 0, theta_se = 0;
};

namespace detail {

// Per-coordinate running sums over repeated draws of a gradient bundle.
struct DrawMoments {
  std::vector<double> sum, sumsq;
  std::size_t count = 0;

  template <typename T>
  void add(const Gradients<T>& g) {
    std::size_t total = 0;
    for (const auto& t : g) total += t.size();
    if (sum.empty()) sum.assign(total, 0.0), sumsq.assign(total, 0.0);
    std::size_t k = 0;
    for (const auto& t : g)
      for (T v : t.data()) {
        sum[k] += static_cast<double>(v);
        sumsq[k] += static_cast<double>(v) * static_cast<double>(v);
        ++k;
      }
    ++count;
  }
  double mean(std::size_t k) const { return sum[k] / static_cast<double>(count); }
  // Unbiased variance of one draw.
  double variance(std::size_t k) const {
    if (count < 2) return 0;
    const double mu = mean(k);
    return std::max(0.0, (sumsq[k] - static_cast<double>(count) * mu * mu) / static_cast<double>(count - 1));
  }
};

}  // namespace detail

// Monte-Carlo estimates of the two estimating-equation left-hand sides
//   (1/n) sum_i E_post[dU/dalpha] - E_prior[dU/dalpha]
//   (1/n) sum_i E_post[(s_i - T)/sigma_eps^2 dT/dtheta]
// with mc_samples posterior draws per datum and n * mc_samples prior draws.
// Standard errors use the within-datum spread of the draws, so they measure
// sampling noise only.
template <typename T, typename G>
  requires LatentGenerator<G, T>
Residuals estimating_equation_residuals(Model<T, G>& model, const std::vector<Example<T>>& data,
                                        const TrainConfig& cfg, std::size_t mc_samples, std::uint64_t seed) {
  if (data.empty()) throw std::invalid_argument("residuals: empty dataset");
  if (mc_samples < 2) throw std::invalid_argument("residuals: need at least 2 Monte-Carlo samples");
  const auto& prior = model.prior;
  const std::size_t n = data.size();
  const bool ebm = !prior.is_gaussian();
  auto params = model.generator.parameters();

  std::vector<detail::DrawMoments> alpha_post(n), theta_post(n);
  parallel_for(n, [&](std::size_t i) {
    const auto cache = model.generator.prepare(data[i].input);
    for (std::size_t m = 0; m < mc_samples; ++m) {
      auto rng = make_rng(derive_stream(seed, "residual.posterior", {i, m}));
      auto z = sample_posterior(prior, model.generator, cache, data[i].target, cfg.sigma_eps,
                                cfg.posterior_sampler(), rng);
      if (ebm) alpha_post[i].add(prior.grad_u_params(z));
      // For one example the ascent gradient is the integrand itself.
      const std::vector<const Example<T>*> one{&data[i]};
      theta_post[i].add(generator_gradient(model.generator, one, std::vector<std::vector<T>>{z}, cfg.sigma_eps).first);
    }
  });

  Residuals r;
  auto reduce = [&](const std::vector<detail::DrawMoments>& post, const detail::DrawMoments* prior_draws,
                    double& norm, double& se) {
    const std::size_t dim = post[0].sum.size();
    double n2 = 0, v2 = 0;
    for (std::size_t k = 0; k < dim; ++k) {
      double mean = 0, var = 0;
      for (std::size_t i = 0; i < n; ++i) {
        mean += post[i].mean(k) / static_cast<double>(n);
        var += post[i].variance(k) / static_cast<double>(post[i].count) / static_cast<double>(n * n);
      }
      if (prior_draws) {
        mean -= prior_draws->mean(k);
        var += prior_draws->variance(k) / static_cast<double>(prior_draws->count);
      }
      n2 += mean * mean;
      v2 += var;
    }
    norm = std::sqrt(n2);
    se = std::sqrt(v2);
  };

  if (ebm) {
    detail::DrawMoments prior_draws;
    auto pc = cfg.prior_sampler();
    pc.stream = derive_stream(seed, "residual.prior");
    for (const auto& z : sample_prior(prior, pc, n * mc_samples)) prior_draws.add(prior.grad_u_params(z));
    reduce(alpha_post, &prior_draws, r.alpha_norm, r.alpha_se);
  }
  reduce(theta_post, nullptr, r.theta_norm, r.theta_se);
  return r;
}

// ----------------------------------------------------------------- snapshots

template <typename T, typename G>
Checkpoint model_checkpoint(Model<T, G>& model, std::string meta) {
  Checkpoint ck;
  ck.meta = std::move(meta);
  add_to_checkpoint(ck, model.prior.parameters());
  add_to_checkpoint(ck, model.generator.parameters());
  return ck;
}

template <typename T, typename G>
void load_model(const Checkpoint& ck, Model<T, G>& model) {
  load_from_checkpoint(ck, model.prior.parameters());
  load_from_checkpoint(ck, model.generator.parameters());
}

}  // namespace ebsal
