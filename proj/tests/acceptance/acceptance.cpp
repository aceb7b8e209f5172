// Acceptance harness. Prints one PASS/FAIL line per criterion.
//
//   ebsal_acceptance               all criteria
//   ebsal_acceptance --only 2,3    a subset
//
// Exit status is nonzero when any selected criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "CLI11.hpp"

#include "ebsal/complexity.hpp"
#include "ebsal/data/dataset.hpp"
#include "ebsal/data/synth.hpp"
#include "ebsal/generator/generator.hpp"
#include "ebsal/inference.hpp"
#include "ebsal/langevin.hpp"
#include "ebsal/metrics.hpp"
#include "ebsal/trainer.hpp"
#include "oracles/finite_difference.hpp"
#include "oracles/linear_task.hpp"
#include "oracles/plain_mlp.hpp"

#ifndef EBSAL_CLI_PATH
#define EBSAL_CLI_PATH "ebsal"
#endif

using namespace ebsal;
namespace fs = std::filesystem;
namespace o = ebsal::ops;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// ------------------------------------------------------------ 1. gradients

using V = Var<double>;
using Vs = std::vector<V>;
using oracle::random_projection;
using oracle::random_tensor;

struct GradientTally {
  std::size_t cases = 0;
  double worst = 0;
  std::string worst_name;

  void add(const std::string& name, double err) {
    ++cases;
    if (!(err <= worst)) {
      worst = err;
      worst_name = name;
    }
  }
};

void check_ops(GradientTally& tally, int per_op) {
  using Make = std::function<std::vector<Tensor<double>>(Rng&)>;
  using Build = std::function<V(const Vs&)>;
  auto run = [&](const std::string& name, const Make& make, const Build& build) {
    for (int c = 0; c < per_op; ++c) {
      auto rng = make_rng(derive_stream(101, name, {static_cast<std::uint64_t>(c)}));
      auto inputs = make(rng);
      const std::uint64_t proj = derive_stream(102, name, {static_cast<std::uint64_t>(c)});
      auto f = [&](Tape<double>&, const Vs& v) { return random_projection(build(v), proj); };
      tally.add(name, oracle::gradient_check(f, inputs));
    }
  };
  auto one = [](Shape s, double sd = 1.0) {
    return Make([=](Rng& r) { return std::vector<Tensor<double>>{random_tensor(r, s, sd)}; });
  };
  auto two = [](Shape a, Shape b) {
    return Make([=](Rng& r) { return std::vector<Tensor<double>>{random_tensor(r, a), random_tensor(r, b)}; });
  };

  run("add", two({3, 4}, {3, 4}), [](const Vs& v) { return o::add(v[0], v[1]); });
  run("sub", two({3, 4}, {3, 4}), [](const Vs& v) { return o::sub(v[0], v[1]); });
  run("mul", two({3, 4}, {3, 4}), [](const Vs& v) { return o::mul(v[0], v[1]); });
  run("scale", one({3, 4}), [](const Vs& v) { return o::scale(v[0], -1.3); });
  run("gelu", one({3, 4}, 2.0), [](const Vs& v) { return o::gelu(v[0]); });
  run("sigmoid", one({3, 4}, 2.0), [](const Vs& v) { return o::sigmoid(v[0]); });
  run("softmax_rows", one({3, 4}, 2.0), [](const Vs& v) { return o::softmax(v[0], 1); });
  run("softmax_cols", one({3, 4}, 2.0), [](const Vs& v) { return o::softmax(v[0], 0); });
  run("sum", one({3, 4}), [](const Vs& v) { return o::sum(v[0]); });
  run("mean", one({3, 4}), [](const Vs& v) { return o::mean(v[0]); });
  run("square_norm", one({3, 4}), [](const Vs& v) { return o::square_norm(v[0]); });
  run("reshape", one({3, 4}), [](const Vs& v) { return o::reshape(v[0], {6, 2}); });
  run("transpose", one({3, 4}), [](const Vs& v) { return o::transpose(v[0]); });
  run("concat", two({2, 3, 3}, {1, 3, 3}), [](const Vs& v) { return o::concat<double>({v[0], v[1]}, 0); });
  run("split", one({3, 4, 4}), [](const Vs& v) {
    auto p = o::split(v[0], 1, {1, 3});
    return o::concat<double>({o::sigmoid(p[0]), o::scale(p[1], 2.0)}, 1);
  });
  run("gather_rows", one({4, 3}), [](const Vs& v) { return o::gather_rows(v[0], {2, 0, 3, 3, 1}); });
  run("matmul", two({3, 5}, {5, 2}), [](const Vs& v) { return o::matmul(v[0], v[1]); });
  run("add_row_bias", two({3, 4}, {4}), [](const Vs& v) { return o::add_row_bias(v[0], v[1]); });
  run("add_channel_bias", two({3, 2, 2}, {3}), [](const Vs& v) { return o::add_channel_bias(v[0], v[1]); });
  run("conv_same", two({2, 5, 5}, {3, 2, 3, 3}), [](const Vs& v) { return o::conv2d(v[0], v[1], 1, std::size_t{1}); });
  run("conv_valid", two({2, 5, 5}, {3, 2, 3, 3}), [](const Vs& v) { return o::conv2d(v[0], v[1], 1, std::size_t{0}); });
  run("conv_stride2", two({2, 6, 6}, {2, 2, 3, 3}), [](const Vs& v) { return o::conv2d(v[0], v[1], 2, o::Padding{0, 1}); });
  run("upsample", one({2, 3, 3}), [](const Vs& v) { return o::upsample_nearest(v[0], 2); });
  run("global_avg_pool", one({3, 4, 4}), [](const Vs& v) { return o::global_avg_pool(v[0]); });
  run("channel_scale", two({3, 2, 2}, {3}), [](const Vs& v) { return o::channel_scale(v[0], v[1]); });
  run("replicate_spatial", one({3}), [](const Vs& v) { return o::replicate_spatial(v[0], 2, 3); });
  run("patchify", one({2, 4, 4}), [](const Vs& v) { return o::patchify(v[0], 2); });
  run("layer_norm", Make([](Rng& r) {
        return std::vector<Tensor<double>>{random_tensor(r, {3, 5}), random_tensor(r, {5}), random_tensor(r, {5})};
      }),
      [](const Vs& v) { return o::layer_norm(v[0], v[1], v[2]); });
  run("attention", Make([](Rng& r) {
        return std::vector<Tensor<double>>{random_tensor(r, {8, 4}), random_tensor(r, {8, 4}), random_tensor(r, {8, 4}),
                                           random_tensor(r, {2, 16})};
      }),
      [](const Vs& v) { return o::attention(v[0], v[1], v[2], 2, 2, &v[3]); });
}

// Central differences of `value` over chosen coordinates of `params`,
// compared with the analytic bundle `g`.
double coordinate_check(const ParamList<double>& params, const Gradients<double>& g,
                        const std::vector<std::pair<std::size_t, std::size_t>>& coords,
                        const std::function<double()>& value, double h = 1e-5) {
  double diff = 0, scale = 1e-6;
  for (const auto& [k, i] : coords) {
    auto& t = *params[k].tensor;
    const double x0 = t[i];
    t[i] = x0 + h;
    const double up = value();
    t[i] = x0 - h;
    const double dn = value();
    t[i] = x0;
    const double fd = (up - dn) / (2 * h);
    diff = std::max(diff, std::abs(g[k][i] - fd));
    scale = std::max(scale, std::abs(fd));
  }
  return diff / scale;
}

std::vector<std::pair<std::size_t, std::size_t>> all_coords(const ParamList<double>& params) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t k = 0; k < params.size(); ++k)
    for (std::size_t i = 0; i < params[k].tensor->size(); ++i) out.emplace_back(k, i);
  return out;
}

EbmPrior<double> random_prior(std::uint64_t seed, std::size_t d, std::size_t h, double sd) {
  auto rng = make_rng(seed);
  auto p = EbmPrior<double>::initialized(d, h, 1.0, PriorMode::ebm, rng, sd);
  for (auto* b : {&p.b1, &p.b2, &p.b3}) fill_normal<double>(rng, b->data(), sd);
  return p;
}

// dU/dalpha difference estimator against differences of the tape-built U.
void check_ebm_estimator(GradientTally& tally, int cases) {
  for (int c = 0; c < cases; ++c) {
    auto prior = random_prior(derive_stream(201, "prior", {std::uint64_t(c)}), 3, 5, 0.6);
    auto rng = make_rng(derive_stream(202, "z", {std::uint64_t(c)}));
    std::vector<std::vector<double>> zp, zm;
    for (int i = 0; i < 4; ++i) zp.push_back(normal_vector<double>(rng, 3, 1.5));
    for (int i = 0; i < 4; ++i) zm.push_back(normal_vector<double>(rng, 3, 1.5));
    const auto g = ebm_gradient(prior, zp, zm);
    auto params = prior.parameters();
    auto value = [&] {
      double acc = 0;
      for (const auto& z : zm) acc += oracle::plain_u(prior, z) / 4;
      for (const auto& z : zp) acc -= oracle::plain_u(prior, z) / 4;
      return acc;
    };
    tally.add("ebm_estimator", coordinate_check(params, g, all_coords(params), value));
  }
}

// dE/dz used by both samplers.
void check_energy_drift(GradientTally& tally, int cases) {
  for (int c = 0; c < cases; ++c) {
    auto prior = random_prior(derive_stream(203, "prior", {std::uint64_t(c)}), 4, 6, 0.6);
    auto rng = make_rng(derive_stream(204, "z", {std::uint64_t(c)}));
    auto z = normal_vector<double>(rng, 4, 1.5);
    const auto g = prior.grad_energy_z(z);
    double diff = 0, scale = 1e-6;
    for (std::size_t i = 0; i < z.size(); ++i) {
      auto up = z, dn = z;
      up[i] += 1e-5;
      dn[i] -= 1e-5;
      auto energy = [&](const std::vector<double>& v) {
        double sq = 0;
        for (double x : v) sq += x * x;
        return oracle::plain_u(prior, v) + sq / 2;
      };
      const double fd = (energy(up) - energy(dn)) / 2e-5;
      diff = std::max(diff, std::abs(g[i] - fd));
      scale = std::max(scale, std::abs(fd));
    }
    tally.add("energy_drift", diff / scale);
  }
}

// Generator ascent gradient on a small network, checked on random coordinates.
void check_generator_estimator(GradientTally& tally, EncoderKind kind, int cases) {
  GeneratorConfig cfg;
  cfg.height = cfg.width = 32;
  cfg.levels = 3;
  cfg.latent_dim = 3;
  cfg.encoder = kind;
  cfg.decoder_init_std = 0.2;
  const double sigma = 0.7;
  for (int c = 0; c < cases; ++c) {
    auto rng = make_rng(derive_stream(205, to_string(kind), {std::uint64_t(c)}));
    auto gen = Generator<double>::initialized(cfg, rng);
    std::vector<Example<double>> batch(2);
    std::vector<std::vector<double>> zs;
    for (auto& e : batch) {
      e.input = random_tensor(rng, {3, 32, 32});
      e.target = Tensor<double>({1, 32, 32});
      for (auto& v : e.target.storage()) v = uniform(rng);
      zs.push_back(normal_vector<double>(rng, 3));
    }
    std::vector<const Example<double>*> ptrs{&batch[0], &batch[1]};
    const auto g = generator_gradient(gen, ptrs, zs, sigma).first;
    auto params = gen.parameters();
    auto value = [&] {
      double acc = 0;
      for (std::size_t i = 0; i < batch.size(); ++i) {
        Tape<double> tape;
        auto out = gen.forward(Graph<double>{tape, false}, batch[i].input, tape.constant(Tensor<double>({3}, zs[i])));
        acc -= o::square_norm(o::sub(tape.constant(batch[i].target), out)).value()[0] / (2 * sigma * sigma);
      }
      return acc / static_cast<double>(batch.size());
    };
    std::vector<std::pair<std::size_t, std::size_t>> coords;
    for (int k = 0; k < 12; ++k) {
      const std::size_t p = uniform_index(rng, params.size());
      coords.emplace_back(p, uniform_index(rng, params[p].tensor->size()));
    }
    tally.add("generator_estimator_" + to_string(kind), coordinate_check(params, g, coords, value));
  }
}

Outcome criterion_gradients() {
  const auto t0 = Clock::now();
  GradientTally tally;
  check_ops(tally, 3);
  check_ebm_estimator(tally, 8);
  check_energy_drift(tally, 8);
  check_generator_estimator(tally, EncoderKind::conv, 4);
  check_generator_estimator(tally, EncoderKind::attention, 4);
  const double t = seconds_since(t0);
  const bool pass = tally.cases >= 100 && tally.worst < 1e-4 && t < 60;
  return {pass, fmt("%zu cases, worst relative error %.2e (%s), tol 1e-4; %.1f s (limit 60 s)", tally.cases,
                    tally.worst, tally.worst_name.c_str(), t)};
}

// ------------------------------------------------------- 2. prior sampler

struct Moments {
  std::vector<double> mean, var;
};

Moments moments(const std::vector<std::vector<double>>& zs) {
  const std::size_t d = zs.at(0).size();
  const double n = static_cast<double>(zs.size());
  Moments m{std::vector<double>(d, 0.0), std::vector<double>(d, 0.0)};
  for (const auto& z : zs)
    for (std::size_t i = 0; i < d; ++i) m.mean[i] += z[i] / n;
  for (const auto& z : zs)
    for (std::size_t i = 0; i < d; ++i) m.var[i] += (z[i] - m.mean[i]) * (z[i] - m.mean[i]) / n;
  return m;
}

Outcome criterion_prior_sampler() {
  const auto t0 = Clock::now();
  const double delta = 0.01;
  EbmPrior<double> prior(4, 8, 1.0, PriorMode::gaussian);
  LangevinConfig cfg;
  cfg.steps = 2000;
  cfg.step_size = delta;
  cfg.stream = derive_stream(2, "acceptance.prior");
  const auto m = moments(sample_prior(prior, cfg, 10000));
  const double target = 1.0 / (1.0 - delta / 2);
  double worst_mean = 0, worst_var = 0;
  for (std::size_t i = 0; i < m.mean.size(); ++i) {
    worst_mean = std::max(worst_mean, std::abs(m.mean[i]));
    worst_var = std::max(worst_var, std::abs(m.var[i] - target));
  }
  const double t = seconds_since(t0);
  return {worst_mean < 0.05 && worst_var < 0.05 && t < 120,
          fmt("max |mean| %.4f (tol 0.05), max |var - %.5f| %.4f (tol 0.05), 4 coords; %.1f s (limit 120 s)",
              worst_mean, target, worst_var, t)};
}

// --------------------------------------------------- 3. posterior sampler

Outcome criterion_posterior_sampler() {
  const auto t0 = Clock::now();
  EbmPrior<double> prior(2, 4, 1.0, PriorMode::gaussian);
  LinearGenerator<double> gen(Tensor<double>::identity(2));
  const Tensor<double> s({2}, {2.0, 0.0});
  LangevinConfig cfg;
  cfg.steps = 1000;
  cfg.step_size = 0.01;
  std::vector<std::vector<double>> zs(4000);
  for (std::size_t c = 0; c < zs.size(); ++c) {
    auto rng = chain_rng(derive_stream(3, "acceptance.posterior"), "posterior", c);
    zs[c] = sample_posterior(prior, gen, LinearGenerator<double>::Cache{}, s, 1.0, cfg, rng);
  }
  const auto m = moments(zs);
  const double e0 = std::abs(m.mean[0] - 1.0), e1 = std::abs(m.mean[1]);
  const double t = seconds_since(t0);
  return {e0 < 0.05 && e1 < 0.05 && t < 60,
          fmt("chain mean (%.4f, %.4f) vs (1, 0), tol 0.05; %.1f s (limit 60 s)", m.mean[0], m.mean[1], t)};
}

// ------------------------------------------------ 4. EBM gradient vs quadrature

// E_p[f(z)] for p(z) ∝ exp(-energy(z)) on a 1-D trapezoid grid.
std::vector<double> quadrature_expectation(const std::function<double(double)>& energy,
                                           const std::function<std::vector<double>(double)>& f, double lo, double hi,
                                           std::size_t nodes) {
  const double h = (hi - lo) / static_cast<double>(nodes - 1);
  std::vector<double> e(nodes);
  for (std::size_t i = 0; i < nodes; ++i) e[i] = energy(lo + h * static_cast<double>(i));
  const double e_min = *std::min_element(e.begin(), e.end());
  double z = 0;
  std::vector<double> acc;
  for (std::size_t i = 0; i < nodes; ++i) {
    const double w = ((i == 0 || i + 1 == nodes) ? 0.5 : 1.0) * std::exp(-(e[i] - e_min));
    const auto v = f(lo + h * static_cast<double>(i));
    if (acc.empty()) acc.assign(v.size(), 0.0);
    for (std::size_t k = 0; k < v.size(); ++k) acc[k] += w * v[k];
    z += w;
  }
  for (auto& a : acc) a /= z;
  return acc;
}

// dU/dalpha at a scalar z from central differences of the tape-built U.
std::vector<double> fd_grad_u(EbmPrior<double>& prior, double z) {
  std::vector<double> out;
  for (const auto& p : prior.parameters()) {
    for (std::size_t i = 0; i < p.tensor->size(); ++i) {
      auto& t = *p.tensor;
      const double x0 = t[i];
      t[i] = x0 + 1e-5;
      const double up = oracle::plain_u(prior, std::vector<double>{z});
      t[i] = x0 - 1e-5;
      const double dn = oracle::plain_u(prior, std::vector<double>{z});
      t[i] = x0;
      out.push_back((up - dn) / 2e-5);
    }
  }
  return out;
}

std::vector<double> flat(const Gradients<double>& g) {
  std::vector<double> out;
  for (const auto& t : g) out.insert(out.end(), t.data().begin(), t.data().end());
  return out;
}

Outcome criterion_ebm_gradient() {
  const auto t0 = Clock::now();
  // d = 1, C_e = 4 hidden units; one linear datum s = a z + eps.
  auto prior = random_prior(41, 1, 4, 0.8);
  const double a = 1.5, s = 1.2, sigma = 0.8;
  LinearGenerator<double> gen(Tensor<double>({1, 1}, {a}));
  const Tensor<double> target({1}, {s});
  const std::size_t n = 8000;
  LangevinConfig cfg;
  cfg.steps = 600;
  cfg.step_size = 0.01;

  std::vector<std::vector<double>> zp(n), zm(n);
  for (std::size_t c = 0; c < n; ++c) {
    auto r1 = chain_rng(derive_stream(4, "acceptance.ebm"), "posterior", c);
    zp[c] = sample_posterior(prior, gen, LinearGenerator<double>::Cache{}, target, sigma, cfg, r1);
  }
  cfg.stream = derive_stream(4, "acceptance.ebm.prior");
  zm = sample_prior(prior, cfg, n);
  const auto est = flat(ebm_gradient(prior, zp, zm));

  // Per-coordinate standard error of the difference of two independent means.
  const std::size_t dim = est.size();
  std::vector<double> se2(dim, 0.0);
  for (const auto* zs : {&zp, &zm}) {
    std::vector<double> s1(dim, 0.0), s2(dim, 0.0);
    for (const auto& z : *zs) {
      const auto g = flat(prior.grad_u_params(z));
      for (std::size_t k = 0; k < dim; ++k) s1[k] += g[k], s2[k] += g[k] * g[k];
    }
    for (std::size_t k = 0; k < dim; ++k) {
      const double mu = s1[k] / n, var = (s2[k] - n * mu * mu) / (n - 1);
      se2[k] += std::max(0.0, var) / n;
    }
  }

  auto u = [&](double z) { return oracle::plain_u(prior, std::vector<double>{z}); };
  auto prior_energy = [&](double z) { return u(z) + z * z / 2; };
  auto post_energy = [&](double z) { return prior_energy(z) + (s - a * z) * (s - a * z) / (2 * sigma * sigma); };
  auto grad = [&](double z) { return fd_grad_u(prior, z); };
  const auto e_prior = quadrature_expectation(prior_energy, grad, -10, 10, 4001);
  const auto e_post = quadrature_expectation(post_energy, grad, -10, 10, 4001);

  double dist2 = 0, se_total2 = 0, worst_z = 0;
  for (std::size_t k = 0; k < dim; ++k) {
    const double exact = e_prior[k] - e_post[k];
    dist2 += (est[k] - exact) * (est[k] - exact);
    se_total2 += se2[k];
    if (se2[k] > 0) worst_z = std::max(worst_z, std::abs(est[k] - exact) / std::sqrt(se2[k]));
  }
  const double ratio = std::sqrt(dist2 / se_total2);
  const double t = seconds_since(t0);
  return {ratio < 3 && t < 60,
          fmt("|MC - quadrature| = %.3g, %.2f standard errors (tol 3), largest coordinate %.2f SE over %zu params; "
              "%.1f s (limit 60 s)",
              std::sqrt(dist2), ratio, worst_z, dim, t)};
}

// -------------------------------------------------- 5 / 10. linear task

struct LinearTask {
  Tensor<double> a;
  std::vector<Example<double>> data;
};

// p = 8 outputs, d = 2 latents, generating matrix with singular values 2 and 1.5.
LinearTask linear_task(double sigma_eps) {
  const std::size_t p = 8, d = 2;
  auto rng = make_rng(derive_stream(5, "acceptance.linear.matrix"));
  Eigen::MatrixXd g(p, d);
  for (Eigen::Index i = 0; i < g.rows(); ++i)
    for (Eigen::Index j = 0; j < g.cols(); ++j) g(i, j) = normal_vector<double>(rng, 1)[0];
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  const Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(p, d);
  const double sv[2] = {2.0, 1.5};
  Tensor<double> a({p, d});
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t j = 0; j < d; ++j) a[i * d + j] = q(Eigen::Index(i), Eigen::Index(j)) * sv[j];
  auto data = oracle::linear_gaussian_data(a, 4000, sigma_eps, derive_stream(5, "acceptance.linear.data"));
  return {std::move(a), std::move(data)};
}

TrainConfig linear_config(PriorMode mode, std::uint64_t seed) {
  TrainConfig c;
  c.latent_dim = 2;
  c.prior_hidden = 16;
  c.prior_mode = mode;
  c.batch_size = 400;
  c.epochs = 40;
  c.lr_theta = 0.03;
  c.lr_alpha = 0.03;
  c.posterior_steps = 50;
  c.posterior_step_size = 0.01;
  c.prior_steps = 60;
  c.prior_step_size = 0.05;
  c.sigma_eps = 0.5;
  c.seed = seed;
  return c;
}

using LinearModel = Model<double, LinearGenerator<double>>;

// Constant-rate training followed by continuations at a tenth and a
// hundredth of the learning rates, each a fresh trainer.
LinearModel train_linear(const LinearTask& task, const TrainConfig& c) {
  auto rng = make_rng(derive_stream(c.seed, "init.generator"));
  LinearGenerator<double> gen(task.a.shape()[0], task.a.shape()[1]);
  init_normal(gen.a, rng, 0.1);
  LinearModel m{make_prior<double>(c), std::move(gen)};
  train(m, task.data, c);
  std::size_t epoch = c.epochs;
  for (double factor : {0.1, 0.01}) {
    TrainConfig fine = c;
    fine.lr_theta *= factor;
    fine.lr_alpha *= factor;
    Trainer<double, LinearGenerator<double>> trainer(m, fine);
    for (std::size_t e = 0; e < 20; ++e) trainer.run_epoch(task.data, epoch++);
  }
  return m;
}

Outcome criterion_recovery() {
  const auto t0 = Clock::now();
  const auto task = linear_task(0.5);
  const auto m = train_linear(task, linear_config(PriorMode::gaussian, 5));
  const double err = oracle::aligned_relative_error(m.generator.a, task.a);
  const double t = seconds_since(t0);
  return {err < 0.05 && t < 180,
          fmt("rotation-aligned relative Frobenius error %.4f (tol 0.05); %.1f s (limit 180 s)", err, t)};
}

// -------------------------------------------------------------- toy runs

constexpr std::size_t kToyEpochs = 200;
constexpr std::size_t kHeldOut = 50;
constexpr std::size_t kPredictSamples = 10;
constexpr double kSoftBoundary = 1.5;

using ToyNet = Model<float, Generator<float>>;

struct ToyRun {
  ToyNet model;
  double train_seconds = 0;
  double mae = 0, s_measure = 0;
  std::vector<double> band_in, band_out;
};

std::vector<Sample> toy_samples(double sigma_b, std::size_t count, const std::string& split) {
  SynthConfig sc;
  sc.count = count;
  sc.boundary_softness = sigma_b;
  sc.seed = derive_stream(6, "acceptance.toy." + split);
  return synth_generate(sc);
}

TrainConfig toy_config(PriorMode mode, std::uint64_t seed) {
  TrainConfig c;
  c.epochs = kToyEpochs;
  c.lr_theta = 1e-3;
  c.lr_alpha = 1e-4;
  c.prior_mode = mode;
  c.seed = seed;
  return c;
}

class ToyRuns {
 public:
  const ToyRun& get(PriorMode mode, std::uint64_t seed, double sigma_b) {
    const auto key = std::make_tuple(mode, seed, sigma_b);
    auto it = runs_.find(key);
    if (it != runs_.end()) return it->second;
    std::fprintf(stderr, "training toy model: %s prior, seed %llu, sigma_b %.1f\n", to_string(mode).c_str(),
                 static_cast<unsigned long long>(seed), sigma_b);
    const auto cfg = toy_config(mode, seed);
    const auto train_data = to_examples<float>(toy_samples(sigma_b, 200, "train"));
    auto rng = make_rng(derive_stream(seed, "init.generator"));
    ToyRun run{ToyNet{make_prior<float>(cfg), Generator<float>::initialized(GeneratorConfig{}, rng)}};
    const auto t0 = Clock::now();
    train(run.model, train_data, cfg);
    run.train_seconds = seconds_since(t0);

    const auto held = toy_samples(sigma_b, kHeldOut, "heldout");
    for (std::size_t i = 0; i < held.size(); ++i) {
      auto sampler = cfg.prior_sampler();
      sampler.stream = derive_stream(seed, "acceptance.predict", {i});
      const auto b = predict_stochastic(run.model, held[i].image.tensor<float>(), kPredictSamples, sampler);
      run.mae += mae(b.mean_map, held[i].mask) / held.size();
      run.s_measure += s_measure(b.mean_map, held[i].mask) / held.size();
      const auto [in, out] = uncertainty_boundary_stat(b.uncertainty, held[i].mask, 2);
      run.band_in.push_back(in);
      run.band_out.push_back(out);
    }
    std::fprintf(stderr, "  %.0f s, held-out MAE %.4f, S %.4f\n", run.train_seconds, run.mae, run.s_measure);
    return runs_.emplace(key, std::move(run)).first->second;
  }

 private:
  std::map<std::tuple<PriorMode, std::uint64_t, double>, ToyRun> runs_;
};

Outcome criterion_toy(ToyRuns& runs) {
  const auto& r = runs.get(PriorMode::ebm, 1, kSoftBoundary);
  return {r.mae < 0.10 && r.s_measure > 0.80 && r.train_seconds < 1200,
          fmt("held-out MAE %.4f (tol < 0.10), S-measure %.4f (tol > 0.80); training %.0f s (limit 1200 s)", r.mae,
              r.s_measure, r.train_seconds)};
}

Outcome criterion_ordering(ToyRuns& runs) {
  const auto t0 = Clock::now();
  double total = 0, ebm = 0, abp = 0;
  std::string per_seed;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto& e = runs.get(PriorMode::ebm, seed, kSoftBoundary);
    const auto& g = runs.get(PriorMode::gaussian, seed, kSoftBoundary);
    ebm += e.mae / 5;
    abp += g.mae / 5;
    total += e.train_seconds + g.train_seconds;
    per_seed += fmt(" %.3f/%.3f", e.mae, g.mae);
  }
  total = std::max(total, seconds_since(t0));
  return {ebm <= abp + 0.01 && total < 7200,
          fmt("mean held-out MAE ebm %.4f vs gaussian %.4f (ebm <= gaussian + 0.01); per seed ebm/gaussian%s; "
              "%.0f s (limit 7200 s)",
              ebm, abp, per_seed.c_str(), total)};
}

Outcome criterion_uncertainty(ToyRuns& runs) {
  const auto& soft = runs.get(PriorMode::ebm, 1, kSoftBoundary);
  const auto& hard = runs.get(PriorMode::ebm, 1, 0.0);
  std::size_t higher = 0;
  for (std::size_t i = 0; i < soft.band_in.size(); ++i) higher += soft.band_in[i] > soft.band_out[i];
  const double frac = static_cast<double>(higher) / static_cast<double>(soft.band_in.size());
  auto mean = [](const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  };
  const double band_soft = mean(soft.band_in), band_hard = mean(hard.band_in);
  return {frac >= 0.8 && band_soft > band_hard,
          fmt("band > elsewhere on %zu/%zu held-out images (%.2f, tol >= 0.80); mean band uncertainty "
              "sigma_b=%.1f %.5f vs sigma_b=0 %.5f (must be larger)",
              higher, soft.band_in.size(), frac, kSoftBoundary, band_soft, band_hard)};
}

// -------------------------------------------------------- 9. complexity

Image two_tone() {
  Image im(3, 64, 64);
  for (std::size_t y = 0; y < 64; ++y)
    for (std::size_t x = 0; x < 64; ++x)
      for (std::size_t c = 0; c < 3; ++c) im.at(c, y, x) = x < 32 ? 0.1 : 0.9;
  return im;
}

// Random-colour blocks of varying size with a few strong outliers.
Image clutter() {
  Image im(3, 64, 64);
  auto rng = make_rng(derive_stream(9, "acceptance.clutter"));
  for (std::size_t by = 0; by < 64; by += 4)
    for (std::size_t bx = 0; bx < 64; bx += 4) {
      double col[3];
      for (double& v : col) v = uniform(rng);
      for (std::size_t y = by; y < by + 4; ++y)
        for (std::size_t x = bx; x < bx + 4; ++x)
          for (std::size_t c = 0; c < 3; ++c) im.at(c, y, x) = col[c];
    }
  return im;
}

Outcome criterion_complexity() {
  Image constant(3, 64, 64);
  for (auto& v : constant.data) v = 0.4;
  const double c0 = complexity_score(constant), c_two = complexity_score(two_tone()),
               c_clutter = complexity_score(clutter());
  bool in_range = true;
  for (double v : {c0, c_two, c_clutter}) in_range = in_range && v >= 0 && v <= 1;
  std::size_t natural = 0;
  for (const auto& s : toy_samples(1.0, 8, "complexity")) {
    const double v = complexity_score(s.image);
    in_range = in_range && v >= 0 && v <= 1;
    ++natural;
  }
  return {c0 == 0 && c_clutter > c_two && in_range,
          fmt("constant %.4f (must be 0), clutter %.4f > two-tone %.4f, all %zu scores in [0, 1]: %s", c0, c_clutter,
              c_two, natural + 3, in_range ? "yes" : "no")};
}

// --------------------------------------------------------- 10. residuals

Outcome criterion_residuals() {
  const auto t0 = Clock::now();
  const auto task = linear_task(0.5);
  const auto cfg = linear_config(PriorMode::ebm, 5);
  auto m = train_linear(task, cfg);
  const auto r = estimating_equation_residuals(m, task.data, cfg, 8, derive_stream(10, "acceptance.residuals"));
  const double ra = r.alpha_norm / r.alpha_se, rt = r.theta_norm / r.theta_se;
  const double t = seconds_since(t0);
  return {ra < 3 && rt < 3,
          fmt("linear task, ebm prior: alpha residual %.3g = %.2f SE, theta residual %.3g = %.2f SE (tol 3); %.0f s",
              r.alpha_norm, ra, r.theta_norm, rt, t)};
}

// ------------------------------------------------------- 11. determinism

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Outcome criterion_determinism(const fs::path& work) {
  const fs::path cli = EBSAL_CLI_PATH;
  std::vector<fs::path> outs{work / "det_a", work / "det_b"};
  for (const auto& out : outs) {
    fs::remove_all(out);
    const std::string cmd = "\"" + cli.string() + "\" train --synth --seed 7 --threads 1 --epochs 2 " +
                            "--set synth.count=20 --checkpoint-every 1 --out \"" + out.string() + "\" 2>/dev/null";
    if (const int rc = std::system(cmd.c_str()); rc != 0) return {false, fmt("train exited with status %d", rc)};
  }
  std::vector<fs::path> files{"train_log.jsonl", "model.ckpt"};
  for (const auto& e : fs::directory_iterator(outs[0] / "checkpoints"))
    files.push_back(fs::path("checkpoints") / e.path().filename());
  std::size_t same = 0;
  std::string differing;
  for (const auto& f : files) {
    const auto a = slurp(outs[0] / f), b = slurp(outs[1] / f);
    if (!a.empty() && a == b) ++same;
    else differing += " " + f.string();
  }
  return {same == files.size(),
          fmt("%zu/%zu files byte-identical across two runs%s%s", same, files.size(), differing.empty() ? "" : ":",
              differing.c_str())};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance checks"};
  std::vector<int> only;
  std::string work = (fs::temp_directory_path() / "ebsal_acceptance").string();
  app.add_option("--only", only, "Criteria to run (default: all)")->delimiter(',')->check(CLI::Range(1, 11));
  app.add_option("--work", work, "Scratch directory");
  CLI11_PARSE(app, argc, argv);
  std::set<int> selected(only.begin(), only.end());
  if (selected.empty())
    for (int i = 1; i <= 11; ++i) selected.insert(i);
  fs::create_directories(work);
  set_num_threads(1);

  ToyRuns toys;
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"gradient fidelity", criterion_gradients},
      {"prior sampler law", criterion_prior_sampler},
      {"posterior sampler law", criterion_posterior_sampler},
      {"EBM gradient consistency", criterion_ebm_gradient},
      {"parameter recovery", criterion_recovery},
      {"toy training", [&] { return criterion_toy(toys); }},
      {"EBM vs gaussian prior ordering", [&] { return criterion_ordering(toys); }},
      {"uncertainty semantics", [&] { return criterion_uncertainty(toys); }},
      {"complexity score ordering", criterion_complexity},
      {"convergence diagnostics", criterion_residuals},
      {"determinism", [&] { return criterion_determinism(work); }},
  };
  int failures = 0;
  for (int i = 1; i <= 11; ++i) {
    if (!selected.contains(i)) continue;
    Outcome r;
    try {
      r = criteria[i - 1].second();
    } catch (const std::exception& e) {
      r = {false, std::string("error: ") + e.what()};
    }
    failures += !r.pass;
    std::printf("%s  %2d %s: %s\n", r.pass ? "PASS" : "FAIL", i, criteria[i - 1].first, r.detail.c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
