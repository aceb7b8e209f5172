#pragma once

// Energy-based latent prior.
//
//   p(z) ∝ exp(-E(z)),  E(z) = U(z) + |z|^2 / (2 sigma_z^2)
//
// U is a three-layer perceptron d -> C_e -> C_e -> 1 with exact GELU after
// the two hidden layers. In Gaussian mode U is identically zero and its
// weights are never read, which turns the prior into N(0, sigma_z^2 I).

#include <cmath>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "ebsal/random.hpp"
#include "ebsal/tensor/ops.hpp"
#include "ebsal/tensor/parameters.hpp"
#include "ebsal/tensor/tensor.hpp"

namespace ebsal {

enum class PriorMode { ebm, gaussian };

inline std::string to_string(PriorMode m) { return m == PriorMode::ebm ? "ebm" : "gaussian"; }
inline PriorMode prior_mode_from_string(const std::string& s) {
  if (s == "ebm") return PriorMode::ebm;
  if (s == "gaussian") return PriorMode::gaussian;
  throw std::invalid_argument("unknown prior mode '" + s + "' (expected ebm or gaussian)");
}

template <typename T>
struct EbmPrior {
  Tensor<T> w1, b1, w2, b2, w3, b3;
  T sigma_z = T(1);
  PriorMode mode = PriorMode::ebm;

  EbmPrior(std::size_t latent_dim, std::size_t hidden, T sigma = T(1), PriorMode m = PriorMode::ebm)
      : w1({hidden, latent_dim}),
        b1({hidden}),
        w2({hidden, hidden}),
        b2({hidden}),
        w3({1, hidden}),
        b3({1}),
        sigma_z(sigma),
        mode(m) {
    if (!(sigma > T(0))) throw std::invalid_argument("sigma_z must be positive");
  }

  // Weights ~ N(0, init_std^2), biases zero. Gaussian mode keeps all zeros.
  static EbmPrior initialized(std::size_t latent_dim, std::size_t hidden, T sigma, PriorMode m, Rng& rng,
                              double init_std = 0.01) {
    EbmPrior p(latent_dim, hidden, sigma, m);
    if (m == PriorMode::ebm) {
      init_normal(p.w1, rng, init_std);
      init_normal(p.w2, rng, init_std);
      init_normal(p.w3, rng, init_std);
    }
    return p;
  }

  std::size_t latent_dim() const { return w1.shape()[1]; }
  std::size_t hidden() const { return w1.shape()[0]; }
  bool is_gaussian() const { return mode == PriorMode::gaussian; }

  ParamList<T> parameters() {
    return {{"prior.w1", &w1}, {"prior.b1", &b1}, {"prior.w2", &w2},
            {"prior.b2", &b2}, {"prior.w3", &w3}, {"prior.b3", &b3}};
  }

  T u_alpha(std::span<const T> z) const {
    check_length(z);
    if (is_gaussian()) return T(0);
    Scratch s;
    forward(z, s);
    return s.u;
  }

  T energy(std::span<const T> z) const {
    check_length(z);
    return u_alpha(z) + squared_norm(z) / (T(2) * sigma_z * sigma_z);
  }

  // dE/dz by a reverse sweep through the perceptron.
  std::vector<T> grad_energy_z(std::span<const T> z) const {
    std::vector<T> g(z.size());
    grad_energy_z(z, g);
    return g;
  }

  void grad_energy_z(std::span<const T> z, std::span<T> out) const {
    check_length(z);
    const T inv_var = T(1) / (sigma_z * sigma_z);
    for (std::size_t i = 0; i < z.size(); ++i) out[i] = z[i] * inv_var;
    if (is_gaussian()) return;
    Scratch s;
    forward(z, s);
    backward_hidden(s);
    const std::size_t d = latent_dim(), h = hidden();
    for (std::size_t j = 0; j < h; ++j) {
      const T g1 = s.g1[j];
      if (g1 == T(0)) continue;
      for (std::size_t i = 0; i < d; ++i) out[i] += g1 * w1[j * d + i];
    }
  }

  // dU/d(w1, b1, w2, b2, w3, b3), aligned with parameters(). All zero in
  // Gaussian mode.
  Gradients<T> grad_u_params(std::span<const T> z) const {
    check_length(z);
    const std::size_t d = latent_dim(), h = hidden();
    Gradients<T> g{Tensor<T>(w1.shape()), Tensor<T>(b1.shape()), Tensor<T>(w2.shape()),
                   Tensor<T>(b2.shape()), Tensor<T>(w3.shape()), Tensor<T>(b3.shape())};
    if (is_gaussian()) return g;
    Scratch s;
    forward(z, s);
    backward_hidden(s);
    for (std::size_t j = 0; j < h; ++j) {
      for (std::size_t i = 0; i < d; ++i) g[0][j * d + i] = s.g1[j] * z[i];
      g[1][j] = s.g1[j];
      for (std::size_t i = 0; i < h; ++i) g[2][j * h + i] = s.g2[j] * s.a1[i];
      g[3][j] = s.g2[j];
      g[4][j] = s.a2[j];
    }
    g[5][0] = T(1);
    return g;
  }

 private:
  struct Scratch {
    std::vector<T> h1, a1, h2, a2, g1, g2;
    T u = T(0);
  };

  void check_length(std::span<const T> z) const {
    if (z.size() != latent_dim()) {
      throw DimensionError("latent vector has length " + std::to_string(z.size()) + ", prior expects " +
                           std::to_string(latent_dim()));
    }
  }

  static T squared_norm(std::span<const T> z) {
    T s = 0;
    for (T v : z) s += v * v;
    return s;
  }

  void forward(std::span<const T> z, Scratch& s) const {
    const std::size_t d = latent_dim(), h = hidden();
    s.h1.assign(h, T(0));
    s.a1.assign(h, T(0));
    s.h2.assign(h, T(0));
    s.a2.assign(h, T(0));
    for (std::size_t j = 0; j < h; ++j) {
      T acc = b1[j];
      for (std::size_t i = 0; i < d; ++i) acc += w1[j * d + i] * z[i];
      s.h1[j] = acc;
      s.a1[j] = ops::detail::gelu_value(acc);
    }
    for (std::size_t j = 0; j < h; ++j) {
      T acc = b2[j];
      for (std::size_t i = 0; i < h; ++i) acc += w2[j * h + i] * s.a1[i];
      s.h2[j] = acc;
      s.a2[j] = ops::detail::gelu_value(acc);
    }
    T u = b3[0];
    for (std::size_t j = 0; j < h; ++j) u += w3[j] * s.a2[j];
    s.u = u;
  }

  // Fills g2 = dU/dh2 and g1 = dU/dh1.
  void backward_hidden(Scratch& s) const {
    const std::size_t h = hidden();
    s.g2.assign(h, T(0));
    s.g1.assign(h, T(0));
    for (std::size_t j = 0; j < h; ++j) s.g2[j] = w3[j] * ops::detail::gelu_derivative(s.h2[j]);
    for (std::size_t i = 0; i < h; ++i) {
      T acc = 0;
      for (std::size_t j = 0; j < h; ++j) acc += w2[j * h + i] * s.g2[j];
      s.g1[i] = acc * ops::detail::gelu_derivative(s.h1[i]);
    }
  }
};

// Trapezoidal estimate of the integral of exp(-energy(z)) over the cube
// [-half_width, half_width]^d, d in {1, 2}.
template <typename T>
double trapezoid_integral(const std::function<double(std::span<const T>)>& energy, std::size_t dim,
                          double half_width, std::size_t points_per_axis) {
  if (dim == 0 || dim > 2) {
    throw std::domain_error("quadrature supports latent dimension 1 or 2, got " + std::to_string(dim));
  }
  if (points_per_axis < 64) throw std::invalid_argument("quadrature needs at least 64 points per axis");
  const double h = 2 * half_width / static_cast<double>(points_per_axis - 1);
  auto weight = [&](std::size_t i) { return (i == 0 || i + 1 == points_per_axis) ? 0.5 : 1.0; };
  auto node = [&](std::size_t i) { return static_cast<T>(-half_width + h * static_cast<double>(i)); };
  double total = 0;
  std::vector<T> z(dim);
  if (dim == 1) {
    for (std::size_t i = 0; i < points_per_axis; ++i) {
      z[0] = node(i);
      total += weight(i) * std::exp(-energy(z));
    }
    return total * h;
  }
  for (std::size_t i = 0; i < points_per_axis; ++i)
    for (std::size_t j = 0; j < points_per_axis; ++j) {
      z[0] = node(i);
      z[1] = node(j);
      total += weight(i) * weight(j) * std::exp(-energy(z));
    }
  return total * h * h;
}

// Normalizing integral of the prior, Z(alpha) * (2 pi sigma_z^2)^{d/2}.
template <typename T>
double partition_oracle(const EbmPrior<T>& prior, double half_width, std::size_t points_per_axis) {
  if (prior.latent_dim() > 2) {
    throw std::domain_error("partition_oracle supports d <= 2, prior has d = " +
                            std::to_string(prior.latent_dim()));
  }
  if (2 * half_width < 6 * static_cast<double>(prior.sigma_z)) {
    throw std::invalid_argument("quadrature grid must cover at least 6 sigma_z");
  }
  return trapezoid_integral<T>([&](std::span<const T> z) { return static_cast<double>(prior.energy(z)); },
                               prior.latent_dim(), half_width, points_per_axis);
}

}  // namespace ebsal
