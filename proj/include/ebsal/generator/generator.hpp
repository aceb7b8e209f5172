#pragma once

// T(I, z): encoder pyramid, latent injection at the deepest level and the
// top-down feature-aggregation decoder.
//
//   f'_l = gelu(conv3(f_l))                       l = 1..L
//   F_L  = gelu(conv3(concat(f'_L, tile(z))))
//   F_l  = gelu(conv3(CA(concat(f'_l, up(F_l+1), ..., up(F_L)))))
//   T    = up4(conv3(F_1))                         one channel, no squashing

#include <string>
#include <vector>

#include "ebsal/generator/config.hpp"
#include "ebsal/generator/encoder.hpp"
#include "ebsal/generator/layers.hpp"

namespace ebsal {

template <typename T>
class Generator {
 public:
  // Latent-independent part of a forward pass: the reduced pyramid f'.
  struct Cache {
    std::vector<Tensor<T>> reduced;
  };

  Encoder<T> encoder;
  std::vector<Conv<T>> reduce;             // f_l -> f'_l, one per level
  Conv<T> inject;                          // [f'_L, z] -> F_L
  std::vector<ChannelAttention<T>> attend; // index l-1 for l = 1..L-1
  std::vector<Conv<T>> fuse;               // index l-1 for l = 1..L-1
  Conv<T> head;

  explicit Generator(const GeneratorConfig& cfg) : cfg_(cfg) {
    cfg.validate();
    encoder = Encoder<T>(cfg);
    const std::size_t b = cfg.base_channels, L = cfg.levels;
    for (std::size_t l = 1; l <= L; ++l) reduce.emplace_back(cfg.level_channels(l), b, 3, 1);
    inject = Conv<T>(b + cfg.latent_dim, b, 3, 1);
    for (std::size_t l = 1; l < L; ++l) {
      const std::size_t width = b * (L - l + 1);
      attend.emplace_back(width, cfg.attention_reduction);
      fuse.emplace_back(width, b, 3, 1);
    }
    head = Conv<T>(b, 1, 3, 1);
  }

  static Generator initialized(const GeneratorConfig& cfg, Rng& rng) {
    Generator g(cfg);
    g.init(rng);
    return g;
  }

  void init(Rng& rng) {
    encoder.init(rng);
    const double s = cfg_.decoder_init_std;
    for (auto& c : reduce) c.init(rng, s);
    inject.init(rng, s);
    for (std::size_t i = 0; i < attend.size(); ++i) {
      attend[i].init(rng, s);
      fuse[i].init(rng, s);
    }
    head.init(rng, s);
  }

  const GeneratorConfig& config() const { return cfg_; }
  std::size_t latent_dim() const { return cfg_.latent_dim; }
  Shape output_shape() const { return {1, cfg_.height, cfg_.width}; }

  ParamList<T> parameters() {
    ParamList<T> out;
    encoder.collect(out, "generator.encoder");
    for (std::size_t l = 0; l < reduce.size(); ++l) reduce[l].collect(out, "generator.reduce" + std::to_string(l + 1));
    inject.collect(out, "generator.inject");
    for (std::size_t l = 0; l < attend.size(); ++l) {
      attend[l].collect(out, "generator.attend" + std::to_string(l + 1));
      fuse[l].collect(out, "generator.fuse" + std::to_string(l + 1));
    }
    head.collect(out, "generator.head");
    return out;
  }

  std::vector<Var<T>> encode(const Graph<T>& g, const Var<T>& image) const { return encoder(g, image); }

  std::vector<Var<T>> reduce_pyramid(const Graph<T>& g, const std::vector<Var<T>>& pyramid) const {
    check_levels(pyramid.size());
    std::vector<Var<T>> out;
    for (std::size_t l = 0; l < pyramid.size(); ++l) out.push_back(ops::gelu(reduce[l](g, pyramid[l])));
    return out;
  }

  Var<T> inject_latent(const Graph<T>& g, const Var<T>& f_prime_last, const Var<T>& z) const {
    if (z.size() != cfg_.latent_dim) {
      throw DimensionError("latent vector has length " + std::to_string(z.size()) + ", generator expects " +
                           std::to_string(cfg_.latent_dim));
    }
    const auto& s = f_prime_last.shape();
    auto tiled = ops::replicate_spatial(ops::reshape(z, {cfg_.latent_dim}), s[1], s[2]);
    return ops::gelu(inject(g, ops::concat<T>({f_prime_last, tiled}, 0)));
  }

  // F_l from f'_l and the already computed F_{l+1}, ..., F_L (level order).
  Var<T> aggregate(const Graph<T>& g, std::size_t level, const Var<T>& f_prime,
                   const std::vector<Var<T>>& higher) const {
    if (level < 1 || level >= cfg_.levels) throw std::out_of_range("aggregate: level out of range");
    if (higher.size() != cfg_.levels - level) throw DimensionError("aggregate: wrong number of higher maps");
    std::vector<Var<T>> parts{f_prime};
    for (std::size_t i = 0; i < higher.size(); ++i) {
      const std::size_t factor = std::size_t{1} << (i + 1);
      auto up = ops::upsample_nearest(higher[i], factor);
      if (up.shape()[1] != f_prime.shape()[1] || up.shape()[2] != f_prime.shape()[2]) {
        throw DimensionError("aggregate: upsampled map " + shape_str(up.shape()) + " does not match " +
                             shape_str(f_prime.shape()));
      }
      parts.push_back(up);
    }
    auto cat = ops::concat<T>(parts, 0);
    return ops::gelu(fuse[level - 1](g, attend[level - 1](g, cat)));
  }

  Var<T> output_head(const Graph<T>& g, const Var<T>& f1) const {
    return ops::upsample_nearest(head(g, f1), 4);
  }

  Var<T> decode(const Graph<T>& g, const std::vector<Var<T>>& reduced, const Var<T>& z) const {
    check_levels(reduced.size());
    const std::size_t L = cfg_.levels;
    std::vector<Var<T>> F(L);
    F[L - 1] = inject_latent(g, reduced[L - 1], z);
    for (std::size_t l = L - 1; l >= 1; --l) {
      std::vector<Var<T>> higher(F.begin() + static_cast<std::ptrdiff_t>(l), F.end());
      F[l - 1] = aggregate(g, l, reduced[l - 1], higher);
    }
    return output_head(g, F[0]);
  }

  Var<T> decode(const Graph<T>& g, const Cache& cache, const Var<T>& z) const {
    std::vector<Var<T>> reduced;
    for (const auto& t : cache.reduced) reduced.push_back(g.tape.ref(t));
    return decode(g, reduced, z);
  }

  Var<T> forward(const Graph<T>& g, const Var<T>& image, const Var<T>& z) const {
    return decode(g, reduce_pyramid(g, encode(g, image)), z);
  }

  Var<T> forward(const Graph<T>& g, const Tensor<T>& image, const Var<T>& z) const {
    return forward(g, g.tape.ref(image), z);
  }

  Cache prepare(const Tensor<T>& image) const {
    Tape<T> tape;
    Graph<T> g{tape, false};
    Cache c;
    for (const auto& v : reduce_pyramid(g, encode(g, tape.ref(image)))) c.reduced.push_back(v.value());
    return c;
  }

 private:
  void check_levels(std::size_t n) const {
    if (n != cfg_.levels) {
      throw DimensionError("expected " + std::to_string(cfg_.levels) + " pyramid levels, got " + std::to_string(n));
    }
  }

  GeneratorConfig cfg_;
};

// T(I, z) = A z, ignoring the image. Conjugate with a Gaussian prior, which
// makes the posterior and the maximum-likelihood A available in closed form.
template <typename T>
class LinearGenerator {
 public:
  struct Cache {};

  Tensor<T> a;  // [p, d]

  LinearGenerator(std::size_t out_dim, std::size_t latent_dim) : a({out_dim, latent_dim}) {}
  explicit LinearGenerator(Tensor<T> matrix) : a(std::move(matrix)) {
    if (a.rank() != 2) throw DimensionError("LinearGenerator: matrix must be rank 2");
  }

  std::size_t latent_dim() const { return a.shape()[1]; }
  std::size_t output_dim() const { return a.shape()[0]; }
  Shape output_shape() const { return {output_dim()}; }

  ParamList<T> parameters() { return {{"generator.a", &a}}; }

  Cache prepare(const Tensor<T>&) const { return {}; }

  Var<T> decode(const Graph<T>& g, const Cache&, const Var<T>& z) const {
    if (z.size() != latent_dim()) throw DimensionError("LinearGenerator: latent length mismatch");
    auto col = ops::reshape(z, {latent_dim(), 1});
    return ops::reshape(ops::matmul(g.param(a), col), {output_dim()});
  }

  Var<T> forward(const Graph<T>& g, const Tensor<T>&, const Var<T>& z) const { return decode(g, Cache{}, z); }
};

}  // namespace ebsal
