#pragma once

// Image encoders producing the feature pyramid f_1..f_L, level l at stride
// 2^(l+1) with base_channels * 2^(l-1) channels.

#include <cmath>
#include <string>
#include <vector>

#include "ebsal/generator/config.hpp"
#include "ebsal/generator/layers.hpp"

namespace ebsal {

namespace detail {

// Token order that groups a gh x gw grid into win x win windows, window-major.
inline std::vector<std::size_t> window_partition_order(std::size_t gh, std::size_t gw, std::size_t win) {
  std::vector<std::size_t> order;
  order.reserve(gh * gw);
  for (std::size_t wy = 0; wy < gh / win; ++wy)
    for (std::size_t wx = 0; wx < gw / win; ++wx)
      for (std::size_t iy = 0; iy < win; ++iy)
        for (std::size_t ix = 0; ix < win; ++ix) order.push_back((wy * win + iy) * gw + wx * win + ix);
  return order;
}

inline std::vector<std::size_t> inverse_permutation(const std::vector<std::size_t>& p) {
  std::vector<std::size_t> inv(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) inv[p[i]] = i;
  return inv;
}

// Row of the (2w-1)^2 relative-offset table for every (query, key) pair of a
// win x win window.
inline std::vector<std::size_t> relative_position_index(std::size_t win) {
  const std::size_t n = win * win, span = 2 * win - 1;
  std::vector<std::size_t> idx(n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const std::size_t dy = i / win + win - 1 - j / win;
      const std::size_t dx = i % win + win - 1 - j % win;
      idx[i * n + j] = dy * span + dx;
    }
  return idx;
}

// Source rows for 2x2 patch merging: new token t takes its four children in
// the order (0,0), (1,0), (0,1), (1,1).
inline std::vector<std::size_t> patch_merge_order(std::size_t gh, std::size_t gw) {
  std::vector<std::size_t> order;
  order.reserve(gh * gw);
  for (std::size_t y = 0; y < gh / 2; ++y)
    for (std::size_t x = 0; x < gw / 2; ++x) {
      order.push_back((2 * y) * gw + 2 * x);
      order.push_back((2 * y + 1) * gw + 2 * x);
      order.push_back((2 * y) * gw + 2 * x + 1);
      order.push_back((2 * y + 1) * gw + 2 * x + 1);
    }
  return order;
}

}  // namespace detail

// Tokens [h*w, c] -> map [c, h, w].
template <typename T>
Var<T> tokens_to_map(const Var<T>& tokens, std::size_t h, std::size_t w) {
  const std::size_t c = tokens.shape()[1];
  return ops::reshape(ops::transpose(tokens), {c, h, w});
}

// Windowed multi-head self-attention with a learned relative position bias.
template <typename T>
struct WindowAttention {
  Linear<T> q, k, v, o;
  Tensor<T> relative_bias;  // [(2w-1)^2, heads]
  std::size_t heads = 1, window = 1, grid_h = 1, grid_w = 1;
  std::vector<std::size_t> order, inverse, rel_index;

  WindowAttention() = default;
  WindowAttention(std::size_t c, std::size_t heads_, std::size_t window_, std::size_t gh, std::size_t gw)
      : q(c, c), k(c, c), v(c, c), o(c, c),
        relative_bias({(2 * window_ - 1) * (2 * window_ - 1), heads_}),
        heads(heads_), window(window_), grid_h(gh), grid_w(gw),
        order(detail::window_partition_order(gh, gw, window_)),
        inverse(detail::inverse_permutation(order)),
        rel_index(detail::relative_position_index(window_)) {}

  void init(Rng& rng) {
    const double s = 1.0 / std::sqrt(static_cast<double>(q.weight.shape()[0]));
    q.init(rng, s);
    k.init(rng, s);
    v.init(rng, s);
    o.init(rng, s);
    init_normal(relative_bias, rng, 0.02);
  }

  void collect(ParamList<T>& out, const std::string& prefix) {
    q.collect(out, prefix + ".q");
    k.collect(out, prefix + ".k");
    v.collect(out, prefix + ".v");
    o.collect(out, prefix + ".o");
    out.push_back({prefix + ".relative_bias", &relative_bias});
  }

  std::size_t windows() const { return (grid_h / window) * (grid_w / window); }

  // Multi-head self-attention over `groups` equal blocks of rows.
  Var<T> attend(const Graph<T>& g, const Var<T>& x, std::size_t groups, const Var<T>* bias = nullptr) const {
    return o(g, ops::attention(q(g, x), k(g, x), v(g, x), heads, groups, bias));
  }

  Var<T> operator()(const Graph<T>& g, const Var<T>& x) const {
    auto xw = ops::gather_rows(x, order);
    auto bias = ops::transpose(ops::gather_rows(g.param(relative_bias), rel_index));
    return ops::gather_rows(attend(g, xw, windows(), &bias), inverse);
  }
};

template <typename T>
struct TransformerBlock {
  LayerNorm<T> norm1, norm2;
  WindowAttention<T> attn;
  Linear<T> fc1, fc2;

  TransformerBlock() = default;
  TransformerBlock(std::size_t c, std::size_t heads, std::size_t window, std::size_t gh, std::size_t gw,
                   std::size_t mlp_ratio)
      : norm1(c), norm2(c), attn(c, heads, window, gh, gw), fc1(c, c * mlp_ratio), fc2(c * mlp_ratio, c) {}

  void init(Rng& rng) {
    attn.init(rng);
    fc1.init(rng, 1.0 / std::sqrt(static_cast<double>(fc1.weight.shape()[0])));
    fc2.init(rng, 1.0 / std::sqrt(static_cast<double>(fc2.weight.shape()[0])));
  }

  void collect(ParamList<T>& out, const std::string& prefix) {
    norm1.collect(out, prefix + ".norm1");
    attn.collect(out, prefix + ".attn");
    norm2.collect(out, prefix + ".norm2");
    fc1.collect(out, prefix + ".fc1");
    fc2.collect(out, prefix + ".fc2");
  }

  Var<T> operator()(const Graph<T>& g, Var<T> x) const {
    x = ops::add(x, attn(g, norm1(g, x)));
    return ops::add(x, fc2(g, ops::gelu(fc1(g, norm2(g, x)))));
  }
};

template <typename T>
struct PatchMerge {
  LayerNorm<T> norm;
  Linear<T> reduce;
  std::vector<std::size_t> order;

  PatchMerge() = default;
  PatchMerge(std::size_t c, std::size_t gh, std::size_t gw)
      : norm(4 * c), reduce(4 * c, 2 * c, false), order(detail::patch_merge_order(gh, gw)) {}

  void init(Rng& rng) { reduce.init(rng, 1.0 / std::sqrt(static_cast<double>(reduce.weight.shape()[0]))); }

  void collect(ParamList<T>& out, const std::string& prefix) {
    norm.collect(out, prefix + ".norm");
    reduce.collect(out, prefix + ".reduce");
  }

  Var<T> operator()(const Graph<T>& g, const Var<T>& x) const {
    const std::size_t n = x.shape()[0] / 4, c = x.shape()[1];
    auto grouped = ops::reshape(ops::gather_rows(x, order), {n, 4 * c});
    return reduce(g, norm(g, grouped));
  }
};

// Both encoder kinds behind one pyramid contract; only the members of the
// configured kind are populated.
template <typename T>
class Encoder {
 public:
  Encoder() = default;
  explicit Encoder(const GeneratorConfig& cfg) : cfg_(cfg) {
    if (cfg.encoder == EncoderKind::attention) {
      const std::size_t c1 = cfg.level_channels(1);
      embed_ = Linear<T>(3 * 4 * 4, c1);
      embed_norm_ = LayerNorm<T>(c1);
      for (std::size_t l = 1; l <= cfg.levels; ++l) {
        const std::size_t c = cfg.level_channels(l), gh = cfg.level_height(l), gw = cfg.level_width(l);
        if (l > 1) merges_.emplace_back(cfg.level_channels(l - 1), 2 * gh, 2 * gw);
        blocks_.emplace_back(c, cfg.heads, cfg.level_window(l), gh, gw, cfg.mlp_ratio);
      }
    } else {
      stem_ = Conv<T>(3, cfg.base_channels, 3, 2);
      std::size_t prev = cfg.base_channels;
      for (std::size_t l = 1; l <= cfg.levels; ++l) {
        const std::size_t c = cfg.level_channels(l);
        convs_.emplace_back(prev, c, 3, 1);
        downs_.emplace_back(c, c, 3, 2);
        prev = c;
      }
    }
  }

  void init(Rng& rng) {
    auto he = [](const Conv<T>& c) { return std::sqrt(2.0 / static_cast<double>(c.fan_in())); };
    if (cfg_.encoder == EncoderKind::attention) {
      embed_.init(rng, 1.0 / std::sqrt(48.0));
      for (std::size_t l = 0; l < blocks_.size(); ++l) {
        if (l > 0) merges_[l - 1].init(rng);
        blocks_[l].init(rng);
      }
    } else {
      stem_.init(rng, he(stem_));
      for (std::size_t l = 0; l < convs_.size(); ++l) {
        convs_[l].init(rng, he(convs_[l]));
        downs_[l].init(rng, he(downs_[l]));
      }
    }
  }

  void collect(ParamList<T>& out, const std::string& prefix) {
    if (cfg_.encoder == EncoderKind::attention) {
      embed_.collect(out, prefix + ".embed");
      embed_norm_.collect(out, prefix + ".embed_norm");
      for (std::size_t l = 0; l < blocks_.size(); ++l) {
        const std::string p = prefix + ".level" + std::to_string(l + 1);
        if (l > 0) merges_[l - 1].collect(out, p + ".merge");
        blocks_[l].collect(out, p + ".block");
      }
    } else {
      stem_.collect(out, prefix + ".stem");
      for (std::size_t l = 0; l < convs_.size(); ++l) {
        const std::string p = prefix + ".level" + std::to_string(l + 1);
        convs_[l].collect(out, p + ".conv");
        downs_[l].collect(out, p + ".down");
      }
    }
  }

  // image [3, h, w] -> {f_1, ..., f_L}
  std::vector<Var<T>> operator()(const Graph<T>& g, const Var<T>& image) const {
    if (image.shape() != Shape{3, cfg_.height, cfg_.width}) {
      throw DimensionError("encoder expects image " + shape_str({3, cfg_.height, cfg_.width}) + ", got " +
                           shape_str(image.shape()));
    }
    std::vector<Var<T>> pyramid;
    if (cfg_.encoder == EncoderKind::attention) {
      auto x = embed_norm_(g, embed_(g, ops::patchify(image, 4)));
      for (std::size_t l = 1; l <= cfg_.levels; ++l) {
        if (l > 1) x = merges_[l - 2](g, x);
        x = blocks_[l - 1](g, x);
        pyramid.push_back(tokens_to_map(x, cfg_.level_height(l), cfg_.level_width(l)));
      }
    } else {
      auto x = ops::gelu(stem_(g, image));
      for (std::size_t l = 0; l < cfg_.levels; ++l) {
        x = ops::gelu(convs_[l](g, x));
        x = ops::gelu(downs_[l](g, x));
        pyramid.push_back(x);
      }
    }
    return pyramid;
  }

  const WindowAttention<T>& attention(std::size_t level) const { return blocks_.at(level - 1).attn; }
  WindowAttention<T>& attention(std::size_t level) { return blocks_.at(level - 1).attn; }

 private:
  GeneratorConfig cfg_;
  Linear<T> embed_;
  LayerNorm<T> embed_norm_;
  std::vector<TransformerBlock<T>> blocks_;
  std::vector<PatchMerge<T>> merges_;
  Conv<T> stem_;
  std::vector<Conv<T>> convs_, downs_;
};

}  // namespace ebsal
