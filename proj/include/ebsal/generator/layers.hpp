#pragma once

// Parameterized building blocks. Each layer owns its tensors, registers them
// under a dotted name, and evaluates on a Graph.

#include <cmath>
#include <string>
#include <utility>

#include "ebsal/random.hpp"
#include "ebsal/tensor/graph.hpp"
#include "ebsal/tensor/ops.hpp"
#include "ebsal/tensor/parameters.hpp"

namespace ebsal {

// 2-D convolution with bias. Odd kernels use symmetric padding k/2 at stride
// 1; at stride 2 the padding is {k/2 - 1, k/2} so even inputs halve exactly.
template <typename T>
struct Conv {
  Tensor<T> weight;  // [c_out, c_in, k, k]
  Tensor<T> bias;    // [c_out]
  std::size_t stride = 1;

  Conv() = default;
  Conv(std::size_t c_in, std::size_t c_out, std::size_t k, std::size_t stride_)
      : weight({c_out, c_in, k, k}), bias({c_out}), stride(stride_) {
    if (k % 2 == 0) throw std::invalid_argument("Conv: kernel size must be odd");
    if (stride != 1 && stride != 2) throw std::invalid_argument("Conv: stride must be 1 or 2");
  }

  std::size_t kernel() const { return weight.shape()[2]; }
  std::size_t fan_in() const { return weight.shape()[1] * kernel() * kernel(); }

  ops::Padding padding() const {
    const std::size_t half = kernel() / 2;
    if (stride == 1) return {half, half};
    return {half == 0 ? 0 : half - 1, half};
  }

  void init(Rng& rng, double stddev) { init_normal(weight, rng, stddev); }

  void collect(ParamList<T>& out, const std::string& prefix) {
    out.push_back({prefix + ".weight", &weight});
    out.push_back({prefix + ".bias", &bias});
  }

  Var<T> operator()(const Graph<T>& g, const Var<T>& x) const {
    auto y = ops::conv2d(x, g.param(weight), stride, padding());
    return ops::add_channel_bias(y, g.param(bias));
  }
};

// Row-wise affine map x[n, in] -> x W + b with W stored [in, out].
template <typename T>
struct Linear {
  Tensor<T> weight;
  Tensor<T> bias;
  bool has_bias = true;

  Linear() = default;
  Linear(std::size_t in, std::size_t out, bool with_bias = true)
      : weight({in, out}), bias({out}), has_bias(with_bias) {}

  void init(Rng& rng, double stddev) { init_normal(weight, rng, stddev); }

  void collect(ParamList<T>& out, const std::string& prefix) {
    out.push_back({prefix + ".weight", &weight});
    if (has_bias) out.push_back({prefix + ".bias", &bias});
  }

  Var<T> operator()(const Graph<T>& g, const Var<T>& x) const {
    auto y = ops::matmul(x, g.param(weight));
    return has_bias ? ops::add_row_bias(y, g.param(bias)) : y;
  }
};

template <typename T>
struct LayerNorm {
  Tensor<T> gamma;
  Tensor<T> beta;

  LayerNorm() = default;
  explicit LayerNorm(std::size_t c) : gamma(Tensor<T>::full({c}, T(1))), beta({c}) {}

  void collect(ParamList<T>& out, const std::string& prefix) {
    out.push_back({prefix + ".gamma", &gamma});
    out.push_back({prefix + ".beta", &beta});
  }

  Var<T> operator()(const Graph<T>& g, const Var<T>& x) const {
    return ops::layer_norm(x, g.param(gamma), g.param(beta));
  }
};

// Squeeze-and-excitation style channel gate:
//   F * sigmoid(W2 gelu(W1 avgpool(F) + b1) + b2)
template <typename T>
struct ChannelAttention {
  Linear<T> squeeze;
  Linear<T> excite;

  ChannelAttention() = default;
  ChannelAttention(std::size_t c, std::size_t reduction) {
    if (reduction == 0 || c % reduction != 0) {
      throw std::invalid_argument("ChannelAttention: " + std::to_string(c) + " channels not divisible by " +
                                  std::to_string(reduction));
    }
    squeeze = Linear<T>(c, c / reduction);
    excite = Linear<T>(c / reduction, c);
  }

  void init(Rng& rng, double stddev) {
    squeeze.init(rng, stddev);
    excite.init(rng, stddev);
  }

  void collect(ParamList<T>& out, const std::string& prefix) {
    squeeze.collect(out, prefix + ".squeeze");
    excite.collect(out, prefix + ".excite");
  }

  Var<T> gate(const Graph<T>& g, const Var<T>& f) const {
    const std::size_t c = f.shape()[0];
    auto pooled = ops::reshape(ops::global_avg_pool(f), {1, c});
    auto hidden = ops::gelu(squeeze(g, pooled));
    return ops::reshape(ops::sigmoid(excite(g, hidden)), {c});
  }

  Var<T> operator()(const Graph<T>& g, const Var<T>& f) const { return ops::channel_scale(f, gate(g, f)); }
};

}  // namespace ebsal
