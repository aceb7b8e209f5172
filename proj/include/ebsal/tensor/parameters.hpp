#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "ebsal/random.hpp"
#include "ebsal/tensor/checkpoint.hpp"
#include "ebsal/tensor/tape.hpp"
#include "ebsal/tensor/tensor.hpp"

namespace ebsal {

template <typename T>
struct ParamRef {
  std::string name;
  Tensor<T>* tensor = nullptr;
};

template <typename T>
using ParamList = std::vector<ParamRef<T>>;

// Gradient bundle aligned index-for-index with a ParamList.
template <typename T>
using Gradients = std::vector<Tensor<T>>;

template <typename T>
Gradients<T> zeros_like(const ParamList<T>& params) {
  Gradients<T> g;
  g.reserve(params.size());
  for (const auto& p : params) g.emplace_back(p.tensor->shape());
  return g;
}

template <typename T>
double global_norm(const Gradients<T>& g) {
  double s = 0;
  for (const auto& t : g)
    for (T v : t.data()) s += static_cast<double>(v) * static_cast<double>(v);
  return std::sqrt(s);
}

template <typename T>
void axpy(Gradients<T>& y, T a, const Gradients<T>& x) {
  if (y.size() != x.size()) throw DimensionError("gradient bundles differ in length");
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (y[i].shape() != x[i].shape()) throw DimensionError("gradient bundle shape mismatch");
    for (std::size_t k = 0; k < y[i].size(); ++k) y[i][k] += a * x[i][k];
  }
}

template <typename T>
void scale_in_place(Gradients<T>& g, T a) {
  for (auto& t : g)
    for (auto& v : t.storage()) v *= a;
}

// Adds the external-leaf adjoints of a finished tape into `g`.
template <typename T>
void accumulate_leaf_gradients(const Tape<T>& tape, const ParamList<T>& params, Gradients<T>& g, T weight = T(1)) {
  for (const auto& [tensor, adj] : tape.leaf_gradients()) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (params[i].tensor != tensor) continue;
      for (std::size_t k = 0; k < adj.size(); ++k) g[i][k] += weight * adj[k];
      break;
    }
  }
}

template <typename T>
void set_requires_grad(const ParamList<T>& params, bool on) {
  for (const auto& p : params) p.tensor->set_requires_grad(on);
}

template <typename T>
void add_to_checkpoint(Checkpoint& ck, const ParamList<T>& params) {
  for (const auto& p : params) ck.add(p.name, *p.tensor);
}

template <typename T>
void load_from_checkpoint(const Checkpoint& ck, const ParamList<T>& params) {
  for (const auto& p : params) ck.load_into(p.name, *p.tensor);
}

template <typename T>
void init_normal(Tensor<T>& t, Rng& rng, double stddev) {
  fill_normal<T>(rng, t.data(), stddev);
}

}  // namespace ebsal
