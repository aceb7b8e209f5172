#pragma once

#include "ebsal/tensor/tape.hpp"
#include "ebsal/tensor/tensor.hpp"

namespace ebsal {

// A tape plus the decision whether model parameters are differentiated.
// Latent-space sampling differentiates only the latent input; parameter
// updates differentiate the weights.
template <typename T>
struct Graph {
  Tape<T>& tape;
  bool track_params = false;

  Var<T> param(const Tensor<T>& p) const {
    // Tracked leaves are only read back through leaf_gradients(); the
    // tensor itself is never written through this handle.
    return track_params ? tape.leaf(const_cast<Tensor<T>&>(p), true) : tape.ref(p);
  }
};

}  // namespace ebsal
