#pragma once

// U(z) rebuilt from tape primitives, independent of EbmPrior's hand-written
// forward and reverse sweeps.

#include "ebsal/ebm_prior.hpp"
#include "ebsal/tensor/ops.hpp"

namespace oracle {

template <typename T>
ebsal::Var<T> tape_u(ebsal::Tape<T>& tape, const ebsal::EbmPrior<T>& p, const ebsal::Var<T>& z) {
  namespace o = ebsal::ops;
  const std::size_t d = p.latent_dim();
  auto col = o::reshape(z, {d, 1});
  auto h1 = o::gelu(o::add(o::matmul(tape.ref(p.w1), col), o::reshape(tape.ref(p.b1), {p.hidden(), 1})));
  auto h2 = o::gelu(o::add(o::matmul(tape.ref(p.w2), h1), o::reshape(tape.ref(p.b2), {p.hidden(), 1})));
  return o::reshape(o::add(o::matmul(tape.ref(p.w3), h2), o::reshape(tape.ref(p.b3), {1, 1})), {1});
}

template <typename T>
T plain_u(const ebsal::EbmPrior<T>& p, const std::vector<T>& z) {
  ebsal::Tape<T> tape;
  return tape_u(tape, p, tape.constant(ebsal::Tensor<T>({z.size()}, z))).value()[0];
}

}  // namespace oracle
