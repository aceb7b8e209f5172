#pragma once

#include "ebsal/tensor/tensor.hpp"

namespace ebsal {

// One training pair: image (c, h, w) and saliency target (1, h, w).
template <typename T>
struct Example {
  Tensor<T> input;
  Tensor<T> target;
};

}  // namespace ebsal
