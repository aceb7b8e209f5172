#pragma once

// Differentiable primitives recorded on a Tape.
//
// Layout conventions: feature maps are [channels, height, width]; token
// sequences and matrices are [rows, cols]. All primitives are pure and check
// their own shape contracts.

#include <Eigen/Core>

#include <cmath>
#include <limits>
#include <memory>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "ebsal/tensor/tape.hpp"
#include "ebsal/tensor/tensor.hpp"

namespace ebsal::ops {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

template <typename T>
ConstMapMat<T> as_mat(std::span<const T> s, std::size_t rows, std::size_t cols) {
  return ConstMapMat<T>(s.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
template <typename T>
MapMat<T> as_mat(std::span<T> s, std::size_t rows, std::size_t cols) {
  return MapMat<T>(s.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw DimensionError(msg);
}

template <typename T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                      " vs " + shape_str(b.shape()));
}

template <typename T>
void require_rank(const Var<T>& a, std::size_t rank, const char* op) {
  require(a.shape().size() == rank, std::string(op) + ": expected rank " + std::to_string(rank) +
                                        ", got " + shape_str(a.shape()));
}

// Splits a shape around `axis` into (outer, axis extent, inner) strides.
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

inline AxisSplit split_axis(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.extent = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

template <typename T>
T gelu_value(T x) {
  return T(0.5) * x * (T(1) + std::erf(x * T(std::numbers::sqrt2 / 2)));
}

template <typename T>
T gelu_derivative(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x * T(std::numbers::sqrt2 / 2)));
  const T pdf = std::exp(T(-0.5) * x * x) * T(0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2);
  return cdf + x * pdf;
}

template <typename T>
T sigmoid_value(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "add");
  Tensor<T> out = a.value();
  const auto bv = b.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return a.tape().record("add", std::move(out), {a, b}, [a, b](Tape<T>& t, std::size_t self) {
    auto g = t.adjoint(self);
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "sub");
  Tensor<T> out = a.value();
  const auto bv = b.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return a.tape().record("sub", std::move(out), {a, b}, [a, b](Tape<T>& t, std::size_t self) {
    auto g = t.adjoint(self);
    t.accumulate(a, g);
    if (auto gb = t.adjoint_if_tracked(b); !gb.empty()) {
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor<T> out = a.value();
  const auto bv = b.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return a.tape().record("mul", std::move(out), {a, b}, [a, b](Tape<T>& t, std::size_t self) {
    auto g = t.adjoint(self);
    const auto av = a.value().data();
    const auto bv = b.value().data();
    if (auto ga = t.adjoint_if_tracked(a); !ga.empty()) {
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (auto gb = t.adjoint_if_tracked(b); !gb.empty()) {
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T factor) {
  Tensor<T> out = a.value();
  for (auto& v : out.storage()) v *= factor;
  return a.tape().record("scale", std::move(out), {a}, [a, factor](Tape<T>& t, std::size_t self) {
    auto g = t.adjoint(self);
    if (auto ga = t.adjoint_if_tracked(a); !ga.empty()) {
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += factor * g[i];
    }
  });
}

// Exact GELU: x * Phi(x).
template <typename T>
Var<T> gelu(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (auto& v : out.storage()) v = detail::gelu_value(v);
  return a.tape().record("gelu", std::move(out), {a}, [a](Tape<T>& t, std::size_t self) {
    auto g = t.adjoint(self);
    const auto x = a.value().data();
    if (auto ga = t.adjoint_if_tracked(a); !ga.empty()) {
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * detail::gelu_derivative(x[i]);
    }
  });
}

template <typename T>
Var<T> sigmoid(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (auto& v : out.storage()) v = detail::sigmoid_value(v);
  return a.tape().record("sigmoid", std::move(out), {a}, [a](Tape<T>& t, std::size_t self) {
    auto g = t.adjoint(self);
    const auto y = t.value(self).data();
    if (auto ga = t.adjoint_if_tracked(a); !ga.empty()) {
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i] * (T(1) - y[i]);
    }
  });
}

// ------------------------------------------------------------------ reductions

template <typename T>
Var<T> sum(const Var<T>& a) {
  T s = 0;
  for (T v : a.value().data()) s += v;
  return a.tape().record("sum", Tensor<T>::scalar(s), {a}, [a](Tape<T>& t, std::size_t self) {
    const T g = t.adjoint(self)[0];
    if (auto ga = t.adjoint_if_tracked(a); !ga.empty()) {
      for (auto& v : ga) v += g;
    }
  });
}

template <typename T>
Var<T> mean(const Var<T>& a) {
  const T n = static_cast<T>(a.size());
  T s = 0;
  for (T v : a.value().data()) s += v;
  return a.tape().record("mean", Tensor<T>::scalar(s / n), {a}, [a, n](Tape<T>& t, std::size_t self) {
    const T g = t.adjoint(self)[0] / n;
    if (auto ga = t.adjoint_if_tracked(a); !ga.empty()) {
      for (auto& v : ga) v += g;
    }
  });
}

// Sum of squared entries.
template <typename T>
Var<T> square_norm(const Var<T>& a) {
  T s = 0;
  for (T v : a.value().data()) s += v * v;
  return a.tape().record("square_norm", Tensor<T>::scalar(s), {a}, [a](Tape<T>& t, std::size_t self) {
    const T g = t.adjoint(self)[0];
    const auto x = a.value().data();
    if (auto ga = t.adjoint_if_tracked(a); !ga.empty()) {
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += T(2) * g * x[i];
    }
  });
}

// ----------------------------------------------------------------- reshaping

template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  detail::require(shape_size(shape) == a.size(),
                  "reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  Tensor<T> out(std::move(shape), a.value().storage());
  return a.tape().record("reshape", std::move(out), {a}, [a](Tape<T>& t, std::size_t self) {
    t.accumulate(a, t.adjoint(self));
  });
}

template <typename T>
Var<T> transpose(const Var<T>& a) {
  detail::require_rank(a, 2, "transpose");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  Tensor<T> out({n, m});
  const auto x = a.value().data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = x[i * n + j];
  return a.tape().record("transpose", std::move(out), {a}, [a, m, n](Tape<T>& t, std::size_t self) {
    auto g = t.adjoint(self);
    if (auto ga = t.adjoint_if_tracked(a); !ga.empty()) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
    }
  });
}

// Concatenation along `axis`; all other extents must agree.
template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts, std::size_t axis) {
  detail::require(!parts.empty(), "concat: no inputs");
  const Shape& s0 = parts[0].shape();
  detail::require(axis < s0.size(), "concat: axis " + std::to_string(axis) + " out of range for " +
                                        shape_str(s0));
  Shape out_shape = s0;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == s0.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == axis || s[i] == s0[i];
    detail::require(ok, "concat: incompatible shapes " + shape_str(s0) + " and " + shape_str(s));
    out_shape[axis] += s[axis];
  }
  const auto so = detail::split_axis(out_shape, axis);
  Tensor<T> out(out_shape);
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const auto x = p.value().data();
    const std::size_t ext = p.shape()[axis];
    for (std::size_t o = 0; o < so.outer; ++o) {
      std::copy_n(x.begin() + o * ext * so.inner, ext * so.inner,
                  out.storage().begin() + (o * so.extent + offset) * so.inner);
    }
    offset += ext;
  }
  return parts[0].tape().record(
      "concat", std::move(out), parts, [parts, offsets, so, axis](Tape<T>& t, std::size_t self) {
        auto g = t.adjoint(self);
        for (std::size_t k = 0; k < parts.size(); ++k) {
          auto gp = t.adjoint_if_tracked(parts[k]);
          if (gp.empty()) continue;
          const std::size_t ext = parts[k].shape()[axis];
          for (std::size_t o = 0; o < so.outer; ++o) {
            const T* src = g.data() + (o * so.extent + offsets[k]) * so.inner;
            T* dst = gp.data() + o * ext * so.inner;
            for (std::size_t i = 0; i < ext * so.inner; ++i) dst[i] += src[i];
          }
        }
      });
}

// Inverse of concat: slices `a` along `axis` into consecutive pieces.
template <typename T>
std::vector<Var<T>> split(const Var<T>& a, std::size_t axis, const std::vector<std::size_t>& sizes) {
  detail::require(axis < a.shape().size(), "split: axis out of range for " + shape_str(a.shape()));
  std::size_t total = 0;
  for (auto s : sizes) {
    detail::require(s > 0, "split: empty piece");
    total += s;
  }
  detail::require(total == a.shape()[axis], "split: sizes do not cover axis extent");
  const auto sa = detail::split_axis(a.shape(), axis);
  std::vector<Var<T>> out;
  std::size_t offset = 0;
  for (auto ext : sizes) {
    Shape s = a.shape();
    s[axis] = ext;
    Tensor<T> piece(s);
    const auto x = a.value().data();
    for (std::size_t o = 0; o < sa.outer; ++o) {
      std::copy_n(x.begin() + (o * sa.extent + offset) * sa.inner, ext * sa.inner,
                  piece.storage().begin() + o * ext * sa.inner);
    }
    out.push_back(a.tape().record("split", std::move(piece), {a},
                                  [a, sa, offset, ext](Tape<T>& t, std::size_t self) {
                                    auto g = t.adjoint(self);
                                    auto ga = t.adjoint_if_tracked(a);
                                    if (ga.empty()) return;
                                    for (std::size_t o = 0; o < sa.outer; ++o) {
                                      T* dst = ga.data() + (o * sa.extent + offset) * sa.inner;
                                      const T* src = g.data() + o * ext * sa.inner;
                                      for (std::size_t i = 0; i < ext * sa.inner; ++i) dst[i] += src[i];
                                    }
                                  }));
    offset += ext;
  }
  return out;
}

// y[i, :] = table[index[i], :] for a matrix `table`. Covers permutations,
// window partitioning and patch merging; the backward pass scatter-adds.
template <typename T>
Var<T> gather_rows(const Var<T>& table, std::vector<std::size_t> index) {
  detail::require_rank(table, 2, "gather_rows");
  const std::size_t rows = table.shape()[0], cols = table.shape()[1];
  detail::require(!index.empty(), "gather_rows: empty index");
  Tensor<T> out({index.size(), cols});
  const auto x = table.value().data();
  for (std::size_t i = 0; i < index.size(); ++i) {
    detail::require(index[i] < rows, "gather_rows: index out of range");
    std::copy_n(x.begin() + index[i] * cols, cols, out.storage().begin() + i * cols);
  }
  return table.tape().record("gather_rows", std::move(out), {table},
                             [table, index = std::move(index), cols](Tape<T>& t, std::size_t self) {
                               auto g = t.adjoint(self);
                               auto ga = t.adjoint_if_tracked(table);
                               if (ga.empty()) return;
                               for (std::size_t i = 0; i < index.size(); ++i) {
                                 for (std::size_t c = 0; c < cols; ++c) ga[index[i] * cols + c] += g[i * cols + c];
                               }
                             });
}

// --------------------------------------------------------------- linear maps

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  detail::require_rank(a, 2, "matmul");
  detail::require_rank(b, 2, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  detail::require(b.shape()[0] == k, "matmul: inner dimensions disagree " + shape_str(a.shape()) +
                                         " x " + shape_str(b.shape()));
  Tensor<T> out({m, n});
  detail::as_mat<T>(out.data(), m, n).noalias() =
      detail::as_mat<T>(a.value().data(), m, k) * detail::as_mat<T>(b.value().data(), k, n);
  return a.tape().record("matmul", std::move(out), {a, b}, [a, b, m, k, n](Tape<T>& t, std::size_t self) {
    auto g = detail::as_mat<T>(std::span<const T>(t.adjoint(self)), m, n);
    if (auto ga = t.adjoint_if_tracked(a); !ga.empty()) {
      detail::as_mat<T>(ga, m, k).noalias() += g * detail::as_mat<T>(b.value().data(), k, n).transpose();
    }
    if (auto gb = t.adjoint_if_tracked(b); !gb.empty()) {
      detail::as_mat<T>(gb, k, n).noalias() += detail::as_mat<T>(a.value().data(), m, k).transpose() * g;
    }
  });
}

// x[m, n] + bias[n] broadcast over rows.
template <typename T>
Var<T> add_row_bias(const Var<T>& x, const Var<T>& bias) {
  detail::require_rank(x, 2, "add_row_bias");
  const std::size_t m = x.shape()[0], n = x.shape()[1];
  detail::require(bias.size() == n, "add_row_bias: bias length " + std::to_string(bias.size()) +
                                        " != " + std::to_string(n));
  Tensor<T> out = x.value();
  const auto b = bias.value().data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += b[j];
  return x.tape().record("add_row_bias", std::move(out), {x, bias}, [x, bias, m, n](Tape<T>& t, std::size_t self) {
    auto g = t.adjoint(self);
    t.accumulate(x, g);
    if (auto gb = t.adjoint_if_tracked(bias); !gb.empty()) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
    }
  });
}

// x[c, h, w] + bias[c] broadcast over pixels.
template <typename T>
Var<T> add_channel_bias(const Var<T>& x, const Var<T>& bias) {
  detail::require_rank(x, 3, "add_channel_bias");
  const std::size_t c = x.shape()[0], hw = x.shape()[1] * x.shape()[2];
  detail::require(bias.size() == c, "add_channel_bias: bias length mismatch");
  Tensor<T> out = x.value();
  const auto b = bias.value().data();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < hw; ++i) out[ch * hw + i] += b[ch];
  return x.tape().record("add_channel_bias", std::move(out), {x, bias},
                         [x, bias, c, hw](Tape<T>& t, std::size_t self) {
                           auto g = t.adjoint(self);
                           t.accumulate(x, g);
                           if (auto gb = t.adjoint_if_tracked(bias); !gb.empty()) {
                             for (std::size_t ch = 0; ch < c; ++ch) {
                               T s = 0;
                               for (std::size_t i = 0; i < hw; ++i) s += g[ch * hw + i];
                               gb[ch] += s;
                             }
                           }
                         });
}

struct Padding {
  std::size_t before = 0;
  std::size_t after = 0;
};

// Cross-correlation of x[c_in, h, w] with kernel[c_out, c_in, k, k], zero
// padded. The output extent (h + before + after - k) / stride + 1 must be
// integral.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& kernel, std::size_t stride, Padding pad) {
  detail::require_rank(x, 3, "conv2d");
  detail::require_rank(kernel, 4, "conv2d");
  const std::size_t ci = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
  const std::size_t co = kernel.shape()[0], k = kernel.shape()[2];
  detail::require(kernel.shape()[1] == ci, "conv2d: kernel expects " + std::to_string(kernel.shape()[1]) +
                                               " input channels, got " + std::to_string(ci));
  detail::require(kernel.shape()[3] == k, "conv2d: kernel must be square");
  detail::require(stride >= 1, "conv2d: stride must be >= 1");
  const std::size_t ph = h + pad.before + pad.after, pw = w + pad.before + pad.after;
  detail::require(ph >= k && pw >= k, "conv2d: kernel larger than padded input");
  detail::require((ph - k) % stride == 0 && (pw - k) % stride == 0,
                  "conv2d: non-integral output size for input " + shape_str(x.shape()) + ", k=" +
                      std::to_string(k) + ", stride=" + std::to_string(stride));
  const std::size_t ho = (ph - k) / stride + 1, wo = (pw - k) / stride + 1;
  const std::size_t rows = ci * k * k, npix = ho * wo;

  auto cols = std::make_shared<std::vector<T>>(rows * npix, T{0});
  const auto xv = x.value().data();
  for (std::size_t c = 0; c < ci; ++c)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        T* row = cols->data() + ((c * k + ky) * k + kx) * npix;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad.before);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad.before);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
            row[oy * wo + ox] = xv[(c * h + iy) * w + ix];
          }
        }
      }
  Tensor<T> out({co, ho, wo});
  detail::as_mat<T>(out.data(), co, npix).noalias() =
      detail::as_mat<T>(kernel.value().data(), co, rows) * detail::as_mat<T>(std::span<const T>(*cols), rows, npix);

  return x.tape().record(
      "conv2d", std::move(out), {x, kernel},
      [x, kernel, cols, ci, h, w, co, k, stride, pad, ho, wo, rows, npix](Tape<T>& t, std::size_t self) {
        auto g = detail::as_mat<T>(std::span<const T>(t.adjoint(self)), co, npix);
        if (auto gk = t.adjoint_if_tracked(kernel); !gk.empty()) {
          detail::as_mat<T>(gk, co, rows).noalias() +=
              g * detail::as_mat<T>(std::span<const T>(*cols), rows, npix).transpose();
        }
        auto gx = t.adjoint_if_tracked(x);
        if (gx.empty()) return;
        detail::RowMat<T> dcols = detail::as_mat<T>(kernel.value().data(), co, rows).transpose() * g;
        for (std::size_t c = 0; c < ci; ++c)
          for (std::size_t ky = 0; ky < k; ++ky)
            for (std::size_t kx = 0; kx < k; ++kx) {
              const T* row = dcols.data() + ((c * k + ky) * k + kx) * npix;
              for (std::size_t oy = 0; oy < ho; ++oy) {
                const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad.before);
                if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                for (std::size_t ox = 0; ox < wo; ++ox) {
                  const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad.before);
                  if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
                  gx[(c * h + iy) * w + ix] += row[oy * wo + ox];
                }
              }
            }
      });
}

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& kernel, std::size_t stride, std::size_t padding) {
  detail::require(kernel.shape().size() == 4 && kernel.shape()[2] % 2 == 1,
                  "conv2d: kernel size must be odd");
  return conv2d(x, kernel, stride, Padding{padding, padding});
}

// ----------------------------------------------------------- spatial helpers

template <typename T>
Var<T> upsample_nearest(const Var<T>& x, std::size_t factor) {
  detail::require_rank(x, 3, "upsample_nearest");
  detail::require(factor >= 1, "upsample_nearest: factor must be >= 1");
  const std::size_t c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
  const std::size_t H = h * factor, W = w * factor;
  Tensor<T> out({c, H, W});
  const auto xv = x.value().data();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t xx = 0; xx < W; ++xx)
        out[(ch * H + y) * W + xx] = xv[(ch * h + y / factor) * w + xx / factor];
  return x.tape().record("upsample_nearest", std::move(out), {x},
                         [x, c, h, w, H, W, factor](Tape<T>& t, std::size_t self) {
                           auto g = t.adjoint(self);
                           auto gx = t.adjoint_if_tracked(x);
                           if (gx.empty()) return;
                           for (std::size_t ch = 0; ch < c; ++ch)
                             for (std::size_t y = 0; y < H; ++y)
                               for (std::size_t xx = 0; xx < W; ++xx)
                                 gx[(ch * h + y / factor) * w + xx / factor] += g[(ch * H + y) * W + xx];
                         });
}

// [c, h, w] -> [c]
template <typename T>
Var<T> global_avg_pool(const Var<T>& x) {
  detail::require_rank(x, 3, "global_avg_pool");
  const std::size_t c = x.shape()[0], hw = x.shape()[1] * x.shape()[2];
  Tensor<T> out({c});
  const auto xv = x.value().data();
  for (std::size_t ch = 0; ch < c; ++ch) {
    T s = 0;
    for (std::size_t i = 0; i < hw; ++i) s += xv[ch * hw + i];
    out[ch] = s / static_cast<T>(hw);
  }
  return x.tape().record("global_avg_pool", std::move(out), {x}, [x, c, hw](Tape<T>& t, std::size_t self) {
    auto g = t.adjoint(self);
    auto gx = t.adjoint_if_tracked(x);
    if (gx.empty()) return;
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T v = g[ch] / static_cast<T>(hw);
      for (std::size_t i = 0; i < hw; ++i) gx[ch * hw + i] += v;
    }
  });
}

// y[c, :, :] = x[c, :, :] * gate[c]
template <typename T>
Var<T> channel_scale(const Var<T>& x, const Var<T>& gate) {
  detail::require_rank(x, 3, "channel_scale");
  const std::size_t c = x.shape()[0], hw = x.shape()[1] * x.shape()[2];
  detail::require(gate.size() == c, "channel_scale: gate length mismatch");
  Tensor<T> out = x.value();
  const auto gv = gate.value().data();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < hw; ++i) out[ch * hw + i] *= gv[ch];
  return x.tape().record("channel_scale", std::move(out), {x, gate},
                         [x, gate, c, hw](Tape<T>& t, std::size_t self) {
                           auto g = t.adjoint(self);
                           const auto xv = x.value().data();
                           const auto gv = gate.value().data();
                           if (auto gx = t.adjoint_if_tracked(x); !gx.empty()) {
                             for (std::size_t ch = 0; ch < c; ++ch)
                               for (std::size_t i = 0; i < hw; ++i) gx[ch * hw + i] += g[ch * hw + i] * gv[ch];
                           }
                           if (auto gg = t.adjoint_if_tracked(gate); !gg.empty()) {
                             for (std::size_t ch = 0; ch < c; ++ch) {
                               T s = 0;
                               for (std::size_t i = 0; i < hw; ++i) s += g[ch * hw + i] * xv[ch * hw + i];
                               gg[ch] += s;
                             }
                           }
                         });
}

// z[d] -> [d, h, w] with z copied to every pixel.
template <typename T>
Var<T> replicate_spatial(const Var<T>& z, std::size_t h, std::size_t w) {
  const std::size_t d = z.size();
  Tensor<T> out({d, h, w});
  const auto zv = z.value().data();
  for (std::size_t c = 0; c < d; ++c) std::fill_n(out.storage().begin() + c * h * w, h * w, zv[c]);
  return z.tape().record("replicate_spatial", std::move(out), {z}, [z, d, h, w](Tape<T>& t, std::size_t self) {
    auto g = t.adjoint(self);
    auto gz = t.adjoint_if_tracked(z);
    if (gz.empty()) return;
    for (std::size_t c = 0; c < d; ++c) {
      T s = 0;
      for (std::size_t i = 0; i < h * w; ++i) s += g[c * h * w + i];
      gz[c] += s;
    }
  });
}

// [c, h, w] -> [(h/p)*(w/p), c*p*p]; feature index = (ch*p + dy)*p + dx.
template <typename T>
Var<T> patchify(const Var<T>& x, std::size_t p) {
  detail::require_rank(x, 3, "patchify");
  const std::size_t c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
  detail::require(p >= 1 && h % p == 0 && w % p == 0, "patchify: size not divisible by patch");
  const std::size_t gh = h / p, gw = w / p, f = c * p * p;
  std::vector<std::size_t> src(gh * gw * f);
  for (std::size_t ty = 0; ty < gh; ++ty)
    for (std::size_t tx = 0; tx < gw; ++tx)
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t dy = 0; dy < p; ++dy)
          for (std::size_t dx = 0; dx < p; ++dx)
            src[(ty * gw + tx) * f + (ch * p + dy) * p + dx] = (ch * h + ty * p + dy) * w + tx * p + dx;
  Tensor<T> out({gh * gw, f});
  const auto xv = x.value().data();
  for (std::size_t i = 0; i < src.size(); ++i) out[i] = xv[src[i]];
  return x.tape().record("patchify", std::move(out), {x}, [x, src = std::move(src)](Tape<T>& t, std::size_t self) {
    auto g = t.adjoint(self);
    auto gx = t.adjoint_if_tracked(x);
    if (gx.empty()) return;
    for (std::size_t i = 0; i < src.size(); ++i) gx[src[i]] += g[i];
  });
}

// -------------------------------------------------------------- normalizers

template <typename T>
Var<T> softmax(const Var<T>& x, std::size_t axis) {
  detail::require(axis < x.shape().size(), "softmax: axis " + std::to_string(axis) + " out of range for " +
                                               shape_str(x.shape()));
  const auto s = detail::split_axis(x.shape(), axis);
  Tensor<T> out(x.shape());
  const auto xv = x.value().data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.extent * s.inner + in;
      T mx = xv[base];
      for (std::size_t i = 1; i < s.extent; ++i) mx = std::max(mx, xv[base + i * s.inner]);
      T z = 0;
      for (std::size_t i = 0; i < s.extent; ++i) {
        const T e = std::exp(xv[base + i * s.inner] - mx);
        out[base + i * s.inner] = e;
        z += e;
      }
      for (std::size_t i = 0; i < s.extent; ++i) out[base + i * s.inner] /= z;
    }
  return x.tape().record("softmax", std::move(out), {x}, [x, s](Tape<T>& t, std::size_t self) {
    auto g = t.adjoint(self);
    const auto y = t.value(self).data();
    auto gx = t.adjoint_if_tracked(x);
    if (gx.empty()) return;
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t in = 0; in < s.inner; ++in) {
        const std::size_t base = o * s.extent * s.inner + in;
        T dot = 0;
        for (std::size_t i = 0; i < s.extent; ++i) dot += g[base + i * s.inner] * y[base + i * s.inner];
        for (std::size_t i = 0; i < s.extent; ++i) {
          const std::size_t idx = base + i * s.inner;
          gx[idx] += y[idx] * (g[idx] - dot);
        }
      }
  });
}

// Per-row layer normalization of x[n, c] with affine gamma[c], beta[c].
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5)) {
  detail::require_rank(x, 2, "layer_norm");
  const std::size_t n = x.shape()[0], c = x.shape()[1];
  detail::require(gamma.size() == c && beta.size() == c, "layer_norm: affine length mismatch");
  auto xhat = std::make_shared<std::vector<T>>(n * c);
  auto inv_std = std::make_shared<std::vector<T>>(n);
  Tensor<T> out({n, c});
  const auto xv = x.value().data();
  const auto gv = gamma.value().data();
  const auto bv = beta.value().data();
  for (std::size_t i = 0; i < n; ++i) {
    T mu = 0;
    for (std::size_t j = 0; j < c; ++j) mu += xv[i * c + j];
    mu /= static_cast<T>(c);
    T var = 0;
    for (std::size_t j = 0; j < c; ++j) var += (xv[i * c + j] - mu) * (xv[i * c + j] - mu);
    var /= static_cast<T>(c);
    const T is = T(1) / std::sqrt(var + eps);
    (*inv_std)[i] = is;
    for (std::size_t j = 0; j < c; ++j) {
      const T xh = (xv[i * c + j] - mu) * is;
      (*xhat)[i * c + j] = xh;
      out[i * c + j] = xh * gv[j] + bv[j];
    }
  }
  return x.tape().record(
      "layer_norm", std::move(out), {x, gamma, beta},
      [x, gamma, beta, xhat, inv_std, n, c](Tape<T>& t, std::size_t self) {
        auto g = t.adjoint(self);
        const auto gv = gamma.value().data();
        if (auto gg = t.adjoint_if_tracked(gamma); !gg.empty()) {
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < c; ++j) gg[j] += g[i * c + j] * (*xhat)[i * c + j];
        }
        if (auto gb = t.adjoint_if_tracked(beta); !gb.empty()) {
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < c; ++j) gb[j] += g[i * c + j];
        }
        auto gx = t.adjoint_if_tracked(x);
        if (gx.empty()) return;
        for (std::size_t i = 0; i < n; ++i) {
          T mean_dxh = 0, mean_dxh_xh = 0;
          for (std::size_t j = 0; j < c; ++j) {
            const T dxh = g[i * c + j] * gv[j];
            mean_dxh += dxh;
            mean_dxh_xh += dxh * (*xhat)[i * c + j];
          }
          mean_dxh /= static_cast<T>(c);
          mean_dxh_xh /= static_cast<T>(c);
          for (std::size_t j = 0; j < c; ++j) {
            const T dxh = g[i * c + j] * gv[j];
            gx[i * c + j] += (*inv_std)[i] * (dxh - mean_dxh - (*xhat)[i * c + j] * mean_dxh_xh);
          }
        }
      });
}

// Scaled dot-product attention over `groups` independent blocks of rows.
//
// q, k, v: [groups * n, c] with rows of block g at [g*n, (g+1)*n). Columns are
// split into `heads` slices of width c / heads. Per block and head:
//   out = softmax(q k^T / sqrt(c / heads) + bias[head]) v
// where the optional bias is [heads, n * n] and shared by every block.
template <typename T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, std::size_t heads, std::size_t groups,
                 const Var<T>* bias = nullptr) {
  detail::require_rank(q, 2, "attention");
  detail::require_same_shape(q, k, "attention");
  detail::require_same_shape(q, v, "attention");
  const std::size_t rows = q.shape()[0], c = q.shape()[1];
  detail::require(heads >= 1 && c % heads == 0, "attention: channels " + std::to_string(c) +
                                                   " not divisible by heads " + std::to_string(heads));
  detail::require(groups >= 1 && rows % groups == 0, "attention: rows not divisible by groups");
  const std::size_t n = rows / groups, dh = c / heads;
  if (bias) {
    detail::require(bias->size() == heads * n * n, "attention: bias must be [heads, n*n]");
  }
  const T sc = T(1) / std::sqrt(static_cast<T>(dh));
  auto probs = std::make_shared<std::vector<T>>(groups * heads * n * n);
  Tensor<T> out({rows, c});
  const auto qv = q.value().data(), kv = k.value().data(), vv = v.value().data();
  const T* bv = bias ? bias->value().data().data() : nullptr;
  for (std::size_t g = 0; g < groups; ++g)
    for (std::size_t hd = 0; hd < heads; ++hd) {
      T* P = probs->data() + (g * heads + hd) * n * n;
      for (std::size_t i = 0; i < n; ++i) {
        const T* qi = qv.data() + (g * n + i) * c + hd * dh;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < n; ++j) {
          const T* kj = kv.data() + (g * n + j) * c + hd * dh;
          T s = 0;
          for (std::size_t e = 0; e < dh; ++e) s += qi[e] * kj[e];
          s *= sc;
          if (bv) s += bv[hd * n * n + i * n + j];
          P[i * n + j] = s;
          mx = std::max(mx, s);
        }
        T z = 0;
        for (std::size_t j = 0; j < n; ++j) {
          P[i * n + j] = std::exp(P[i * n + j] - mx);
          z += P[i * n + j];
        }
        for (std::size_t j = 0; j < n; ++j) P[i * n + j] /= z;
        T* oi = out.storage().data() + (g * n + i) * c + hd * dh;
        for (std::size_t j = 0; j < n; ++j) {
          const T* vj = vv.data() + (g * n + j) * c + hd * dh;
          const T p = P[i * n + j];
          for (std::size_t e = 0; e < dh; ++e) oi[e] += p * vj[e];
        }
      }
    }
  std::vector<Var<T>> parents{q, k, v};
  if (bias) parents.push_back(*bias);
  const bool has_bias = bias != nullptr;
  return q.tape().record(
      "attention", std::move(out), parents,
      [parents, probs, groups, heads, n, c, dh, sc, has_bias](Tape<T>& t, std::size_t self) {
        const auto& q = parents[0];
        const auto& k = parents[1];
        const auto& v = parents[2];
        auto go = t.adjoint(self);
        auto gq = t.adjoint_if_tracked(q);
        auto gk = t.adjoint_if_tracked(k);
        auto gv = t.adjoint_if_tracked(v);
        std::span<T> gb;
        if (has_bias) gb = t.adjoint_if_tracked(parents[3]);
        const auto qv = q.value().data(), kv = k.value().data(), vv = v.value().data();
        std::vector<T> dS(n * n);
        for (std::size_t g = 0; g < groups; ++g)
          for (std::size_t hd = 0; hd < heads; ++hd) {
            const T* P = probs->data() + (g * heads + hd) * n * n;
            for (std::size_t i = 0; i < n; ++i) {
              const T* goi = go.data() + (g * n + i) * c + hd * dh;
              T row_dot = 0;
              for (std::size_t j = 0; j < n; ++j) {
                const T* vj = vv.data() + (g * n + j) * c + hd * dh;
                T dp = 0;
                for (std::size_t e = 0; e < dh; ++e) dp += goi[e] * vj[e];
                dS[i * n + j] = dp;
                row_dot += dp * P[i * n + j];
                if (!gv.empty()) {
                  T* gvj = gv.data() + (g * n + j) * c + hd * dh;
                  for (std::size_t e = 0; e < dh; ++e) gvj[e] += P[i * n + j] * goi[e];
                }
              }
              for (std::size_t j = 0; j < n; ++j) dS[i * n + j] = P[i * n + j] * (dS[i * n + j] - row_dot);
            }
            if (!gb.empty()) {
              for (std::size_t i = 0; i < n * n; ++i) gb[hd * n * n + i] += dS[i];
            }
            for (std::size_t i = 0; i < n; ++i)
              for (std::size_t j = 0; j < n; ++j) {
                const T d = dS[i * n + j] * sc;
                if (d == T(0)) continue;
                if (!gq.empty()) {
                  const T* kj = kv.data() + (g * n + j) * c + hd * dh;
                  T* gqi = gq.data() + (g * n + i) * c + hd * dh;
                  for (std::size_t e = 0; e < dh; ++e) gqi[e] += d * kj[e];
                }
                if (!gk.empty()) {
                  const T* qi = qv.data() + (g * n + i) * c + hd * dh;
                  T* gkj = gk.data() + (g * n + j) * c + hd * dh;
                  for (std::size_t e = 0; e < dh; ++e) gkj[e] += d * qi[e];
                }
              }
          }
      });
}

}  // namespace ebsal::ops
