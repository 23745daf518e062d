// Copyright (c) 2026 The cfpformer Authors. All rights reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "cfp/core/error.hpp"
#include "cfp/core/rng.hpp"
#include "cfp/core/tensor.hpp"

namespace cfp {

enum class SoftmaxBase { natural, two };

namespace detail {

template <typename T>
using RowMajorMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMajorMatrix<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMajorMatrix<T>>;

// c[m x n] (+)= op(a) * op(b). `a` is stored m x k (or k x m when
// transposed), `b` is stored k x n (or n x k when transposed).
template <typename T>
void gemm(const T* a, bool trans_a, const T* b, bool trans_b, T* c, Eigen::Index m, Eigen::Index n, Eigen::Index k,
          bool accumulate) {
  MatMap<T> C(c, m, n);
  auto run = [&](const auto& A, const auto& B) {
    if (accumulate) {
      C.noalias() += A * B;
    } else {
      C.noalias() = A * B;
    }
  };
  if (!trans_a && !trans_b) {
    run(ConstMatMap<T>(a, m, k), ConstMatMap<T>(b, k, n));
  } else if (!trans_a && trans_b) {
    run(ConstMatMap<T>(a, m, k), ConstMatMap<T>(b, n, k).transpose());
  } else if (trans_a && !trans_b) {
    run(ConstMatMap<T>(a, k, m).transpose(), ConstMatMap<T>(b, k, n));
  } else {
    run(ConstMatMap<T>(a, k, m).transpose(), ConstMatMap<T>(b, n, k).transpose());
  }
}

template <typename T>
bool wants_grad(const std::shared_ptr<Node<T>>& n) {
  return n && n->requires_grad;
}

inline void require_same_shape(const char* op, const Shape& a, const Shape& b) {
  if (a != b) throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("add", a.shape(), b.shape());
  std::vector<T> out(a.numel());
  auto ad = a.data(), bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] + bd[i];
  auto an = a.node_ptr(), bn = b.node_ptr();
  return make_result<T>("add", a.shape(), std::move(out), {a, b}, [an, bn](Node<T>& o) {
    for (auto* n : {an.get(), bn.get()}) {
      if (!n->requires_grad) continue;
      T* g = n->grad_buffer();
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
    }
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("sub", a.shape(), b.shape());
  std::vector<T> out(a.numel());
  auto ad = a.data(), bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] - bd[i];
  auto an = a.node_ptr(), bn = b.node_ptr();
  return make_result<T>("sub", a.shape(), std::move(out), {a, b}, [an, bn](Node<T>& o) {
    if (an->requires_grad) {
      T* g = an->grad_buffer();
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
    }
    if (bn->requires_grad) {
      T* g = bn->grad_buffer();
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] -= o.grad[i];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("mul", a.shape(), b.shape());
  std::vector<T> out(a.numel());
  auto ad = a.data(), bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[i];
  auto an = a.node_ptr(), bn = b.node_ptr();
  return make_result<T>("mul", a.shape(), std::move(out), {a, b}, [an, bn](Node<T>& o) {
    if (an->requires_grad) {
      T* g = an->grad_buffer();
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * bn->data[i];
    }
    if (bn->requires_grad) {
      T* g = bn->grad_buffer();
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * an->data[i];
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  std::vector<T> out(x.numel());
  auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] * factor;
  auto xn = x.node_ptr();
  return make_result<T>("scale", x.shape(), std::move(out), {x}, [xn, factor](Node<T>& o) {
    T* g = xn->grad_buffer();
    for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * factor;
  });
}

/// x + y where y's shape equals the trailing extents of x (bias rows,
/// per-head masks broadcast over batch and rows).
template <typename T>
Tensor<T> add_suffix(const Tensor<T>& x, const Tensor<T>& y) {
  const auto& xs = x.shape();
  const auto& ys = y.shape();
  if (ys.size() > xs.size() || !std::equal(ys.rbegin(), ys.rend(), xs.rbegin())) {
    throw DimensionError("add_suffix: " + shape_str(ys) + " is not a suffix of " + shape_str(xs));
  }
  const std::size_t inner = y.numel();
  const std::size_t outer = x.numel() / inner;
  std::vector<T> out(x.numel());
  auto xd = x.data(), yd = y.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] = xd[o * inner + i] + yd[i];
  }
  auto xn = x.node_ptr(), yn = y.node_ptr();
  return make_result<T>("add_suffix", xs, std::move(out), {x, y}, [xn, yn, inner, outer](Node<T>& o) {
    if (xn->requires_grad) {
      T* g = xn->grad_buffer();
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
    }
    if (yn->requires_grad) {
      T* g = yn->grad_buffer();
      for (std::size_t b = 0; b < outer; ++b) {
        for (std::size_t i = 0; i < inner; ++i) g[i] += o.grad[b * inner + i];
      }
    }
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  double acc = 0;
  for (T v : x.data()) acc += v;
  auto xn = x.node_ptr();
  return make_result<T>("sum", {1}, {static_cast<T>(acc)}, {x}, [xn](Node<T>& o) {
    T* g = xn->grad_buffer();
    const T go = o.grad[0];
    for (std::size_t i = 0; i < xn->data.size(); ++i) g[i] += go;
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  std::vector<T> out(x.numel());
  auto xd = x.data();
  const T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = T(0.5) * xd[i] * (T(1) + std::erf(xd[i] * inv_sqrt2));
  auto xn = x.node_ptr();
  return make_result<T>("gelu", x.shape(), std::move(out), {x}, [xn, inv_sqrt2](Node<T>& o) {
    T* g = xn->grad_buffer();
    const T inv_sqrt_2pi = inv_sqrt2 * std::numbers::inv_sqrtpi_v<T>;
    for (std::size_t i = 0; i < o.grad.size(); ++i) {
      const T v = xn->data[i];
      const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
      const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
      g[i] += o.grad[i] * (cdf + v * pdf);
    }
  });
}

// ---------------------------------------------------------------------------
// Layout

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  std::vector<T> out(x.data().begin(), x.data().end());
  auto xn = x.node_ptr();
  return make_result<T>("reshape", std::move(shape), std::move(out), {x}, [xn](Node<T>& o) {
    T* g = xn->grad_buffer();
    for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
  });
}

namespace detail {

// Walks the output of a permutation in row-major order. For output flat
// index j the matching source offset is passed to fn(j, src_offset).
template <typename Fn>
void for_each_permuted(const Shape& in_shape, const std::vector<std::size_t>& perm, Fn&& fn) {
  const std::size_t rank = in_shape.size();
  std::vector<std::size_t> in_stride(rank, 1);
  for (std::size_t d = rank; d-- > 1;) in_stride[d - 1] = in_stride[d] * in_shape[d];
  std::vector<std::size_t> out_shape(rank), step(rank);
  for (std::size_t d = 0; d < rank; ++d) {
    out_shape[d] = in_shape[perm[d]];
    step[d] = in_stride[perm[d]];
  }
  const std::size_t total = numel(in_shape);
  const std::size_t last = out_shape[rank - 1];
  const std::size_t last_step = step[rank - 1];
  std::vector<std::size_t> idx(rank, 0);
  std::size_t src = 0;
  for (std::size_t j = 0; j < total; j += last) {
    std::size_t s = src;
    for (std::size_t t = 0; t < last; ++t, s += last_step) fn(j + t, s);
    // advance all but the innermost axis
    for (std::size_t d = rank - 1; d-- > 0;) {
      if (++idx[d] < out_shape[d]) {
        src += step[d];
        break;
      }
      src -= step[d] * (out_shape[d] - 1);
      idx[d] = 0;
    }
  }
}

}  // namespace detail

/// Reorders axes: output axis d is input axis perm[d].
template <typename T>
Tensor<T> permute(const Tensor<T>& x, std::vector<std::size_t> perm) {
  const auto& xs = x.shape();
  if (perm.size() != xs.size()) {
    throw DimensionError("permute: " + std::to_string(perm.size()) + " axes for tensor " + shape_str(xs));
  }
  std::vector<bool> used(perm.size(), false);
  for (auto p : perm) {
    if (p >= perm.size() || used[p]) throw DimensionError("permute: invalid axis order");
    used[p] = true;
  }
  Shape out_shape(xs.size());
  for (std::size_t d = 0; d < xs.size(); ++d) out_shape[d] = xs[perm[d]];
  std::vector<T> out(x.numel());
  auto xd = x.data();
  detail::for_each_permuted(xs, perm, [&](std::size_t j, std::size_t s) { out[j] = xd[s]; });
  auto xn = x.node_ptr();
  return make_result<T>("permute", std::move(out_shape), std::move(out), {x}, [xn, perm](Node<T>& o) {
    T* g = xn->grad_buffer();
    detail::for_each_permuted(xn->shape, perm, [&](std::size_t j, std::size_t s) { g[s] += o.grad[j]; });
  });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& xs, std::size_t axis) {
  if (xs.empty()) throw UsageError("concat: no inputs");
  const Shape& first = xs.front().shape();
  if (axis >= first.size()) throw DimensionError("concat: axis out of range for " + shape_str(first));
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& t : xs) {
    const Shape& s = t.shape();
    bool ok = s.size() == first.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == first[d];
    if (!ok) throw DimensionError("concat: " + shape_str(s) + " does not match " + shape_str(first));
    out_shape[axis] += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= first[d];
  for (std::size_t d = axis + 1; d < first.size(); ++d) inner *= first[d];
  const std::size_t out_row = out_shape[axis] * inner;
  std::vector<T> out(numel(out_shape));
  std::size_t offset = 0;
  for (const auto& t : xs) {
    const std::size_t chunk = t.dim(axis) * inner;
    auto td = t.data();
    for (std::size_t o = 0; o < outer; ++o) std::copy_n(td.data() + o * chunk, chunk, out.data() + o * out_row + offset);
    offset += chunk;
  }
  std::vector<std::shared_ptr<Node<T>>> nodes;
  for (const auto& t : xs) nodes.push_back(t.node_ptr());
  return make_result<T>("concat", std::move(out_shape), std::move(out), xs, [nodes, outer, inner, out_row](Node<T>& o) {
    std::size_t offset = 0;
    for (const auto& n : nodes) {
      const std::size_t chunk = n->shape.size() ? n->data.size() / outer : 0;
      if (n->requires_grad) {
        T* g = n->grad_buffer();
        for (std::size_t b = 0; b < outer; ++b) {
          for (std::size_t i = 0; i < chunk; ++i) g[b * chunk + i] += o.grad[b * out_row + offset + i];
        }
      }
      offset += chunk;
    }
    (void)inner;
  });
}

// ---------------------------------------------------------------------------
// Products

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: cannot multiply " + shape_str(a.shape()) + " by " + shape_str(b.shape()));
  }
  const auto m = static_cast<Eigen::Index>(a.dim(0));
  const auto k = static_cast<Eigen::Index>(a.dim(1));
  const auto n = static_cast<Eigen::Index>(b.dim(1));
  std::vector<T> out(static_cast<std::size_t>(m * n));
  detail::gemm(a.data().data(), false, b.data().data(), false, out.data(), m, n, k, false);
  auto an = a.node_ptr(), bn = b.node_ptr();
  return make_result<T>("matmul", {a.dim(0), b.dim(1)}, std::move(out), {a, b}, [an, bn, m, n, k](Node<T>& o) {
    if (an->requires_grad) detail::gemm(o.grad.data(), false, bn->data.data(), true, an->grad_buffer(), m, k, n, true);
    if (bn->requires_grad) detail::gemm(an->data.data(), true, o.grad.data(), false, bn->grad_buffer(), k, n, m, true);
  });
}

/// Batched product over matching leading axes: a[..., M, K] * b[..., K, N],
/// or b[..., N, K] transposed when trans_b is set.
template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool trans_b = false) {
  const auto& as = a.shape();
  const auto& bs = b.shape();
  const std::size_t r = as.size();
  bool ok = r >= 2 && bs.size() == r && std::equal(as.begin(), as.end() - 2, bs.begin());
  const std::size_t m = ok ? as[r - 2] : 0, k = ok ? as[r - 1] : 0;
  const std::size_t n = ok ? (trans_b ? bs[r - 2] : bs[r - 1]) : 0;
  ok = ok && (trans_b ? bs[r - 1] : bs[r - 2]) == k;
  if (!ok) {
    throw DimensionError("bmm: cannot multiply " + shape_str(as) + " by " + shape_str(bs) +
                         (trans_b ? " (transposed)" : ""));
  }
  const std::size_t batch = a.numel() / (m * k);
  Shape out_shape(as.begin(), as.end() - 2);
  out_shape.push_back(m);
  out_shape.push_back(n);
  std::vector<T> out(batch * m * n);
  auto ad = a.data(), bd = b.data();
  using I = Eigen::Index;
  for (std::size_t i = 0; i < batch; ++i) {
    detail::gemm(ad.data() + i * m * k, false, bd.data() + i * k * n, trans_b, out.data() + i * m * n, I(m), I(n), I(k),
                 false);
  }
  auto an = a.node_ptr(), bn = b.node_ptr();
  return make_result<T>("bmm", std::move(out_shape), std::move(out), {a, b},
                        [an, bn, batch, m, n, k, trans_b](Node<T>& o) {
                          for (std::size_t i = 0; i < batch; ++i) {
                            const T* go = o.grad.data() + i * m * n;
                            const T* bp = bn->data.data() + i * k * n;
                            const T* ap = an->data.data() + i * m * k;
                            if (an->requires_grad) {
                              // dA = dC * B^T  (or dC * B when B was used transposed)
                              detail::gemm(go, false, bp, !trans_b, an->grad_buffer() + i * m * k, I(m), I(k), I(n),
                                           true);
                            }
                            if (bn->requires_grad) {
                              if (trans_b) {
                                detail::gemm(go, true, ap, false, bn->grad_buffer() + i * k * n, I(n), I(k), I(m), true);
                              } else {
                                detail::gemm(ap, true, go, false, bn->grad_buffer() + i * k * n, I(k), I(n), I(m), true);
                              }
                            }
                          }
                        });
}

/// y = x W^T + b over the last axis; W is [out, in].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  const auto& xs = x.shape();
  if (weight.rank() != 2 || xs.back() != weight.dim(1)) {
    throw DimensionError("linear: input " + shape_str(xs) + " does not match weight " + shape_str(weight.shape()));
  }
  const std::size_t in = weight.dim(1), out_dim = weight.dim(0);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != out_dim)) {
    throw DimensionError("linear: bias " + shape_str(bias.shape()) + " for output width " + std::to_string(out_dim));
  }
  const std::size_t rows = x.numel() / in;
  Shape out_shape = xs;
  out_shape.back() = out_dim;
  std::vector<T> out(rows * out_dim);
  using I = Eigen::Index;
  detail::gemm(x.data().data(), false, weight.data().data(), true, out.data(), I(rows), I(out_dim), I(in), false);
  if (bias.defined()) {
    auto bd = bias.data();
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < out_dim; ++c) out[r * out_dim + c] += bd[c];
    }
  }
  auto xn = x.node_ptr(), wn = weight.node_ptr();
  auto bn = bias.defined() ? bias.node_ptr() : nullptr;
  return make_result<T>("linear", std::move(out_shape), std::move(out), {x, weight, bias},
                        [xn, wn, bn, rows, in, out_dim](Node<T>& o) {
                          if (xn->requires_grad) {
                            detail::gemm(o.grad.data(), false, wn->data.data(), false, xn->grad_buffer(), I(rows),
                                         I(in), I(out_dim), true);
                          }
                          if (wn->requires_grad) {
                            detail::gemm(o.grad.data(), true, xn->data.data(), false, wn->grad_buffer(), I(out_dim),
                                         I(in), I(rows), true);
                          }
                          if (detail::wants_grad(bn)) {
                            T* g = bn->grad_buffer();
                            for (std::size_t r = 0; r < rows; ++r) {
                              for (std::size_t c = 0; c < out_dim; ++c) g[c] += o.grad[r * out_dim + c];
                            }
                          }
                        });
}

// ---------------------------------------------------------------------------
// Normalization

/// Softmax over the last axis. Base two evaluates 2^(x - max) / sum.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x, SoftmaxBase base = SoftmaxBase::natural) {
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.numel() / n;
  const T factor = base == SoftmaxBase::two ? std::numbers::ln2_v<T> : T(1);
  std::vector<T> out(x.numel());
  auto xd = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = xd.data() + r * n;
    T* y = out.data() + r * n;
    const T mx = *std::max_element(in, in + n);
    T total = 0;
    for (std::size_t i = 0; i < n; ++i) {
      y[i] = std::exp((in[i] - mx) * factor);
      total += y[i];
    }
    const T inv = T(1) / total;
    for (std::size_t i = 0; i < n; ++i) y[i] *= inv;
  }
  auto xn = x.node_ptr();
  return make_result<T>("softmax_rows", x.shape(), std::move(out), {x}, [xn, n, rows, factor](Node<T>& o) {
    T* g = xn->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      const T* y = o.data.data() + r * n;
      const T* gy = o.grad.data() + r * n;
      T dot = 0;
      for (std::size_t i = 0; i < n; ++i) dot += gy[i] * y[i];
      for (std::size_t i = 0; i < n; ++i) g[r * n + i] += factor * y[i] * (gy[i] - dot);
    }
  });
}

inline constexpr double kLayerNormEps = 1e-5;

/// Normalizes the last axis to zero mean / unit variance, then applies
/// gain and bias. Rows whose entries are all equal normalize to exactly 0.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias) {
  const std::size_t d = x.shape().back();
  if (gain.numel() != d || bias.numel() != d) {
    throw DimensionError("layer_norm: affine of width " + std::to_string(gain.numel()) + " for rows of " +
                         std::to_string(d));
  }
  const std::size_t rows = x.numel() / d;
  std::vector<T> xhat(x.numel()), rstd(rows), out(x.numel());
  auto xd = x.data(), gd = gain.data(), bd = bias.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = xd.data() + r * d;
    T* h = xhat.data() + r * d;
    const auto [lo, hi] = std::minmax_element(in, in + d);
    double mu = 0;
    for (std::size_t i = 0; i < d; ++i) mu += in[i];
    mu /= static_cast<double>(d);
    double var = 0;
    for (std::size_t i = 0; i < d; ++i) var += (in[i] - mu) * (in[i] - mu);
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    rstd[r] = static_cast<T>(inv);
    const bool constant = *lo == *hi;
    for (std::size_t i = 0; i < d; ++i) {
      h[i] = constant ? T(0) : static_cast<T>((in[i] - mu) * inv);
      out[r * d + i] = h[i] * gd[i] + bd[i];
    }
  }
  auto xn = x.node_ptr(), gn = gain.node_ptr(), bn = bias.node_ptr();
  return make_result<T>("layer_norm", x.shape(), std::move(out), {x, gain, bias},
                        [xn, gn, bn, xhat = std::move(xhat), rstd = std::move(rstd), rows, d](Node<T>& o) {
                          const T* gd = gn->data.data();
                          T* gx = xn->requires_grad ? xn->grad_buffer() : nullptr;
                          T* gg = gn->requires_grad ? gn->grad_buffer() : nullptr;
                          T* gb = bn->requires_grad ? bn->grad_buffer() : nullptr;
                          for (std::size_t r = 0; r < rows; ++r) {
                            const T* gy = o.grad.data() + r * d;
                            const T* h = xhat.data() + r * d;
                            T sum_dh = 0, sum_dh_h = 0;
                            for (std::size_t i = 0; i < d; ++i) {
                              const T dh = gy[i] * gd[i];
                              sum_dh += dh;
                              sum_dh_h += dh * h[i];
                              if (gg) gg[i] += gy[i] * h[i];
                              if (gb) gb[i] += gy[i];
                            }
                            if (!gx) continue;
                            const T inv_d = T(1) / static_cast<T>(d);
                            for (std::size_t i = 0; i < d; ++i) {
                              const T dh = gy[i] * gd[i];
                              gx[r * d + i] += rstd[r] * (dh - inv_d * sum_dh - h[i] * inv_d * sum_dh_h);
                            }
                          }
                        });
}

// ---------------------------------------------------------------------------
// Convolutions (NCHW unless noted)

namespace detail {

struct ConvGeometry {
  std::size_t channels, height, width;  // image side
  std::size_t kernel, stride, padding;
  std::size_t out_h, out_w;             // column grid
};

// col[(c*k + ki)*k + kj][oh*out_w + ow] = img[c][oh*s + ki - p][ow*s + kj - p]
template <typename T>
void im2col(const T* img, const ConvGeometry& g, T* col) {
  const std::size_t cols = g.out_h * g.out_w;
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ki = 0; ki < g.kernel; ++ki) {
      for (std::size_t kj = 0; kj < g.kernel; ++kj) {
        T* row = col + ((c * g.kernel + ki) * g.kernel + kj) * cols;
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const auto ih = static_cast<std::ptrdiff_t>(oh * g.stride + ki) - static_cast<std::ptrdiff_t>(g.padding);
          T* dst = row + oh * g.out_w;
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.height)) {
            std::fill_n(dst, g.out_w, T(0));
            continue;
          }
          const T* src = img + (c * g.height + static_cast<std::size_t>(ih)) * g.width;
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            const auto iw = static_cast<std::ptrdiff_t>(ow * g.stride + kj) - static_cast<std::ptrdiff_t>(g.padding);
            dst[ow] = (iw < 0 || iw >= static_cast<std::ptrdiff_t>(g.width)) ? T(0) : src[iw];
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatters columns back into the image, accumulating.
template <typename T>
void col2im(const T* col, const ConvGeometry& g, T* img) {
  const std::size_t cols = g.out_h * g.out_w;
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ki = 0; ki < g.kernel; ++ki) {
      for (std::size_t kj = 0; kj < g.kernel; ++kj) {
        const T* row = col + ((c * g.kernel + ki) * g.kernel + kj) * cols;
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const auto ih = static_cast<std::ptrdiff_t>(oh * g.stride + ki) - static_cast<std::ptrdiff_t>(g.padding);
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.height)) continue;
          T* dst = img + (c * g.height + static_cast<std::size_t>(ih)) * g.width;
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            const auto iw = static_cast<std::ptrdiff_t>(ow * g.stride + kj) - static_cast<std::ptrdiff_t>(g.padding);
            if (iw >= 0 && iw < static_cast<std::ptrdiff_t>(g.width)) dst[iw] += row[oh * g.out_w + ow];
          }
        }
      }
    }
  }
}

inline bool is_pointwise(const ConvGeometry& g) { return g.kernel == 1 && g.stride == 1 && g.padding == 0; }

}  // namespace detail

/// Cross-correlation. x [B, C, H, W], kernel [O, C, k, k], optional bias [O].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& bias, std::size_t stride,
                 std::size_t padding) {
  if (x.rank() != 4 || kernel.rank() != 4 || kernel.dim(1) != x.dim(1) || kernel.dim(2) != kernel.dim(3)) {
    throw DimensionError("conv2d: input " + shape_str(x.shape()) + " incompatible with kernel " +
                         shape_str(kernel.shape()));
  }
  const std::size_t batch = x.dim(0), c_in = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t c_out = kernel.dim(0), k = kernel.dim(2);
  if (stride == 0) throw DimensionError("conv2d: stride must be positive");
  if (k % 2 == 0 && stride != k) {
    throw DimensionError("conv2d: even kernel " + std::to_string(k) + " needs stride == kernel");
  }
  if (k > h + 2 * padding || k > w + 2 * padding) {
    throw DimensionError("conv2d: kernel " + shape_str(kernel.shape()) + " larger than padded input " +
                         shape_str(x.shape()));
  }
  if (bias.defined() && bias.numel() != c_out) throw DimensionError("conv2d: bias width mismatch");
  detail::ConvGeometry g{c_in, h, w, k, stride, padding, (h + 2 * padding - k) / stride + 1,
                         (w + 2 * padding - k) / stride + 1};
  const std::size_t cols = g.out_h * g.out_w, patch = c_in * k * k;
  std::vector<T> out(batch * c_out * cols);
  std::vector<T> col(detail::is_pointwise(g) ? 0 : patch * cols);
  using I = Eigen::Index;
  auto xd = x.data();
  for (std::size_t b = 0; b < batch; ++b) {
    const T* img = xd.data() + b * c_in * h * w;
    const T* src = img;
    if (!col.empty()) {
      detail::im2col(img, g, col.data());
      src = col.data();
    }
    T* dst = out.data() + b * c_out * cols;
    detail::gemm(kernel.data().data(), false, src, false, dst, I(c_out), I(cols), I(patch), false);
    if (bias.defined()) {
      for (std::size_t o = 0; o < c_out; ++o) {
        for (std::size_t i = 0; i < cols; ++i) dst[o * cols + i] += bias.data()[o];
      }
    }
  }
  auto xn = x.node_ptr(), kn = kernel.node_ptr();
  auto bn = bias.defined() ? bias.node_ptr() : nullptr;
  return make_result<T>("conv2d", {batch, c_out, g.out_h, g.out_w}, std::move(out), {x, kernel, bias},
                        [xn, kn, bn, g, batch, c_out, cols, patch](Node<T>& o) {
                          const bool pointwise = detail::is_pointwise(g);
                          std::vector<T> col(pointwise ? 0 : patch * cols);
                          const std::size_t img_size = g.channels * g.height * g.width;
                          for (std::size_t b = 0; b < batch; ++b) {
                            const T* go = o.grad.data() + b * c_out * cols;
                            const T* img = xn->data.data() + b * img_size;
                            if (kn->requires_grad) {
                              const T* src = img;
                              if (!pointwise) {
                                detail::im2col(img, g, col.data());
                                src = col.data();
                              }
                              detail::gemm(go, false, src, true, kn->grad_buffer(), I(c_out), I(patch), I(cols), true);
                            }
                            if (xn->requires_grad) {
                              T* gx = xn->grad_buffer() + b * img_size;
                              if (pointwise) {
                                detail::gemm(kn->data.data(), true, go, false, gx, I(patch), I(cols), I(c_out), true);
                              } else {
                                detail::gemm(kn->data.data(), true, go, false, col.data(), I(patch), I(cols),
                                             I(c_out), false);
                                detail::col2im(col.data(), g, gx);
                              }
                            }
                            if (detail::wants_grad(bn)) {
                              T* gb = bn->grad_buffer();
                              for (std::size_t c = 0; c < c_out; ++c) {
                                for (std::size_t i = 0; i < cols; ++i) gb[c] += go[c * cols + i];
                              }
                            }
                          }
                        });
}

/// Fractionally-strided convolution. x [B, Cin, H, W], kernel [Cin, O, k, k];
/// output extent (H - 1) * stride - 2 * padding + k.
template <typename T>
Tensor<T> transpose_conv2d(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& bias, std::size_t stride,
                           std::size_t padding = 0) {
  if (x.rank() != 4 || kernel.rank() != 4 || kernel.dim(0) != x.dim(1) || kernel.dim(2) != kernel.dim(3)) {
    throw DimensionError("transpose_conv2d: input " + shape_str(x.shape()) + " incompatible with kernel " +
                         shape_str(kernel.shape()));
  }
  const std::size_t batch = x.dim(0), c_in = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t c_out = kernel.dim(1), k = kernel.dim(2);
  if (stride == 0 || (h - 1) * stride + k <= 2 * padding || (w - 1) * stride + k <= 2 * padding) {
    throw DimensionError("transpose_conv2d: padding " + std::to_string(padding) + " consumes the whole output");
  }
  if (bias.defined() && bias.numel() != c_out) throw DimensionError("transpose_conv2d: bias width mismatch");
  const std::size_t out_h = (h - 1) * stride + k - 2 * padding, out_w = (w - 1) * stride + k - 2 * padding;
  // Geometry of the adjoint convolution: the output image maps onto the input grid.
  detail::ConvGeometry g{c_out, out_h, out_w, k, stride, padding, h, w};
  const std::size_t cols = h * w, patch = c_out * k * k, out_size = c_out * out_h * out_w;
  std::vector<T> out(batch * out_size, T(0));
  std::vector<T> col(patch * cols);
  using I = Eigen::Index;
  auto xd = x.data();
  for (std::size_t b = 0; b < batch; ++b) {
    detail::gemm(kernel.data().data(), true, xd.data() + b * c_in * cols, false, col.data(), I(patch), I(cols),
                 I(c_in), false);
    T* dst = out.data() + b * out_size;
    detail::col2im(col.data(), g, dst);
    if (bias.defined()) {
      for (std::size_t o = 0; o < c_out; ++o) {
        for (std::size_t i = 0; i < out_h * out_w; ++i) dst[o * out_h * out_w + i] += bias.data()[o];
      }
    }
  }
  auto xn = x.node_ptr(), kn = kernel.node_ptr();
  auto bn = bias.defined() ? bias.node_ptr() : nullptr;
  return make_result<T>("transpose_conv2d", {batch, c_out, out_h, out_w}, std::move(out), {x, kernel, bias},
                        [xn, kn, bn, g, batch, c_in, cols, patch, out_size](Node<T>& o) {
                          std::vector<T> col(patch * cols);
                          const std::size_t plane = g.height * g.width;
                          for (std::size_t b = 0; b < batch; ++b) {
                            const T* go = o.grad.data() + b * out_size;
                            detail::im2col(go, g, col.data());
                            if (xn->requires_grad) {
                              detail::gemm(kn->data.data(), false, col.data(), false,
                                           xn->grad_buffer() + b * c_in * cols, I(c_in), I(cols), I(patch), true);
                            }
                            if (kn->requires_grad) {
                              detail::gemm(xn->data.data() + b * c_in * cols, false, col.data(), true,
                                           kn->grad_buffer(), I(c_in), I(patch), I(cols), true);
                            }
                            if (detail::wants_grad(bn)) {
                              T* gb = bn->grad_buffer();
                              for (std::size_t c = 0; c < g.channels; ++c) {
                                for (std::size_t i = 0; i < plane; ++i) gb[c] += go[c * plane + i];
                              }
                            }
                          }
                        });
}

/// Depthwise convolution on channels-last tokens: x [B, H, W, C],
/// kernel [C, k, k] with k odd, zero padding k/2, optional bias [C].
template <typename T>
Tensor<T> depthwise_conv2d_nhwc(const Tensor<T>& x, const Tensor<T>& kernel, const Tensor<T>& bias) {
  if (x.rank() != 4 || kernel.rank() != 3 || kernel.dim(0) != x.dim(3) || kernel.dim(1) != kernel.dim(2) ||
      kernel.dim(1) % 2 == 0) {
    throw DimensionError("depthwise_conv2d_nhwc: input " + shape_str(x.shape()) + " incompatible with kernel " +
                         shape_str(kernel.shape()));
  }
  const std::size_t batch = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3), k = kernel.dim(1);
  const auto half = static_cast<std::ptrdiff_t>(k / 2);
  const auto H = static_cast<std::ptrdiff_t>(h), W = static_cast<std::ptrdiff_t>(w);
  std::vector<T> out(x.numel(), T(0));
  auto xd = x.data(), kd = kernel.data();
  // Visits every (output pixel, kernel tap, input pixel) triple inside the image.
  auto visit = [=](auto&& fn) {
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::ptrdiff_t i = 0; i < H; ++i) {
        for (std::ptrdiff_t j = 0; j < W; ++j) {
          const std::size_t o = ((b * h + std::size_t(i)) * w + std::size_t(j)) * c;
          for (std::ptrdiff_t di = -half; di <= half; ++di) {
            const std::ptrdiff_t ii = i + di;
            if (ii < 0 || ii >= H) continue;
            for (std::ptrdiff_t dj = -half; dj <= half; ++dj) {
              const std::ptrdiff_t jj = j + dj;
              if (jj < 0 || jj >= W) continue;
              const std::size_t src = ((b * h + std::size_t(ii)) * w + std::size_t(jj)) * c;
              const std::size_t tap = std::size_t((di + half) * std::ptrdiff_t(k) + (dj + half));
              fn(o, src, tap);
            }
          }
        }
      }
    }
  };
  const std::size_t kk = k * k;
  visit([&](std::size_t o, std::size_t src, std::size_t tap) {
    for (std::size_t ch = 0; ch < c; ++ch) out[o + ch] += xd[src + ch] * kd[ch * kk + tap];
  });
  if (bias.defined()) {
    if (bias.numel() != c) throw DimensionError("depthwise_conv2d_nhwc: bias width mismatch");
    auto bd = bias.data();
    for (std::size_t p = 0; p < out.size(); p += c) {
      for (std::size_t ch = 0; ch < c; ++ch) out[p + ch] += bd[ch];
    }
  }
  auto xn = x.node_ptr(), kn = kernel.node_ptr();
  auto bn = bias.defined() ? bias.node_ptr() : nullptr;
  return make_result<T>("depthwise_conv2d_nhwc", x.shape(), std::move(out), {x, kernel, bias},
                        [xn, kn, bn, visit, c, kk](Node<T>& o) {
                          T* gx = xn->requires_grad ? xn->grad_buffer() : nullptr;
                          T* gk = kn->requires_grad ? kn->grad_buffer() : nullptr;
                          const T* kd = kn->data.data();
                          const T* xd = xn->data.data();
                          visit([&](std::size_t out_off, std::size_t src, std::size_t tap) {
                            for (std::size_t ch = 0; ch < c; ++ch) {
                              const T go = o.grad[out_off + ch];
                              if (gx) gx[src + ch] += go * kd[ch * kk + tap];
                              if (gk) gk[ch * kk + tap] += go * xd[src + ch];
                            }
                          });
                          if (detail::wants_grad(bn)) {
                            T* gb = bn->grad_buffer();
                            for (std::size_t p = 0; p < o.grad.size(); p += c) {
                              for (std::size_t ch = 0; ch < c; ++ch) gb[ch] += o.grad[p + ch];
                            }
                          }
                        });
}

namespace detail {

struct Tap {
  std::size_t lo, hi;
  double frac;
};

// Half-pixel-centre sampling positions, clamped to the source extent.
inline std::vector<Tap> linear_taps(std::size_t in, std::size_t out) {
  std::vector<Tap> taps(out);
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t i = 0; i < out; ++i) {
    double src = (static_cast<double>(i) + 0.5) * ratio - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const auto lo = static_cast<std::size_t>(std::floor(src));
    taps[i] = {lo, std::min(lo + 1, in - 1), src - static_cast<double>(lo)};
  }
  return taps;
}

}  // namespace detail

/// Bilinear resampling of x [B, C, H, W] to [B, C, out_h, out_w].
template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& x, std::size_t out_h, std::size_t out_w) {
  if (x.rank() != 4 || out_h == 0 || out_w == 0) {
    throw DimensionError("bilinear_resize: expected [B,C,H,W], got " + shape_str(x.shape()));
  }
  const std::size_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  auto rows = detail::linear_taps(h, out_h);
  auto cols = detail::linear_taps(w, out_w);
  std::vector<T> out(planes * out_h * out_w);
  auto xd = x.data();
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = xd.data() + p * h * w;
    T* dst = out.data() + p * out_h * out_w;
    for (std::size_t i = 0; i < out_h; ++i) {
      const auto& r = rows[i];
      for (std::size_t j = 0; j < out_w; ++j) {
        const auto& q = cols[j];
        const T top = static_cast<T>((1 - q.frac) * src[r.lo * w + q.lo] + q.frac * src[r.lo * w + q.hi]);
        const T bot = static_cast<T>((1 - q.frac) * src[r.hi * w + q.lo] + q.frac * src[r.hi * w + q.hi]);
        dst[i * out_w + j] = static_cast<T>((1 - r.frac) * top + r.frac * bot);
      }
    }
  }
  auto xn = x.node_ptr();
  return make_result<T>("bilinear_resize", {x.dim(0), x.dim(1), out_h, out_w}, std::move(out), {x},
                        [xn, rows, cols, planes, h, w, out_h, out_w](Node<T>& o) {
                          T* g = xn->grad_buffer();
                          for (std::size_t p = 0; p < planes; ++p) {
                            T* gs = g + p * h * w;
                            const T* go = o.grad.data() + p * out_h * out_w;
                            for (std::size_t i = 0; i < out_h; ++i) {
                              const auto& r = rows[i];
                              for (std::size_t j = 0; j < out_w; ++j) {
                                const auto& q = cols[j];
                                const double v = go[i * out_w + j];
                                gs[r.lo * w + q.lo] += static_cast<T>(v * (1 - r.frac) * (1 - q.frac));
                                gs[r.lo * w + q.hi] += static_cast<T>(v * (1 - r.frac) * q.frac);
                                gs[r.hi * w + q.lo] += static_cast<T>(v * r.frac * (1 - q.frac));
                                gs[r.hi * w + q.hi] += static_cast<T>(v * r.frac * q.frac);
                              }
                            }
                          }
                        });
}

template <typename T>
Tensor<T> bilinear_upsample_2x(const Tensor<T>& x) {
  if (x.rank() != 4) throw DimensionError("bilinear_upsample_2x: expected [B,C,H,W], got " + shape_str(x.shape()));
  return bilinear_resize(x, 2 * x.dim(2), 2 * x.dim(3));
}

// ---------------------------------------------------------------------------
// Regularization

/// Stochastic depth over axis 0: each sample's branch is zeroed with
/// probability `rate`, survivors are scaled by 1 / (1 - rate).
template <typename T>
Tensor<T> drop_path(const Tensor<T>& x, double rate, bool training, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) throw ConfigError("drop_path: rate must lie in [0, 1), got " + std::to_string(rate));
  if (!training || rate == 0.0) return x;
  const std::size_t batch = x.dim(0), per = x.numel() / batch;
  std::vector<T> keep(batch);
  for (auto& k : keep) k = rng.bernoulli(rate) ? T(0) : static_cast<T>(1.0 / (1.0 - rate));
  std::vector<T> out(x.numel());
  auto xd = x.data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = 0; i < per; ++i) out[b * per + i] = xd[b * per + i] * keep[b];
  }
  auto xn = x.node_ptr();
  return make_result<T>("drop_path", x.shape(), std::move(out), {x}, [xn, keep, per](Node<T>& o) {
    T* g = xn->grad_buffer();
    for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * keep[i / per];
  });
}

}  // namespace cfp
