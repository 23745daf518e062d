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

#include <cmath>
#include <cstdlib>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <tuple>
#include <vector>

#include "cfp/core/error.hpp"
#include "cfp/core/tensor.hpp"

namespace cfp {

enum class MaskFamily { gaussian, exponential };

inline const char* to_string(MaskFamily f) { return f == MaskFamily::gaussian ? "gaussian" : "exponential"; }

inline MaskFamily parse_mask_family(const std::string& s) {
  if (s == "gaussian") return MaskFamily::gaussian;
  if (s == "exponential") return MaskFamily::exponential;
  throw ConfigError("unknown mask family '" + s + "' (expected gaussian|exponential)");
}

inline void validate_mask_param(MaskFamily family, double param) {
  if (family == MaskFamily::gaussian && !(param > 0.0)) {
    throw ConfigError("gaussian decay needs sigma > 0, got " + std::to_string(param));
  }
  if (family == MaskFamily::exponential && !(param > 0.0 && param < 1.0)) {
    throw ConfigError("exponential decay needs 0 < gamma < 1, got " + std::to_string(param));
  }
}

// Log-domain decay for a distance under one family/parameter. For the
// gaussian family `dist_sq` is the squared distance; exponential uses the
// plain distance.
inline double log_decay(MaskFamily family, double param, double dist, double dist_sq) {
  return family == MaskFamily::gaussian ? -dist_sq / (2.0 * param * param) : dist * std::log(param);
}

/// Pairwise 1-D decay along one axis, log domain: entry (n, m) is
/// -(n-m)^2 / (2 sigma^2) for gaussian and |n-m| ln(gamma) for exponential.
template <typename T>
Tensor<T> build_axis_mask(std::size_t extent, MaskFamily family, double param) {
  if (extent == 0) throw DimensionError("build_axis_mask: extent must be >= 1");
  validate_mask_param(family, param);
  std::vector<T> values(extent * extent);
  for (std::size_t n = 0; n < extent; ++n) {
    for (std::size_t m = 0; m < extent; ++m) {
      const double d = std::abs(static_cast<double>(n) - static_cast<double>(m));
      values[n * extent + m] = static_cast<T>(log_decay(family, param, d, d * d));
    }
  }
  return Tensor<T>::from({extent, extent}, std::move(values));
}

/// Decay between all pairs of an H x W grid using Euclidean token distance;
/// [H*W, H*W] log domain. Reference form for full (non-axial) attention.
template <typename T>
Tensor<T> build_grid_mask(std::size_t height, std::size_t width, MaskFamily family, double param) {
  if (height == 0 || width == 0) throw DimensionError("build_grid_mask: extents must be >= 1");
  validate_mask_param(family, param);
  const std::size_t n = height * width;
  std::vector<T> values(n * n);
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t b = 0; b < n; ++b) {
      const double dy = static_cast<double>(a / width) - static_cast<double>(b / width);
      const double dx = static_cast<double>(a % width) - static_cast<double>(b % width);
      const double sq = dy * dy + dx * dx;
      values[a * n + b] = static_cast<T>(log_decay(family, param, std::sqrt(sq), sq));
    }
  }
  return Tensor<T>::from({n, n}, std::move(values));
}

/// Fixed per-head decay rates gamma_h = 1 - 2^-(3 + h).
inline std::vector<double> default_gammas(std::size_t heads) {
  std::vector<double> g(heads);
  for (std::size_t h = 0; h < heads; ++h) g[h] = 1.0 - std::pow(2.0, -(3.0 + static_cast<double>(h)));
  return g;
}

/// Row and column decay masks for one attention unit, stacked per head.
template <typename T>
struct DecayMask {
  Tensor<T> mask_h;  // [heads, H, H]
  Tensor<T> mask_w;  // [heads, W, W]
  MaskFamily family = MaskFamily::gaussian;
  std::vector<double> params;  // sigma or gamma per head
};

template <typename T>
Tensor<T> stack_heads(const std::vector<Tensor<T>>& per_head) {
  const Shape& s = per_head.front().shape();
  std::vector<T> values;
  values.reserve(per_head.size() * per_head.front().numel());
  for (const auto& t : per_head) values.insert(values.end(), t.data().begin(), t.data().end());
  Shape out{per_head.size()};
  out.insert(out.end(), s.begin(), s.end());
  return Tensor<T>::from(std::move(out), std::move(values));
}

template <typename T>
DecayMask<T> make_decay_mask(std::size_t height, std::size_t width, MaskFamily family, std::vector<double> params) {
  if (params.empty()) throw ConfigError("make_decay_mask: need at least one head parameter");
  std::vector<Tensor<T>> hs, ws;
  for (double p : params) {
    hs.push_back(build_axis_mask<T>(height, family, p));
    ws.push_back(build_axis_mask<T>(width, family, p));
  }
  return {stack_heads(hs), stack_heads(ws), family, std::move(params)};
}

template <typename T>
Tensor<T> make_grid_mask(std::size_t height, std::size_t width, MaskFamily family, const std::vector<double>& params) {
  std::vector<Tensor<T>> per_head;
  for (double p : params) per_head.push_back(build_grid_mask<T>(height, width, family, p));
  return stack_heads(per_head);
}

/// Differentiable gaussian decay: out[h, i] = -sq_dist[i] / (2 sigma_h^2)
/// for a learnable sigma [heads]. `sq_dist` has shape `dist_shape`.
template <typename T>
Tensor<T> gaussian_log_mask(const Tensor<T>& sigma, std::shared_ptr<const std::vector<T>> sq_dist,
                            const Shape& dist_shape) {
  if (sigma.rank() != 1) throw DimensionError("gaussian_log_mask: sigma must be [heads]");
  const std::size_t heads = sigma.numel(), n = sq_dist->size();
  std::vector<T> out(heads * n);
  auto sd = sigma.data();
  for (std::size_t h = 0; h < heads; ++h) {
    const T inv = T(1) / (T(2) * sd[h] * sd[h]);
    for (std::size_t i = 0; i < n; ++i) out[h * n + i] = -(*sq_dist)[i] * inv;
  }
  Shape shape{heads};
  shape.insert(shape.end(), dist_shape.begin(), dist_shape.end());
  auto sn = sigma.node_ptr();
  return make_result<T>("gaussian_log_mask", std::move(shape), std::move(out), {sigma}, [sn, sq_dist, n](Node<T>& o) {
    T* g = sn->grad_buffer();
    for (std::size_t h = 0; h < sn->data.size(); ++h) {
      const T s = sn->data[h];
      const T coeff = T(1) / (s * s * s);
      T acc = 0;
      for (std::size_t i = 0; i < n; ++i) acc += o.grad[h * n + i] * (*sq_dist)[i];
      g[h] += acc * coeff;
    }
  });
}

/// Squared distances per axis (n x n) and per grid (HW x HW), computed once
/// per extent and shared between units; masks built from a given sigma
/// snapshot are cached for graph-free inference and dropped whenever
/// sigma moves.
template <typename T>
class MaskCache {
 public:
  using Dist = std::shared_ptr<const std::vector<T>>;

  Dist axis_sq_dist(std::size_t n) {
    std::lock_guard lock(mu_);
    auto& slot = axis_[n];
    if (!slot) {
      auto v = std::make_shared<std::vector<T>>(n * n);
      for (std::size_t a = 0; a < n; ++a) {
        for (std::size_t b = 0; b < n; ++b) {
          const double d = static_cast<double>(a) - static_cast<double>(b);
          (*v)[a * n + b] = static_cast<T>(d * d);
        }
      }
      slot = std::move(v);
    }
    return slot;
  }

  Dist grid_sq_dist(std::size_t h, std::size_t w) {
    std::lock_guard lock(mu_);
    auto& slot = grid_[{h, w}];
    if (!slot) {
      const std::size_t n = h * w;
      auto v = std::make_shared<std::vector<T>>(n * n);
      for (std::size_t a = 0; a < n; ++a) {
        for (std::size_t b = 0; b < n; ++b) {
          const double dy = static_cast<double>(a / w) - static_cast<double>(b / w);
          const double dx = static_cast<double>(a % w) - static_cast<double>(b % w);
          (*v)[a * n + b] = static_cast<T>(dy * dy + dx * dx);
        }
      }
      slot = std::move(v);
    }
    return slot;
  }

  // key: (kind, h, w) where kind 0 = axis, 1 = grid
  using Key = std::tuple<int, std::size_t, std::size_t>;

  template <typename Build>
  Tensor<T> cached(const Key& key, const std::vector<T>& params, Build&& build) {
    std::lock_guard lock(mu_);
    auto it = masks_.find(key);
    if (it != masks_.end() && it->second.first == params) return it->second.second;
    Tensor<T> t = build();
    masks_[key] = {params, t};
    return t;
  }

  void invalidate() {
    std::lock_guard lock(mu_);
    masks_.clear();
  }

 private:
  std::recursive_mutex mu_;
  std::map<std::size_t, Dist> axis_;
  std::map<std::pair<std::size_t, std::size_t>, Dist> grid_;
  std::map<Key, std::pair<std::vector<T>, Tensor<T>>> masks_;
};

}  // namespace cfp
