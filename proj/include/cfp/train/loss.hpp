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

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "cfp/core/ops.hpp"

namespace cfp {

namespace detail {

// Per-pixel class probabilities of logits [B, C, H, W], same layout.
template <typename T>
std::vector<T> channel_softmax(const Tensor<T>& logits) {
  const std::size_t b = logits.dim(0), c = logits.dim(1), hw = logits.dim(2) * logits.dim(3);
  const auto z = logits.data();
  std::vector<T> p(z.size());
  for (std::size_t n = 0; n < b; ++n) {
    for (std::size_t i = 0; i < hw; ++i) {
      T mx = z[n * c * hw + i];
      for (std::size_t k = 1; k < c; ++k) mx = std::max(mx, z[(n * c + k) * hw + i]);
      T total = 0;
      for (std::size_t k = 0; k < c; ++k) {
        const std::size_t at = (n * c + k) * hw + i;
        p[at] = std::exp(z[at] - mx);
        total += p[at];
      }
      for (std::size_t k = 0; k < c; ++k) p[(n * c + k) * hw + i] /= total;
    }
  }
  return p;
}

template <typename T>
void check_labels(const Tensor<T>& logits, const std::vector<std::uint8_t>& labels, const char* op) {
  if (logits.rank() != 4) throw DimensionError(std::string(op) + ": logits must be [B,C,H,W]");
  if (labels.size() != logits.dim(0) * logits.dim(2) * logits.dim(3)) {
    throw DimensionError(std::string(op) + ": expected " + std::to_string(logits.dim(0) * logits.dim(2) * logits.dim(3)) +
                         " labels, got " + std::to_string(labels.size()));
  }
  for (auto l : labels) {
    if (l >= logits.dim(1)) throw DimensionError(std::string(op) + ": label " + std::to_string(l) + " out of range");
  }
}

}  // namespace detail

/// Mean per-pixel cross-entropy; labels are [B, H, W] class ids.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<std::uint8_t>& labels) {
  detail::check_labels(logits, labels, "cross_entropy");
  const std::size_t b = logits.dim(0), c = logits.dim(1), hw = logits.dim(2) * logits.dim(3);
  auto p = detail::channel_softmax(logits);
  double acc = 0;
  for (std::size_t n = 0; n < b; ++n) {
    for (std::size_t i = 0; i < hw; ++i) {
      const T pt = p[(n * c + labels[n * hw + i]) * hw + i];
      acc -= std::log(std::max(pt, std::numeric_limits<T>::min()));
    }
  }
  const T inv = T(1) / static_cast<T>(b * hw);
  auto ln = logits.node_ptr();
  return make_result<T>("cross_entropy", {1}, {static_cast<T>(acc) * inv}, {logits},
                        [ln, p = std::move(p), labels, b, c, hw, inv](Node<T>& o) {
                          T* g = ln->grad_buffer();
                          const T go = o.grad[0] * inv;
                          for (std::size_t n = 0; n < b; ++n) {
                            for (std::size_t k = 0; k < c; ++k) {
                              for (std::size_t i = 0; i < hw; ++i) {
                                const std::size_t at = (n * c + k) * hw + i;
                                g[at] += go * (p[at] - (labels[n * hw + i] == k ? T(1) : T(0)));
                              }
                            }
                          }
                        });
}

inline constexpr double kSoftDiceSmooth = 1e-5;

/// 1 - mean over classes of soft Dice on softmax probabilities, with sums
/// taken over the whole batch.
template <typename T>
Tensor<T> soft_dice_loss(const Tensor<T>& logits, const std::vector<std::uint8_t>& labels) {
  detail::check_labels(logits, labels, "soft_dice_loss");
  const std::size_t b = logits.dim(0), c = logits.dim(1), hw = logits.dim(2) * logits.dim(3);
  auto p = detail::channel_softmax(logits);
  std::vector<double> inter(c, 0.0), denom(c, 0.0);
  for (std::size_t n = 0; n < b; ++n) {
    for (std::size_t k = 0; k < c; ++k) {
      for (std::size_t i = 0; i < hw; ++i) {
        const double pv = p[(n * c + k) * hw + i];
        const bool y = labels[n * hw + i] == k;
        inter[k] += y ? pv : 0.0;
        denom[k] += pv + (y ? 1.0 : 0.0);
      }
    }
  }
  double dice_sum = 0;
  for (std::size_t k = 0; k < c; ++k) dice_sum += (2.0 * inter[k] + kSoftDiceSmooth) / (denom[k] + kSoftDiceSmooth);
  const T value = static_cast<T>(1.0 - dice_sum / static_cast<double>(c));
  auto ln = logits.node_ptr();
  return make_result<T>(
      "soft_dice_loss", {1}, {value}, {logits},
      [ln, p = std::move(p), labels, inter, denom, b, c, hw](Node<T>& o) {
        T* g = ln->grad_buffer();
        // dL/dp_k = -(1/C) * (2 y (S + e) - (2 I + e)) / (S + e)^2
        std::vector<double> coef_y(c), coef_0(c);
        for (std::size_t k = 0; k < c; ++k) {
          const double s = denom[k] + kSoftDiceSmooth;
          coef_y[k] = -2.0 / (static_cast<double>(c) * s);
          coef_0[k] = (2.0 * inter[k] + kSoftDiceSmooth) / (static_cast<double>(c) * s * s);
        }
        const double go = o.grad[0];
        std::vector<double> gp(c);
        for (std::size_t n = 0; n < b; ++n) {
          for (std::size_t i = 0; i < hw; ++i) {
            double dot = 0;
            for (std::size_t k = 0; k < c; ++k) {
              const bool y = labels[n * hw + i] == k;
              gp[k] = coef_0[k] + (y ? coef_y[k] : 0.0);
              dot += gp[k] * p[(n * c + k) * hw + i];
            }
            for (std::size_t k = 0; k < c; ++k) {
              const std::size_t at = (n * c + k) * hw + i;
              g[at] += static_cast<T>(go * p[at] * (gp[k] - dot));
            }
          }
        }
      });
}

template <typename T>
using LossFn = std::function<Tensor<T>(const Tensor<T>& logits, const std::vector<std::uint8_t>& labels)>;

inline const std::vector<std::string>& loss_names() {
  static const std::vector<std::string> names{"dice_ce", "ce", "dice"};
  return names;
}

/// Named training objectives. "dice_ce" is cross-entropy plus soft-Dice loss.
template <typename T>
LossFn<T> make_loss(const std::string& name) {
  if (name == "dice_ce") {
    return [](const Tensor<T>& z, const std::vector<std::uint8_t>& y) {
      return add(cross_entropy(z, y), soft_dice_loss(z, y));
    };
  }
  if (name == "ce") return [](const Tensor<T>& z, const std::vector<std::uint8_t>& y) { return cross_entropy(z, y); };
  if (name == "dice") return [](const Tensor<T>& z, const std::vector<std::uint8_t>& y) { return soft_dice_loss(z, y); };
  throw ConfigError("unknown loss '" + name + "' (expected dice_ce|ce|dice)");
}

}  // namespace cfp
