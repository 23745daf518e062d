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
#include <string>

#include "cfp/core/ops.hpp"
#include "cfp/core/rng.hpp"
#include "cfp/core/tensor.hpp"

namespace cfp::nn {

// weights and biases ~ U(-sqrt(1/fan_in), +sqrt(1/fan_in))
template <typename T>
Tensor<T> uniform_param(Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
  std::vector<T> values(numel(shape));
  for (auto& v : values) v = static_cast<T>(rng.uniform(-bound, bound));
  return Tensor<T>::from(std::move(shape), std::move(values), true);
}

template <typename T>
Tensor<T> zeros_param(Shape shape) {
  return Tensor<T>::zeros(std::move(shape), true);
}

template <typename T>
Tensor<T> ones_param(Shape shape) {
  return Tensor<T>::full(std::move(shape), T(1), true);
}

inline std::string join(const std::string& prefix, const char* name) {
  return prefix.empty() ? std::string(name) : prefix + "." + name;
}

template <typename T>
struct Linear {
  Tensor<T> weight;  // [out, in]
  Tensor<T> bias;    // [out]

  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng rng)
      : weight(uniform_param<T>({out, in}, in, rng)), bias(uniform_param<T>({out}, in, rng)) {}

  Tensor<T> operator()(const Tensor<T>& x) const { return linear(x, weight, bias); }

  void collect(NamedParams<T>& out, const std::string& prefix) const {
    out.emplace_back(join(prefix, "weight"), weight);
    out.emplace_back(join(prefix, "bias"), bias);
  }
};

template <typename T>
struct LayerNorm {
  Tensor<T> gain;
  Tensor<T> bias;

  LayerNorm() = default;
  explicit LayerNorm(std::size_t width) : gain(ones_param<T>({width})), bias(zeros_param<T>({width})) {}

  Tensor<T> operator()(const Tensor<T>& x) const { return layer_norm(x, gain, bias); }

  void collect(NamedParams<T>& out, const std::string& prefix) const {
    out.emplace_back(join(prefix, "gain"), gain);
    out.emplace_back(join(prefix, "bias"), bias);
  }
};

template <typename T>
struct Conv2d {
  Tensor<T> weight;  // [out, in, k, k]
  Tensor<T> bias;    // [out]
  std::size_t stride = 1;
  std::size_t padding = 0;

  Conv2d() = default;
  Conv2d(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride_, std::size_t padding_, Rng rng)
      : weight(uniform_param<T>({out, in, kernel, kernel}, in * kernel * kernel, rng)),
        bias(uniform_param<T>({out}, in * kernel * kernel, rng)),
        stride(stride_),
        padding(padding_) {}

  Tensor<T> operator()(const Tensor<T>& x) const { return conv2d(x, weight, bias, stride, padding); }

  void collect(NamedParams<T>& out, const std::string& prefix) const {
    out.emplace_back(join(prefix, "weight"), weight);
    out.emplace_back(join(prefix, "bias"), bias);
  }
};

// NCHW <-> NHWC
template <typename T>
Tensor<T> to_channels_last(const Tensor<T>& x) {
  return permute(x, {0, 2, 3, 1});
}

template <typename T>
Tensor<T> to_channels_first(const Tensor<T>& x) {
  return permute(x, {0, 3, 1, 2});
}

}  // namespace cfp::nn
