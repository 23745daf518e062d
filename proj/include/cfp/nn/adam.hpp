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
#include <cstdint>
#include <vector>

#include "cfp/core/error.hpp"
#include "cfp/core/tensor.hpp"

namespace cfp::nn {

struct AdamOptions {
  double lr = 1e-4;
  double weight_decay = 1e-4;  // decoupled
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct AdamState {
  AdamOptions options;
  std::uint64_t step = 0;
  std::vector<std::vector<T>> first_moment;
  std::vector<std::vector<T>> second_moment;

  AdamState() = default;
  AdamState(const NamedParams<T>& params, AdamOptions opts) : options(opts) {
    for (const auto& [name, p] : params) {
      first_moment.emplace_back(p.numel(), T(0));
      second_moment.emplace_back(p.numel(), T(0));
    }
  }
};

/// One Adam update with decoupled weight decay. Every parameter must carry a
/// gradient buffer (possibly all zeros).
template <typename T>
void adam_step(NamedParams<T>& params, AdamState<T>& state) {
  if (params.size() != state.first_moment.size()) {
    throw UsageError("adam_step: optimizer state was built for a different parameter list");
  }
  for (const auto& [name, p] : params) {
    if (!p.has_grad()) throw UsageError("adam_step: parameter '" + name + "' has no gradient");
  }
  const auto& o = state.options;
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bias1 = 1.0 - std::pow(o.beta1, t);
  const double bias2 = 1.0 - std::pow(o.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i].second;
    auto data = p.mutable_data();
    auto grad = p.grad();
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    if (m.size() != data.size()) throw UsageError("adam_step: moment shape mismatch for '" + params[i].first + "'");
    for (std::size_t j = 0; j < data.size(); ++j) {
      const double g = grad[j];
      m[j] = static_cast<T>(o.beta1 * m[j] + (1.0 - o.beta1) * g);
      v[j] = static_cast<T>(o.beta2 * v[j] + (1.0 - o.beta2) * g * g);
      const double m_hat = m[j] / bias1;
      const double v_hat = v[j] / bias2;
      double w = data[j];
      w -= o.lr * o.weight_decay * w;
      w -= o.lr * m_hat / (std::sqrt(v_hat) + o.eps);
      data[j] = static_cast<T>(w);
    }
  }
}

}  // namespace cfp::nn
