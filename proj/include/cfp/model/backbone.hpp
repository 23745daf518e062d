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

#include <string>
#include <vector>

#include "cfp/core/ops.hpp"
#include "cfp/model/config.hpp"
#include "cfp/nn/layers.hpp"

namespace cfp {

/// Encoder features, highest resolution first. Each level is [B, C, H, W]
/// and each successive level halves H and W exactly.
template <typename T>
struct FeaturePyramid {
  std::vector<Tensor<T>> levels;

  void validate() const {
    if (levels.size() != kStages) {
      throw DimensionError("feature pyramid needs " + std::to_string(kStages) + " levels, got " +
                           std::to_string(levels.size()));
    }
    for (std::size_t l = 0; l < levels.size(); ++l) {
      if (levels[l].rank() != 4) throw DimensionError("pyramid level " + std::to_string(l) + " is not [B,C,H,W]");
      if (l == 0) continue;
      const auto& prev = levels[l - 1].shape();
      const auto& cur = levels[l].shape();
      if (cur[0] != prev[0] || cur[2] * 2 != prev[2] || cur[3] * 2 != prev[3]) {
        throw DimensionError("pyramid level " + std::to_string(l) + " " + shape_str(cur) + " does not halve level " +
                             std::to_string(l - 1) + " " + shape_str(prev));
      }
    }
  }
};

// conv3x3 -> channel layer norm -> gelu
template <typename T>
struct ConvBlock {
  nn::Conv2d<T> conv;
  nn::LayerNorm<T> norm;

  ConvBlock() = default;
  ConvBlock(std::size_t in, std::size_t out, Rng rng) : conv(in, out, 3, 1, 1, rng), norm(out) {}

  Tensor<T> operator()(const Tensor<T>& x) const {
    auto y = nn::to_channels_last(conv(x));
    return nn::to_channels_first(gelu(norm(y)));
  }

  void collect(NamedParams<T>& out, const std::string& prefix) const {
    conv.collect(out, nn::join(prefix, "conv"));
    norm.collect(out, nn::join(prefix, "norm"));
  }
};

/// Small trainable CNN producing the 4-level pyramid at (H, H/2, H/4, H/8).
template <typename T>
class Backbone {
 public:
  Backbone() = default;
  Backbone(BackboneConfig cfg, Rng rng) : cfg_(cfg) {
    cfg_.validate();
    stem_ = nn::Conv2d<T>(cfg_.in_channels, cfg_.stem_channels, 3, 1, 1, rng.split(100));
    for (std::size_t s = 0; s < kStages; ++s) {
      if (s > 0) down_[s - 1] = nn::Conv2d<T>(cfg_.channels[s - 1], cfg_.channels[s], 3, 2, 1, rng.split(200 + s));
      std::size_t in = s == 0 ? cfg_.stem_channels : cfg_.channels[s];
      for (std::size_t b = 0; b < cfg_.blocks[s]; ++b) {
        stages_[s].emplace_back(in, cfg_.channels[s], rng.split(300 + 10 * s + b));
        in = cfg_.channels[s];
      }
    }
  }

  const BackboneConfig& config() const { return cfg_; }

  /// image: [B, C_in, H, W] with H and W divisible by 16.
  FeaturePyramid<T> forward(const Tensor<T>& image) const {
    if (image.rank() != 4 || image.dim(1) != cfg_.in_channels) {
      throw DimensionError("backbone: expected [B," + std::to_string(cfg_.in_channels) + ",H,W], got " +
                           shape_str(image.shape()));
    }
    if (image.dim(2) % 16 != 0 || image.dim(3) % 16 != 0) {
      throw DimensionError("backbone: input extents " + std::to_string(image.dim(2)) + "x" +
                           std::to_string(image.dim(3)) + " must be divisible by 16");
    }
    FeaturePyramid<T> pyramid;
    auto x = stem_(image);
    for (std::size_t s = 0; s < kStages; ++s) {
      if (s > 0) x = down_[s - 1](x);
      for (const auto& block : stages_[s]) x = block(x);
      pyramid.levels.push_back(x);
    }
    return pyramid;
  }

  void collect(NamedParams<T>& out, const std::string& prefix) const {
    stem_.collect(out, nn::join(prefix, "stem"));
    for (std::size_t s = 0; s < kStages; ++s) {
      if (s > 0) down_[s - 1].collect(out, prefix + ".down" + std::to_string(s));
      for (std::size_t b = 0; b < stages_[s].size(); ++b) {
        stages_[s][b].collect(out, prefix + ".stage" + std::to_string(s) + ".block" + std::to_string(b));
      }
    }
  }

 private:
  BackboneConfig cfg_;
  nn::Conv2d<T> stem_;
  std::array<nn::Conv2d<T>, kStages - 1> down_;
  std::array<std::vector<ConvBlock<T>>, kStages> stages_;
};

}  // namespace cfp
