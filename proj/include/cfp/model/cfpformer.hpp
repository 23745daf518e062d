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

#include <cstdint>

#include "cfp/model/backbone.hpp"
#include "cfp/model/decoder.hpp"

namespace cfp {

/// Backbone + decoder. Parameter order (and thus checkpoint layout) is
/// backbone first, then decoder.
template <typename T>
class CfpFormer {
 public:
  CfpFormer(CfpConfig cfg, BackboneConfig backbone_cfg, std::size_t image_size, std::uint64_t seed)
      : rng_(Rng(seed).split(7)) {
    cfg.validate();
    Rng root(seed);
    backbone_ = Backbone<T>(backbone_cfg, root.split(1));
    decoder_ = CfpDecoder<T>(std::move(cfg), backbone_cfg.channels, image_size, root.split(2));
  }

  const CfpConfig& config() const { return decoder_.config(); }
  const BackboneConfig& backbone_config() const { return backbone_.config(); }
  Backbone<T>& backbone() { return backbone_; }
  CfpDecoder<T>& decoder() { return decoder_; }
  const CfpDecoder<T>& decoder() const { return decoder_; }

  /// image [B, 1, H, W] -> logits [B, num_classes, H, W]. Training mode
  /// enables drop path and advances the model's dropout stream.
  Tensor<T> forward(const Tensor<T>& image, bool training = false, AttentionStats* stats = nullptr) {
    auto pyramid = backbone_.forward(image);
    BlockContext ctx{training, &rng_, stats};
    return decoder_.forward(pyramid, image.dim(2), image.dim(3), ctx);
  }

  /// Graph-free forward that leaves the dropout stream untouched; safe to
  /// call concurrently on a frozen model.
  Tensor<T> predict(const Tensor<T>& image) const {
    NoGradGuard guard;
    auto pyramid = backbone_.forward(image);
    return decoder_.forward(pyramid, image.dim(2), image.dim(3), BlockContext{});
  }

  NamedParams<T> parameters() const {
    NamedParams<T> out;
    backbone_.collect(out, "backbone");
    decoder_.collect(out, "decoder");
    return out;
  }

  void after_step() { decoder_.after_step(); }

 private:
  Backbone<T> backbone_;
  CfpDecoder<T> decoder_;
  Rng rng_;
};

}  // namespace cfp
