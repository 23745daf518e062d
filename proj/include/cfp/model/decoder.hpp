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

#include <optional>
#include <string>
#include <vector>

#include "cfp/attention/attention.hpp"
#include "cfp/core/ops.hpp"
#include "cfp/model/backbone.hpp"
#include "cfp/model/config.hpp"
#include "cfp/nn/layers.hpp"

namespace cfp {

/// Non-overlapping P x P patchify + linear projection (a stride-P conv):
/// [B, C, H, W] -> tokens [B, H/P, W/P, D].
template <typename T>
struct PatchEmbed {
  nn::Conv2d<T> proj;
  std::size_t patch = 1;
  std::string label = "feature";

  PatchEmbed() = default;
  PatchEmbed(std::size_t in, std::size_t out, std::size_t patch_, std::string label_, Rng rng)
      : proj(in, out, patch_, patch_, 0, rng), patch(patch_), label(std::move(label_)) {}

  Tensor<T> operator()(const Tensor<T>& feat) const {
    if (feat.rank() != 4) throw DimensionError("patch_embed(" + label + "): expected [B,C,H,W]");
    if (feat.dim(2) % patch != 0 || feat.dim(3) % patch != 0) {
      throw DimensionError("patch_embed(" + label + "): patch size " + std::to_string(patch) +
                           " does not divide extents " + std::to_string(feat.dim(2)) + "x" +
                           std::to_string(feat.dim(3)));
    }
    return nn::to_channels_last(proj(feat));
  }

  std::size_t out_dim() const { return proj.weight.dim(0); }

  void collect(NamedParams<T>& out, const std::string& prefix) const { proj.collect(out, prefix); }
};

/// Re-encodes an encoder level onto the decoder token grid of `like`.
template <typename T>
Tensor<T> reencode(const Tensor<T>& f_enc, const PatchEmbed<T>& embed, const Shape& like) {
  auto tokens = embed(f_enc);
  if (tokens.shape() != like) {
    throw ConfigError("feature re-encoding of " + embed.label + " yields " + shape_str(tokens.shape()) +
                      " but the decoder K/V stream is " + shape_str(like) +
                      "; encoder features cannot be fused without a matching re-encoding (the 'w/o FRE' failure)");
  }
  return tokens;
}

/// kv (+) Patchembed(f_enc), realized as addition on the decoder grid.
template <typename T>
Tensor<T> fre_fuse(const Tensor<T>& kv, const Tensor<T>& f_enc, const PatchEmbed<T>& embed) {
  return add(kv, reencode(f_enc, embed, kv.shape()));
}

struct BlockContext {
  bool training = false;
  Rng* rng = nullptr;
  AttentionStats* stats = nullptr;
};

/// Pre-norm transformer block whose attention K/V may carry re-encoded
/// encoder features.
template <typename T>
class CfpBlock {
 public:
  CfpBlock() = default;
  CfpBlock(const CfpConfig& cfg, std::size_t stage, std::size_t grid_h, std::size_t grid_w,
           std::optional<std::size_t> encoder_channels, Rng rng)
      : drop_rate_(cfg.drop_path_rate) {
    const std::size_t d = cfg.widths[stage];
    norm1_ = nn::LayerNorm<T>(d);
    norm2_ = nn::LayerNorm<T>(d);
    attn_ = AttentionUnit<T>(cfg.attention_config(stage), grid_h, grid_w, rng.split(1));
    fc1_ = nn::Linear<T>(d, d * cfg.mlp_ratio, rng.split(2));
    fc2_ = nn::Linear<T>(d * cfg.mlp_ratio, d, rng.split(3));
    if (encoder_channels) {
      fre_ = PatchEmbed<T>(*encoder_channels, d, cfg.patch_size, "pyramid level " + std::to_string(stage),
                           rng.split(4));
    }
  }

  bool has_fre() const { return fre_.has_value(); }
  const PatchEmbed<T>& fre() const { return *fre_; }
  AttentionUnit<T>& attention() { return attn_; }
  const AttentionUnit<T>& attention() const { return attn_; }

  /// x: [B, H, W, D]; f_enc: matching pyramid level [B, C, P*H, P*W] when
  /// this block has a pyramid connection.
  Tensor<T> forward(const Tensor<T>& x, const Tensor<T>* f_enc, const BlockContext& ctx) const {
    std::optional<Tensor<T>> tokens;
    if (fre_ && f_enc) tokens = reencode(*f_enc, *fre_, x.shape());
    auto a = attn_.forward(norm1_(x), tokens ? &*tokens : nullptr, ctx.stats);
    auto y = add(x, branch(a, ctx));
    auto m = fc2_(gelu(fc1_(norm2_(y))));
    return add(y, branch(m, ctx));
  }

  void after_step() { attn_.after_step(); }

  void collect(NamedParams<T>& out, const std::string& prefix) const {
    norm1_.collect(out, nn::join(prefix, "norm1"));
    attn_.collect(out, nn::join(prefix, "attn"));
    norm2_.collect(out, nn::join(prefix, "norm2"));
    fc1_.collect(out, nn::join(prefix, "mlp.fc1"));
    fc2_.collect(out, nn::join(prefix, "mlp.fc2"));
    if (fre_) fre_->collect(out, nn::join(prefix, "fre"));
  }

 private:
  Tensor<T> branch(const Tensor<T>& x, const BlockContext& ctx) const {
    if (!ctx.training || drop_rate_ == 0.0) return x;
    if (!ctx.rng) throw UsageError("CfpBlock: training forward needs an rng for drop path");
    return drop_path(x, drop_rate_, true, *ctx.rng);
  }

  double drop_rate_ = 0.0;
  nn::LayerNorm<T> norm1_, norm2_;
  AttentionUnit<T> attn_;
  nn::Linear<T> fc1_, fc2_;
  std::optional<PatchEmbed<T>> fre_;
};

/// 2x spatial upsampling between decoder stages, changing width in -> out.
template <typename T>
class Upsampler {
 public:
  Upsampler() = default;
  Upsampler(Upsampling mode, std::size_t in, std::size_t out, Rng rng) : mode_(mode) {
    if (mode_ == Upsampling::bilinear) {
      proj_ = nn::Linear<T>(in, out, rng);
    } else {
      kernel_ = nn::uniform_param<T>({in, out, 2, 2}, in, rng);
      bias_ = nn::uniform_param<T>({out}, in, rng);
    }
  }

  /// tokens [B, H, W, in] -> [B, 2H, 2W, out]
  Tensor<T> operator()(const Tensor<T>& x) const {
    if (mode_ == Upsampling::bilinear) {
      // 1x1 projection commutes with bilinear interpolation; project first at low resolution.
      return nn::to_channels_last(bilinear_upsample_2x(nn::to_channels_first(proj_(x))));
    }
    return nn::to_channels_last(transpose_conv2d(nn::to_channels_first(x), kernel_, bias_, 2));
  }

  void collect(NamedParams<T>& out, const std::string& prefix) const {
    if (mode_ == Upsampling::bilinear) {
      proj_.collect(out, nn::join(prefix, "proj"));
    } else {
      out.emplace_back(nn::join(prefix, "kernel"), kernel_);
      out.emplace_back(nn::join(prefix, "bias"), bias_);
    }
  }

 private:
  Upsampling mode_ = Upsampling::bilinear;
  nn::Linear<T> proj_;
  Tensor<T> kernel_, bias_;
};

/// The decoder stack: bottleneck embedding, four stages of CFP blocks from
/// the lowest resolution upwards with 2x upsampling in between, and a
/// per-pixel segmentation head.
template <typename T>
class CfpDecoder {
 public:
  CfpDecoder() = default;

  /// `encoder_channels` are the pyramid level widths; `image_size` is the
  /// nominal input extent, used only to seed per-stage sigma.
  CfpDecoder(CfpConfig cfg, StageArray encoder_channels, std::size_t image_size, Rng rng) : cfg_(std::move(cfg)) {
    cfg_.validate();
    const std::size_t p = cfg_.patch_size;
    input_embed_ = PatchEmbed<T>(encoder_channels[kStages - 1], cfg_.widths[kStages - 1], p, "bottleneck",
                                 rng.split(1));
    for (std::size_t s = 0; s < kStages; ++s) {
      const std::size_t grid = std::max<std::size_t>(1, (image_size >> s) / p);
      std::optional<std::size_t> enc;
      if (cfg_.use_pyramid_connection) enc = encoder_channels[s];
      for (std::size_t b = 0; b < cfg_.stage_blocks[s]; ++b) {
        stages_[s].emplace_back(cfg_, s, grid, grid, enc, rng.split(1000 + 100 * s + b));
      }
      if (s > 0) ups_[s - 1] = Upsampler<T>(cfg_.upsampling, cfg_.widths[s], cfg_.widths[s - 1], rng.split(50 + s));
    }
    head_ = nn::Linear<T>(cfg_.widths[0], cfg_.num_classes, rng.split(2));
  }

  const CfpConfig& config() const { return cfg_; }
  std::vector<CfpBlock<T>>& stage(std::size_t s) { return stages_[s]; }
  const std::vector<CfpBlock<T>>& stage(std::size_t s) const { return stages_[s]; }

  /// Returns logits [B, num_classes, out_h, out_w].
  Tensor<T> forward(const FeaturePyramid<T>& pyramid, std::size_t out_h, std::size_t out_w,
                    const BlockContext& ctx) const {
    pyramid.validate();
    auto x = input_embed_(pyramid.levels[kStages - 1]);
    for (std::size_t s = kStages; s-- > 0;) {
      const Tensor<T>* f_enc = cfg_.use_pyramid_connection ? &pyramid.levels[s] : nullptr;
      for (const auto& block : stages_[s]) x = block.forward(x, f_enc, ctx);
      if (s > 0) x = ups_[s - 1](x);
    }
    auto logits = nn::to_channels_first(head_(x));
    if (logits.dim(2) != out_h || logits.dim(3) != out_w) logits = bilinear_resize(logits, out_h, out_w);
    return logits;
  }

  void after_step() {
    for (auto& stage : stages_) {
      for (auto& block : stage) block.after_step();
    }
  }

  void collect(NamedParams<T>& out, const std::string& prefix) const {
    input_embed_.collect(out, nn::join(prefix, "input_embed"));
    for (std::size_t s = kStages; s-- > 0;) {
      for (std::size_t b = 0; b < stages_[s].size(); ++b) {
        stages_[s][b].collect(out, prefix + ".stage" + std::to_string(s) + ".block" + std::to_string(b));
      }
      if (s > 0) ups_[s - 1].collect(out, prefix + ".up" + std::to_string(s));
    }
    head_.collect(out, nn::join(prefix, "head"));
  }

 private:
  CfpConfig cfg_;
  PatchEmbed<T> input_embed_;
  std::array<std::vector<CfpBlock<T>>, kStages> stages_;
  std::array<Upsampler<T>, kStages - 1> ups_;
  nn::Linear<T> head_;
};

}  // namespace cfp
