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

#include <array>
#include <string>

#include "cfp/attention/attention.hpp"
#include "cfp/core/error.hpp"

namespace cfp {

inline constexpr std::size_t kStages = 4;
using StageArray = std::array<std::size_t, kStages>;

enum class Upsampling { bilinear, transpose_conv };

inline const char* to_string(Upsampling u) { return u == Upsampling::bilinear ? "bilinear" : "transpose_conv"; }

inline Upsampling parse_upsampling(const std::string& s) {
  if (s == "bilinear") return Upsampling::bilinear;
  if (s == "transpose_conv") return Upsampling::transpose_conv;
  throw ConfigError("unknown upsampling '" + s + "' (expected bilinear|transpose_conv)");
}

/// Decoder description. Stage i (0-based) runs at pyramid level i, so
/// index 0 is the highest-resolution stage and index 3 the bottleneck.
struct CfpConfig {
  std::string preset = "tiny";
  StageArray stage_blocks{1, 1, 3, 1};
  StageArray heads{2, 4, 8, 16};
  std::size_t mlp_ratio = 3;
  double drop_path_rate = 0.15;
  std::size_t patch_size = 1;
  Upsampling upsampling = Upsampling::bilinear;
  bool use_fre = true;
  bool use_pyramid_connection = true;
  AttentionVariant attention = AttentionVariant::axial_gaussian;
  MaskFamily mask_family = MaskFamily::gaussian;
  SoftmaxBase softmax_base = SoftmaxBase::two;
  std::size_t num_classes = 4;
  StageArray widths{16, 32, 64, 128};
  std::size_t lepe_kernel = 3;
  double sigma_init = 2.0;  // 0 selects max(H, W) / 4 per stage

  static CfpConfig tiny() { return {}; }

  static CfpConfig small() {
    CfpConfig c;
    c.preset = "small";
    c.stage_blocks = {2, 2, 6, 2};
    c.heads = {4, 4, 8, 16};
    c.drop_path_rate = 0.20;
    return c;
  }

  static CfpConfig from_preset(const std::string& name) {
    if (name == "tiny") return tiny();
    if (name == "small") return small();
    throw ConfigError("unknown preset '" + name + "' (expected tiny|small)");
  }

  AttentionConfig attention_config(std::size_t stage) const {
    AttentionConfig a;
    a.embed_dim = widths[stage];
    a.num_heads = heads[stage];
    a.variant = attention;
    a.family = mask_family;
    a.base = softmax_base;
    a.lepe_kernel = lepe_kernel;
    a.sigma_init = sigma_init;
    return a;
  }

  void validate() const {
    if (use_pyramid_connection && !use_fre) {
      throw ConfigError(
          "pyramid connection requires feature re-encoding: raw encoder features cannot be fused into the "
          "attention K/V streams (the 'w/o FRE' configuration)");
    }
    if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
    if (patch_size == 0) throw ConfigError("patch_size must be >= 1");
    if (mlp_ratio == 0) throw ConfigError("mlp_ratio must be >= 1");
    if (drop_path_rate < 0.0 || drop_path_rate >= 1.0) throw ConfigError("drop_path_rate must lie in [0, 1)");
    for (std::size_t s = 0; s < kStages; ++s) {
      if (stage_blocks[s] == 0) throw ConfigError("every stage needs at least one block");
      attention_config(s).validate();
    }
  }
};

struct BackboneConfig {
  std::size_t in_channels = 1;
  std::size_t stem_channels = 16;
  StageArray channels{16, 32, 64, 128};
  StageArray blocks{1, 1, 2, 1};

  void validate() const {
    if (in_channels == 0 || stem_channels == 0) throw ConfigError("backbone channels must be positive");
    for (std::size_t s = 0; s < kStages; ++s) {
      if (channels[s] == 0 || blocks[s] == 0) throw ConfigError("backbone stages need channels and blocks");
    }
  }
};

}  // namespace cfp
