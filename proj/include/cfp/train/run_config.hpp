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
#include <filesystem>
#include <fstream>
#include <set>
#include <string>

#include <nlohmann/json.hpp>

#include "cfp/model/config.hpp"
#include "cfp/nn/adam.hpp"
#include "cfp/train/loss.hpp"

namespace cfp {

using json = nlohmann::ordered_json;

/// Everything a training run needs. JSON keys mirror the field names.
struct RunConfig {
  CfpConfig model;
  BackboneConfig backbone;
  nn::AdamOptions optimizer;
  std::string loss = "dice_ce";
  std::size_t epochs = 30;
  std::size_t batch_size = 8;
  std::uint64_t seed = 7;
  std::size_t image_size = 64;
  bool augment = true;
  std::string manifest;
  std::string output_dir = "out";

  void validate() const {
    model.validate();
    backbone.validate();
    make_loss<float>(loss);
    if (epochs == 0) throw ConfigError("epochs must be >= 1");
    if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
    if (image_size == 0 || image_size % 16 != 0) throw ConfigError("image_size must be a positive multiple of 16");
    if (optimizer.lr <= 0.0) throw ConfigError("optimizer.lr must be > 0");
    if (optimizer.weight_decay < 0.0) throw ConfigError("optimizer.weight_decay must be >= 0");
    if (!(optimizer.beta1 >= 0.0 && optimizer.beta1 < 1.0 && optimizer.beta2 >= 0.0 && optimizer.beta2 < 1.0)) {
      throw ConfigError("optimizer betas must lie in [0, 1)");
    }
    if (optimizer.eps <= 0.0) throw ConfigError("optimizer.eps must be > 0");
  }
};

namespace detail {

inline void reject_unknown(const json& obj, const std::set<std::string>& allowed, const std::string& where) {
  if (!obj.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [key, value] : obj.items()) {
    if (!allowed.count(key)) throw ConfigError("unknown key '" + (where.empty() ? key : where + "." + key) + "'");
  }
}

template <typename V>
void read_into(const json& obj, const char* key, V& out, const std::string& where) {
  if (!obj.contains(key)) return;
  try {
    out = obj.at(key).get<V>();
  } catch (const json::exception&) {
    throw ConfigError("config key '" + where + key + "' has the wrong type");
  }
}

inline json stage_json(const StageArray& a) { return json::array({a[0], a[1], a[2], a[3]}); }

}  // namespace detail

inline json to_json(const CfpConfig& c) {
  return json{{"preset", c.preset},
              {"stage_blocks", detail::stage_json(c.stage_blocks)},
              {"heads", detail::stage_json(c.heads)},
              {"widths", detail::stage_json(c.widths)},
              {"mlp_ratio", c.mlp_ratio},
              {"drop_path_rate", c.drop_path_rate},
              {"patch_size", c.patch_size},
              {"upsampling", to_string(c.upsampling)},
              {"use_fre", c.use_fre},
              {"use_pyramid_connection", c.use_pyramid_connection},
              {"attention", to_string(c.attention)},
              {"mask_family", to_string(c.mask_family)},
              {"softmax_base", to_string(c.softmax_base)},
              {"num_classes", c.num_classes},
              {"lepe_kernel", c.lepe_kernel},
              {"sigma_init", c.sigma_init}};
}

inline json to_json(const RunConfig& r) {
  return json{{"model", to_json(r.model)},
              {"backbone",
               {{"in_channels", r.backbone.in_channels},
                {"stem_channels", r.backbone.stem_channels},
                {"channels", detail::stage_json(r.backbone.channels)},
                {"blocks", detail::stage_json(r.backbone.blocks)}}},
              {"optimizer",
               {{"lr", r.optimizer.lr},
                {"weight_decay", r.optimizer.weight_decay},
                {"beta1", r.optimizer.beta1},
                {"beta2", r.optimizer.beta2},
                {"eps", r.optimizer.eps}}},
              {"loss", r.loss},
              {"epochs", r.epochs},
              {"batch_size", r.batch_size},
              {"seed", r.seed},
              {"image_size", r.image_size},
              {"augment", r.augment},
              {"data", {{"manifest", r.manifest}}},
              {"output_dir", r.output_dir}};
}

/// Model section; `preset` (if present) selects the starting point and the
/// remaining keys override it.
inline CfpConfig model_from_json(const json& j) {
  detail::reject_unknown(j,
                         {"preset", "stage_blocks", "heads", "widths", "mlp_ratio", "drop_path_rate", "patch_size",
                          "upsampling", "use_fre", "use_pyramid_connection", "attention", "mask_family",
                          "softmax_base", "num_classes", "lepe_kernel", "sigma_init"},
                         "model");
  std::string preset = "tiny";
  detail::read_into(j, "preset", preset, "model.");
  CfpConfig c = CfpConfig::from_preset(preset);
  const std::string w = "model.";
  detail::read_into(j, "stage_blocks", c.stage_blocks, w);
  detail::read_into(j, "heads", c.heads, w);
  detail::read_into(j, "widths", c.widths, w);
  detail::read_into(j, "mlp_ratio", c.mlp_ratio, w);
  detail::read_into(j, "drop_path_rate", c.drop_path_rate, w);
  detail::read_into(j, "patch_size", c.patch_size, w);
  detail::read_into(j, "use_fre", c.use_fre, w);
  detail::read_into(j, "use_pyramid_connection", c.use_pyramid_connection, w);
  detail::read_into(j, "num_classes", c.num_classes, w);
  detail::read_into(j, "lepe_kernel", c.lepe_kernel, w);
  detail::read_into(j, "sigma_init", c.sigma_init, w);
  std::string s;
  if (j.contains("upsampling")) detail::read_into(j, "upsampling", s, w), c.upsampling = parse_upsampling(s);
  if (j.contains("attention")) detail::read_into(j, "attention", s, w), c.attention = parse_attention_variant(s);
  if (j.contains("mask_family")) detail::read_into(j, "mask_family", s, w), c.mask_family = parse_mask_family(s);
  if (j.contains("softmax_base")) detail::read_into(j, "softmax_base", s, w), c.softmax_base = parse_softmax_base(s);
  return c;
}

inline RunConfig run_config_from_json(const json& j) {
  detail::reject_unknown(j,
                         {"model", "backbone", "optimizer", "loss", "epochs", "batch_size", "seed", "image_size",
                          "augment", "data", "output_dir"},
                         "");
  RunConfig r;
  if (j.contains("model")) r.model = model_from_json(j.at("model"));
  if (j.contains("backbone")) {
    const auto& b = j.at("backbone");
    detail::reject_unknown(b, {"in_channels", "stem_channels", "channels", "blocks"}, "backbone");
    detail::read_into(b, "in_channels", r.backbone.in_channels, "backbone.");
    detail::read_into(b, "stem_channels", r.backbone.stem_channels, "backbone.");
    detail::read_into(b, "channels", r.backbone.channels, "backbone.");
    detail::read_into(b, "blocks", r.backbone.blocks, "backbone.");
  }
  if (j.contains("optimizer")) {
    const auto& o = j.at("optimizer");
    detail::reject_unknown(o, {"lr", "weight_decay", "beta1", "beta2", "eps"}, "optimizer");
    detail::read_into(o, "lr", r.optimizer.lr, "optimizer.");
    detail::read_into(o, "weight_decay", r.optimizer.weight_decay, "optimizer.");
    detail::read_into(o, "beta1", r.optimizer.beta1, "optimizer.");
    detail::read_into(o, "beta2", r.optimizer.beta2, "optimizer.");
    detail::read_into(o, "eps", r.optimizer.eps, "optimizer.");
  }
  if (j.contains("data")) {
    const auto& d = j.at("data");
    detail::reject_unknown(d, {"manifest"}, "data");
    detail::read_into(d, "manifest", r.manifest, "data.");
  }
  detail::read_into(j, "loss", r.loss, "");
  detail::read_into(j, "epochs", r.epochs, "");
  detail::read_into(j, "batch_size", r.batch_size, "");
  detail::read_into(j, "seed", r.seed, "");
  detail::read_into(j, "image_size", r.image_size, "");
  detail::read_into(j, "augment", r.augment, "");
  detail::read_into(j, "output_dir", r.output_dir, "");
  r.validate();
  return r;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(is);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": invalid JSON: " + e.what());
  }
  return run_config_from_json(j);
}

inline void save_run_config(const std::filesystem::path& path, const RunConfig& r) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << to_json(r).dump(2) << '\n';
}

}  // namespace cfp
