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

#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "cfp/data/corpus.hpp"
#include "cfp/train/trainer.hpp"

namespace cfp {

struct AblationVariant {
  std::string name;
  std::function<void(CfpConfig&)> toggle;
};

/// Base plus one toggle per component; "no_fre" keeps the pyramid
/// connection on and must be rejected when the model is built.
inline std::vector<AblationVariant> component_variants() {
  return {
      {"base", [](CfpConfig&) {}},
      {"ga_to_mhsa", [](CfpConfig& c) { c.attention = AttentionVariant::mhsa; }},
      {"no_pyramid", [](CfpConfig& c) { c.use_pyramid_connection = false; }},
      {"natural_softmax", [](CfpConfig& c) { c.softmax_base = SoftmaxBase::natural; }},
      {"no_fre", [](CfpConfig& c) { c.use_fre = false; }},
  };
}

inline std::vector<AblationVariant> upsampling_variants() {
  return {
      {"bilinear", [](CfpConfig& c) { c.upsampling = Upsampling::bilinear; }},
      {"transpose_conv", [](CfpConfig& c) { c.upsampling = Upsampling::transpose_conv; }},
  };
}

struct AblationRow {
  std::string variant;
  std::string status;  // "ok" or "error"
  std::size_t params = 0;
  double best_val_dice = 0.0;
  double test_dice = 0.0;
  std::optional<double> test_hd;
  std::string message;
};

inline void write_ablation_csv(const std::filesystem::path& path, const std::vector<AblationRow>& rows) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << "variant,status,params,best_val_dice,test_dice,test_hd,message\n";
  for (const auto& r : rows) {
    std::string msg = r.message;
    for (auto& ch : msg) {
      if (ch == ',' || ch == '\n') ch = ';';
    }
    os << r.variant << ',' << r.status << ',';
    if (r.status == "ok") {
      os << r.params << ',' << format_fixed(r.best_val_dice) << ',' << format_fixed(r.test_dice) << ','
         << format_fixed(r.test_hd);
    } else {
      os << ",,,";
    }
    os << ',' << msg << '\n';
  }
}

/// Trains every variant from the same seed and data, evaluating the best
/// checkpoint of each on the test split. Failures are recorded per row and
/// the sweep continues.
template <typename T>
std::vector<AblationRow> run_ablation(const RunConfig& base, const std::vector<AblationVariant>& variants,
                                      const std::filesystem::path& out_dir, std::ostream* log = nullptr) {
  const auto train = data::load_split(base.manifest, "train", base.image_size);
  const auto val = data::load_split(base.manifest, "val", base.image_size);
  const auto test = data::load_split(base.manifest, "test", base.image_size);
  if (test.empty()) throw UsageError("ablation needs a non-empty test split");
  std::vector<AblationRow> rows;
  for (const auto& v : variants) {
    AblationRow row;
    row.variant = v.name;
    RunConfig cfg = base;
    v.toggle(cfg.model);
    if (log) *log << "== " << v.name << '\n' << std::flush;
    try {
      Trainer<T> trainer(cfg, train, val);
      const auto dir = out_dir / v.name;
      const auto summary = trainer.run(dir, log);
      auto params = trainer.model().parameters();
      io::load_checkpoint(dir / "best.cfpc", params);
      const auto report = evaluate_model(trainer.model(), test);
      row.status = "ok";
      row.params = summary.parameter_count;
      row.best_val_dice = summary.best_val_dice;
      row.test_dice = report.mean().dice;
      row.test_hd = report.mean().hd;
    } catch (const ConfigError& e) {
      row.status = "error";
      row.message = e.what();
    } catch (const NumericError& e) {
      row.status = "error";
      row.message = e.what();
    }
    if (log && row.status == "error") *log << "   error: " << row.message << '\n';
    rows.push_back(row);
    write_ablation_csv(out_dir / "ablation.csv", rows);
  }
  return rows;
}

}  // namespace cfp
