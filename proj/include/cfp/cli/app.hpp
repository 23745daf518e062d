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

// `cfpformer` command line. Exit codes: 0 success, 1 a check reported
// failures, 2 usage or configuration error, 3 I/O error, 4 numeric failure.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cfp/attention/bench.hpp"
#include "cfp/data/corpus.hpp"
#include "cfp/train/ablation.hpp"
#include "cfp/train/trainer.hpp"

namespace cfp::cli {

namespace fs = std::filesystem;

enum ExitCode : int { kOk = 0, kCheckFailed = 1, kUsage = 2, kIo = 3, kNumeric = 4 };

using Model = CfpFormer<float>;

struct GenDataArgs {
  std::size_t count = 260, size = 64;
  std::uint64_t seed = 7;
  std::string out;
  std::optional<std::size_t> val, test;
};

inline int gen_data(const GenDataArgs& a, std::ostream& out) {
  data::SceneRanges ranges;
  ranges.image_size = a.size;
  auto split = data::default_split(a.count);
  if (a.val || a.test) {
    split.val = a.val.value_or(split.val);
    split.test = a.test.value_or(split.test);
    if (split.val + split.test > a.count) throw UsageError("--val + --test exceeds --count");
    split.train = a.count - split.val - split.test;
  }
  const auto samples = data::generate(ranges, a.count, a.seed);
  const auto manifest = data::write_corpus(a.out, samples, split);
  out << manifest.string() << '\n';
  return kOk;
}

inline int audit_data(const std::string& manifest, std::ostream& out) {
  const auto entries = data::read_manifest(manifest);
  const auto base = fs::path(manifest).parent_path();
  std::size_t bad = 0;
  for (const auto& e : entries) {
    const auto mask = data::load_mask(base / e.mask_path, data::kNumClasses);
    for (const auto& issue : data::audit_scene(mask)) {
      out << e.mask_path << ": " << issue << '\n';
      ++bad;
    }
  }
  out << "audited " << entries.size() << " masks, " << bad << " violations\n";
  return bad == 0 ? kOk : kCheckFailed;
}

struct TrainArgs {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out, manifest;
  std::optional<std::size_t> epochs;
};

inline RunConfig resolve_config(const std::string& path, const std::optional<std::uint64_t>& seed,
                                const std::optional<std::string>& out, const std::optional<std::string>& manifest,
                                const std::optional<std::size_t>& epochs) {
  RunConfig cfg = load_run_config(path);
  if (seed) cfg.seed = *seed;
  if (out) cfg.output_dir = *out;
  if (manifest) cfg.manifest = *manifest;
  if (epochs) cfg.epochs = *epochs;
  cfg.validate();
  if (cfg.manifest.empty()) throw ConfigError("data.manifest is not set");
  if (!fs::is_regular_file(cfg.manifest)) throw IoError("manifest not found: " + cfg.manifest);
  return cfg;
}

inline int train(const TrainArgs& a, std::ostream& out) {
  const RunConfig cfg = resolve_config(a.config, a.seed, a.out, a.manifest, a.epochs);
  auto train_set = data::load_split(cfg.manifest, "train", cfg.image_size);
  auto val_set = data::load_split(cfg.manifest, "val", cfg.image_size);
  Trainer<float> trainer(cfg, std::move(train_set), std::move(val_set));
  out << "parameters " << parameter_count(trainer.model().parameters()) << '\n';
  const auto summary = trainer.run(cfg.output_dir, &out);
  out << "best epoch " << summary.best_epoch << " val_dice " << format_fixed(summary.best_val_dice) << '\n';
  out << "artifacts in " << cfg.output_dir << '\n';
  return kOk;
}

struct EvalArgs {
  std::string checkpoint, manifest, split = "test";
  std::string config, report;
  bool oracle = false;
};

inline int eval(const EvalArgs& a, std::ostream& out) {
  if (a.split != "train" && a.split != "val" && a.split != "test") throw UsageError("--split must be train|val|test");
  if (!fs::is_regular_file(a.manifest)) throw IoError("manifest not found: " + a.manifest);
  std::size_t image_size = 0;
  std::optional<RunConfig> cfg;
  if (!a.oracle) {
    if (a.checkpoint.empty()) throw UsageError("--checkpoint is required unless --oracle is given");
    if (!fs::is_regular_file(a.checkpoint)) throw IoError("CFPC validation: checkpoint not found: " + a.checkpoint);
    const fs::path cfg_path = a.config.empty() ? fs::path(a.checkpoint).parent_path() / "config.json" : fs::path(a.config);
    cfg = load_run_config(cfg_path);
    image_size = cfg->image_size;
  }
  std::vector<data::SegSample> samples;
  if (cfg) {
    samples = data::load_split(a.manifest, a.split, image_size);
  } else {
    const auto base = fs::path(a.manifest).parent_path();
    for (const auto& e : data::read_manifest(a.manifest)) {
      if (e.split == a.split) samples.push_back(data::load_entry(base, e));
    }
  }
  if (samples.empty()) throw UsageError("split '" + a.split + "' is empty");
  MetricReport report;
  if (a.oracle) {
    std::vector<LabelMask> gts;
    for (const auto& s : samples) gts.push_back(s.mask);
    report = evaluate_masks(gts, gts);
  } else {
    Model model(cfg->model, cfg->backbone, cfg->image_size, cfg->seed);
    auto params = model.parameters();
    io::load_checkpoint(a.checkpoint, params);
    report = evaluate_model(model, samples);
  }
  std::ostringstream csv;
  report.write_csv(csv);
  out << csv.str();
  if (!a.report.empty()) {
    std::ofstream os(a.report, std::ios::binary);
    if (!os) throw IoError("cannot open " + a.report + " for writing");
    os << csv.str();
  }
  return kOk;
}

inline std::vector<std::pair<std::size_t, std::size_t>> parse_sizes(const std::string& text) {
  std::vector<std::pair<std::size_t, std::size_t>> sizes;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto x = item.find('x');
    try {
      if (x == std::string::npos) throw std::invalid_argument(item);
      std::size_t used = 0;
      const auto h = std::stoul(item.substr(0, x), &used);
      if (used != x) throw std::invalid_argument(item);
      const auto w = std::stoul(item.substr(x + 1), &used);
      if (used != item.size() - x - 1 || h == 0 || w == 0) throw std::invalid_argument(item);
      sizes.emplace_back(h, w);
    } catch (const std::logic_error&) {
      throw UsageError("bad size '" + item + "' (expected HxW, e.g. 8x16)");
    }
  }
  if (sizes.empty()) throw UsageError("--sizes is empty");
  return sizes;
}

struct BenchArgs {
  std::string sizes = "1x1,8x8,8x16,16x16,32x32";
  std::string variants = "axial_gaussian,full_gaussian";
  std::size_t repeats = 3, dim = 16, heads = 1;
  std::uint64_t seed = 7;
  std::string out;
};

inline int bench(const BenchArgs& a, std::ostream& out) {
  std::vector<AttentionVariant> variants;
  std::stringstream ss(a.variants);
  std::string item;
  while (std::getline(ss, item, ',')) variants.push_back(parse_attention_variant(item));
  if (variants.empty()) throw UsageError("--variants is empty");
  const auto rows = bench_attention<float>(parse_sizes(a.sizes), variants, a.repeats, a.dim, a.heads, a.seed);
  std::ostringstream csv;
  write_bench_csv(csv, rows);
  out << csv.str();
  if (!a.out.empty()) {
    std::ofstream os(a.out, std::ios::binary);
    if (!os) throw IoError("cannot open " + a.out + " for writing");
    os << csv.str();
  }
  for (const auto& r : rows) {
    if (r.counted != r.expected) {
      out << "count mismatch for " << to_string(r.variant) << ' ' << r.h << 'x' << r.w << '\n';
      return kCheckFailed;
    }
  }
  return kOk;
}

struct AblateArgs {
  std::string config, out, axis = "components";
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs;
  std::optional<std::string> manifest;
};

inline int ablate(const AblateArgs& a, std::ostream& out) {
  const RunConfig cfg = resolve_config(a.config, a.seed, std::nullopt, a.manifest, a.epochs);
  std::vector<AblationVariant> variants;
  if (a.axis == "components") {
    variants = component_variants();
  } else if (a.axis == "upsampling") {
    variants = upsampling_variants();
  } else {
    throw UsageError("--axis must be components|upsampling");
  }
  std::error_code ec;
  fs::create_directories(a.out, ec);
  if (ec) throw IoError("cannot create " + a.out + ": " + ec.message());
  run_ablation<float>(cfg, variants, a.out, &out);
  std::ifstream csv(fs::path(a.out) / "ablation.csv");
  out << csv.rdbuf();
  return kOk;
}

struct ExportArgs {
  std::size_t height = 16, width = 16;
  std::string family = "gaussian";
  double param = 4.0;
  std::string out;
};

inline io::GrayImage heatmap(const std::vector<double>& linear, std::size_t n) {
  io::GrayImage img{n, n, {}};
  for (double v : linear) img.pixels.push_back(data::quantize(v));
  return img;
}

inline int export_masks(const ExportArgs& a, std::ostream& out) {
  const auto family = parse_mask_family(a.family);
  validate_mask_param(family, a.param);
  if (a.height == 0 || a.width == 0) throw UsageError("--height and --width must be >= 1");
  std::error_code ec;
  fs::create_directories(a.out, ec);
  if (ec) throw IoError("cannot create " + a.out + ": " + ec.message());
  for (const auto& [name, extent] : {std::pair<std::string, std::size_t>{"mask_h", a.height}, {"mask_w", a.width}}) {
    const auto log_mask = build_axis_mask<double>(extent, family, a.param);
    std::vector<double> linear(log_mask.numel());
    for (std::size_t i = 0; i < linear.size(); ++i) linear[i] = std::exp(log_mask.at(i));
    const fs::path dir(a.out);
    io::save_cfpt(dir / (name + "_log.cfpt"), io::to_raw(log_mask));
    io::save_cfpt(dir / (name + "_linear.cfpt"), io::to_raw<double>({extent, extent}, linear));
    io::write_pgm(dir / (name + ".pgm"), heatmap(linear, extent));
    out << (dir / (name + "_log.cfpt")).string() << '\n';
  }
  return kOk;
}

/// Parses argv and runs one subcommand, mapping errors to exit codes.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"CFPFormer segmentation toolkit"};
  app.require_subcommand(1);

  GenDataArgs gen;
  auto* c_gen = app.add_subcommand("gen-data", "generate a synthetic segmentation corpus");
  c_gen->add_option("--count", gen.count, "number of samples")->check(CLI::PositiveNumber);
  c_gen->add_option("--size", gen.size, "image extent in pixels")->check(CLI::Range(8, 4096));
  c_gen->add_option("--seed", gen.seed, "corpus seed");
  c_gen->add_option("--out", gen.out, "output directory")->required();
  c_gen->add_option("--val", gen.val, "validation samples (default: 20/260 of count)");
  c_gen->add_option("--test", gen.test, "test samples (default: 40/260 of count)");

  std::string audit_manifest;
  auto* c_audit = app.add_subcommand("audit-data", "check every mask of a corpus against the scene invariants");
  c_audit->add_option("--manifest", audit_manifest, "manifest.csv")->required();

  TrainArgs tr;
  auto* c_train = app.add_subcommand("train", "train a model from a JSON run config");
  c_train->add_option("--config", tr.config, "run config JSON")->required();
  c_train->add_option("--seed", tr.seed, "override seed");
  c_train->add_option("--out", tr.out, "override output directory");
  c_train->add_option("--manifest", tr.manifest, "override data.manifest");
  c_train->add_option("--epochs", tr.epochs, "override epochs");

  EvalArgs ev;
  auto* c_eval = app.add_subcommand("eval", "per-class Dice / Hausdorff report for a checkpoint");
  c_eval->add_option("--checkpoint", ev.checkpoint, "CFPC checkpoint");
  c_eval->add_option("--manifest", ev.manifest, "manifest.csv")->required();
  c_eval->add_option("--split", ev.split, "train|val|test");
  c_eval->add_option("--config", ev.config, "run config (default: config.json next to the checkpoint)");
  c_eval->add_option("--out", ev.report, "also write the CSV report here");
  c_eval->add_flag("--oracle", ev.oracle, "score ground truth against itself");

  BenchArgs bn;
  auto* c_bench = app.add_subcommand("bench-attention", "count score entries and time attention variants");
  c_bench->add_option("--sizes", bn.sizes, "comma-separated HxW list");
  c_bench->add_option("--variants", bn.variants, "comma-separated axial_gaussian|full_gaussian|mhsa");
  c_bench->add_option("--repeats", bn.repeats, "timed repeats per row")->check(CLI::PositiveNumber);
  c_bench->add_option("--dim", bn.dim, "embedding width");
  c_bench->add_option("--heads", bn.heads, "attention heads");
  c_bench->add_option("--seed", bn.seed, "input seed");
  c_bench->add_option("--out", bn.out, "bench.csv path");

  AblateArgs ab;
  auto* c_ablate = app.add_subcommand("ablate", "train single-toggle variants of a base config");
  c_ablate->add_option("--config", ab.config, "base run config JSON")->required();
  c_ablate->add_option("--out", ab.out, "output directory")->required();
  c_ablate->add_option("--axis", ab.axis, "components|upsampling");
  c_ablate->add_option("--seed", ab.seed, "override seed");
  c_ablate->add_option("--epochs", ab.epochs, "override epochs");
  c_ablate->add_option("--manifest", ab.manifest, "override data.manifest");

  ExportArgs ex;
  auto* c_export = app.add_subcommand("export-masks", "write decay masks as CFPT tensors and PGM heatmaps");
  c_export->add_option("--height", ex.height, "row-mask extent");
  c_export->add_option("--width", ex.width, "column-mask extent");
  c_export->add_option("--family", ex.family, "gaussian|exponential");
  c_export->add_option("--param", ex.param, "sigma (gaussian) or gamma (exponential)");
  c_export->add_option("--out", ex.out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  }
  try {
    if (*c_gen) return gen_data(gen, out);
    if (*c_audit) return audit_data(audit_manifest, out);
    if (*c_train) return train(tr, out);
    if (*c_eval) return eval(ev, out);
    if (*c_bench) return bench(bn, out);
    if (*c_ablate) return ablate(ab, out);
    if (*c_export) return export_masks(ex, out);
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << '\n';
    return kNumeric;
  } catch (const IoError& e) {
    err << "io error: " << e.what() << '\n';
    return kIo;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const nlohmann::json::exception& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  }
  return kUsage;
}

}  // namespace cfp::cli
