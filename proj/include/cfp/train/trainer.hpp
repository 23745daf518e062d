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

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "cfp/data/synth.hpp"
#include "cfp/io/cfpt.hpp"
#include "cfp/metrics/seg_metrics.hpp"
#include "cfp/model/cfpformer.hpp"
#include "cfp/nn/adam.hpp"
#include "cfp/train/loss.hpp"
#include "cfp/train/run_config.hpp"

namespace cfp {

namespace fs = std::filesystem;

/// Inference batch size, fixed so reported metrics never depend on how a
/// caller batches evaluation.
inline constexpr std::size_t kEvalBatch = 8;

template <typename T>
struct Batch {
  Tensor<T> images;  // [B, 1, H, W]
  std::vector<std::uint8_t> labels;
};

template <typename T>
Batch<T> make_batch(const std::vector<data::SegSample>& samples, const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw UsageError("make_batch: no samples");
  const std::size_t h = samples[indices[0]].height, w = samples[indices[0]].width;
  std::vector<T> pixels;
  Batch<T> batch;
  pixels.reserve(indices.size() * h * w);
  batch.labels.reserve(indices.size() * h * w);
  for (auto i : indices) {
    const auto& s = samples[i];
    if (s.height != h || s.width != w) throw DimensionError("make_batch: samples differ in size");
    pixels.insert(pixels.end(), s.image.begin(), s.image.end());
    batch.labels.insert(batch.labels.end(), s.mask.labels.begin(), s.mask.labels.end());
  }
  batch.images = Tensor<T>::from({indices.size(), 1, h, w}, std::move(pixels));
  return batch;
}

template <typename T>
std::vector<LabelMask> predict_masks(const CfpFormer<T>& model, const std::vector<data::SegSample>& samples) {
  std::vector<LabelMask> out;
  out.reserve(samples.size());
  for (std::size_t start = 0; start < samples.size(); start += kEvalBatch) {
    std::vector<std::size_t> idx(std::min(kEvalBatch, samples.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    auto masks = argmax_masks(model.predict(make_batch<T>(samples, idx).images));
    for (auto& m : masks) out.push_back(std::move(m));
  }
  return out;
}

template <typename T>
MetricReport evaluate_model(const CfpFormer<T>& model, const std::vector<data::SegSample>& samples) {
  std::vector<LabelMask> gts;
  gts.reserve(samples.size());
  for (const auto& s : samples) gts.push_back(s.mask);
  return evaluate_masks(predict_masks(model, samples), gts);
}

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_dice = 0.0;
  std::optional<double> val_hd;
  double wall_seconds = 0.0;
};

struct TrainSummary {
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
  double best_val_dice = -1.0;
  std::size_t parameter_count = 0;
};

inline std::string format_fixed(std::optional<double> v) {
  if (!v) return "nan";
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.6f", *v);
  return buf;
}

inline void write_metrics_csv(const fs::path& path, const std::vector<EpochRecord>& history) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << "epoch,train_loss,val_dice_mean,val_hd_mean\n";
  for (const auto& r : history) {
    os << r.epoch << ',' << format_fixed(r.train_loss) << ',' << format_fixed(r.val_dice) << ','
       << format_fixed(r.val_hd) << '\n';
  }
}

inline void write_timing_csv(const fs::path& path, const std::vector<EpochRecord>& history) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << "epoch,wall_seconds\n";
  for (const auto& r : history) os << r.epoch << ',' << format_fixed(r.wall_seconds) << '\n';
}

/// Two stacked panels: training loss and validation Dice per epoch.
inline void write_curves_svg(const fs::path& path, const std::vector<EpochRecord>& history) {
  constexpr double width = 640, panel = 240, margin = 48;
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << 2 * panel + margin
     << "\" font-family=\"monospace\" font-size=\"11\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  auto draw = [&](double top, const char* title, const char* color, auto value) {
    double lo = 0.0, hi = 1.0;
    if (!history.empty()) {
      lo = hi = value(history.front());
      for (const auto& r : history) lo = std::min(lo, value(r)), hi = std::max(hi, value(r));
    }
    if (hi - lo < 1e-12) hi = lo + 1.0;
    const double x0 = margin, x1 = width - 16, y0 = top + 24, y1 = top + panel - 24;
    const double n = std::max<double>(1.0, static_cast<double>(history.size()) - 1.0);
    char buf[160];
    os << "<text x=\"" << x0 << "\" y=\"" << top + 16 << "\">" << title << "</text>\n";
    std::snprintf(buf, sizeof buf,
                  "<rect x=\"%.1f\" y=\"%.1f\" width=\"%.1f\" height=\"%.1f\" fill=\"none\" stroke=\"#888\"/>\n", x0,
                  y0, x1 - x0, y1 - y0);
    os << buf;
    std::snprintf(buf, sizeof buf, "<text x=\"4\" y=\"%.1f\">%.3f</text>\n<text x=\"4\" y=\"%.1f\">%.3f</text>\n",
                  y0 + 4, hi, y1, lo);
    os << buf;
    os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < history.size(); ++i) {
      const double x = x0 + (x1 - x0) * static_cast<double>(i) / n;
      const double y = y1 - (y1 - y0) * (value(history[i]) - lo) / (hi - lo);
      std::snprintf(buf, sizeof buf, "%s%.2f,%.2f", i ? " " : "", x, y);
      os << buf;
    }
    os << "\"/>\n";
  };
  draw(0, "train_loss", "#c0392b", [](const EpochRecord& r) { return r.train_loss; });
  draw(panel, "val_dice_mean", "#2471a3", [](const EpochRecord& r) { return r.val_dice; });
  os << "</svg>\n";
}

/// Seeded epoch loop. Writes config.json, metrics.csv, timing.csv,
/// curves.svg, best.cfpc (highest val Dice) and last.cfpc into `out_dir`.
template <typename T>
class Trainer {
 public:
  Trainer(RunConfig cfg, std::vector<data::SegSample> train, std::vector<data::SegSample> val)
      : cfg_(std::move(cfg)),
        train_(std::move(train)),
        val_(std::move(val)),
        model_(cfg_.model, cfg_.backbone, cfg_.image_size, cfg_.seed),
        params_(model_.parameters()),
        adam_(params_, cfg_.optimizer),
        loss_(make_loss<T>(cfg_.loss)) {
    cfg_.validate();
    if (train_.empty()) throw UsageError("training split is empty");
    if (val_.empty()) throw UsageError("validation split is empty");
    for (const auto* split : {&train_, &val_}) {
      for (const auto& s : *split) {
        if (s.height != cfg_.image_size || s.width != cfg_.image_size) {
          throw DimensionError("sample extent " + std::to_string(s.height) + "x" + std::to_string(s.width) +
                               " differs from image_size " + std::to_string(cfg_.image_size));
        }
      }
    }
  }

  CfpFormer<T>& model() { return model_; }
  const RunConfig& config() const { return cfg_; }

  /// One optimizer step on the given batch; returns the loss value.
  double step(const Batch<T>& batch, std::size_t epoch, std::size_t step_index) {
    Tensor<T> loss;
    try {
      loss = loss_(model_.forward(batch.images, true), batch.labels);
    } catch (const NumericError&) {
      diagnose(batch, epoch, step_index);
    }
    const double value = loss.item();
    if (!std::isfinite(value)) diagnose(batch, epoch, step_index);
    zero_grad(params_);
    loss.backward();
    for (const auto& [name, p] : params_) {
      for (T g : p.grad()) {
        if (!std::isfinite(g)) {
          throw NumericError("non-finite gradient in parameter '" + name + "' at epoch " + std::to_string(epoch) +
                             ", step " + std::to_string(step_index));
        }
      }
    }
    nn::adam_step(params_, adam_);
    model_.after_step();
    return value;
  }

  double train_epoch(std::size_t epoch) {
    std::vector<std::size_t> order(train_.size());
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle = Rng(cfg_.seed).split(0x5eed0000ULL + epoch);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);
    std::vector<data::SegSample> epoch_samples;
    epoch_samples.reserve(train_.size());
    const Rng aug_root = Rng(cfg_.seed).split(0xa0600000ULL + epoch);
    for (std::size_t i = 0; i < order.size(); ++i) {
      if (cfg_.augment) {
        epoch_samples.push_back(data::augment(train_[order[i]], aug_root.split(i).seed()).first);
      } else {
        epoch_samples.push_back(train_[order[i]]);
      }
    }
    double total = 0.0;
    std::size_t step_index = 0;
    for (std::size_t start = 0; start < epoch_samples.size(); start += cfg_.batch_size, ++step_index) {
      std::vector<std::size_t> idx(std::min(cfg_.batch_size, epoch_samples.size() - start));
      std::iota(idx.begin(), idx.end(), start);
      total += step(make_batch<T>(epoch_samples, idx), epoch, step_index) * static_cast<double>(idx.size());
    }
    return total / static_cast<double>(epoch_samples.size());
  }

  TrainSummary run(const fs::path& out_dir, std::ostream* log = nullptr) {
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create output directory " + out_dir.string() + ": " + ec.message());
    save_run_config(out_dir / "config.json", cfg_);
    TrainSummary summary;
    summary.parameter_count = parameter_count(params_);
    for (std::size_t epoch = 1; epoch <= cfg_.epochs; ++epoch) {
      const auto t0 = std::chrono::steady_clock::now();
      EpochRecord rec;
      rec.epoch = epoch;
      rec.train_loss = train_epoch(epoch);
      const auto report = evaluate_model(model_, val_);
      rec.val_dice = report.mean().dice;
      rec.val_hd = report.mean().hd;
      rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      summary.history.push_back(rec);
      if (rec.val_dice > summary.best_val_dice) {
        summary.best_val_dice = rec.val_dice;
        summary.best_epoch = epoch;
        io::save_checkpoint(out_dir / "best.cfpc", params_);
      }
      io::save_checkpoint(out_dir / "last.cfpc", params_);
      write_metrics_csv(out_dir / "metrics.csv", summary.history);
      write_timing_csv(out_dir / "timing.csv", summary.history);
      write_curves_svg(out_dir / "curves.svg", summary.history);
      if (log) {
        char buf[160];
        std::snprintf(buf, sizeof buf, "epoch %3zu  loss %.4f  val_dice %.4f  val_hd %s  (%.1fs)\n", epoch,
                      rec.train_loss, rec.val_dice, format_fixed(rec.val_hd).c_str(), rec.wall_seconds);
        *log << buf << std::flush;
      }
    }
    return summary;
  }

 private:
  // Replays the batch with per-op finiteness checks to name the culprit.
  [[noreturn]] void diagnose(const Batch<T>& batch, std::size_t epoch, std::size_t step_index) {
    const std::string where = "at epoch " + std::to_string(epoch) + ", step " + std::to_string(step_index);
    const bool was_on = numeric_guard();
    set_numeric_guard(true);
    try {
      NoGradGuard no_grad;
      loss_(model_.forward(batch.images, true), batch.labels);
    } catch (const NumericError& e) {
      set_numeric_guard(was_on);
      throw NumericError(std::string("NaN loss ") + where + ": " + e.what());
    }
    set_numeric_guard(was_on);
    throw NumericError("NaN loss " + where + " but no op produced a non-finite value on replay");
  }

  RunConfig cfg_;
  std::vector<data::SegSample> train_, val_;
  CfpFormer<T> model_;
  NamedParams<T> params_;
  nn::AdamState<T> adam_;
  LossFn<T> loss_;
};

}  // namespace cfp
