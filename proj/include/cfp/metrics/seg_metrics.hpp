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

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "cfp/core/error.hpp"
#include "cfp/core/tensor.hpp"

namespace cfp {

/// H x W map of class ids, row-major.
struct LabelMask {
  std::size_t height = 0, width = 0;
  std::size_t num_classes = 0;
  std::vector<std::uint8_t> labels;

  LabelMask() = default;
  LabelMask(std::size_t h, std::size_t w, std::size_t classes, std::vector<std::uint8_t> ids = {})
      : height(h), width(w), num_classes(classes), labels(std::move(ids)) {
    if (labels.empty()) labels.assign(h * w, 0);
    validate();
  }

  std::uint8_t at(std::size_t y, std::size_t x) const { return labels[y * width + x]; }
  std::uint8_t& at(std::size_t y, std::size_t x) { return labels[y * width + x]; }

  void validate() const {
    if (labels.size() != height * width) throw DimensionError("LabelMask: label count does not match H x W");
    if (num_classes == 0 || num_classes > 256) throw ConfigError("LabelMask: num_classes must be 1..256");
    for (auto id : labels) {
      if (id >= num_classes) {
        throw DimensionError("LabelMask: class id " + std::to_string(id) + " >= num_classes " +
                             std::to_string(num_classes));
      }
    }
  }
};

namespace detail {

inline void check_pair(const LabelMask& a, const LabelMask& b, const char* op) {
  if (a.height != b.height || a.width != b.width) {
    throw UsageError(std::string(op) + ": mask shapes differ (" + std::to_string(a.height) + "x" +
                     std::to_string(a.width) + " vs " + std::to_string(b.height) + "x" + std::to_string(b.width) + ")");
  }
}

// Exact squared Euclidean distance transform of one axis (lower envelope of
// parabolas). f holds squared distances or kInf; results stay integral.
inline constexpr std::int64_t kInf = std::numeric_limits<std::int64_t>::max() / 4;

inline void edt_1d(const std::int64_t* f, std::int64_t* d, std::size_t n, std::vector<std::size_t>& v,
                   std::vector<double>& z) {
  v.assign(n, 0);
  z.assign(n + 1, 0.0);
  std::size_t k = 0;
  std::size_t first = n;
  for (std::size_t q = 0; q < n; ++q) {
    if (f[q] < kInf) {
      first = q;
      break;
    }
  }
  if (first == n) {
    std::fill(d, d + n, kInf);
    return;
  }
  v[0] = first;
  z[0] = -std::numeric_limits<double>::infinity();
  z[1] = std::numeric_limits<double>::infinity();
  auto intersect = [&](std::size_t q, std::size_t p) {
    const double qq = static_cast<double>(q), pp = static_cast<double>(p);
    return (static_cast<double>(f[q] - f[p]) + qq * qq - pp * pp) / (2.0 * (qq - pp));
  };
  for (std::size_t q = first + 1; q < n; ++q) {
    if (f[q] >= kInf) continue;
    double s = intersect(q, v[k]);
    while (s <= z[k]) {
      --k;
      s = intersect(q, v[k]);
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = std::numeric_limits<double>::infinity();
  }
  k = 0;
  for (std::size_t q = 0; q < n; ++q) {
    while (z[k + 1] < static_cast<double>(q)) ++k;
    const auto dq = static_cast<std::int64_t>(q) - static_cast<std::int64_t>(v[k]);
    d[q] = dq * dq + f[v[k]];
  }
}

/// Squared distance from every pixel to the nearest pixel of `cls` in `m`.
inline std::vector<std::int64_t> squared_distance_to(const LabelMask& m, std::uint8_t cls) {
  const std::size_t h = m.height, w = m.width;
  std::vector<std::int64_t> grid(h * w), col_in(h), col_out(h);
  for (std::size_t i = 0; i < h * w; ++i) grid[i] = m.labels[i] == cls ? 0 : kInf;
  std::vector<std::size_t> v;
  std::vector<double> z;
  for (std::size_t x = 0; x < w; ++x) {
    for (std::size_t y = 0; y < h; ++y) col_in[y] = grid[y * w + x];
    edt_1d(col_in.data(), col_out.data(), h, v, z);
    for (std::size_t y = 0; y < h; ++y) grid[y * w + x] = col_out[y];
  }
  std::vector<std::int64_t> row(w);
  for (std::size_t y = 0; y < h; ++y) {
    edt_1d(grid.data() + y * w, row.data(), w, v, z);
    std::copy(row.begin(), row.end(), grid.begin() + static_cast<std::ptrdiff_t>(y * w));
  }
  return grid;
}

// max over pixels of `from` labelled cls of the squared distance to `to`'s cls set.
inline std::int64_t directed_sq(const LabelMask& from, const LabelMask& to, std::uint8_t cls) {
  const auto dt = squared_distance_to(to, cls);
  std::int64_t best = 0;
  for (std::size_t i = 0; i < from.labels.size(); ++i) {
    if (from.labels[i] == cls) best = std::max(best, dt[i]);
  }
  return best;
}

}  // namespace detail

/// 2|P n G| / (|P| + |G|); both empty gives 1.
inline double dice(const LabelMask& pred, const LabelMask& gt, std::size_t class_id) {
  detail::check_pair(pred, gt, "dice");
  std::size_t p = 0, g = 0, both = 0;
  for (std::size_t i = 0; i < pred.labels.size(); ++i) {
    const bool in_p = pred.labels[i] == class_id, in_g = gt.labels[i] == class_id;
    p += in_p;
    g += in_g;
    both += in_p && in_g;
  }
  if (p + g == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(p + g);
}

/// Symmetric Hausdorff distance in pixels between the class's pixel sets;
/// nullopt when either set is empty.
inline std::optional<double> hausdorff(const LabelMask& pred, const LabelMask& gt, std::size_t class_id) {
  detail::check_pair(pred, gt, "hausdorff");
  const auto cls = static_cast<std::uint8_t>(class_id);
  const bool p_any = std::find(pred.labels.begin(), pred.labels.end(), cls) != pred.labels.end();
  const bool g_any = std::find(gt.labels.begin(), gt.labels.end(), cls) != gt.labels.end();
  if (class_id > 255 || !p_any || !g_any) return std::nullopt;
  const auto sq = std::max(detail::directed_sq(pred, gt, cls), detail::directed_sq(gt, pred, cls));
  return std::sqrt(static_cast<double>(sq));
}

/// Per-pixel argmax over classes of logits [B, C, H, W]; ties go to the lower id.
template <typename T>
std::vector<LabelMask> argmax_masks(const Tensor<T>& logits) {
  if (logits.rank() != 4) throw DimensionError("argmax_masks: expected [B,C,H,W], got " + shape_str(logits.shape()));
  const std::size_t b = logits.dim(0), c = logits.dim(1), h = logits.dim(2), w = logits.dim(3), hw = h * w;
  const auto& d = logits.data();
  std::vector<LabelMask> out;
  out.reserve(b);
  for (std::size_t n = 0; n < b; ++n) {
    LabelMask m(h, w, c);
    for (std::size_t i = 0; i < hw; ++i) {
      std::size_t best = 0;
      T best_v = d[(n * c) * hw + i];
      for (std::size_t k = 1; k < c; ++k) {
        const T v = d[(n * c + k) * hw + i];
        if (v > best_v) {
          best_v = v;
          best = k;
        }
      }
      m.labels[i] = static_cast<std::uint8_t>(best);
    }
    out.push_back(std::move(m));
  }
  return out;
}

struct ClassScore {
  std::string name;
  double dice = 0.0;
  std::optional<double> hd;
};

/// Foreground classes 1..C-1, then a "mean" row. Per-class dice averages
/// over samples; hd averages over samples where it is defined.
struct MetricReport {
  std::vector<ClassScore> rows;

  const ClassScore& mean() const { return rows.back(); }

  void write_csv(std::ostream& os) const {
    os << "class,dice,hd\n";
    char buf[96];
    for (const auto& r : rows) {
      if (r.hd) {
        std::snprintf(buf, sizeof buf, "%s,%.6f,%.6f\n", r.name.c_str(), r.dice, *r.hd);
      } else {
        std::snprintf(buf, sizeof buf, "%s,%.6f,nan\n", r.name.c_str(), r.dice);
      }
      os << buf;
    }
  }
};

inline MetricReport evaluate_masks(const std::vector<LabelMask>& preds, const std::vector<LabelMask>& gts) {
  if (preds.size() != gts.size()) throw UsageError("evaluate: prediction and ground-truth counts differ");
  if (preds.empty()) throw UsageError("evaluate: empty dataset");
  const std::size_t classes = gts.front().num_classes;
  if (classes < 2) throw ConfigError("evaluate: need at least one foreground class");
  MetricReport report;
  double dice_total = 0.0, hd_total = 0.0;
  std::size_t hd_classes = 0;
  for (std::size_t c = 1; c < classes; ++c) {
    double d = 0.0, h = 0.0;
    std::size_t h_n = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
      d += dice(preds[i], gts[i], c);
      if (auto hd = hausdorff(preds[i], gts[i], c)) {
        h += *hd;
        ++h_n;
      }
    }
    ClassScore row{std::to_string(c), d / static_cast<double>(preds.size()), std::nullopt};
    if (h_n > 0) row.hd = h / static_cast<double>(h_n);
    dice_total += row.dice;
    if (row.hd) {
      hd_total += *row.hd;
      ++hd_classes;
    }
    report.rows.push_back(row);
  }
  ClassScore mean{"mean", dice_total / static_cast<double>(classes - 1), std::nullopt};
  if (hd_classes > 0) mean.hd = hd_total / static_cast<double>(hd_classes);
  report.rows.push_back(mean);
  return report;
}

}  // namespace cfp
