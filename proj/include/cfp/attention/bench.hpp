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
#include <chrono>
#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "cfp/attention/attention.hpp"

namespace cfp {

/// Score entries per image and head: HW(H+W) for the axial variant,
/// (HW)^2 for the full-matrix variants.
inline std::uint64_t expected_score_entries(AttentionVariant v, std::uint64_t h, std::uint64_t w) {
  return v == AttentionVariant::axial_gaussian ? h * w * (h + w) : (h * w) * (h * w);
}

struct BenchRow {
  AttentionVariant variant = AttentionVariant::axial_gaussian;
  std::size_t h = 0, w = 0;
  std::uint64_t counted = 0;
  std::uint64_t expected = 0;
  double median_seconds = 0.0;
};

/// Runs one attention unit forward per (size, variant) `repeats` times on a
/// single image and records counted score entries and the median wall time.
template <typename T>
std::vector<BenchRow> bench_attention(const std::vector<std::pair<std::size_t, std::size_t>>& sizes,
                                      const std::vector<AttentionVariant>& variants, std::size_t repeats,
                                      std::size_t embed_dim, std::size_t heads, std::uint64_t seed) {
  if (repeats == 0) throw UsageError("bench_attention: repeats must be >= 1");
  std::vector<BenchRow> rows;
  NoGradGuard no_grad;
  for (const auto& [h, w] : sizes) {
    if (h == 0 || w == 0) throw UsageError("bench_attention: sizes must be positive");
    for (auto variant : variants) {
      AttentionConfig cfg;
      cfg.embed_dim = embed_dim;
      cfg.num_heads = heads;
      cfg.variant = variant;
      Rng rng(seed);
      AttentionUnit<T> unit(cfg, h, w, rng.split(1));
      Rng data = rng.split(2);
      std::vector<T> values(h * w * embed_dim);
      for (auto& x : values) x = static_cast<T>(data.normal());
      const auto x = Tensor<T>::from({1, h, w, embed_dim}, std::move(values));
      BenchRow row{variant, h, w, 0, expected_score_entries(variant, h, w), 0.0};
      std::vector<double> times;
      for (std::size_t r = 0; r < repeats; ++r) {
        AttentionStats stats;
        const auto t0 = std::chrono::steady_clock::now();
        unit.forward(x, nullptr, &stats);
        times.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
        row.counted = stats.score_entries;
      }
      std::sort(times.begin(), times.end());
      row.median_seconds = times.size() % 2 ? times[times.size() / 2]
                                            : 0.5 * (times[times.size() / 2 - 1] + times[times.size() / 2]);
      rows.push_back(row);
    }
  }
  return rows;
}

inline void write_bench_csv(std::ostream& os, const std::vector<BenchRow>& rows) {
  os << "variant,H,W,score_entries,expected_entries,median_seconds\n";
  for (const auto& r : rows) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.9f", r.median_seconds);
    os << to_string(r.variant) << ',' << r.h << ',' << r.w << ',' << r.counted << ',' << r.expected << ',' << buf
       << '\n';
  }
}

}  // namespace cfp
