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

// Cardiac-like synthetic scenes: an LV disc (class 3) wrapped by a MYO
// annulus (class 2), with a separate RV ellipse (class 1) to one side.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "cfp/core/error.hpp"
#include "cfp/core/rng.hpp"
#include "cfp/metrics/seg_metrics.hpp"

namespace cfp::data {

enum Label : std::uint8_t { kBackground = 0, kRV = 1, kMYO = 2, kLV = 3 };
inline constexpr std::size_t kNumClasses = 4;

struct Range {
  double lo = 0.0, hi = 0.0;
  double mid() const { return 0.5 * (lo + hi); }
  double draw(Rng& rng) const { return lo == hi ? lo : rng.uniform(lo, hi); }
};

/// Sampling ranges. Lengths are fractions of the image size; angles in
/// radians. The defaults keep every structure at least one pixel away from
/// the border at any size, so no draw is ever rejected.
struct SceneRanges {
  std::size_t image_size = 64;
  Range lv_cx{0.52, 0.60};
  Range lv_cy{0.45, 0.55};
  Range lv_axis{0.08, 0.12};      // each semi-axis drawn independently
  Range myo_thickness{0.035, 0.05};
  Range rv_major{0.07, 0.11};
  Range rv_minor{0.045, 0.07};
  Range rv_angle{0.8 * std::numbers::pi, 1.2 * std::numbers::pi};
  Range rv_gap{0.015, 0.03};
  Range rotation{0.0, std::numbers::pi};
  std::array<double, kNumClasses> intensity{0.15, 0.60, 0.35, 0.85};
  double noise = 0.06;

  void validate() const {
    if (image_size < 8) throw ConfigError("scene image_size must be >= 8");
    if (noise < 0.0) throw ConfigError("scene noise must be >= 0");
    for (const Range* r : {&lv_axis, &myo_thickness, &rv_major, &rv_minor}) {
      if (r->lo <= 0.0 || r->hi < r->lo) throw ConfigError("scene size ranges must be positive and ordered");
    }
  }
};

struct Ellipse {
  double cx = 0, cy = 0, a = 1, b = 1, theta = 0;

  /// Normalized radius: <= 1 inside.
  double rho(double x, double y) const {
    const double dx = x - cx, dy = y - cy;
    const double c = std::cos(theta), s = std::sin(theta);
    const double u = (c * dx + s * dy) / a, v = (-s * dx + c * dy) / b;
    return std::sqrt(u * u + v * v);
  }
};

/// One drawn scene, in pixels. The MYO outer boundary is the LV ellipse
/// scaled by `myo_scale` = 1 + t / min(a, b), which keeps the ring at least
/// t pixels thick everywhere.
inline constexpr double kMinMyoPixels = 1.5;

struct SceneSpec {
  std::size_t image_size = 0;
  Ellipse lv, rv;
  double myo_thickness = 0;
  double myo_scale = 1;
};

inline SceneSpec draw_scene(const SceneRanges& r, Rng& rng) {
  const double n = static_cast<double>(r.image_size);
  SceneSpec s;
  s.image_size = r.image_size;
  s.lv.cx = r.lv_cx.draw(rng) * n;
  s.lv.cy = r.lv_cy.draw(rng) * n;
  s.lv.a = r.lv_axis.draw(rng) * n;
  s.lv.b = r.lv_axis.draw(rng) * n;
  s.lv.theta = r.rotation.draw(rng);
  s.myo_thickness = std::max(r.myo_thickness.draw(rng) * n, kMinMyoPixels);
  s.myo_scale = 1.0 + s.myo_thickness / std::min(s.lv.a, s.lv.b);
  s.rv.a = r.rv_major.draw(rng) * n;
  s.rv.b = r.rv_minor.draw(rng) * n;
  s.rv.theta = r.rotation.draw(rng);
  const double phi = r.rv_angle.draw(rng);
  const double reach = s.myo_scale * std::max(s.lv.a, s.lv.b) + s.rv.a + r.rv_gap.draw(rng) * n;
  s.rv.cx = s.lv.cx + reach * std::cos(phi);
  s.rv.cy = s.lv.cy + reach * std::sin(phi);
  return s;
}

inline LabelMask render_mask(const SceneSpec& s) {
  const std::size_t n = s.image_size;
  LabelMask m(n, n, kNumClasses);
  for (std::size_t y = 0; y < n; ++y) {
    for (std::size_t x = 0; x < n; ++x) {
      const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
      const double r = s.lv.rho(px, py);
      std::uint8_t label = kBackground;
      if (r <= 1.0) {
        label = kLV;
      } else if (r <= s.myo_scale) {
        label = kMYO;
      } else if (s.rv.rho(px, py) <= 1.0) {
        label = kRV;
      }
      m.at(y, x) = label;
    }
  }
  return m;
}

/// Image in [0, 1], already quantized to 8-bit levels so it survives a PGM
/// round trip unchanged.
struct SegSample {
  std::size_t height = 0, width = 0;
  std::vector<float> image;
  LabelMask mask;
};

inline std::uint8_t quantize(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

inline SegSample render_sample(const SceneSpec& s, const SceneRanges& r, Rng& rng) {
  SegSample out;
  out.height = out.width = s.image_size;
  out.mask = render_mask(s);
  out.image.resize(s.image_size * s.image_size);
  for (std::size_t i = 0; i < out.image.size(); ++i) {
    const double v = r.intensity[out.mask.labels[i]] + rng.normal(0.0, r.noise);
    out.image[i] = static_cast<float>(quantize(v)) / 255.0f;
  }
  return out;
}

/// Sample i depends only on (seed, i).
inline std::vector<SegSample> generate(const SceneRanges& ranges, std::size_t count, std::uint64_t seed) {
  ranges.validate();
  if (count == 0) throw UsageError("generate: count must be >= 1");
  std::vector<SegSample> out;
  out.reserve(count);
  const Rng root(seed);
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng = root.split(i);
    const auto scene = draw_scene(ranges, rng);
    out.push_back(render_sample(scene, ranges, rng));
  }
  return out;
}

/// Returns human-readable violations; empty means the mask is a valid scene.
inline std::vector<std::string> audit_scene(const LabelMask& m) {
  std::vector<std::string> issues;
  std::array<std::size_t, kNumClasses> counts{};
  for (auto id : m.labels) {
    if (id >= kNumClasses) {
      issues.push_back("class id out of range");
      return issues;
    }
    ++counts[id];
  }
  if (counts[kLV] == 0) issues.push_back("LV disc is empty");
  if (counts[kMYO] == 0) issues.push_back("MYO annulus is empty");
  if (counts[kRV] == 0) issues.push_back("RV region is empty");
  bool lv_exposed = false, rv_touches_lv = false, on_border = false;
  const auto h = static_cast<std::ptrdiff_t>(m.height), w = static_cast<std::ptrdiff_t>(m.width);
  for (std::ptrdiff_t y = 0; y < h; ++y) {
    for (std::ptrdiff_t x = 0; x < w; ++x) {
      const auto id = m.labels[static_cast<std::size_t>(y * w + x)];
      if (id == kBackground) continue;
      if (y == 0 || x == 0 || y == h - 1 || x == w - 1) on_border = true;
      for (std::ptrdiff_t dy = -1; dy <= 1; ++dy) {
        for (std::ptrdiff_t dx = -1; dx <= 1; ++dx) {
          const auto yy = y + dy, xx = x + dx;
          if (yy < 0 || xx < 0 || yy >= h || xx >= w) continue;
          const auto nb = m.labels[static_cast<std::size_t>(yy * w + xx)];
          if (id == kLV && nb != kLV && nb != kMYO) lv_exposed = true;
          if (id == kRV && nb == kLV) rv_touches_lv = true;
        }
      }
    }
  }
  if (lv_exposed) issues.push_back("MYO annulus does not enclose the LV disc");
  if (rv_touches_lv) issues.push_back("RV touches the LV disc");
  if (on_border) issues.push_back("a structure touches the image border");
  return issues;
}

// ---------------------------------------------------------------------------
// Augmentation

/// Applied in order: k counter-clockwise quarter turns, horizontal flip,
/// vertical flip.
struct Transform {
  int quarter_turns = 0;
  bool hflip = false;
  bool vflip = false;

  bool operator==(const Transform&) const = default;
};

/// Square grid only; the transform is a pixel permutation.
template <typename V>
std::vector<V> apply_transform(const std::vector<V>& grid, std::size_t n, const Transform& t) {
  if (grid.size() != n * n) throw UsageError("apply_transform: grid is not n x n");
  std::vector<V> cur = grid, next(grid.size());
  for (int k = 0; k < ((t.quarter_turns % 4) + 4) % 4; ++k) {
    for (std::size_t y = 0; y < n; ++y) {
      for (std::size_t x = 0; x < n; ++x) next[y * n + x] = cur[x * n + (n - 1 - y)];
    }
    std::swap(cur, next);
  }
  if (t.hflip) {
    for (std::size_t y = 0; y < n; ++y) std::reverse(cur.begin() + y * n, cur.begin() + (y + 1) * n);
  }
  if (t.vflip) {
    for (std::size_t y = 0; y < n / 2; ++y) {
      std::swap_ranges(cur.begin() + y * n, cur.begin() + (y + 1) * n, cur.begin() + (n - 1 - y) * n);
    }
  }
  return cur;
}

inline Transform draw_transform(Rng& rng) {
  Transform t;
  t.quarter_turns = static_cast<int>(rng.below(4));
  t.hflip = rng.bernoulli(0.5);
  t.vflip = rng.bernoulli(0.5);
  return t;
}

inline SegSample apply_transform(const SegSample& s, const Transform& t) {
  if (s.height != s.width) throw UsageError("augment: image must be square");
  SegSample out = s;
  out.image = apply_transform(s.image, s.height, t);
  out.mask.labels = apply_transform(s.mask.labels, s.height, t);
  return out;
}

/// Random quarter turn plus independent 50% flips; returns the transformed
/// sample together with the transform that produced it.
inline std::pair<SegSample, Transform> augment(const SegSample& s, std::uint64_t seed) {
  if (s.height != s.width) throw UsageError("augment: image must be square");
  Rng rng(seed);
  const auto t = draw_transform(rng);
  return {apply_transform(s, t), t};
}

// ---------------------------------------------------------------------------
// Resampling

inline double catmull_rom(double x) {
  constexpr double a = -0.5;
  x = std::abs(x);
  if (x <= 1.0) return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
  if (x < 2.0) return ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a;
  return 0.0;
}

namespace detail {

struct CubicTaps {
  std::array<std::size_t, 4> index;
  std::array<double, 4> weight;
};

inline std::vector<CubicTaps> cubic_taps(std::size_t in, std::size_t out) {
  std::vector<CubicTaps> taps(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    const double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
    const double base = std::floor(src);
    for (int k = 0; k < 4; ++k) {
      const double pos = base - 1.0 + k;
      const auto idx = std::clamp<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(pos), 0,
                                                  static_cast<std::ptrdiff_t>(in) - 1);
      taps[o].index[static_cast<std::size_t>(k)] = static_cast<std::size_t>(idx);
      taps[o].weight[static_cast<std::size_t>(k)] = catmull_rom(src - pos);
    }
  }
  return taps;
}

}  // namespace detail

/// Separable Catmull-Rom resize with half-pixel centres and clamped edges.
inline std::vector<float> resize_cubic(const std::vector<float>& img, std::size_t h, std::size_t w, std::size_t th,
                                       std::size_t tw) {
  if (img.size() != h * w) throw UsageError("resize_cubic: image size does not match extents");
  if (th == 0 || tw == 0) throw UsageError("resize_cubic: target extents must be >= 1");
  const auto rows = detail::cubic_taps(h, th), cols = detail::cubic_taps(w, tw);
  std::vector<double> tmp(h * tw);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < tw; ++x) {
      double acc = 0.0;
      for (std::size_t k = 0; k < 4; ++k) acc += cols[x].weight[k] * img[y * w + cols[x].index[k]];
      tmp[y * tw + x] = acc;
    }
  }
  std::vector<float> out(th * tw);
  for (std::size_t y = 0; y < th; ++y) {
    for (std::size_t x = 0; x < tw; ++x) {
      double acc = 0.0;
      for (std::size_t k = 0; k < 4; ++k) acc += rows[y].weight[k] * tmp[rows[y].index[k] * tw + x];
      out[y * tw + x] = static_cast<float>(acc);
    }
  }
  return out;
}

inline LabelMask resize_nearest(const LabelMask& m, std::size_t th, std::size_t tw) {
  if (th == 0 || tw == 0) throw UsageError("resize_nearest: target extents must be >= 1");
  LabelMask out(th, tw, m.num_classes);
  for (std::size_t y = 0; y < th; ++y) {
    const auto sy = static_cast<std::size_t>((static_cast<double>(y) + 0.5) * m.height / th);
    for (std::size_t x = 0; x < tw; ++x) {
      const auto sx = static_cast<std::size_t>((static_cast<double>(x) + 0.5) * m.width / tw);
      out.at(y, x) = m.at(std::min(sy, m.height - 1), std::min(sx, m.width - 1));
    }
  }
  return out;
}

inline SegSample resize_sample(const SegSample& s, std::size_t size) {
  if (s.height == size && s.width == size) return s;
  SegSample out;
  out.height = out.width = size;
  out.image = resize_cubic(s.image, s.height, s.width, size, size);
  out.mask = resize_nearest(s.mask, size, size);
  return out;
}

}  // namespace cfp::data
