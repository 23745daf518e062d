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

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <numbers>

#include "cfp/data/corpus.hpp"
#include "cfp/data/synth.hpp"

namespace cfp::data {
namespace {

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

// Midpoint-rule expectation of a function of three independent uniforms.
template <typename F>
double expect3(const Range& x, const Range& y, const Range& z, F f, int n = 40) {
  double acc = 0.0;
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      for (int k = 0; k < n; ++k) {
        const double u = x.lo + (x.hi - x.lo) * (i + 0.5) / n;
        const double v = y.lo + (y.hi - y.lo) * (j + 0.5) / n;
        const double w = z.lo + (z.hi - z.lo) * (k + 0.5) / n;
        acc += f(u, v, w);
      }
    }
  }
  return acc / (static_cast<double>(n) * n * n);
}

TEST(Synth, GenerationIsDeterministicPerIndex) {
  const SceneRanges r;
  const auto a = generate(r, 6, 11), b = generate(r, 6, 11), c = generate(r, 3, 11), d = generate(r, 6, 12);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].image, b[i].image);
    EXPECT_EQ(a[i].mask.labels, b[i].mask.labels);
  }
  for (std::size_t i = 0; i < c.size(); ++i) EXPECT_EQ(a[i].image, c[i].image);
  EXPECT_NE(a[0].image, d[0].image);
}

TEST(Synth, EverySceneSatisfiesTheAuditAndQuantizes) {
  for (std::size_t size : {32u, 64u, 96u}) {
    SceneRanges r;
    r.image_size = size;
    const auto samples = generate(r, 300, 3);
    for (std::size_t i = 0; i < samples.size(); ++i) {
      const auto issues = audit_scene(samples[i].mask);
      ASSERT_TRUE(issues.empty()) << "size " << size << " sample " << i << ": " << issues.front();
      for (float v : samples[i].image) {
        ASSERT_GE(v, 0.0f);
        ASSERT_LE(v, 1.0f);
        ASSERT_EQ(static_cast<float>(quantize(v)) / 255.0f, v);
      }
    }
  }
}

TEST(Synth, AuditFlagsBrokenScenes) {
  LabelMask m(8, 8, kNumClasses);
  EXPECT_EQ(audit_scene(m).size(), 3u);
  m.at(3, 3) = kLV;
  m.at(3, 4) = kRV;
  m.at(0, 5) = kMYO;
  const auto issues = audit_scene(m);
  auto has = [&](const std::string& s) {
    return std::any_of(issues.begin(), issues.end(), [&](const auto& i) { return i.find(s) != std::string::npos; });
  };
  EXPECT_TRUE(has("enclose"));
  EXPECT_TRUE(has("RV touches"));
  EXPECT_TRUE(has("border"));
}

TEST(Synth, ClassAreasMatchQuadratureExpectation) {
  const SceneRanges r;
  const double n = static_cast<double>(r.image_size);
  const double pi = std::numbers::pi;
  const double lv = pi * r.lv_axis.mid() * r.lv_axis.mid() * n * n;
  const double myo = expect3(r.lv_axis, r.lv_axis, r.myo_thickness, [&](double a, double b, double t) {
    const double s = 1.0 + t / std::min(a, b);
    return pi * a * b * (s * s - 1.0);
  }) * n * n;
  const double rv = pi * r.rv_major.mid() * r.rv_minor.mid() * n * n;

  const auto samples = generate(r, 1000, 99);
  std::array<double, kNumClasses> counts{};
  for (const auto& s : samples) {
    for (auto id : s.mask.labels) counts[id] += 1.0;
  }
  const std::array<std::pair<std::size_t, double>, 3> expected{{{kLV, lv}, {kMYO, myo}, {kRV, rv}}};
  for (auto [cls, area] : expected) {
    const double mean = counts[cls] / 1000.0;
    EXPECT_NEAR(mean / area, 1.0, 0.20) << "class " << cls << " mean " << mean << " expected " << area;
  }
}

TEST(Augment, GroupLawsHold) {
  std::vector<int> grid(25);
  for (int i = 0; i < 25; ++i) grid[static_cast<std::size_t>(i)] = i;
  const Transform turn{1, false, false}, h{0, true, false}, v{0, false, true};
  auto g = grid;
  for (int k = 0; k < 4; ++k) g = apply_transform(g, 5, turn);
  EXPECT_EQ(g, grid);
  EXPECT_EQ(apply_transform(apply_transform(grid, 5, h), 5, h), grid);
  EXPECT_EQ(apply_transform(apply_transform(grid, 5, v), 5, v), grid);
  // One CCW quarter turn moves the top-right corner to the top-left.
  EXPECT_EQ(apply_transform(grid, 5, turn)[0], 4);
  EXPECT_EQ(apply_transform(grid, 5, Transform{2, true, true}), grid);
  auto sorted = apply_transform(grid, 5, Transform{3, true, false});
  std::sort(sorted.begin(), sorted.end());
  EXPECT_EQ(sorted, grid);
}

TEST(Augment, ImageAndMaskMoveTogether) {
  const auto s = generate(SceneRanges{}, 1, 5).front();
  for (std::uint64_t seed = 0; seed < 64; ++seed) {
    const auto [out, t] = augment(s, seed);
    EXPECT_EQ(out.mask.labels, apply_transform(s.mask.labels, s.height, t));
    EXPECT_EQ(out.image, apply_transform(s.image, s.height, t));
    std::array<std::size_t, kNumClasses> before{}, after{};
    for (auto id : s.mask.labels) ++before[id];
    for (auto id : out.mask.labels) ++after[id];
    EXPECT_EQ(before, after);
  }
  SegSample rect = s;
  rect.width = rect.height + 1;
  EXPECT_THROW(augment(rect, 1), UsageError);
}

TEST(Augment, DrawFrequenciesAreUniform) {
  std::array<int, 4> turns{};
  int h = 0, v = 0;
  constexpr int kDraws = 10000;
  for (int i = 0; i < kDraws; ++i) {
    Rng rng(static_cast<std::uint64_t>(i));
    const auto t = draw_transform(rng);
    ++turns[static_cast<std::size_t>(t.quarter_turns)];
    h += t.hflip;
    v += t.vflip;
  }
  for (int c : turns) EXPECT_NEAR(c / double(kDraws), 0.25, 0.02);
  EXPECT_NEAR(h / double(kDraws), 0.5, 0.02);
  EXPECT_NEAR(v / double(kDraws), 0.5, 0.02);
}

TEST(Resize, IdentityConstantAndHandWeights) {
  Rng rng(1);
  std::vector<float> img(5 * 7);
  for (auto& x : img) x = static_cast<float>(rng.uniform());
  const auto same = resize_cubic(img, 5, 7, 5, 7);
  for (std::size_t i = 0; i < img.size(); ++i) EXPECT_NEAR(same[i], img[i], 1e-6);

  const auto flat = resize_cubic(std::vector<float>(12, 0.3f), 3, 4, 7, 9);
  for (float x : flat) EXPECT_NEAR(x, 0.3f, 1e-6);

  // Output 5 of a 6 -> 12 upscale samples source position 2.25, so taps 1..4
  // sit at distances 1.25, 0.25, 0.75, 1.75.
  EXPECT_DOUBLE_EQ(catmull_rom(1.25), -0.0703125);
  EXPECT_DOUBLE_EQ(catmull_rom(0.25), 0.8671875);
  EXPECT_DOUBLE_EQ(catmull_rom(0.75), 0.2265625);
  EXPECT_DOUBLE_EQ(catmull_rom(1.75), -0.0234375);
  EXPECT_EQ(catmull_rom(0.0), 1.0);
  EXPECT_EQ(catmull_rom(1.0), 0.0);
  EXPECT_EQ(catmull_rom(2.5), 0.0);
  const std::vector<float> row{1, 2, 4, 8, 16, 32};
  const auto up = resize_cubic(row, 1, 6, 1, 12);
  EXPECT_NEAR(up[5], -0.0703125 * 2 + 0.8671875 * 4 + 0.2265625 * 8 - 0.0234375 * 16, 1e-5);
  const std::vector<float> ramp{0, 1, 2, 3, 4, 5};
  const auto ramp_up = resize_cubic(ramp, 1, 6, 1, 12);
  for (std::size_t o = 3; o < 9; ++o) EXPECT_NEAR(ramp_up[o], (o + 0.5) / 2.0 - 0.5, 1e-5) << o;

  EXPECT_THROW(resize_cubic(img, 5, 6, 5, 5), UsageError);
}

TEST(Resize, NearestMaskUsesPixelCentres) {
  LabelMask m(2, 2, 4, {0, 1, 2, 3});
  const auto up = resize_nearest(m, 4, 4);
  EXPECT_EQ(up.labels, (std::vector<std::uint8_t>{0, 0, 1, 1, 0, 0, 1, 1, 2, 2, 3, 3, 2, 2, 3, 3}));
  EXPECT_EQ(resize_nearest(up, 2, 2).labels, m.labels);
}

TEST(Corpus, DefaultSplitAndByteIdenticalRewrite) {
  const auto s = default_split(260);
  EXPECT_EQ(s.train, 200u);
  EXPECT_EQ(s.val, 20u);
  EXPECT_EQ(s.test, 40u);
  const auto tiny = default_split(2);
  EXPECT_EQ(tiny.train + tiny.val + tiny.test, 2u);
  EXPECT_GE(tiny.train, 1u);

  const auto root = fs::temp_directory_path() / "cfp_synth_corpus";
  fs::remove_all(root);
  SceneRanges r;
  r.image_size = 32;
  const auto samples = generate(r, 13, 7);
  const auto m1 = write_corpus(root / "a", samples, default_split(13));
  const auto m2 = write_corpus(root / "b", generate(r, 13, 7), default_split(13));
  EXPECT_EQ(slurp(m1), slurp(m2));
  for (const auto& e : read_manifest(m1)) {
    EXPECT_EQ(slurp(root / "a" / e.image_path), slurp(root / "b" / e.image_path));
    EXPECT_EQ(slurp(root / "a" / e.mask_path), slurp(root / "b" / e.mask_path));
  }
  const auto train = load_split(m1, "train", 32);
  ASSERT_EQ(train.size(), default_split(13).train);
  EXPECT_EQ(train[0].image, samples[0].image);
  EXPECT_EQ(train[0].mask.labels, samples[0].mask.labels);
  EXPECT_EQ(load_split(m1, "test", 64).front().image.size(), 64u * 64u);

  std::ofstream(root / "bad.csv") << "split,image_path,mask_path\nholdout,a,b\n";
  EXPECT_THROW(read_manifest(root / "bad.csv"), IoError);
  std::ofstream(root / "hdr.csv") << "image,mask\n";
  EXPECT_THROW(read_manifest(root / "hdr.csv"), IoError);
}

}  // namespace
}  // namespace cfp::data
