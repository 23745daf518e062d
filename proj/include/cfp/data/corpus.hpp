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

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "cfp/data/synth.hpp"
#include "cfp/io/cfpt.hpp"

namespace cfp::data {

namespace fs = std::filesystem;

struct SplitSizes {
  std::size_t train = 0, val = 0, test = 0;
};

/// 200/20/40 proportions; a count of 260 gives exactly that.
inline SplitSizes default_split(std::size_t count) {
  SplitSizes s;
  s.val = static_cast<std::size_t>(std::llround(static_cast<double>(count) * 20.0 / 260.0));
  s.test = static_cast<std::size_t>(std::llround(static_cast<double>(count) * 40.0 / 260.0));
  while (s.val + s.test >= count && (s.val > 0 || s.test > 0)) {
    if (s.test >= s.val && s.test > 0) {
      --s.test;
    } else {
      --s.val;
    }
  }
  s.train = count - s.val - s.test;
  return s;
}

struct ManifestEntry {
  std::string split;
  std::string image_path;  // relative to the manifest's directory
  std::string mask_path;
};

inline std::string split_of(std::size_t index, const SplitSizes& s) {
  if (index < s.train) return "train";
  if (index < s.train + s.val) return "val";
  return "test";
}

inline void save_mask(const fs::path& path, const LabelMask& m) {
  io::save_cfpt(path, io::to_raw<std::uint8_t>({m.height, m.width}, m.labels));
}

inline LabelMask load_mask(const fs::path& path, std::size_t num_classes) {
  const auto raw = io::load_cfpt(path);
  if (raw.dtype != io::DType::u8 || raw.shape.size() != 2) {
    throw IoError(path.string() + ": mask must be a rank-2 u8 tensor");
  }
  try {
    return LabelMask(raw.shape[0], raw.shape[1], num_classes, raw.payload);
  } catch (const Error& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

inline void save_image(const fs::path& path, const SegSample& s) {
  io::GrayImage g{s.width, s.height, {}};
  g.pixels.reserve(s.image.size());
  for (float v : s.image) g.pixels.push_back(quantize(v));
  io::write_pgm(path, g);
}

/// Writes images/NNNNN.pgm, masks/NNNNN.cfpt and manifest.csv under `dir`;
/// returns the manifest path.
inline fs::path write_corpus(const fs::path& dir, const std::vector<SegSample>& samples, const SplitSizes& split) {
  if (split.train + split.val + split.test != samples.size()) throw UsageError("write_corpus: split sizes do not sum to count");
  std::error_code ec;
  fs::create_directories(dir / "images", ec);
  fs::create_directories(dir / "masks", ec);
  if (ec) throw IoError("cannot create corpus directory " + dir.string() + ": " + ec.message());
  const fs::path manifest = dir / "manifest.csv";
  std::ofstream os(manifest, std::ios::binary);
  if (!os) throw IoError("cannot open " + manifest.string() + " for writing");
  os << "split,image_path,mask_path\n";
  for (std::size_t i = 0; i < samples.size(); ++i) {
    char stem[16];
    std::snprintf(stem, sizeof stem, "%05zu", i);
    const std::string img = std::string("images/") + stem + ".pgm";
    const std::string msk = std::string("masks/") + stem + ".cfpt";
    save_image(dir / img, samples[i]);
    save_mask(dir / msk, samples[i].mask);
    os << split_of(i, split) << ',' << img << ',' << msk << '\n';
  }
  if (!os) throw IoError("write failed for " + manifest.string());
  return manifest;
}

inline std::vector<ManifestEntry> read_manifest(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open manifest " + path.string());
  std::string line;
  if (!std::getline(is, line) || line != "split,image_path,mask_path") {
    throw IoError(path.string() + ": manifest header must be 'split,image_path,mask_path'");
  }
  std::vector<ManifestEntry> out;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::stringstream ss(line);
    ManifestEntry e;
    std::string extra;
    if (!std::getline(ss, e.split, ',') || !std::getline(ss, e.image_path, ',') || !std::getline(ss, e.mask_path, ',') ||
        std::getline(ss, extra, ',')) {
      throw IoError(path.string() + ":" + std::to_string(lineno) + ": expected 3 fields");
    }
    if (e.split != "train" && e.split != "val" && e.split != "test") {
      throw IoError(path.string() + ":" + std::to_string(lineno) + ": unknown split '" + e.split + "'");
    }
    out.push_back(std::move(e));
  }
  return out;
}

inline SegSample load_entry(const fs::path& base, const ManifestEntry& e) {
  const auto img = io::read_pgm(base / e.image_path);
  SegSample s;
  s.height = img.height;
  s.width = img.width;
  s.image.reserve(img.pixels.size());
  for (auto p : img.pixels) s.image.push_back(static_cast<float>(p) / 255.0f);
  s.mask = load_mask(base / e.mask_path, kNumClasses);
  if (s.mask.height != s.height || s.mask.width != s.width) {
    throw IoError(e.mask_path + ": mask extents differ from image " + e.image_path);
  }
  return s;
}

/// All samples of one split, resized to `size` x `size` when needed.
inline std::vector<SegSample> load_split(const fs::path& manifest, const std::string& split, std::size_t size) {
  const auto base = manifest.parent_path();
  std::vector<SegSample> out;
  for (const auto& e : read_manifest(manifest)) {
    if (e.split == split) out.push_back(resize_sample(load_entry(base, e), size));
  }
  return out;
}

}  // namespace cfp::data
