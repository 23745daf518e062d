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

// CFPT v1 tensor records and CFPC checkpoint containers.
//
//   CFPT: "CFPT" | u8 version=1 | u8 dtype (0 f32, 1 f64, 2 u8) | u8 ndim |
//         u8 pad=0 | ndim x u32 LE extents | row-major LE payload
//   CFPC: "CFPC" | u8 version=1 | u32 LE count |
//         count x (u16 LE name length | UTF-8 name | CFPT record)

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "cfp/core/error.hpp"
#include "cfp/core/tensor.hpp"

namespace cfp::io {

enum class DType : std::uint8_t { f32 = 0, f64 = 1, u8 = 2 };

inline std::size_t dtype_size(DType d) { return d == DType::f64 ? 8 : d == DType::f32 ? 4 : 1; }

template <typename T>
constexpr DType dtype_of() {
  if constexpr (std::is_same_v<T, float>) return DType::f32;
  if constexpr (std::is_same_v<T, double>) return DType::f64;
  if constexpr (std::is_same_v<T, std::uint8_t>) return DType::u8;
}

/// A decoded CFPT record; payload stays in little-endian byte form.
struct RawTensor {
  DType dtype = DType::f32;
  Shape shape;
  std::vector<std::uint8_t> payload;

  std::size_t count() const { return numel(shape); }
};

namespace detail {

template <typename U>
void put_le(std::ostream& os, U value) {
  std::array<char, sizeof(U)> bytes;
  for (std::size_t i = 0; i < sizeof(U); ++i) bytes[i] = static_cast<char>((value >> (8 * i)) & 0xff);
  os.write(bytes.data(), bytes.size());
}

template <typename U>
U get_le(std::istream& is, const char* what) {
  std::array<unsigned char, sizeof(U)> bytes;
  if (!is.read(reinterpret_cast<char*>(bytes.data()), bytes.size())) {
    throw IoError(std::string("truncated record while reading ") + what);
  }
  U value = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) value |= static_cast<U>(bytes[i]) << (8 * i);
  return value;
}

template <typename T>
void append_le(std::vector<std::uint8_t>& out, T value) {
  using Bits = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::conditional_t<sizeof(T) == 4, std::uint32_t,
                                                                                   std::uint8_t>>;
  const auto bits = std::bit_cast<Bits>(value);
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<std::uint8_t>((bits >> (8 * i)) & 0xff));
}

template <typename T>
T read_le(const std::uint8_t* p) {
  using Bits = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::conditional_t<sizeof(T) == 4, std::uint32_t,
                                                                                   std::uint8_t>>;
  Bits bits = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) bits |= static_cast<Bits>(p[i]) << (8 * i);
  return std::bit_cast<T>(bits);
}

}  // namespace detail

template <typename T>
RawTensor to_raw(const Shape& shape, std::span<const T> values) {
  RawTensor raw{dtype_of<T>(), shape, {}};
  raw.payload.reserve(values.size() * sizeof(T));
  for (T v : values) detail::append_le(raw.payload, v);
  return raw;
}

template <typename T>
RawTensor to_raw(const Tensor<T>& t) {
  return to_raw<T>(t.shape(), t.data());
}

/// Decodes the payload into T; f32/f64 records convert to either float type.
template <typename T>
std::vector<T> values_as(const RawTensor& raw) {
  std::vector<T> out(raw.count());
  const std::uint8_t* p = raw.payload.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    switch (raw.dtype) {
      case DType::f32: out[i] = static_cast<T>(detail::read_le<float>(p + 4 * i)); break;
      case DType::f64: out[i] = static_cast<T>(detail::read_le<double>(p + 8 * i)); break;
      case DType::u8: out[i] = static_cast<T>(p[i]); break;
    }
  }
  return out;
}

inline void write_cfpt(std::ostream& os, const RawTensor& raw) {
  if (raw.shape.empty() || raw.shape.size() > 255) throw UsageError("CFPT: rank must be 1..255");
  if (raw.payload.size() != raw.count() * dtype_size(raw.dtype)) throw UsageError("CFPT: payload/shape mismatch");
  os.write("CFPT", 4);
  detail::put_le<std::uint8_t>(os, 1);
  detail::put_le<std::uint8_t>(os, static_cast<std::uint8_t>(raw.dtype));
  detail::put_le<std::uint8_t>(os, static_cast<std::uint8_t>(raw.shape.size()));
  detail::put_le<std::uint8_t>(os, 0);
  for (auto e : raw.shape) {
    if (e > 0xffffffffULL) throw UsageError("CFPT: extent exceeds u32");
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(e));
  }
  os.write(reinterpret_cast<const char*>(raw.payload.data()), static_cast<std::streamsize>(raw.payload.size()));
  if (!os) throw IoError("CFPT: write failed");
}

inline RawTensor read_cfpt(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "CFPT", 4) != 0) throw IoError("CFPT: bad magic");
  const auto version = detail::get_le<std::uint8_t>(is, "CFPT version");
  if (version != 1) throw IoError("CFPT: unsupported version " + std::to_string(version));
  const auto dtype = detail::get_le<std::uint8_t>(is, "CFPT dtype");
  if (dtype > 2) throw IoError("CFPT: unknown dtype " + std::to_string(dtype));
  const auto ndim = detail::get_le<std::uint8_t>(is, "CFPT rank");
  detail::get_le<std::uint8_t>(is, "CFPT pad");
  if (ndim == 0) throw IoError("CFPT: rank 0");
  RawTensor raw;
  raw.dtype = static_cast<DType>(dtype);
  for (std::uint8_t i = 0; i < ndim; ++i) {
    const auto e = detail::get_le<std::uint32_t>(is, "CFPT extent");
    if (e == 0) throw IoError("CFPT: zero extent");
    raw.shape.push_back(e);
  }
  raw.payload.resize(raw.count() * dtype_size(raw.dtype));
  if (!is.read(reinterpret_cast<char*>(raw.payload.data()), static_cast<std::streamsize>(raw.payload.size()))) {
    throw IoError("CFPT: truncated payload");
  }
  return raw;
}

inline void save_cfpt(const std::filesystem::path& path, const RawTensor& raw) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  write_cfpt(os, raw);
}

inline RawTensor load_cfpt(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  try {
    return read_cfpt(is);
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Checkpoints

inline void write_cfpc(std::ostream& os, const std::vector<std::pair<std::string, RawTensor>>& entries) {
  os.write("CFPC", 4);
  detail::put_le<std::uint8_t>(os, 1);
  detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(entries.size()));
  for (const auto& [name, raw] : entries) {
    if (name.size() > 0xffff) throw UsageError("CFPC: tensor name too long");
    detail::put_le<std::uint16_t>(os, static_cast<std::uint16_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_cfpt(os, raw);
  }
  if (!os) throw IoError("CFPC: write failed");
}

namespace detail {

inline std::vector<std::pair<std::string, RawTensor>> read_cfpc_body(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "CFPC", 4) != 0) throw IoError("bad magic");
  const auto version = get_le<std::uint8_t>(is, "CFPC version");
  if (version != 1) throw IoError("unsupported version " + std::to_string(version));
  const auto count = get_le<std::uint32_t>(is, "CFPC tensor count");
  std::vector<std::pair<std::string, RawTensor>> entries;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = get_le<std::uint16_t>(is, "CFPC name length");
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw IoError("truncated tensor name");
    entries.emplace_back(std::move(name), read_cfpt(is));
  }
  if (is.peek() != std::char_traits<char>::eof()) throw IoError("trailing bytes after last tensor");
  return entries;
}

}  // namespace detail

inline std::vector<std::pair<std::string, RawTensor>> read_cfpc(std::istream& is) {
  try {
    return detail::read_cfpc_body(is);
  } catch (const IoError& e) {
    throw IoError(std::string("CFPC validation: ") + e.what());
  }
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const NamedParams<T>& params) {
  std::vector<std::pair<std::string, RawTensor>> entries;
  for (const auto& [name, t] : params) entries.emplace_back(name, to_raw(t));
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  write_cfpc(os, entries);
}

/// Loads values into an existing parameter list; names, order-independent,
/// and shapes must match exactly.
template <typename T>
void load_checkpoint(const std::filesystem::path& path, NamedParams<T>& params) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("CFPC validation: cannot open checkpoint " + path.string());
  std::map<std::string, RawTensor> by_name;
  for (auto& [name, raw] : read_cfpc(is)) {
    if (raw.dtype == DType::u8) throw IoError("CFPC validation: tensor '" + name + "' is not floating point");
    by_name.emplace(name, std::move(raw));
  }
  if (by_name.size() != params.size()) {
    throw IoError("CFPC validation: checkpoint has " + std::to_string(by_name.size()) + " tensors, model expects " +
                  std::to_string(params.size()));
  }
  for (auto& [name, t] : params) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw IoError("CFPC validation: missing tensor '" + name + "'");
    if (it->second.shape != t.shape()) {
      throw IoError("CFPC validation: tensor '" + name + "' has shape " + shape_str(it->second.shape) +
                    ", model expects " + shape_str(t.shape()));
    }
    auto values = values_as<T>(it->second);
    std::copy(values.begin(), values.end(), t.mutable_data().begin());
  }
}

// ---------------------------------------------------------------------------
// PGM (P5, maxval 255)

struct GrayImage {
  std::size_t width = 0, height = 0;
  std::vector<std::uint8_t> pixels;
};

inline void write_pgm(const std::filesystem::path& path, const GrayImage& img) {
  if (img.pixels.size() != img.width * img.height) throw UsageError("write_pgm: pixel count mismatch");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << "P5\n" << img.width << ' ' << img.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (!os) throw IoError("write failed for " + path.string());
}

inline GrayImage read_pgm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  auto token = [&]() {
    std::string tok;
    while (true) {
      int c = is.get();
      if (c == EOF) throw IoError(path.string() + ": truncated PGM header");
      if (c == '#') {
        while (c != '\n' && c != EOF) c = is.get();
        continue;
      }
      if (std::isspace(c)) {
        if (!tok.empty()) return tok;
        continue;
      }
      tok.push_back(static_cast<char>(c));
    }
  };
  if (token() != "P5") throw IoError(path.string() + ": not a binary PGM (P5)");
  GrayImage img;
  try {
    img.width = std::stoul(token());
    img.height = std::stoul(token());
    if (std::stoul(token()) != 255) throw IoError(path.string() + ": only maxval 255 is supported");
  } catch (const std::logic_error&) {
    throw IoError(path.string() + ": malformed PGM header");
  }
  img.pixels.resize(img.width * img.height);
  if (!is.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()))) {
    throw IoError(path.string() + ": truncated PGM payload");
  }
  return img;
}

}  // namespace cfp::io
