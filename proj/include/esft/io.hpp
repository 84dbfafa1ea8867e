// Copyright 2026 The esft-serve Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "esft/error.hpp"

namespace esft::io {

namespace detail {
inline std::uint32_t bswap32(std::uint32_t v) {
  return (v >> 24) | ((v >> 8) & 0xFF00u) | ((v << 8) & 0xFF0000u) | (v << 24);
}
}  // namespace detail

/// Writes floats as little-endian IEEE-754 binary32.
inline void write_f32_le(const std::filesystem::path& path, std::span<const float> values) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(out), ErrorKind::kInput, "cannot open " + path.string() + " for writing");
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size_bytes()));
  } else {
    for (float f : values) {
      const std::uint32_t le = detail::bswap32(std::bit_cast<std::uint32_t>(f));
      out.write(reinterpret_cast<const char*>(&le), sizeof le);
    }
  }
  require(static_cast<bool>(out), ErrorKind::kInput, "write failed: " + path.string());
}

inline std::vector<float> read_f32_le(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::kInput, "cannot open " + path.string());
  in.seekg(0, std::ios::end);
  const auto bytes = static_cast<std::size_t>(in.tellg());
  in.seekg(0);
  require(bytes % 4 == 0, ErrorKind::kInput, path.string() + ": size is not a multiple of 4 bytes");
  std::vector<float> values(bytes / 4);
  in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(bytes));
  require(static_cast<bool>(in), ErrorKind::kInput, "read failed: " + path.string());
  if constexpr (std::endian::native != std::endian::little) {
    for (float& f : values) f = std::bit_cast<float>(detail::bswap32(std::bit_cast<std::uint32_t>(f)));
  }
  return values;
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorKind::kInput, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  require(static_cast<bool>(out), ErrorKind::kInput, "cannot open " + path.string() + " for writing");
  out << text;
}

}  // namespace esft::io
