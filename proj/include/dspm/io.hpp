#pragma once

// Portable float maps (PFM) and 8-bit PNG images.

#include <png.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cctype>
#include <cstring>
#include <string>
#include <vector>

#include "dspm/checkpoint.hpp"
#include "dspm/error.hpp"

namespace dspm {

// Row-major, top row first, channels interleaved.
struct FloatMap {
  std::size_t width = 0, height = 0, channels = 1;
  std::vector<float> data;
};

inline std::string encode_pfm(const FloatMap& m) {
  if (m.channels != 1 && m.channels != 3) throw UsageError("pfm: channels must be 1 or 3");
  if (m.data.size() != m.width * m.height * m.channels) throw DimensionError("pfm: data size mismatch");
  std::string s = (m.channels == 1 ? "Pf\n" : "PF\n") + std::to_string(m.width) + " " + std::to_string(m.height) +
                  "\n-1.0\n";
  const std::size_t row = m.width * m.channels;
  s.reserve(s.size() + m.data.size() * 4);
  for (std::size_t r = m.height; r-- > 0;) {
    for (std::size_t i = 0; i < row; ++i) {
      std::uint32_t u = std::bit_cast<std::uint32_t>(m.data[r * row + i]);
      for (int b = 0; b < 4; ++b) s.push_back(static_cast<char>((u >> (8 * b)) & 0xFF));
    }
  }
  return s;
}

inline FloatMap decode_pfm(const std::string& path, const std::string& bytes) {
  std::size_t pos = 0;
  auto token = [&]() {
    while (pos < bytes.size() && std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    const std::size_t start = pos;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    if (start == pos) throw ParseError(path, start, "truncated header");
    return std::pair<std::string, std::size_t>(bytes.substr(start, pos - start), start);
  };
  FloatMap m;
  const auto [magic, at0] = token();
  if (magic == "Pf")
    m.channels = 1;
  else if (magic == "PF")
    m.channels = 3;
  else
    throw ParseError(path, at0, "not a float map (magic '" + magic + "')");
  auto integer = [&]() {
    const auto [tok, at] = token();
    std::size_t v = 0;
    for (char c : tok) {
      if (c < '0' || c > '9' || v > (1u << 24)) throw ParseError(path, at, "bad dimension '" + tok + "'");
      v = v * 10 + static_cast<std::size_t>(c - '0');
    }
    if (v == 0) throw ParseError(path, at, "zero dimension");
    return v;
  };
  m.width = integer();
  m.height = integer();
  const auto [scale_tok, scale_at] = token();
  double scale = 0.0;
  try {
    std::size_t used = 0;
    scale = std::stod(scale_tok, &used);
    if (used != scale_tok.size()) throw std::invalid_argument("trailing");
  } catch (const std::exception&) {
    throw ParseError(path, scale_at, "bad scale '" + scale_tok + "'");
  }
  if (scale == 0.0 || !std::isfinite(scale)) throw ParseError(path, scale_at, "scale must be non-zero");
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos])))
    throw ParseError(path, pos, "missing header terminator");
  ++pos;
  const bool little = scale < 0.0;
  const std::size_t row = m.width * m.channels;
  const std::size_t need = row * m.height * 4;
  if (bytes.size() - pos < need) throw ParseError(path, bytes.size(), "truncated payload");
  m.data.resize(row * m.height);
  for (std::size_t r = 0; r < m.height; ++r) {
    const std::size_t dst_row = m.height - 1 - r;
    for (std::size_t i = 0; i < row; ++i) {
      const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + pos + (r * row + i) * 4);
      std::uint32_t u = little ? (std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8 | std::uint32_t(p[2]) << 16 |
                                  std::uint32_t(p[3]) << 24)
                               : (std::uint32_t(p[3]) | std::uint32_t(p[2]) << 8 | std::uint32_t(p[1]) << 16 |
                                  std::uint32_t(p[0]) << 24);
      m.data[dst_row * row + i] = std::bit_cast<float>(u);
    }
  }
  return m;
}

inline void write_pfm(const std::string& path, const FloatMap& m) { detail::write_file_atomic(path, encode_pfm(m)); }

inline FloatMap read_pfm(const std::string& path) { return decode_pfm(path, detail::read_file_bytes(path)); }

// 8-bit image, row-major, channels interleaved (1 = gray, 3 = RGB).
struct Image8 {
  std::size_t width = 0, height = 0, channels = 3;
  std::vector<std::uint8_t> data;
};

inline void write_png(const std::string& path, const Image8& img) {
  if (img.channels != 1 && img.channels != 3) throw UsageError("png: channels must be 1 or 3");
  if (img.data.size() != img.width * img.height * img.channels) throw DimensionError("png: data size mismatch");
  png_image pi;
  std::memset(&pi, 0, sizeof pi);
  pi.version = PNG_IMAGE_VERSION;
  pi.width = static_cast<png_uint_32>(img.width);
  pi.height = static_cast<png_uint_32>(img.height);
  pi.format = img.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&pi, nullptr, &size, 0, img.data.data(), 0, nullptr))
    throw Error("png: encode failed for " + path + ": " + pi.message);
  std::string buf(size, '\0');
  if (!png_image_write_to_memory(&pi, buf.data(), &size, 0, img.data.data(), 0, nullptr))
    throw Error("png: encode failed for " + path + ": " + pi.message);
  buf.resize(size);
  detail::write_file_atomic(path, buf);
}

// Always returns RGB.
inline Image8 read_png(const std::string& path) {
  const std::string bytes = detail::read_file_bytes(path);
  png_image pi;
  std::memset(&pi, 0, sizeof pi);
  pi.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&pi, bytes.data(), bytes.size()))
    throw ParseError(path, 0, std::string("png: ") + pi.message);
  pi.format = PNG_FORMAT_RGB;
  Image8 img;
  img.width = pi.width;
  img.height = pi.height;
  img.channels = 3;
  img.data.resize(PNG_IMAGE_SIZE(pi));
  if (!png_image_finish_read(&pi, nullptr, img.data.data(), 0, nullptr)) {
    png_image_free(&pi);
    throw ParseError(path, 0, std::string("png: ") + pi.message);
  }
  return img;
}

}  // namespace dspm
