#pragma once

// Flat binary container of named f32 tensors:
//   "DSPM1\n"
//   per entry: u32 name length, UTF-8 name, u32 rank, u32 extents..., f32 payload
// All integers and floats little-endian.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "dspm/error.hpp"
#include "dspm/tensor.hpp"

namespace dspm {

struct NamedTensor {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_f32(std::string& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

class ByteReader {
 public:
  ByteReader(std::string path, std::string bytes) : path_(std::move(path)), bytes_(std::move(bytes)) {}

  bool done() const { return pos_ >= bytes_.size(); }
  std::size_t pos() const { return pos_; }

  std::uint32_t u32() {
    need(4, "truncated integer");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }

  float f32() { return std::bit_cast<float>(u32()); }

  std::string take(std::size_t n, const char* what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  [[noreturn]] void fail(const std::string& what) const { throw ParseError(path_, pos_, what); }

 private:
  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n) fail(what);
  }

  std::string path_;
  std::string bytes_;
  std::size_t pos_ = 0;
};

inline std::string read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError(path, 0, "cannot open file");
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

// Writes via a temporary sibling and rename so readers never see a partial file.
inline void write_file_atomic(const std::string& path, const std::string& bytes) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace detail

inline constexpr char kCheckpointMagic[] = "DSPM1\n";

inline std::string encode_checkpoint(const std::vector<NamedTensor>& entries) {
  std::string out(kCheckpointMagic);
  for (const auto& e : entries) {
    if (numel(e.shape) != e.values.size()) throw DimensionError("checkpoint: entry " + e.name + " has inconsistent shape");
    detail::put_u32(out, static_cast<std::uint32_t>(e.name.size()));
    out += e.name;
    detail::put_u32(out, static_cast<std::uint32_t>(e.shape.size()));
    for (auto d : e.shape) detail::put_u32(out, static_cast<std::uint32_t>(d));
    for (float v : e.values) detail::put_f32(out, v);
  }
  return out;
}

inline std::vector<NamedTensor> decode_checkpoint(const std::string& path, std::string bytes) {
  detail::ByteReader r(path, std::move(bytes));
  if (r.take(6, "missing header") != kCheckpointMagic) throw ParseError(path, 0, "bad magic, expected DSPM1");
  std::vector<NamedTensor> entries;
  while (!r.done()) {
    NamedTensor e;
    const std::uint32_t len = r.u32();
    e.name = r.take(len, "truncated name");
    const std::uint32_t rank = r.u32();
    if (rank > 8) r.fail("implausible rank " + std::to_string(rank));
    for (std::uint32_t i = 0; i < rank; ++i) e.shape.push_back(r.u32());
    const std::size_t n = numel(e.shape);
    e.values.resize(n);
    for (std::size_t i = 0; i < n; ++i) e.values[i] = r.f32();
    entries.push_back(std::move(e));
  }
  return entries;
}

inline void save_checkpoint(const std::string& path, const std::vector<NamedTensor>& entries) {
  detail::write_file_atomic(path, encode_checkpoint(entries));
}

inline std::vector<NamedTensor> load_checkpoint(const std::string& path) {
  return decode_checkpoint(path, detail::read_file_bytes(path));
}

}  // namespace dspm
