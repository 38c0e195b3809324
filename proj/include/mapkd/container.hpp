// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "mapkd/grid4.hpp"

// Little-endian binary container shared by dataset and checkpoint files:
// 4-byte magic, u32 version, payload, trailing CRC-32 over everything that
// precedes it. Readers verify the CRC before touching the payload, so a
// truncated or corrupted file is rejected instead of misparsed.

namespace mapkd::container {

class ContainerError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

inline std::uint32_t crc32_update(std::uint32_t crc, const std::uint8_t* p, std::size_t n) {
  static const auto table = [] {
    std::array<std::uint32_t, 256> t{};
    for (std::uint32_t i = 0; i < 256; ++i) {
      std::uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xedb88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  crc ^= 0xffffffffu;
  for (std::size_t i = 0; i < n; ++i) crc = table[(crc ^ p[i]) & 0xffu] ^ (crc >> 8);
  return crc ^ 0xffffffffu;
}

/// Append-only byte buffer with the container's primitive encodings.
class Writer {
  std::vector<std::uint8_t> buf_;

public:
  Writer() = default;
  Writer(const char magic[4], std::uint32_t version) {
    raw(magic, 4);
    u32(version);
  }

  const std::vector<std::uint8_t>& bytes() const { return buf_; }

  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void i64(std::int64_t v) { u64(static_cast<std::uint64_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str(const std::string& s) {
    u64(s.size());
    raw(s.data(), s.size());
  }
  void f64_array(const std::vector<double>& v) {
    u64(v.size());
    for (double x : v) f64(x);
  }
  void i32_array(const std::vector<std::int32_t>& v) {
    u64(v.size());
    for (std::int32_t x : v) u32(static_cast<std::uint32_t>(x));
  }
  void grid(const Grid4& g) {
    for (auto d : g.shape()) i64(d);
    f64_array(g.values());
  }
  /// Length-prefixed nested record.
  void block(const Writer& w) {
    u64(w.buf_.size());
    raw(w.buf_.data(), w.buf_.size());
  }

  /// Appends the trailing CRC and writes the whole container to disk.
  void finish(const std::filesystem::path& path) {
    const std::uint32_t crc = crc32_update(0, buf_.data(), buf_.size());
    u32(crc);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ContainerError("container: cannot open " + path.string() + " for writing");
    out.write(reinterpret_cast<const char*>(buf_.data()), static_cast<std::streamsize>(buf_.size()));
    out.close();
    if (!out) throw ContainerError("container: write failed for " + path.string());
    buf_.resize(buf_.size() - 4);  // allow reuse / inspection without the CRC
  }
};

class Reader {
  std::vector<std::uint8_t> buf_;
  std::size_t pos_ = 0;
  std::size_t end_ = 0;  // payload end (start of trailing CRC)

  void need(std::size_t n) const {
    if (n > end_ || pos_ > end_ - n) throw ContainerError("container: truncated record");
  }

public:
  Reader(const std::filesystem::path& path, const char magic[4], std::uint32_t expect_version) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ContainerError("container: cannot open " + path.string());
    in.seekg(0, std::ios::end);
    const auto size = static_cast<std::size_t>(in.tellg());
    in.seekg(0);
    if (size < 12) throw ContainerError("container: file too small: " + path.string());
    buf_.resize(size);
    in.read(reinterpret_cast<char*>(buf_.data()), static_cast<std::streamsize>(size));
    if (!in) throw ContainerError("container: read failed: " + path.string());
    end_ = size - 4;
    std::uint32_t stored = 0;
    for (int i = 0; i < 4; ++i)
      stored |= static_cast<std::uint32_t>(buf_[end_ + static_cast<std::size_t>(i)]) << (8 * i);
    const std::uint32_t actual = crc32_update(0, buf_.data(), end_);
    if (stored != actual)
      throw ContainerError("container: CRC mismatch in " + path.string() +
                           " (file is corrupt or truncated)");
    if (std::memcmp(buf_.data(), magic, 4) != 0)
      throw ContainerError("container: bad magic in " + path.string());
    pos_ = 4;
    const std::uint32_t ver = u32();
    if (ver != expect_version)
      throw ContainerError("container: unsupported version " + std::to_string(ver) + " in " +
                           path.string());
  }

  bool at_end() const { return pos_ == end_; }

  std::uint8_t u8() {
    need(1);
    return buf_[pos_++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(buf_[pos_ + static_cast<std::size_t>(i)]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= static_cast<std::uint64_t>(buf_[pos_ + static_cast<std::size_t>(i)]) << (8 * i);
    pos_ += 8;
    return v;
  }
  std::int64_t i64() { return static_cast<std::int64_t>(u64()); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str() {
    const std::uint64_t n = u64();
    need(n);
    std::string s(reinterpret_cast<const char*>(buf_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::vector<double> f64_array() {
    const std::uint64_t n = u64();
    need(n * 8);
    std::vector<double> v(n);
    for (std::uint64_t i = 0; i < n; ++i) v[i] = f64();
    return v;
  }
  std::vector<std::int32_t> i32_array() {
    const std::uint64_t n = u64();
    need(n * 4);
    std::vector<std::int32_t> v(n);
    for (std::uint64_t i = 0; i < n; ++i) v[i] = static_cast<std::int32_t>(u32());
    return v;
  }
  Grid4 grid() {
    Shape4 s;
    for (auto& d : s) d = i64();
    auto vals = f64_array();
    return Grid4::from_values(s, std::move(vals));
  }
  /// Enters a length-prefixed record; returns its declared length.
  std::uint64_t block_len() {
    const std::uint64_t n = u64();
    need(n);
    return n;
  }
};

}  // namespace mapkd::container
