// Copyright 2026 The knz Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//    http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

// Binary tensor container. Layout, all integers little-endian:
//
//   "KTNZ" | version u32 | tensor count u32
//   per tensor: name length u16 | UTF-8 name | dtype u8 (1 = f32, 2 = f64)
//               | rank u8 | dims u64 x rank | row-major raw values
//   CRC-32 (IEEE) u32 of every preceding byte

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <set>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

namespace knz {

inline constexpr char kArchiveMagic[4] = {'K', 'T', 'N', 'Z'};
inline constexpr std::uint32_t kArchiveVersion = 1;

enum class DType : std::uint8_t { kF32 = 1, kF64 = 2 };

struct Tensor {
  std::string name;
  std::vector<std::uint64_t> dims;
  std::variant<std::vector<float>, std::vector<double>> data;

  DType dtype() const { return data.index() == 0 ? DType::kF32 : DType::kF64; }
  std::uint64_t element_count() const {
    std::uint64_t n = 1;
    for (auto d : dims) n *= d;
    return n;
  }
  friend bool operator==(const Tensor&, const Tensor&) = default;
};

class ArchiveError : public std::runtime_error {
 public:
  enum class Kind { kIo, kBadMagic, kBadVersion, kTruncated, kCrcMismatch, kDuplicateName, kFormat };

  ArchiveError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

inline std::uint32_t crc32_ieee(const std::uint8_t* data, std::size_t n) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  while (n > 0) {
    const uInt chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    crc = ::crc32(crc, data, chunk);
    data += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

namespace detail {

class ByteWriter {
 public:
  template <class U>
  void put(U v) {
    static_assert(std::is_unsigned_v<U>);
    for (std::size_t i = 0; i < sizeof(U); ++i) bytes.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void put_bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    bytes.insert(bytes.end(), b, b + n);
  }
  std::vector<std::uint8_t> bytes;
};

class ByteReader {
 public:
  ByteReader(const std::vector<std::uint8_t>& b, std::size_t begin, std::size_t end)
      : b_(b), pos_(begin), end_(end) {}

  bool has(std::size_t n) const { return end_ - pos_ >= n; }
  std::size_t remaining() const { return end_ - pos_; }

  template <class U>
  U get() {
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(b_[pos_ + i]) << (8 * i));
    pos_ += sizeof(U);
    return v;
  }
  const std::uint8_t* take(std::size_t n) {
    const std::uint8_t* p = b_.data() + pos_;
    pos_ += n;
    return p;
  }

 private:
  const std::vector<std::uint8_t>& b_;
  std::size_t pos_, end_;
};

struct ParseOutcome {
  std::vector<Tensor> tensors;
  bool truncated = false;
  std::string truncated_at;  // description of the tensor being read
  std::size_t consumed = 0;  // offset just past the last complete record
};

// Walks the tensor records in [12, end). Stops at the first record that
// needs more bytes than are left.
inline ParseOutcome parse_records(const std::vector<std::uint8_t>& bytes, std::size_t end, std::uint32_t count) {
  ParseOutcome out;
  ByteReader r(bytes, 12, end);
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string label = "#" + std::to_string(i);
    auto fail = [&] {
      out.truncated = true;
      out.truncated_at = label;
      return out;
    };
    if (!r.has(2)) return fail();
    const auto name_len = r.get<std::uint16_t>();
    if (!r.has(name_len)) return fail();
    const auto* np = r.take(name_len);
    Tensor t;
    t.name.assign(reinterpret_cast<const char*>(np), name_len);
    label = "'" + t.name + "'";
    if (!r.has(2)) return fail();
    const auto tag = r.get<std::uint8_t>();
    const auto rank = r.get<std::uint8_t>();
    if (tag != 1 && tag != 2) {
      throw ArchiveError(ArchiveError::Kind::kFormat, "archive: tensor " + label + " has unknown dtype tag " +
                                                          std::to_string(tag));
    }
    if (!r.has(8ULL * rank)) return fail();
    std::uint64_t n = 1;
    bool overflow = false;
    for (std::uint8_t k = 0; k < rank; ++k) {
      const auto d = r.get<std::uint64_t>();
      t.dims.push_back(d);
      if (d != 0 && n > UINT64_MAX / d) overflow = true;
      n *= d;
    }
    const std::uint64_t width = tag == 1 ? 4 : 8;
    if (overflow || n > r.remaining() / width) return fail();
    if (tag == 1) {
      std::vector<float> v(n);
      for (auto& x : v) x = std::bit_cast<float>(r.get<std::uint32_t>());
      t.data = std::move(v);
    } else {
      std::vector<double> v(n);
      for (auto& x : v) x = std::bit_cast<double>(r.get<std::uint64_t>());
      t.data = std::move(v);
    }
    out.tensors.push_back(std::move(t));
  }
  out.consumed = end - r.remaining();
  if (r.remaining() != 0) out.truncated_at = std::to_string(r.remaining()) + " trailing bytes";
  return out;
}

}  // namespace detail

/// Serializes tensors into the archive byte layout.
inline std::vector<std::uint8_t> encode_archive(const std::vector<Tensor>& tensors) {
  std::set<std::string> seen;
  detail::ByteWriter w;
  w.put_bytes(kArchiveMagic, 4);
  w.put<std::uint32_t>(kArchiveVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(tensors.size()));
  for (const Tensor& t : tensors) {
    if (!seen.insert(t.name).second)
      throw ArchiveError(ArchiveError::Kind::kDuplicateName, "archive: duplicate tensor name '" + t.name + "'");
    if (t.name.size() > UINT16_MAX)
      throw ArchiveError(ArchiveError::Kind::kFormat, "archive: tensor name too long");
    if (t.dims.size() > UINT8_MAX) throw ArchiveError(ArchiveError::Kind::kFormat, "archive: rank too large");
    const std::size_t n = std::visit([](const auto& v) { return v.size(); }, t.data);
    if (n != t.element_count())
      throw ArchiveError(ArchiveError::Kind::kFormat,
                         "archive: tensor '" + t.name + "' holds " + std::to_string(n) + " values for its dims");
    w.put<std::uint16_t>(static_cast<std::uint16_t>(t.name.size()));
    w.put_bytes(t.name.data(), t.name.size());
    w.put<std::uint8_t>(static_cast<std::uint8_t>(t.dtype()));
    w.put<std::uint8_t>(static_cast<std::uint8_t>(t.dims.size()));
    for (auto d : t.dims) w.put<std::uint64_t>(d);
    if (const auto* f = std::get_if<std::vector<float>>(&t.data)) {
      for (float x : *f) w.put<std::uint32_t>(std::bit_cast<std::uint32_t>(x));
    } else {
      for (double x : std::get<std::vector<double>>(t.data)) w.put<std::uint64_t>(std::bit_cast<std::uint64_t>(x));
    }
  }
  w.put<std::uint32_t>(crc32_ieee(w.bytes.data(), w.bytes.size()));
  return std::move(w.bytes);
}

/// Inverse of encode_archive. Header problems are reported first (bad magic,
/// bad version), then integrity: a file whose records run past its end is
/// reported as truncated, any other checksum failure as a CRC mismatch.
inline std::vector<Tensor> decode_archive(const std::vector<std::uint8_t>& bytes) {
  using K = ArchiveError::Kind;
  if (bytes.size() >= 4 && !std::equal(kArchiveMagic, kArchiveMagic + 4, bytes.begin()))
    throw ArchiveError(K::kBadMagic, "archive: bad magic");
  if (bytes.size() < 8) throw ArchiveError(K::kTruncated, "archive: truncated in header");
  detail::ByteReader hdr(bytes, 4, bytes.size());
  const auto version = hdr.get<std::uint32_t>();
  if (version != kArchiveVersion)
    throw ArchiveError(K::kBadVersion, "archive: unsupported version " + std::to_string(version));
  if (bytes.size() < 16) throw ArchiveError(K::kTruncated, "archive: truncated in header");
  const auto count = hdr.get<std::uint32_t>();

  const std::size_t body_end = bytes.size() - 4;
  detail::ByteReader tail(bytes, body_end, bytes.size());
  const auto stored = tail.get<std::uint32_t>();
  if (stored != crc32_ieee(bytes.data(), body_end)) {
    const detail::ParseOutcome probe = detail::parse_records(bytes, bytes.size(), count);
    if (probe.truncated)
      throw ArchiveError(K::kTruncated, "archive: truncated in tensor " + probe.truncated_at);
    if (probe.consumed + 4 > bytes.size()) throw ArchiveError(K::kTruncated, "archive: truncated in checksum");
    throw ArchiveError(K::kCrcMismatch, "archive: CRC mismatch");
  }
  detail::ParseOutcome parsed = detail::parse_records(bytes, body_end, count);
  if (parsed.truncated || !parsed.truncated_at.empty())
    throw ArchiveError(K::kFormat, "archive: malformed records near " + parsed.truncated_at);
  std::set<std::string> seen;
  for (const Tensor& t : parsed.tensors)
    if (!seen.insert(t.name).second)
      throw ArchiveError(K::kDuplicateName, "archive: duplicate tensor name '" + t.name + "'");
  return std::move(parsed.tensors);
}

/// Writes via a temporary file and rename so readers never see a partial archive.
inline void archive_write(const std::filesystem::path& path, const std::vector<Tensor>& tensors) {
  const std::vector<std::uint8_t> bytes = encode_archive(tensors);
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ArchiveError(ArchiveError::Kind::kIo, "archive: cannot open " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw ArchiveError(ArchiveError::Kind::kIo, "archive: write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw ArchiveError(ArchiveError::Kind::kIo, "archive: rename to " + path.string() + ": " + ec.message());
}

inline std::vector<Tensor> archive_read(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ArchiveError(ArchiveError::Kind::kIo, "archive: cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_archive(bytes);
}

}  // namespace knz
