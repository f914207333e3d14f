#pragma once

// Binary checkpoint layout, all integers little-endian:
//   "TSEG" | u32 version | u64 count |
//   count x { u32 name_len | name | u8 dtype | u32 ndim | u64 dims[ndim] |
//             u8 frozen | raw scalars }
//   | u32 crc32 of every preceding byte
// dtype 1 = float64, 2 = float32.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include <zlib.h>

#include "taseg/error.hpp"
#include "taseg/params.hpp"

namespace taseg {

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline constexpr std::uint8_t dtype_code() { return sizeof(Scalar) == 8 ? 1 : 2; }

class ByteWriter {
 public:
  template <typename T>
  void uint(T v) {
    for (std::size_t i = 0; i < sizeof(T); ++i) bytes.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    bytes.insert(bytes.end(), b, b + n);
  }
  std::vector<std::uint8_t> bytes;
};

class ByteReader {
 public:
  ByteReader(const std::vector<std::uint8_t>& b, std::size_t end) : b_(b), end_(end) {}

  template <typename T>
  T uint() {
    need(sizeof(T));
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(static_cast<T>(b_[pos_ + i]) << (8 * i));
    pos_ += sizeof(T);
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  void need(std::size_t n) const {
    if (n > end_ - pos_) {
      throw CheckpointError(CheckpointError::Kind::Truncated,
                            "checkpoint record runs past the end of the file at byte " + std::to_string(pos_));
    }
  }
  std::size_t pos() const noexcept { return pos_; }

 private:
  const std::vector<std::uint8_t>& b_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

template <typename F>
void put_scalar(ByteWriter& w, F v) {
  if constexpr (sizeof(F) == 8) {
    w.uint(std::bit_cast<std::uint64_t>(static_cast<double>(v)));
  } else {
    w.uint(std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
}

inline std::uint32_t crc32_of(const std::uint8_t* p, std::size_t n) {
  uLong crc = crc32(0L, Z_NULL, 0);
  while (n > 0) {
    const uInt chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    crc = crc32(crc, p, chunk);
    p += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

}  // namespace detail

inline std::vector<std::uint8_t> serialize_checkpoint(const ParamRegistry& reg) {
  detail::ByteWriter w;
  w.raw("TSEG", 4);
  w.uint<std::uint32_t>(kCheckpointVersion);
  w.uint<std::uint64_t>(reg.size());
  for (std::size_t i = 0; i < reg.size(); ++i) {
    const Parameter& p = reg[i];
    w.uint<std::uint32_t>(static_cast<std::uint32_t>(p.name.size()));
    w.raw(p.name.data(), p.name.size());
    w.uint<std::uint8_t>(detail::dtype_code());
    w.uint<std::uint32_t>(static_cast<std::uint32_t>(p.value.ndim()));
    for (std::size_t d : p.value.shape()) w.uint<std::uint64_t>(d);
    w.uint<std::uint8_t>(p.frozen ? 1 : 0);
    for (Scalar v : p.value.data()) detail::put_scalar(w, v);
  }
  w.uint<std::uint32_t>(detail::crc32_of(w.bytes.data(), w.bytes.size()));
  return std::move(w.bytes);
}

/// Parses a checkpoint into a fresh registry. Magic, version and checksum
/// are validated before any record is read.
inline ParamRegistry parse_checkpoint(const std::vector<std::uint8_t>& bytes) {
  using Kind = CheckpointError::Kind;
  if (bytes.size() < 4 || std::memcmp(bytes.data(), "TSEG", 4) != 0) {
    throw CheckpointError(Kind::BadMagic, "not a checkpoint: missing TSEG magic");
  }
  if (bytes.size() < 8 + 8 + 4) throw CheckpointError(Kind::Truncated, "checkpoint shorter than its header");
  detail::ByteReader head(bytes, bytes.size());
  head.str(4);
  const auto version = head.uint<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw CheckpointError(Kind::BadVersion, "unsupported checkpoint version " + std::to_string(version));
  }
  const std::size_t body = bytes.size() - 4;
  detail::ByteReader tail(bytes, bytes.size());
  tail.str(body);
  const auto stored = tail.uint<std::uint32_t>();
  if (stored != detail::crc32_of(bytes.data(), body)) {
    throw CheckpointError(Kind::BadChecksum, "checkpoint checksum mismatch (file corrupted or truncated)");
  }

  detail::ByteReader r(bytes, body);
  r.str(8);
  const auto count = r.uint<std::uint64_t>();
  ParamRegistry reg;
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto len = r.uint<std::uint32_t>();
    std::string name = r.str(len);
    const auto dtype = r.uint<std::uint8_t>();
    if (dtype != 1 && dtype != 2) {
      throw CheckpointError(Kind::Malformed, "parameter '" + name + "' has unknown dtype code " + std::to_string(dtype));
    }
    const auto ndim = r.uint<std::uint32_t>();
    r.need(static_cast<std::size_t>(ndim) * 8);
    Shape shape(ndim);
    for (auto& d : shape) d = r.uint<std::uint64_t>();
    const auto frozen = r.uint<std::uint8_t>();
    if (frozen > 1) throw CheckpointError(Kind::Malformed, "parameter '" + name + "' has a bad frozen flag");
    const std::size_t width = dtype == 1 ? 8 : 4;
    std::size_t n = 1;
    for (std::size_t d : shape) {
      if (d != 0 && n > (body - r.pos()) / d) {
        throw CheckpointError(Kind::Truncated, "parameter '" + name + "' claims more data than the file holds");
      }
      n *= d;
    }
    r.need(n * width);
    Tensor value(shape);
    for (std::size_t j = 0; j < n; ++j) {
      value[j] = dtype == 1 ? static_cast<Scalar>(std::bit_cast<double>(r.uint<std::uint64_t>()))
                            : static_cast<Scalar>(std::bit_cast<float>(r.uint<std::uint32_t>()));
    }
    try {
      reg.add(std::move(name), std::move(value), frozen == 1);
    } catch (const ConfigError& e) {
      throw CheckpointError(Kind::Malformed, e.what());
    }
  }
  if (r.pos() != body) throw CheckpointError(Kind::Malformed, "trailing bytes after the last parameter record");
  return reg;
}

inline void save_checkpoint(const ParamRegistry& reg, const std::string& path) {
  const auto bytes = serialize_checkpoint(reg);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError(CheckpointError::Kind::Io, "cannot write checkpoint '" + path + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError(CheckpointError::Kind::Io, "failed writing checkpoint '" + path + "'");
}

inline ParamRegistry load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(CheckpointError::Kind::Io, "cannot open checkpoint '" + path + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_checkpoint(bytes);
}

/// Copies checkpoint values into `dst`. Both registries must list the same
/// names, shapes and frozen flags.
inline void restore_parameters(ParamRegistry& dst, const ParamRegistry& src) {
  using Kind = CheckpointError::Kind;
  if (dst.size() != src.size()) {
    throw CheckpointError(Kind::Mismatch, "checkpoint holds " + std::to_string(src.size()) +
                                              " parameters, model has " + std::to_string(dst.size()));
  }
  for (std::size_t i = 0; i < dst.size(); ++i) {
    Parameter& p = dst[i];
    const Parameter* q = src.find(p.name);
    if (q == nullptr) throw CheckpointError(Kind::Mismatch, "checkpoint lacks parameter '" + p.name + "'");
    if (q->value.shape() != p.value.shape() || q->frozen != p.frozen) {
      throw CheckpointError(Kind::Mismatch, "parameter '" + p.name + "' differs in shape or frozen flag");
    }
    p.value = q->value;
  }
}

}  // namespace taseg
