#pragma once

// IDNW tensor container. Layout (all integers little-endian):
//
//   "IDNW"                 4 bytes
//   version                u32 (= 1)
//   tensor count           u64
//   per tensor:            u32 name length, UTF-8 name,
//                          u32 rank, rank x u64 dims,
//                          u64 absolute byte offset of the data
//   data blob              IEEE-754 binary32, little-endian
//
// Records are written in name order and data is packed in the same order, so
// the encoding of a given map is unique. See docs/idnw.md.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "idn/tensor.hpp"

namespace idn {

class WeightFileError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using TensorMap = std::map<std::string, Tensor>;

inline constexpr std::uint32_t kIdnwVersion = 1;
inline constexpr std::size_t kIdnwMaxRank = 4;

namespace detail {

class ByteWriter {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float f) { u32(std::bit_cast<std::uint32_t>(f)); }
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  std::vector<std::uint8_t>& buffer() { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  ByteReader(std::span<const std::uint8_t> data, const std::string& what) : data_(data), what_(what) {}

  void need(std::uint64_t n) const {
    if (n > data_.size() - pos_) fail("truncated at byte " + std::to_string(pos_));
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(data_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(data_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(data_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  float f32_at(std::size_t off) const {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(data_[off + i]) << (8 * i);
    return std::bit_cast<float>(v);
  }
  std::size_t pos() const { return pos_; }
  std::size_t size() const { return data_.size(); }
  [[noreturn]] void fail(const std::string& why) const { throw WeightFileError(what_ + ": " + why); }

 private:
  std::span<const std::uint8_t> data_;
  std::string what_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<std::uint8_t> encode_idnw(const TensorMap& tensors) {
  // Header size first, so offsets can be absolute.
  std::uint64_t header = 4 + 4 + 8;
  for (const auto& [name, t] : tensors) {
    if (name.empty()) throw WeightFileError("tensor names must be non-empty");
    header += 4 + name.size() + 4 + 8 * kIdnwMaxRank + 8;
  }
  detail::ByteWriter w;
  w.bytes("IDNW", 4);
  w.u32(kIdnwVersion);
  w.u64(tensors.size());
  std::uint64_t offset = header;
  for (const auto& [name, t] : tensors) {
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.bytes(name.data(), name.size());
    w.u32(static_cast<std::uint32_t>(kIdnwMaxRank));
    const Dims d = t.dims();
    for (std::size_t v : {d.n, d.c, d.h, d.w}) w.u64(v);
    w.u64(offset);
    offset += 4ULL * t.size();
  }
  for (const auto& [_, t] : tensors) {
    for (float f : t.values()) w.f32(f);
  }
  return std::move(w.buffer());
}

// Validates the whole file before returning anything. Ranks below 4 are
// padded with trailing unit dims.
inline TensorMap decode_idnw(std::span<const std::uint8_t> bytes, const std::string& what = "IDNW data") {
  detail::ByteReader r(bytes, what);
  if (r.str(4) != "IDNW") r.fail("bad magic (not an IDNW file)");
  const std::uint32_t version = r.u32();
  if (version != kIdnwVersion) r.fail("unsupported version " + std::to_string(version));
  const std::uint64_t count = r.u64();
  // Each record takes at least 24 bytes; reject counts the file cannot hold.
  if (count > r.size() / 24) r.fail("tensor count " + std::to_string(count) + " exceeds file size");

  struct Record {
    std::string name;
    Dims dims;
    std::uint64_t offset, bytes;
  };
  std::vector<Record> recs;
  recs.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::uint32_t len = r.u32();
    if (len == 0) r.fail("record " + std::to_string(i) + " has an empty name");
    Record rec{r.str(len), {}, 0, 0};
    const std::uint32_t rank = r.u32();
    if (rank == 0 || rank > kIdnwMaxRank) r.fail("tensor '" + rec.name + "' has unsupported rank " + std::to_string(rank));
    std::uint64_t dims[kIdnwMaxRank] = {1, 1, 1, 1};
    std::uint64_t elems = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      dims[k] = r.u64();
      if (dims[k] != 0 && elems > (r.size() / 4) / dims[k]) r.fail("tensor '" + rec.name + "' dims exceed file size");
      elems *= dims[k];
    }
    rec.dims = {dims[0], dims[1], dims[2], dims[3]};
    rec.offset = r.u64();
    rec.bytes = 4 * elems;
    recs.push_back(std::move(rec));
  }
  const std::uint64_t header_end = r.pos();
  std::vector<const Record*> by_offset;
  for (const auto& rec : recs) {
    if (rec.offset < header_end || rec.offset > r.size() || rec.bytes > r.size() - rec.offset) {
      r.fail("tensor '" + rec.name + "' data lies outside the file");
    }
    by_offset.push_back(&rec);
  }
  std::sort(by_offset.begin(), by_offset.end(), [](const Record* a, const Record* b) { return a->offset < b->offset; });
  for (std::size_t i = 1; i < by_offset.size(); ++i) {
    if (by_offset[i - 1]->offset + by_offset[i - 1]->bytes > by_offset[i]->offset) {
      r.fail("tensors '" + by_offset[i - 1]->name + "' and '" + by_offset[i]->name + "' overlap");
    }
  }
  TensorMap out;
  for (const auto& rec : recs) {
    Tensor t(rec.dims);
    for (std::size_t k = 0; k < t.size(); ++k) t[k] = r.f32_at(rec.offset + 4 * k);
    if (!out.emplace(rec.name, std::move(t)).second) r.fail("duplicate tensor name '" + rec.name + "'");
  }
  return out;
}

inline void save_idnw(const std::string& path, const TensorMap& tensors) {
  const auto bytes = encode_idnw(tensors);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw WeightFileError("cannot write '" + path + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw WeightFileError("failed writing '" + path + "'");
}

inline TensorMap load_idnw(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw WeightFileError("cannot open weight file '" + path + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_idnw(bytes, path);
}

// Text (e.g. an architecture JSON) stored as a (len, 1, 1, 1) tensor of byte values.
inline void put_text(TensorMap& m, const std::string& name, const std::string& text) {
  Tensor t({text.size(), 1, 1, 1});
  for (std::size_t i = 0; i < text.size(); ++i) t[i] = static_cast<float>(static_cast<unsigned char>(text[i]));
  m[name] = std::move(t);
}

inline std::string get_text(const TensorMap& m, const std::string& name) {
  auto it = m.find(name);
  if (it == m.end()) throw WeightFileError("weight file has no '" + name + "' entry");
  std::string s;
  s.reserve(it->second.size());
  for (float f : it->second.values()) {
    if (!(f >= 0 && f <= 255) || f != static_cast<float>(static_cast<int>(f))) {
      throw WeightFileError("'" + name + "' does not hold byte values");
    }
    s.push_back(static_cast<char>(static_cast<unsigned char>(f)));
  }
  return s;
}

}  // namespace idn
