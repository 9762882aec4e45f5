#pragma once

// "PPW1" named-tensor container.
//
//   magic       4 bytes  "PPW1"
//   count       u32 LE
//   per tensor  u16 LE name length, UTF-8 name bytes,
//               u8 rank, rank x u32 LE dims,
//               prod(dims) x f32 LE, row-major
//
// Used for network weights, pillar tensor dumps, target exports and the
// ground-truth database.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <string>
#include <vector>

#include "pointpillars/core.hpp"

namespace pointpillars {

using TensorMap = std::map<std::string, Tensor>;

namespace container_detail {

inline void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}
inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class Reader {
 public:
  Reader(const std::vector<std::uint8_t>& bytes, std::string source) : bytes_(bytes), source_(std::move(source)) {}

  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw FormatError(source_ + ": truncated container");
  }
  std::uint8_t u8() {
    need(1);
    return bytes_[pos_++];
  }
  std::uint16_t u16() {
    need(2);
    std::uint16_t v = bytes_[pos_] | (bytes_[pos_ + 1] << 8);
    pos_ += 2;
    return v;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  [[nodiscard]] std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::string source_;
  std::size_t pos_ = 0;
};

}  // namespace container_detail

inline std::vector<std::uint8_t> encode_container(const TensorMap& tensors) {
  using namespace container_detail;
  std::vector<std::uint8_t> out = {'P', 'P', 'W', '1'};
  put_u32(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    if (name.size() > 0xFFFF) throw FormatError("container: tensor name too long: " + name.substr(0, 32));
    if (t.shape.size() > 0xFF) throw FormatError("container: rank too large for " + name);
    if (Tensor::numel(t.shape) != t.data.size())
      throw ShapeError("container: tensor " + name + " data does not match shape " + shape_string(t.shape));
    put_u16(out, static_cast<std::uint16_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    out.push_back(static_cast<std::uint8_t>(t.shape.size()));
    for (auto d : t.shape) put_u32(out, d);
    for (float f : t.data) put_u32(out, std::bit_cast<std::uint32_t>(f));
  }
  return out;
}

inline TensorMap decode_container(const std::vector<std::uint8_t>& bytes, const std::string& source = "container") {
  container_detail::Reader in(bytes, source);
  in.need(4);
  const std::string magic = in.str(4);
  if (magic.compare(0, 3, "PPW") != 0) throw FormatError(source + ": bad magic (not a PPW container)");
  if (magic[3] != '1') throw FormatError(source + ": unsupported container version '" + magic.substr(3) + "'");
  const std::uint32_t count = in.u32();
  TensorMap out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = in.str(in.u16());
    Tensor t;
    const std::uint8_t rank = in.u8();
    for (int r = 0; r < rank; ++r) t.shape.push_back(in.u32());
    const std::size_t n = Tensor::numel(t.shape);
    if (n > in.remaining() / 4) throw FormatError(source + ": truncated container in tensor " + name);
    t.data.resize(n);
    for (auto& f : t.data) f = std::bit_cast<float>(in.u32());
    if (!out.emplace(name, std::move(t)).second) throw FormatError(source + ": duplicate tensor name " + name);
  }
  if (in.remaining() != 0) throw FormatError(source + ": trailing bytes after last tensor");
  return out;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write failed: " + path.string());
}

inline TensorMap read_container(const std::filesystem::path& path) {
  return decode_container(read_file_bytes(path), path.string());
}

inline void write_container(const std::filesystem::path& path, const TensorMap& tensors) {
  write_file_bytes(path, encode_container(tensors));
}

}  // namespace pointpillars
