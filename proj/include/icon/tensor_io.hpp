#pragma once

// Flat little-endian tensor container shared by the model ("TLM1") and
// prober ("PRB1") checkpoints:
//
//   magic[4] | header (format specific) | tensor*
//   tensor := u32 name_len | name bytes | u32 rank | u32 dims[rank] | f32 data[prod(dims)]
//
// Tensors run until end of file.

#include <bit>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numeric>
#include <string>
#include <string_view>
#include <vector>

#include "icon/error.hpp"

namespace icon {

struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<float> data;

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> dims)
      : shape(std::move(dims)), data(element_count(shape), 0.0f) {}

  static std::size_t element_count(const std::vector<std::size_t>& dims) {
    return std::accumulate(dims.begin(), dims.end(), std::size_t{1},
                           [](std::size_t a, std::size_t b) { return a * b; });
  }

  std::size_t size() const noexcept { return data.size(); }
  float& operator[](std::size_t i) { return data[i]; }
  float operator[](std::size_t i) const { return data[i]; }

  /// Row-major 2-D access.
  float& at(std::size_t r, std::size_t c) { return data[r * shape[1] + c]; }
  float at(std::size_t r, std::size_t c) const { return data[r * shape[1] + c]; }

  bool operator==(const Tensor&) const = default;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

class ByteWriter {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes_.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
  }
  void i32(std::int32_t v) { u32(static_cast<std::uint32_t>(v)); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void raw(std::string_view s) { bytes_.insert(bytes_.end(), s.begin(), s.end()); }

  void tensor(std::string_view name, const Tensor& t) {
    u32(static_cast<std::uint32_t>(name.size()));
    raw(name);
    u32(static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) u32(static_cast<std::uint32_t>(d));
    for (float v : t.data) f32(v);
  }

  const std::string& bytes() const noexcept { return bytes_; }

 private:
  std::string bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string bytes) : bytes_(std::move(bytes)) {}

  bool done() const noexcept { return pos_ >= bytes_.size(); }

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return v;
  }
  std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string raw(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  NamedTensor tensor() {
    NamedTensor out;
    const auto name_len = u32();
    out.name = raw(name_len);
    const auto rank = u32();
    if (rank > 8) fail(ErrorKind::data, "tensor '" + out.name + "' has implausible rank");
    for (std::uint32_t i = 0; i < rank; ++i) out.tensor.shape.push_back(u32());
    const auto count = Tensor::element_count(out.tensor.shape);
    need(count * 4);
    out.tensor.data.resize(count);
    for (auto& v : out.tensor.data) v = f32();
    return out;
  }

  std::vector<NamedTensor> remaining_tensors() {
    std::vector<NamedTensor> out;
    while (!done()) out.push_back(tensor());
    return out;
  }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) fail(ErrorKind::data, "truncated checkpoint");
  }

  std::string bytes_;
  std::size_t pos_ = 0;
};

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::io, "missing file: " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Writes to `<path>.tmp` and renames over the destination.
inline void write_file_atomic(const std::filesystem::path& path, std::string_view contents) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorKind::io, "cannot write: " + tmp.string());
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) fail(ErrorKind::io, "short write: " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) fail(ErrorKind::io, "cannot rename " + tmp.string() + ": " + ec.message());
}

}  // namespace icon
