#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "mdprune/tensor.hpp"

namespace mdprune {

// Tensor blob wire format, little-endian throughout:
//   magic "MDPT" | dtype u8 (0 = f32, 1 = f64) | rank u32 | dims u32[rank] | payload
// Checkpoints store weights as f32; loading widens back to the engine's f64.

enum class BlobDtype : std::uint8_t { f32 = 0, f64 = 1 };

namespace detail {

inline void put_u32le(std::string& out, std::uint32_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
  out.push_back(static_cast<char>((v >> 16) & 0xff));
  out.push_back(static_cast<char>((v >> 24) & 0xff));
}

inline std::uint32_t get_u32le(const std::string& in, std::size_t& pos) {
  if (pos + 4 > in.size())
    throw config_error("tensor blob truncated at byte " + std::to_string(pos) +
                       ": expected 4 more bytes, have " + std::to_string(in.size() - pos));
  const auto* p = reinterpret_cast<const unsigned char*>(in.data() + pos);
  pos += 4;
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

template <typename T>
void put_scalar_le(std::string& out, T v) {
  static_assert(sizeof(T) == 4 || sizeof(T) == 8);
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(bytes[i], bytes[sizeof(T) - 1 - i]);
  }
  out.append(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T get_scalar_le(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size())
    throw config_error("tensor blob truncated at byte " + std::to_string(pos));
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, in.data() + pos, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(bytes[i], bytes[sizeof(T) - 1 - i]);
  }
  pos += sizeof(T);
  T v;
  std::memcpy(&v, bytes, sizeof(T));
  return v;
}

}  // namespace detail

inline void append_blob(std::string& out, const Shape& shape, const std::vector<double>& data,
                        BlobDtype dtype = BlobDtype::f32) {
  out += "MDPT";
  out.push_back(static_cast<char>(dtype));
  detail::put_u32le(out, static_cast<std::uint32_t>(shape.size()));
  for (int d : shape) detail::put_u32le(out, static_cast<std::uint32_t>(d));
  if (dtype == BlobDtype::f32) {
    for (double v : data) detail::put_scalar_le(out, static_cast<float>(v));
  } else {
    for (double v : data) detail::put_scalar_le(out, v);
  }
}

struct Blob {
  Shape shape;
  std::vector<double> data;
};

inline Blob read_blob(const std::string& in, std::size_t& pos) {
  if (pos + 5 > in.size())
    throw config_error("tensor blob truncated at byte " + std::to_string(pos) +
                       ": header needs 5 bytes");
  if (in.compare(pos, 4, "MDPT") != 0)
    throw config_error("bad tensor blob magic at byte " + std::to_string(pos));
  pos += 4;
  const auto dtype = static_cast<BlobDtype>(static_cast<unsigned char>(in[pos++]));
  if (dtype != BlobDtype::f32 && dtype != BlobDtype::f64)
    throw config_error("unknown tensor blob dtype tag at byte " + std::to_string(pos - 1));
  const std::uint32_t rank = detail::get_u32le(in, pos);
  if (rank > 8) throw config_error("implausible tensor rank " + std::to_string(rank));
  Blob b;
  std::size_t numel = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    const std::uint32_t d = detail::get_u32le(in, pos);
    b.shape.push_back(static_cast<int>(d));
    numel *= d;
  }
  b.data.resize(numel);
  for (std::size_t i = 0; i < numel; ++i) {
    b.data[i] = dtype == BlobDtype::f32
                    ? static_cast<double>(detail::get_scalar_le<float>(in, pos))
                    : detail::get_scalar_le<double>(in, pos);
  }
  return b;
}

// Named-blob container used inside checkpoints: repeated
// [name_len u32 | name bytes | blob] records.
inline void append_named_blob(std::string& out, const std::string& name, const Shape& shape,
                              const std::vector<double>& data,
                              BlobDtype dtype = BlobDtype::f32) {
  detail::put_u32le(out, static_cast<std::uint32_t>(name.size()));
  out += name;
  append_blob(out, shape, data, dtype);
}

inline std::map<std::string, Blob> read_named_blobs(const std::string& in) {
  std::map<std::string, Blob> out;
  std::size_t pos = 0;
  while (pos < in.size()) {
    const std::uint32_t len = detail::get_u32le(in, pos);
    if (pos + len > in.size())
      throw config_error("blob container truncated at byte " + std::to_string(pos));
    std::string name = in.substr(pos, len);
    pos += len;
    out.emplace(std::move(name), read_blob(in, pos));
  }
  return out;
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw config_error("cannot open for writing: " + path);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("short write: " + path);
}

inline std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw config_error("cannot open: " + path);
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return bytes;
}

}  // namespace mdprune
