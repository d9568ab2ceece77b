#pragma once

// Binary tensor files.
//
// Single tensor ("RMPG"):
//   magic "RMPG" | u32 version = 1 | u32 rank | u32 extent * rank | f32 data (row-major)
// Named container ("RMPC"), used for parameter checkpoints:
//   magic "RMPC" | u32 version = 1 | u32 count |
//   count * ( u32 name length | name bytes | single-tensor record )
// All integers and floats are little-endian.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "rmpg/errors.hpp"
#include "rmpg/tensor.hpp"

namespace rmpg::io {

inline constexpr std::array<char, 4> tensor_magic{'R', 'M', 'P', 'G'};
inline constexpr std::array<char, 4> container_magic{'R', 'M', 'P', 'C'};
inline constexpr std::uint32_t format_version = 1;

namespace detail {

inline void put_u32(std::ostream& out, std::uint32_t v) {
  const unsigned char bytes[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                                  static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(bytes), 4);
}

inline std::uint32_t get_u32(std::istream& in, const char* what) {
  unsigned char bytes[4];
  if (!in.read(reinterpret_cast<char*>(bytes), 4)) throw FormatError(std::string("truncated ") + what);
  return static_cast<std::uint32_t>(bytes[0]) | (static_cast<std::uint32_t>(bytes[1]) << 8) |
         (static_cast<std::uint32_t>(bytes[2]) << 16) | (static_cast<std::uint32_t>(bytes[3]) << 24);
}

inline void expect_magic(std::istream& in, const std::array<char, 4>& magic) {
  std::array<char, 4> got{};
  if (!in.read(got.data(), 4)) throw FormatError("truncated magic");
  if (got != magic) throw FormatError("bad magic, expected " + std::string(magic.begin(), magic.end()));
}

}  // namespace detail

template <class T>
void write_tensor(std::ostream& out, const Tensor<T>& t) {
  out.write(tensor_magic.data(), 4);
  detail::put_u32(out, format_version);
  detail::put_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t e : t.shape()) detail::put_u32(out, static_cast<std::uint32_t>(e));
  for (T v : t.data()) detail::put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
}

template <class T = float>
Tensor<T> read_tensor(std::istream& in) {
  detail::expect_magic(in, tensor_magic);
  const std::uint32_t version = detail::get_u32(in, "version");
  if (version != format_version) throw FormatError("unsupported tensor version " + std::to_string(version));
  const std::uint32_t rank = detail::get_u32(in, "rank");
  if (rank == 0 || rank > 8) throw FormatError("unsupported tensor rank " + std::to_string(rank));
  Shape shape(rank);
  std::size_t count = 1;
  for (auto& e : shape) {
    e = detail::get_u32(in, "extent");
    if (e == 0) throw FormatError("zero extent");
    if (count > std::numeric_limits<std::uint32_t>::max() / e) throw FormatError("tensor too large");
    count *= e;
  }
  std::vector<T> data(count);
  for (auto& v : data) v = static_cast<T>(std::bit_cast<float>(detail::get_u32(in, "tensor data")));
  return Tensor<T>(std::move(shape), std::move(data));
}

template <class T>
void save_tensor(const std::filesystem::path& path, const Tensor<T>& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  write_tensor(out, t);
}

template <class T = float>
Tensor<T> load_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return read_tensor<T>(in);
}

template <class T>
using NamedTensors = std::vector<std::pair<std::string, Tensor<T>>>;

template <class T>
void write_container(std::ostream& out, const NamedTensors<T>& entries) {
  out.write(container_magic.data(), 4);
  detail::put_u32(out, format_version);
  detail::put_u32(out, static_cast<std::uint32_t>(entries.size()));
  for (const auto& [name, t] : entries) {
    detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_tensor(out, t);
  }
}

template <class T = float>
NamedTensors<T> read_container(std::istream& in) {
  detail::expect_magic(in, container_magic);
  const std::uint32_t version = detail::get_u32(in, "version");
  if (version != format_version) throw FormatError("unsupported container version " + std::to_string(version));
  const std::uint32_t count = detail::get_u32(in, "entry count");
  NamedTensors<T> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t len = detail::get_u32(in, "name length");
    if (len > 4096) throw FormatError("entry name too long");
    std::string name(len, '\0');
    if (!in.read(name.data(), len)) throw FormatError("truncated entry name");
    out.emplace_back(std::move(name), read_tensor<T>(in));
  }
  return out;
}

template <class T>
void save_container(const std::filesystem::path& path, const NamedTensors<T>& entries) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  write_container(out, entries);
}

template <class T = float>
NamedTensors<T> load_container(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return read_container<T>(in);
}

/// FNV-1a over the float32 little-endian encoding of the data.
template <class T>
std::uint64_t checksum(const Tensor<T>& t) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (T v : t.data()) {
    const std::uint32_t bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
    for (int k = 0; k < 4; ++k) {
      h ^= (bits >> (8 * k)) & 0xffu;
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

}  // namespace rmpg::io
