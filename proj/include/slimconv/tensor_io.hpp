#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "slimconv/tensor.hpp"

namespace slimconv {

// SCT1 file layout:
//   "SCT1" | u32 rank (=4) | u32 N | u32 C | u32 H | u32 W | f32 data[N*C*H*W]
// All integers and floats little-endian; data in NCHW row-major order.
namespace sct1 {

inline constexpr std::array<char, 4> kMagic{'S', 'C', 'T', '1'};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

inline std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

}  // namespace detail

template <typename T>
std::string encode(const Tensor<T>& t) {
  const Shape& s = t.shape();
  for (std::size_t d : {s.n, s.c, s.h, s.w}) {
    if (d > std::numeric_limits<std::uint32_t>::max()) throw IoError("sct1: dimension exceeds u32");
  }
  std::string out;
  out.reserve(24 + 4 * t.numel());
  out.append(kMagic.data(), kMagic.size());
  detail::put_u32(out, 4);
  for (std::size_t d : {s.n, s.c, s.h, s.w}) detail::put_u32(out, static_cast<std::uint32_t>(d));
  for (std::size_t i = 0; i < t.numel(); ++i) {
    detail::put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(t[i])));
  }
  return out;
}

template <typename T = float>
Tensor<T> decode(const std::string& bytes) {
  if (bytes.size() < 24 || std::memcmp(bytes.data(), kMagic.data(), 4) != 0) {
    throw IoError("sct1: bad magic");
  }
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (detail::get_u32(p + 4) != 4) throw IoError("sct1: rank must be 4");
  const Shape s{detail::get_u32(p + 8), detail::get_u32(p + 12), detail::get_u32(p + 16),
                detail::get_u32(p + 20)};
  if (bytes.size() != 24 + 4 * s.numel()) {
    throw IoError("sct1: payload size " + std::to_string(bytes.size() - 24) + " does not match shape " +
                  s.str());
  }
  std::vector<T> data(s.numel());
  for (std::size_t i = 0; i < data.size(); ++i) {
    data[i] = static_cast<T>(std::bit_cast<float>(detail::get_u32(p + 24 + 4 * i)));
  }
  return Tensor<T>(s, std::move(data));
}

template <typename T>
void save(const std::filesystem::path& path, const Tensor<T>& t) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  const std::string bytes = encode(t);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write failed: " + path.string());
}

template <typename T = float>
Tensor<T> load(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  try {
    return decode<T>(bytes);
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

}  // namespace sct1
}  // namespace slimconv
