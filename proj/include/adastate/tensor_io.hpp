// Copyright 2026 The adastate Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <string>
#include <vector>

#include "adastate/tensor.hpp"

// Tensor dump format (all integers little-endian):
//   "ADST" | version u16 | rank u16 | dims u64[rank] | dtype u8 | scalars
// dtype 0 = float64, 1 = float32.

namespace adastate {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class DumpType : std::uint8_t { kFloat64 = 0, kFloat32 = 1 };

inline constexpr std::uint16_t kDumpVersion = 1;

namespace io_detail {

template <class T>
void put_le(std::vector<std::uint8_t>& out, T value) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t,
                               std::conditional_t<sizeof(T) == 4, std::uint32_t,
                                                  std::conditional_t<sizeof(T) == 2, std::uint16_t,
                                                                     std::uint8_t>>>;
  const U bits = std::bit_cast<U>(value);
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
}

template <class T>
T get_le(const std::vector<std::uint8_t>& in, std::size_t& pos) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t,
                               std::conditional_t<sizeof(T) == 4, std::uint32_t,
                                                  std::conditional_t<sizeof(T) == 2, std::uint16_t,
                                                                     std::uint8_t>>>;
  if (pos + sizeof(T) > in.size()) throw FormatError("tensor dump: truncated");
  U bits = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) bits |= static_cast<U>(U{in[pos + i]} << (8 * i));
  pos += sizeof(T);
  return std::bit_cast<T>(bits);
}

}  // namespace io_detail

inline std::vector<std::uint8_t> encode_tensor(const Tensor& t, DumpType type = DumpType::kFloat64) {
  std::vector<std::uint8_t> out{'A', 'D', 'S', 'T'};
  io_detail::put_le<std::uint16_t>(out, kDumpVersion);
  io_detail::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(t.rank()));
  for (auto d : t.shape()) io_detail::put_le<std::uint64_t>(out, d);
  out.push_back(static_cast<std::uint8_t>(type));
  for (double v : t.values()) {
    if (type == DumpType::kFloat64) {
      io_detail::put_le<double>(out, v);
    } else {
      io_detail::put_le<float>(out, static_cast<float>(v));
    }
  }
  return out;
}

inline Tensor decode_tensor(const std::vector<std::uint8_t>& in) {
  if (in.size() < 9 || std::memcmp(in.data(), "ADST", 4) != 0) {
    throw FormatError("tensor dump: bad magic");
  }
  std::size_t pos = 4;
  const auto version = io_detail::get_le<std::uint16_t>(in, pos);
  if (version != kDumpVersion) {
    throw FormatError("tensor dump: unsupported version " + std::to_string(version));
  }
  const auto rank = io_detail::get_le<std::uint16_t>(in, pos);
  Shape shape(rank);
  for (auto& d : shape) d = static_cast<std::size_t>(io_detail::get_le<std::uint64_t>(in, pos));
  const auto type = io_detail::get_le<std::uint8_t>(in, pos);
  const std::size_t n = shape_numel(shape);
  std::vector<double> data(n);
  if (type == static_cast<std::uint8_t>(DumpType::kFloat64)) {
    for (auto& v : data) v = io_detail::get_le<double>(in, pos);
  } else if (type == static_cast<std::uint8_t>(DumpType::kFloat32)) {
    for (auto& v : data) v = io_detail::get_le<float>(in, pos);
  } else {
    throw FormatError("tensor dump: unknown dtype " + std::to_string(type));
  }
  if (pos != in.size()) throw FormatError("tensor dump: trailing bytes");
  return Tensor(std::move(shape), std::move(data));
}

inline void save_tensor(const std::filesystem::path& path, const Tensor& t,
                        DumpType type = DumpType::kFloat64) {
  const auto bytes = encode_tensor(t, type);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_tensor(bytes);
}

}  // namespace adastate
