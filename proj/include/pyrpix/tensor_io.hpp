#pragma once

// "PXT1" tensor container: magic bytes, u32 rank, u64 extents, then the raw
// f64 payload, all little-endian. Used for checkpoints and attention dumps.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "pyrpix/common.hpp"
#include "pyrpix/tensor.hpp"

namespace pyrpix {

namespace detail {

template <typename T>
void write_le(std::ostream& out, T v) {
  unsigned char buf[sizeof(T)];
  for (size_t i = 0; i < sizeof(T); ++i) buf[i] = static_cast<unsigned char>((static_cast<uint64_t>(v) >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
bool read_le(std::istream& in, T& v) {
  unsigned char buf[sizeof(T)];
  if (!in.read(reinterpret_cast<char*>(buf), sizeof(T))) return false;
  uint64_t acc = 0;
  for (size_t i = 0; i < sizeof(T); ++i) acc |= static_cast<uint64_t>(buf[i]) << (8 * i);
  v = static_cast<T>(acc);
  return true;
}

}  // namespace detail

inline void save_tensor(const fs::path& path, const Tensor& t) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ContractError("cannot open tensor file for writing: " + path.string());
  out.write("PXT1", 4);
  detail::write_le<uint32_t>(out, static_cast<uint32_t>(t.rank()));
  for (int64_t e : t.shape()) detail::write_le<uint64_t>(out, static_cast<uint64_t>(e));
  for (double v : t.data()) {
    uint64_t bits;
    std::memcpy(&bits, &v, 8);
    detail::write_le<uint64_t>(out, bits);
  }
  if (!out) throw std::runtime_error("tensor write failed: " + path.string());
}

inline Tensor load_tensor(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ContractError("cannot open tensor file: " + path.string());
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, "PXT1", 4) != 0)
    throw ContractError("bad tensor magic in " + path.string() + " (expected PXT1)");
  uint32_t rank = 0;
  if (!detail::read_le(in, rank)) throw ContractError("truncated tensor header in " + path.string());
  if (rank > 16) throw ContractError("implausible tensor rank " + std::to_string(rank) + " in " + path.string());
  Shape shape(rank);
  for (uint32_t i = 0; i < rank; ++i) {
    uint64_t e = 0;
    if (!detail::read_le(in, e)) throw ContractError("truncated tensor header in " + path.string());
    shape[i] = static_cast<int64_t>(e);
  }
  int64_t n = numel_of(shape);
  std::vector<double> data(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    uint64_t bits = 0;
    if (!detail::read_le(in, bits)) throw ContractError("truncated tensor payload in " + path.string());
    std::memcpy(&data[static_cast<size_t>(i)], &bits, 8);
  }
  return Tensor::from_data(std::move(shape), std::move(data));
}

}  // namespace pyrpix
