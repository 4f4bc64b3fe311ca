#pragma once
// DTEN1 tensor files: "DTEN1" magic, u8 rank, rank little-endian u32 extents,
// then float32 payload in row-major order.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "defmatch/tensor.hpp"

namespace defmatch {

namespace detail {

static_assert(std::endian::native == std::endian::little,
              "DTEN1 writer assumes a little-endian host");

inline void put_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), 4);
}

inline std::uint32_t get_u32(std::istream& is) {
  std::uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 4);
  return v;
}

}  // namespace detail

inline void save_tensor(const Tensor& t, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_tensor: cannot open " + path.string());
  os.write("DTEN1", 5);
  const std::uint8_t rank = static_cast<std::uint8_t>(t.rank());
  os.write(reinterpret_cast<const char*>(&rank), 1);
  for (int d = 0; d < t.rank(); ++d) detail::put_u32(os, static_cast<std::uint32_t>(t.extent(d)));
  for (double v : t.data()) {
    const float f = static_cast<float>(v);
    os.write(reinterpret_cast<const char*>(&f), 4);
  }
  if (!os) throw std::runtime_error("save_tensor: write failed for " + path.string());
}

inline Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_tensor: cannot open " + path.string());
  char magic[5] = {};
  is.read(magic, 5);
  if (!is || std::memcmp(magic, "DTEN1", 5) != 0)
    throw std::runtime_error("load_tensor: bad magic in " + path.string());
  std::uint8_t rank = 0;
  is.read(reinterpret_cast<char*>(&rank), 1);
  if (!is || rank == 0 || rank > 8)
    throw std::runtime_error("load_tensor: unsupported rank in " + path.string());
  Shape shape(rank);
  for (std::uint8_t d = 0; d < rank; ++d) {
    const std::uint32_t e = detail::get_u32(is);
    if (!is || e == 0 || e > (1u << 24))
      throw std::runtime_error("load_tensor: bad extent in " + path.string());
    shape[d] = static_cast<int>(e);
  }
  const std::int64_t n = shape_numel(shape);
  std::vector<double> values(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    float f = 0.0f;
    is.read(reinterpret_cast<char*>(&f), 4);
    values[static_cast<std::size_t>(i)] = static_cast<double>(f);
  }
  if (!is) throw std::runtime_error("load_tensor: truncated payload in " + path.string());
  char extra = 0;
  if (is.read(&extra, 1))
    throw std::runtime_error("load_tensor: trailing bytes in " + path.string());
  return Tensor::from_data(std::move(shape), std::move(values));
}

}  // namespace defmatch
