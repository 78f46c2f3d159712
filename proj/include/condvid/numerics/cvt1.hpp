#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>

#include "condvid/numerics/tensor.hpp"

namespace condvid {

// "CVT1" tensor container:
//   bytes 'C','V','T','1'
//   u8  dtype (1 = f32, 2 = f64)
//   u32 rank (little endian)
//   rank x u32 dims (little endian)
//   payload, row-major, little endian

enum class DType : std::uint8_t { f32 = 1, f64 = 2 };

template <typename T>
constexpr DType dtype_of();
template <>
constexpr DType dtype_of<float>() {
  return DType::f32;
}
template <>
constexpr DType dtype_of<double>() {
  return DType::f64;
}

template <typename T>
void write_cvt1(std::ostream& os, const Tensor<T>& t);

template <typename T>
void write_cvt1(const std::filesystem::path& path, const Tensor<T>& t);

/// Reads a tensor, converting the stored dtype to T when they differ.
template <typename T>
Tensor<T> read_cvt1(std::istream& is);

template <typename T>
Tensor<T> read_cvt1(const std::filesystem::path& path);

/// Dtype stored in a CVT1 file header.
DType peek_cvt1_dtype(const std::filesystem::path& path);

}  // namespace condvid
