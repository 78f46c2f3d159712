#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>

#include "condvid/numerics/tensor.hpp"

namespace condvid {

// Raw row-major kernels. Every output element is reduced over the inner
// index in ascending order, so results do not depend on blocking, thread
// count or buffer alignment.

/// C[m x n] (+)= A[m x k] * B[k x n].
template <typename T>
void gemm(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c, bool accumulate);

/// C[m x n] (+)= A[k x m]^T * B[k x n].
template <typename T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c, bool accumulate);

/// C[m x n] (+)= A[m x k] * B[n x k]^T.
template <typename T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c, bool accumulate);

/// dst[cols x rows] = src[rows x cols]^T.
template <typename T>
void transpose(std::size_t rows, std::size_t cols, const T* src, T* dst);

/// In-place max-subtracted softmax over a contiguous row.
template <typename T>
void softmax_row(std::span<T> row);

/// exp() used by softmax. For float this is a branch-free polynomial that
/// vectorizes (max relative error ~2 ulp); for double it is std::exp.
inline float exp_approx(float x) {
  // Cephes-style range reduction: x = n ln2 + r, |r| <= ln2/2.
  constexpr float kLog2e = 1.44269504088896341f;
  constexpr float kLn2Hi = 0.693359375f;
  constexpr float kLn2Lo = -2.12194440e-4f;
  x = std::min(std::max(x, -87.0f), 88.0f);
  // floor via truncation of a positive shift; std::floor blocks vectorization.
  const float n = static_cast<float>(static_cast<std::int32_t>(x * kLog2e + 128.5f) - 128);
  const float r = x - n * kLn2Hi - n * kLn2Lo;
  float p = 1.9875691500e-4f;
  p = p * r + 1.3981999507e-3f;
  p = p * r + 8.3334519073e-3f;
  p = p * r + 4.1665795894e-2f;
  p = p * r + 1.6666665459e-1f;
  p = p * r + 5.0000001201e-1f;
  p = p * r * r + r + 1.0f;
  const auto e = static_cast<std::int32_t>(n) + 127;
  return p * std::bit_cast<float>(e << 23);
}
inline double exp_approx(double x) { return std::exp(x); }

/// Softmax over the last axis. Throws on non-finite input.
template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& x);

/// Matrix product of two rank-2 tensors.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> transpose2d(const Tensor<T>& a);

}  // namespace condvid
