#include "condvid/numerics/kernels.hpp"

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <limits>
#include <vector>

namespace condvid {

namespace {

constexpr std::size_t kLanes = 16;

// 32-byte vectors through the GCC/Clang vector extension; they lower to
// whatever SIMD width the target offers.
template <typename T>
using Vec [[gnu::vector_size(32)]] = T;

template <typename T>
constexpr std::size_t kVecLanes = 32 / sizeof(T);

// One R-row block of C over V vectors of columns. Every element is summed
// over p in ascending order starting from zero and only then combined with
// C, in every tile shape, so a row's result never depends on where it sits
// in the matrix.
template <typename T, std::size_t R, std::size_t V>
void gemm_tile(std::size_t n, std::size_t k, const T* a, std::size_t ars, std::size_t aps, const T* b, T* c,
               bool accumulate) {
  constexpr std::size_t L = kVecLanes<T>;
  Vec<T> acc[R][V] = {};
  for (std::size_t p = 0; p < k; ++p) {
    Vec<T> bv[V];
    for (std::size_t v = 0; v < V; ++v) std::memcpy(&bv[v], b + p * n + v * L, sizeof(Vec<T>));
    for (std::size_t r = 0; r < R; ++r) {
      const Vec<T> av = a[r * ars + p * aps] - Vec<T>{};
      for (std::size_t v = 0; v < V; ++v) acc[r][v] += av * bv[v];
    }
  }
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t v = 0; v < V; ++v) {
      T* out = c + r * n + v * L;
      if (accumulate) {
        Vec<T> cur;
        std::memcpy(&cur, out, sizeof cur);
        acc[r][v] = cur + acc[r][v];
      }
      std::memcpy(out, &acc[r][v], sizeof(Vec<T>));
    }
}

// Leftover columns (fewer than one vector) go through the same vector tile
// on a zero-padded copy of B, so scalar code never produces a result that
// the vector path would round differently. Element (r, p) of A is at
// a[r * ars + p * aps].
template <typename T, std::size_t R>
void gemm_rows(std::size_t n, std::size_t k, const T* a, std::size_t ars, std::size_t aps, const T* b,
               const T* b_tail, T* c, bool accumulate) {
  constexpr std::size_t L = kVecLanes<T>;
  std::size_t j = 0;
  for (; j + 2 * L <= n; j += 2 * L) gemm_tile<T, R, 2>(n, k, a, ars, aps, b + j, c + j, accumulate);
  for (; j + L <= n; j += L) gemm_tile<T, R, 1>(n, k, a, ars, aps, b + j, c + j, accumulate);
  if (j == n) return;
  T out[R * L];
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t x = 0; x < L; ++x) out[r * L + x] = j + x < n ? c[r * n + j + x] : T(0);
  gemm_tile<T, R, 1>(L, k, a, ars, aps, b_tail, out, accumulate);
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t x = 0; j + x < n; ++x) c[r * n + j + x] = out[r * L + x];
}

template <typename T>
T lane_sum(const T* v, std::size_t n) {
  std::array<T, kLanes> acc{};
  std::size_t i = 0;
  for (; i + kLanes <= n; i += kLanes)
    for (std::size_t l = 0; l < kLanes; ++l) acc[l] += v[i + l];
  for (std::size_t l = 0; i < n; ++i, ++l) acc[l] += v[i];
  T s = 0;
  for (T x : acc) s += x;
  return s;
}

template <typename T>
T lane_max(const T* v, std::size_t n) {
  std::array<T, kLanes> acc;
  acc.fill(-std::numeric_limits<T>::infinity());
  std::size_t i = 0;
  for (; i + kLanes <= n; i += kLanes)
    for (std::size_t l = 0; l < kLanes; ++l) acc[l] = v[i + l] > acc[l] ? v[i + l] : acc[l];
  for (std::size_t l = 0; i < n; ++i, ++l) acc[l] = v[i] > acc[l] ? v[i] : acc[l];
  T m = acc[0];
  for (T x : acc) m = x > m ? x : m;
  return m;
}

template <typename T>
std::vector<T> padded_tail(std::size_t n, std::size_t k, const T* b) {
  constexpr std::size_t L = kVecLanes<T>;
  const std::size_t tail = n % L;
  std::vector<T> b_tail;
  if (tail) {
    b_tail.assign(k * L, T(0));
    for (std::size_t p = 0; p < k; ++p)
      for (std::size_t x = 0; x < tail; ++x) b_tail[p * L + x] = b[p * n + (n - tail) + x];
  }
  return b_tail;
}

}  // namespace

template <typename T>
void gemm(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c, bool accumulate) {
  const auto b_tail = padded_tail(n, k, b);
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) gemm_rows<T, 4>(n, k, a + i * k, k, 1, b, b_tail.data(), c + i * n, accumulate);
  for (; i < m; ++i) gemm_rows<T, 1>(n, k, a + i * k, k, 1, b, b_tail.data(), c + i * n, accumulate);
}

template <typename T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c, bool accumulate) {
  const auto b_tail = padded_tail(n, k, b);
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) gemm_rows<T, 4>(n, k, a + i, 1, m, b, b_tail.data(), c + i * n, accumulate);
  for (; i < m; ++i) gemm_rows<T, 1>(n, k, a + i, 1, m, b, b_tail.data(), c + i * n, accumulate);
}

template <typename T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c, bool accumulate) {
  std::vector<T> bt(n * k);
  transpose(n, k, b, bt.data());
  gemm(m, n, k, a, bt.data(), c, accumulate);
}

template <typename T>
void transpose(std::size_t rows, std::size_t cols, const T* src, T* dst) {
  constexpr std::size_t tile = 32;
  for (std::size_t r0 = 0; r0 < rows; r0 += tile)
    for (std::size_t c0 = 0; c0 < cols; c0 += tile) {
      const std::size_t r1 = std::min(rows, r0 + tile);
      const std::size_t c1 = std::min(cols, c0 + tile);
      for (std::size_t r = r0; r < r1; ++r)
        for (std::size_t col = c0; col < c1; ++col) dst[col * rows + r] = src[r * cols + col];
    }
}

template <typename T>
void softmax_row(std::span<T> row) {
  const std::size_t n = row.size();
  T* v = row.data();
  const T mx = lane_max(v, n);
  for (std::size_t i = 0; i < n; ++i) v[i] = exp_approx(v[i] - mx);
  const T inv = T(1) / lane_sum(v, n);
  for (std::size_t i = 0; i < n; ++i) v[i] *= inv;
}

template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& x) {
  if (x.empty()) throw std::invalid_argument("softmax_lastdim: empty tensor");
  if (!x.all_finite()) throw std::invalid_argument("softmax_lastdim: non-finite input");
  Tensor<T> out = x;
  const std::size_t n = x.dims().back();
  for (std::size_t r = 0; r < x.size() / n; ++r) softmax_row(out.values().subspan(r * n, n));
  return out;
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2) throw std::invalid_argument("matmul expects rank-2 tensors");
  if (a.dim(1) != b.dim(0))
    throw std::invalid_argument("matmul inner extents differ: " + shape_string(a.dims()) + " x " +
                                shape_string(b.dims()));
  Tensor<T> c({a.dim(0), b.dim(1)});
  gemm(a.dim(0), b.dim(1), a.dim(1), a.data(), b.data(), c.data(), false);
  return c;
}

template <typename T>
Tensor<T> transpose2d(const Tensor<T>& a) {
  if (a.rank() != 2) throw std::invalid_argument("transpose2d expects a rank-2 tensor");
  Tensor<T> out({a.dim(1), a.dim(0)});
  transpose(a.dim(0), a.dim(1), a.data(), out.data());
  return out;
}

#define CONDVID_INSTANTIATE(T)                                                                           \
  template void gemm<T>(std::size_t, std::size_t, std::size_t, const T*, const T*, T*, bool);           \
  template void gemm_tn<T>(std::size_t, std::size_t, std::size_t, const T*, const T*, T*, bool);        \
  template void gemm_nt<T>(std::size_t, std::size_t, std::size_t, const T*, const T*, T*, bool);        \
  template void transpose<T>(std::size_t, std::size_t, const T*, T*);                                   \
  template void softmax_row<T>(std::span<T>);                                                           \
  template Tensor<T> softmax_lastdim<T>(const Tensor<T>&);                                              \
  template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&);                                     \
  template Tensor<T> transpose2d<T>(const Tensor<T>&);

CONDVID_INSTANTIATE(float)
CONDVID_INSTANTIATE(double)

#undef CONDVID_INSTANTIATE

}  // namespace condvid
