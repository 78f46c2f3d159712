#pragma once

#include <array>
#include <cstdint>

#include "condvid/numerics/tensor.hpp"

namespace condvid {

/// Philox4x32-10 block function (Salmon et al., SC'11). Pure: the output
/// depends only on the 128-bit counter and the 64-bit key.
std::array<std::uint32_t, 4> philox4x32(std::array<std::uint32_t, 4> counter, std::array<std::uint32_t, 2> key);

/// Logical noise streams. Each stream keys the same seed into a disjoint
/// counter space so that, e.g., background and condition noise never alias
/// even when their seeds coincide.
enum class Stream : std::uint32_t {
  general = 0,
  background = 1,
  condition = 2,
  weights = 3,
  data = 4,
  training = 5,
};

/// Counter-based random source. Each draw consumes one Philox block and
/// advances `counter` by one; nothing else is mutated.
class SeededRng {
 public:
  explicit SeededRng(std::uint64_t seed, Stream stream = Stream::general, std::uint64_t counter = 0)
      : seed_(seed), stream_(stream), counter_(counter) {}

  [[nodiscard]] std::uint64_t seed() const noexcept { return seed_; }
  [[nodiscard]] Stream stream() const noexcept { return stream_; }
  [[nodiscard]] std::uint64_t counter() const noexcept { return counter_; }

  std::array<std::uint32_t, 4> next_block();

  /// Uniform in the open interval (0, 1).
  double uniform();
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  /// One standard normal draw (one block; the sibling outputs are discarded).
  double normal();

  /// Four standard normals from one block via two Box-Muller pairs.
  std::array<double, 4> normal4();

 private:
  std::uint64_t seed_;
  Stream stream_;
  std::uint64_t counter_;
};

/// Fills a tensor of the given shape with standard normal draws. Consumes
/// ceil(volume / 4) blocks; values are generated in double precision and
/// rounded to T, so f32 and f64 tensors from the same state agree up to
/// rounding.
template <typename T>
Tensor<T> gaussian_noise(const Shape& shape, SeededRng& rng);

}  // namespace condvid
