#pragma once

#include <cstddef>
#include <vector>

#include "condvid/numerics/tensor.hpp"

namespace condvid {

/// Fixed (untrained) patch codec. Each patch x patch x 3 block of pixels,
/// mapped to [-1, 1], is projected onto four orthonormal basis vectors (the
/// per-channel means of R, G, B and a vertical luminance ramp) and scaled.
/// encode(decode(z)) == z for any latent, and decode(encode(x)) == x for
/// any image in the decoder's range; other images lose the detail outside
/// the basis span.
class LatentCodec {
 public:
  explicit LatentCodec(std::size_t patch = 4, std::size_t channels = 4, double scale = 1.0);

  [[nodiscard]] std::size_t patch() const noexcept { return patch_; }
  [[nodiscard]] std::size_t channels() const noexcept { return channels_; }

  /// frames: (F, H_px, W_px, 3) in [0, 1] -> (F, C, H_px / patch, W_px / patch)
  template <typename T>
  [[nodiscard]] Tensor<T> encode(const Tensor<float>& frames) const;

  /// (F, C, H, W) -> (F, H * patch, W * patch, 3), clamped to [0, 1]
  template <typename T>
  [[nodiscard]] Tensor<float> decode(const Tensor<T>& latent) const;

  /// Row k holds basis vector k over (py, px, channel) patch coordinates.
  [[nodiscard]] const std::vector<std::vector<double>>& basis() const noexcept { return basis_; }

 private:
  std::size_t patch_;
  std::size_t channels_;
  double scale_;
  std::vector<std::vector<double>> basis_;
};

}  // namespace condvid
