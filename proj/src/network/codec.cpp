#include "condvid/network/codec.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace condvid {

LatentCodec::LatentCodec(std::size_t patch, std::size_t channels, double scale)
    : patch_(patch), channels_(channels), scale_(scale) {
  if (patch < 2) throw std::invalid_argument("codec patch must be at least 2");
  if (channels != 4) throw std::invalid_argument("codec supports exactly 4 latent channels");
  if (!(scale > 0.0)) throw std::invalid_argument("codec scale must be positive");
  const std::size_t n = patch * patch * 3;
  const double flat = 1.0 / static_cast<double>(patch);
  for (std::size_t c = 0; c < 3; ++c) {
    std::vector<double> b(n, 0.0);
    for (std::size_t p = 0; p < patch * patch; ++p) b[p * 3 + c] = flat;
    basis_.push_back(std::move(b));
  }
  std::vector<double> ramp(n, 0.0);
  double norm = 0.0;
  for (std::size_t py = 0; py < patch; ++py)
    for (std::size_t px = 0; px < patch; ++px)
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = static_cast<double>(py) - 0.5 * static_cast<double>(patch - 1);
        ramp[(py * patch + px) * 3 + c] = v;
        norm += v * v;
      }
  for (double& v : ramp) v /= std::sqrt(norm);
  basis_.push_back(std::move(ramp));
}

template <typename T>
Tensor<T> LatentCodec::encode(const Tensor<float>& frames) const {
  if (frames.rank() != 4 || frames.dim(3) != 3 || frames.dim(1) % patch_ != 0 || frames.dim(2) % patch_ != 0)
    throw std::invalid_argument("codec expects (F, H, W, 3) frames with H, W divisible by " + std::to_string(patch_) +
                                ", got " + shape_string(frames.dims()));
  const std::size_t f = frames.dim(0), hp = frames.dim(1), wp = frames.dim(2);
  const std::size_t h = hp / patch_, w = wp / patch_;
  Tensor<T> z({f, channels_, h, w});
  for (std::size_t n = 0; n < f; ++n)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        for (std::size_t k = 0; k < channels_; ++k) {
          double acc = 0.0;
          for (std::size_t py = 0; py < patch_; ++py)
            for (std::size_t px = 0; px < patch_; ++px)
              for (std::size_t c = 0; c < 3; ++c) {
                const double v = frames[((n * hp + y * patch_ + py) * wp + x * patch_ + px) * 3 + c];
                acc += basis_[k][(py * patch_ + px) * 3 + c] * (2.0 * v - 1.0);
              }
          z[((n * channels_ + k) * h + y) * w + x] = static_cast<T>(scale_ * acc);
        }
  return z;
}

template <typename T>
Tensor<float> LatentCodec::decode(const Tensor<T>& latent) const {
  if (latent.rank() != 4 || latent.dim(1) != channels_)
    throw std::invalid_argument("codec expects (F, " + std::to_string(channels_) + ", H, W) latents, got " +
                                shape_string(latent.dims()));
  const std::size_t f = latent.dim(0), h = latent.dim(2), w = latent.dim(3);
  const std::size_t hp = h * patch_, wp = w * patch_;
  Tensor<float> out({f, hp, wp, 3});
  for (std::size_t n = 0; n < f; ++n)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        for (std::size_t py = 0; py < patch_; ++py)
          for (std::size_t px = 0; px < patch_; ++px)
            for (std::size_t c = 0; c < 3; ++c) {
              double v = 0.0;
              for (std::size_t k = 0; k < channels_; ++k)
                v += basis_[k][(py * patch_ + px) * 3 + c] *
                     static_cast<double>(latent[((n * channels_ + k) * h + y) * w + x]);
              const double pixel = 0.5 * (v / scale_ + 1.0);
              out[((n * hp + y * patch_ + py) * wp + x * patch_ + px) * 3 + c] =
                  static_cast<float>(std::clamp(pixel, 0.0, 1.0));
            }
  return out;
}

template Tensor<float> LatentCodec::encode<float>(const Tensor<float>&) const;
template Tensor<double> LatentCodec::encode<double>(const Tensor<float>&) const;
template Tensor<float> LatentCodec::decode<float>(const Tensor<float>&) const;
template Tensor<float> LatentCodec::decode<double>(const Tensor<double>&) const;

}  // namespace condvid
