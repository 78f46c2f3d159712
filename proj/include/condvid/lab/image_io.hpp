#pragma once

#include <filesystem>

#include "condvid/numerics/tensor.hpp"

namespace condvid {

/// Binary 8-bit PPM (P6). Images are (H, W, 3) floats in [0, 1]; writing
/// clamps and rounds to the nearest level.
Tensor<float> read_ppm(const std::filesystem::path& path);
void write_ppm(const std::filesystem::path& path, const Tensor<float>& image);

/// Binary 8-bit PGM (P5) as (H, W) floats in [0, 1].
Tensor<float> read_pgm(const std::filesystem::path& path);
void write_pgm(const std::filesystem::path& path, const Tensor<float>& image);

/// frame_0000.ppm, frame_0001.ppm, ... from (F, H, W, 3).
void write_frames(const std::filesystem::path& dir, const Tensor<float>& frames, const char* stem = "frame");
/// Reads every frame_*.ppm in a directory, in name order, as (F, H, W, 3).
Tensor<float> read_frames(const std::filesystem::path& dir, const char* stem = "frame");

/// mask_0000.pgm, ... as (F, H, W).
void write_masks(const std::filesystem::path& dir, const Tensor<float>& masks, const char* stem = "mask");
Tensor<float> read_masks(const std::filesystem::path& dir, const char* stem = "mask");

}  // namespace condvid
