#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include "condvid/numerics/rng.hpp"
#include "json.hpp"
#include "condvid/numerics/tensor.hpp"

namespace condvid {

enum class ShapeKind { square, circle };

struct SceneConfig {
  std::size_t size = 128;    // pixels per side
  std::size_t frames = 8;
  double min_radius = 14.0;  // half side for squares
  double max_radius = 26.0;
  double max_speed = 5.0;    // pixels per frame along each axis
  double drift = 0.03;       // background gradient phase change per frame

  void validate() const;
};

void to_json(nlohmann::json& j, const SceneConfig& c);
void from_json(const nlohmann::json& j, SceneConfig& c);

/// One shape translating over a drifting two-tone gradient. Frames are
/// (F, H, W, 3) in [0, 1]; masks (F, H, W) are 1 exactly on the shape.
struct SyntheticScene {
  Tensor<float> frames;
  Tensor<float> masks;
  std::string caption;
  ShapeKind kind = ShapeKind::square;
  double radius = 0;
  double x0 = 0, y0 = 0;  // center at frame 0, pixel units
  double vx = 0, vy = 0;  // displacement per frame
};

/// Draws n scenes from rng (counter advances; scenes are consumed in order).
std::vector<SyntheticScene> gen_moving_shapes(std::size_t n, const SceneConfig& cfg, SeededRng& rng);

/// The captions a scene can carry.
std::vector<std::string> caption_templates();

/// Per-scene directories scene_%04d/ with frame_*.ppm, mask_*.pgm and
/// caption.txt.
void save_dataset(const std::filesystem::path& dir, const std::vector<SyntheticScene>& scenes);
std::vector<SyntheticScene> load_dataset(const std::filesystem::path& dir);

/// Condition raster (F, 1, H, W) from the masks of a scene.
Tensor<float> condition_from_masks(const Tensor<float>& masks);

}  // namespace condvid
