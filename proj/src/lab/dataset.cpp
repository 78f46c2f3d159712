#include "condvid/lab/dataset.hpp"

#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <stdexcept>

#include "condvid/lab/image_io.hpp"
#include "condvid/network/config.hpp"

namespace condvid {

namespace {

struct NamedColor {
  const char* name;
  std::array<float, 3> rgb;
};

constexpr std::array<NamedColor, 6> kShapeColors{{
    {"red", {0.92f, 0.12f, 0.10f}},
    {"green", {0.10f, 0.85f, 0.20f}},
    {"blue", {0.12f, 0.20f, 0.95f}},
    {"yellow", {0.95f, 0.90f, 0.10f}},
    {"magenta", {0.90f, 0.10f, 0.85f}},
    {"cyan", {0.10f, 0.90f, 0.90f}},
}};

// Muted tones; any two differ by well under the shape contrast.
constexpr std::array<std::array<float, 3>, 4> kBackgroundTones{{
    {0.38f, 0.40f, 0.45f},
    {0.50f, 0.47f, 0.42f},
    {0.42f, 0.50f, 0.44f},
    {0.46f, 0.42f, 0.50f},
}};

const char* kind_name(ShapeKind k) { return k == ShapeKind::square ? "square" : "circle"; }

bool inside(ShapeKind kind, double px, double py, double cx, double cy, double r) {
  const double dx = px - cx, dy = py - cy;
  return kind == ShapeKind::square ? std::abs(dx) <= r && std::abs(dy) <= r : dx * dx + dy * dy <= r * r;
}

std::string scene_dir(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "scene_%04zu", i);
  return buf;
}

}  // namespace

void SceneConfig::validate() const {
  if (size == 0 || frames == 0) throw std::invalid_argument("scene size and frame count must be positive");
  if (!(min_radius > 0 && max_radius >= min_radius && 2 * max_radius < static_cast<double>(size)))
    throw std::invalid_argument("shape radius range does not fit the frame");
  if (!(max_speed >= 0)) throw std::invalid_argument("max_speed must be non-negative");
}

void to_json(nlohmann::json& j, const SceneConfig& c) {
  j = {{"size", c.size},         {"frames", c.frames},       {"min_radius", c.min_radius},
       {"max_radius", c.max_radius}, {"max_speed", c.max_speed}, {"drift", c.drift}};
}

void from_json(const nlohmann::json& j, SceneConfig& c) {
  reject_unknown_keys(j, {"size", "frames", "min_radius", "max_radius", "max_speed", "drift"}, "scenes");
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("size", c.size);
  get("frames", c.frames);
  get("min_radius", c.min_radius);
  get("max_radius", c.max_radius);
  get("max_speed", c.max_speed);
  get("drift", c.drift);
  c.validate();
}

std::vector<std::string> caption_templates() {
  std::vector<std::string> out;
  for (const auto& c : kShapeColors)
    for (ShapeKind k : {ShapeKind::square, ShapeKind::circle}) out.push_back(std::string("a ") + c.name + " " + kind_name(k));
  return out;
}

std::vector<SyntheticScene> gen_moving_shapes(std::size_t n, const SceneConfig& cfg, SeededRng& rng) {
  cfg.validate();
  std::vector<SyntheticScene> scenes;
  const double size = static_cast<double>(cfg.size);
  const double span = static_cast<double>(cfg.frames - 1);
  for (std::size_t s = 0; s < n; ++s) {
    SyntheticScene sc;
    sc.kind = rng.below(2) == 0 ? ShapeKind::square : ShapeKind::circle;
    const auto& color = kShapeColors[rng.below(kShapeColors.size())];
    const auto& tone_a = kBackgroundTones[rng.below(kBackgroundTones.size())];
    const auto& tone_b = kBackgroundTones[rng.below(kBackgroundTones.size())];
    const double angle = 2 * std::numbers::pi * rng.uniform();
    const double phase = rng.uniform();
    sc.radius = cfg.min_radius + (cfg.max_radius - cfg.min_radius) * rng.uniform();
    const double lo = sc.radius + 1, hi = size - sc.radius - 1;
    // Velocity first, then a start point that keeps every frame in bounds.
    const double max_v = span > 0 ? std::min(cfg.max_speed, (hi - lo) / span) : 0.0;
    sc.vx = max_v * (2 * rng.uniform() - 1);
    sc.vy = max_v * (2 * rng.uniform() - 1);
    auto start = [&](double v) {
      const double a = v >= 0 ? lo : lo - v * span, b = v >= 0 ? hi - v * span : hi;
      return a + (b - a) * rng.uniform();
    };
    sc.x0 = start(sc.vx);
    sc.y0 = start(sc.vy);
    sc.caption = std::string("a ") + color.name + " " + kind_name(sc.kind);

    sc.frames = Tensor<float>({cfg.frames, cfg.size, cfg.size, 3});
    sc.masks = Tensor<float>({cfg.frames, cfg.size, cfg.size});
    const double ca = std::cos(angle), sa = std::sin(angle);
    for (std::size_t f = 0; f < cfg.frames; ++f) {
      const double cx = sc.x0 + sc.vx * static_cast<double>(f), cy = sc.y0 + sc.vy * static_cast<double>(f);
      for (std::size_t y = 0; y < cfg.size; ++y)
        for (std::size_t x = 0; x < cfg.size; ++x) {
          const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
          const std::size_t pix = (f * cfg.size + y) * cfg.size + x;
          if (inside(sc.kind, px, py, cx, cy, sc.radius)) {
            sc.masks[pix] = 1.0f;
            for (std::size_t c = 0; c < 3; ++c) sc.frames[pix * 3 + c] = color.rgb[c];
          } else {
            const double u = (px * ca + py * sa) / size;
            const double w = 0.5 + 0.5 * std::sin(2 * std::numbers::pi * (u + phase + cfg.drift * static_cast<double>(f)));
            for (std::size_t c = 0; c < 3; ++c)
              sc.frames[pix * 3 + c] = static_cast<float>((1 - w) * tone_a[c] + w * tone_b[c]);
          }
        }
    }
    scenes.push_back(std::move(sc));
  }
  return scenes;
}

void save_dataset(const std::filesystem::path& dir, const std::vector<SyntheticScene>& scenes) {
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const auto d = dir / scene_dir(i);
    const auto& sc = scenes[i];
    write_frames(d, sc.frames, "frame");
    write_masks(d, sc.masks, "mask");
    std::ofstream(d / "caption.txt") << sc.caption << '\n';
  }
}

std::vector<SyntheticScene> load_dataset(const std::filesystem::path& dir) {
  std::vector<SyntheticScene> scenes;
  for (std::size_t i = 0; std::filesystem::is_directory(dir / scene_dir(i)); ++i) {
    const auto d = dir / scene_dir(i);
    SyntheticScene sc;
    sc.frames = read_frames(d, "frame");
    const std::size_t frames = sc.frames.dim(0), h = sc.frames.dim(1), w = sc.frames.dim(2);
    sc.masks = read_masks(d, "mask");
    if (sc.masks.dims() != Shape{frames, h, w})
      throw std::runtime_error("masks in " + d.string() + " do not match the frames");
    std::ifstream cap(d / "caption.txt");
    if (!cap) throw std::runtime_error("missing caption.txt in " + d.string());
    std::getline(cap, sc.caption);
    scenes.push_back(std::move(sc));
  }
  if (scenes.empty()) throw std::runtime_error("no scene_0000 directory in " + dir.string());
  return scenes;
}

Tensor<float> condition_from_masks(const Tensor<float>& masks) {
  if (masks.rank() != 3) throw std::invalid_argument("masks must be (F, H, W)");
  return masks.reshaped({masks.dim(0), 1, masks.dim(1), masks.dim(2)});
}

}  // namespace condvid
