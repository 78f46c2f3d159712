#include <cmath>
#include <filesystem>
#include <sstream>

#include "doctest.h"
#include "condvid/lab/dataset.hpp"
#include "condvid/metrics/metrics.hpp"
#include "condvid/network/model.hpp"

using namespace condvid;
namespace fs = std::filesystem;

namespace {

Tensor<float> random_video(std::size_t frames, std::size_t h, std::size_t w, std::uint64_t seed) {
  SeededRng rng(seed);
  Tensor<float> v({frames, h, w, 3});
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(rng.uniform());
  return v;
}

// Flat grey frames with a bright rectangle [x0, x1) x [y0, y1).
Tensor<float> boxes(std::size_t frames, std::size_t size, std::size_t x0, std::size_t x1, std::size_t y0,
                    std::size_t y1) {
  Tensor<float> v({frames, size, size, 3}, 0.4f);
  for (std::size_t f = 0; f < frames; ++f)
    for (std::size_t y = y0; y < y1; ++y)
      for (std::size_t x = x0; x < x1; ++x) v[((f * size + y) * size + x) * 3] = 0.95f;
  return v;
}

Tensor<float> box_masks(std::size_t frames, std::size_t size, std::size_t x0, std::size_t x1, std::size_t y0,
                        std::size_t y1) {
  Tensor<float> m({frames, size, size});
  for (std::size_t f = 0; f < frames; ++f)
    for (std::size_t y = y0; y < y1; ++y)
      for (std::size_t x = x0; x < x1; ++x) m[(f * size + y) * size + x] = 1.0f;
  return m;
}

NetworkConfig small_config() {
  NetworkConfig c;
  c.latent_size = 8;
  c.channels = {8, 12};
  c.level_attention = {true, true};
  c.time_dim = 8;
  c.temb_dim = 12;
  c.text_dim = 6;
  c.stem_channels = {3, 5};
  return c;
}

}  // namespace

TEST_CASE("toy embedding is unit norm and reacts to layout") {
  for (std::uint64_t s = 0; s < 5; ++s) {
    const auto e = toy_frame_embedding(random_video(1, 37, 50, s).reshaped({37, 50, 3}));
    double n = 0;
    for (double v : e) n += v * v;
    CHECK(e.size() == 64);
    CHECK(std::abs(std::sqrt(n) - 1) < 1e-6);
  }
  const auto black = toy_frame_embedding(Tensor<float>({16, 16, 3}));
  CHECK(black[0] == doctest::Approx(1.0 / 8));
  CHECK_THROWS_AS((void)toy_frame_embedding(Tensor<float>({4, 4, 3})), std::invalid_argument);
}

TEST_CASE("frame consistency closed forms") {
  const auto still = repeat_leading(random_video(1, 16, 16, 1).reshaped({16, 16, 3}), 5);
  CHECK(frame_consistency(still) == doctest::Approx(1.0).epsilon(1e-6));

  // Scaling brightness does not change the normalized embedding.
  auto scaled = still;
  for (std::size_t i = scaled.slice_size(); i < scaled.size(); ++i) scaled[i] *= 0.5f;
  CHECK(frame_consistency(scaled) == doctest::Approx(1.0).epsilon(1e-6));

  std::size_t calls = 0;
  const FrameEmbedder orthogonal = [&](const Tensor<float>&) {
    std::vector<double> e(4, 0.0);
    e[calls++ % 4] = 1.0;
    return e;
  };
  CHECK(frame_consistency(random_video(6, 8, 8, 2), orthogonal) == 0.0);

  const FrameEmbedder flip = [&](const Tensor<float>&) { return std::vector<double>{(calls++ % 2) ? 1.0 : -1.0}; };
  CHECK(frame_consistency(random_video(3, 8, 8, 2), flip) == -1.0);

  for (std::uint64_t s = 0; s < 10; ++s) {
    const double fc = frame_consistency(random_video(4, 16, 16, s));
    CHECK(fc >= -1.0);
    CHECK(fc <= 1.0);
  }
  CHECK_THROWS_AS((void)frame_consistency(random_video(1, 16, 16, 3)), std::invalid_argument);
  CHECK_THROWS_AS((void)frame_consistency(Tensor<float>({2, 16, 16})), std::invalid_argument);
}

TEST_CASE("condition IoU closed forms") {
  const std::size_t n = 32;
  const auto video = boxes(2, n, 4, 12, 4, 12);
  CHECK(condition_accuracy_iou(video, box_masks(2, n, 4, 12, 4, 12)) == 1.0);
  CHECK(condition_accuracy_iou(video, box_masks(2, n, 20, 28, 20, 28)) == 0.0);
  // Equal 8x8 sets overlapping on half their area: 32 / (64 + 64 - 32).
  CHECK(condition_accuracy_iou(video, box_masks(2, n, 8, 16, 4, 12)) == doctest::Approx(1.0 / 3));
  // (F, 1, H, W) masks are accepted.
  CHECK(condition_accuracy_iou(video, box_masks(2, n, 4, 12, 4, 12).reshaped({2, 1, n, n})) == 1.0);

  // A frame where both sets are empty counts as perfect.
  auto masks = box_masks(2, n, 4, 12, 4, 12);
  auto two = video;
  for (std::size_t i = two.slice_size(); i < two.size(); ++i) two[i] = 0.4f;
  for (std::size_t i = masks.slice_size(); i < masks.size(); ++i) masks[i] = 0.0f;
  CHECK(condition_accuracy_iou(two, masks) == 1.0);

  CHECK_THROWS_AS((void)condition_accuracy_iou(video, Tensor<float>({2, n, n})), std::invalid_argument);
  CHECK_THROWS_AS((void)condition_accuracy_iou(video, box_masks(3, n, 4, 12, 4, 12)), std::invalid_argument);
}

TEST_CASE("condition IoU grows with the intersection at fixed union") {
  const std::size_t n = 32;
  const auto masks = box_masks(1, n, 4, 20, 4, 20);
  double prev = -1;
  // Predicted box grows inside the mask: union fixed, intersection grows.
  for (std::size_t x1 = 5; x1 <= 20; ++x1) {
    const double iou = condition_accuracy_iou(boxes(1, n, 4, x1, 4, 20), masks);
    CHECK(iou > prev);
    CHECK(iou >= 0.0);
    CHECK(iou <= 1.0);
    prev = iou;
  }
}

TEST_CASE("synthetic scenes score perfectly against their own masks") {
  SeededRng rng(3, Stream::data);
  for (const auto& sc : gen_moving_shapes(4, SceneConfig{}, rng)) {
    CHECK(condition_accuracy_iou(sc.frames, sc.masks) == 1.0);
    CHECK(frame_consistency(sc.frames) > 0.99);
  }
}

TEST_CASE("ablation config round trips and rejects unknown keys") {
  AblationConfig c;
  c.checkpoint = "ckpt";
  c.seeds = {7, 9};
  c.control_kinds = {ControlKind::temporal};
  nlohmann::json j = c;
  const auto back = j.get<AblationConfig>();
  CHECK(nlohmann::json(back) == j);
  j["seed"] = 3;
  CHECK_THROWS_WITH_AS((void)j.get<AblationConfig>(), doctest::Contains("seed"), std::invalid_argument);
  j.erase("seed");
  j["control_kinds"] = {"4d"};
  CHECK_THROWS_AS((void)j.get<AblationConfig>(), std::invalid_argument);
}

TEST_CASE("ablation runs the grid with shared seeds") {
  const auto dir = fs::temp_directory_path() / "condvid_test_ablation";
  fs::remove_all(dir);
  AblationConfig cfg;
  cfg.checkpoint = dir;
  cfg.seeds = {1, 2};
  cfg.steps = 2;
  cfg.scenes.size = 32;
  cfg.scenes.frames = 4;
  cfg.scenes.min_radius = 4;
  cfg.scenes.max_radius = 8;
  CHECK_THROWS_WITH_AS((void)run_ablation(cfg), doctest::Contains(dir.string().c_str()), std::runtime_error);

  const auto net = small_config();
  auto unet = std::make_shared<UNet<float>>(net);
  SeededRng rng(1, Stream::weights);
  unet->init(rng);
  auto control = std::make_shared<ControlBranch<float>>(ControlBranch<float>::clone_from(*unet, rng));
  save_checkpoint(dir, Checkpoint{net, unet, nullptr, {}});
  CHECK_THROWS_WITH_AS((void)run_ablation(cfg), doctest::Contains("control"), std::runtime_error);
  save_checkpoint(dir, Checkpoint{net, unet, control, {}});

  int seen = 0;
  const auto report = run_ablation(cfg, [&](const AblationCell&) { ++seen; });
  CHECK(seen == 8);
  REQUIRE(report.cells.size() == 8);
  CHECK(report.seeds == cfg.seeds);
  for (const auto& c : report.cells) {
    CHECK(c.fc.size() == 2);
    CHECK(c.iou.size() == 2);
    CHECK(c.cost.frames == 4);
    CHECK(c.cost.tokens == 64);
    CHECK(c.cost.dim == 8);
    CHECK(c.cost.wall_time_s > 0);
  }
  // A zero-projection control branch contributes nothing, so the control
  // kind cannot matter.
  for (AttentionMode m : cfg.temporal_modes) {
    CHECK(report.cell(m, ControlKind::frame_wise).fc == report.cell(m, ControlKind::temporal).fc);
    CHECK(report.cell(m, ControlKind::frame_wise).iou == report.cell(m, ControlKind::temporal).iou);
  }
  CHECK(report.cell(AttentionMode::self, ControlKind::temporal).cost.kv_frames == 1);
  CHECK(report.cell(AttentionMode::sbist, ControlKind::temporal).cost.kv_frames == 2);
  CHECK(report.cell(AttentionMode::dense, ControlKind::temporal).cost.kv_frames == 4);

  const auto again = run_ablation(cfg);
  for (std::size_t i = 0; i < 8; ++i) CHECK(again.cells[i].fc == report.cells[i].fc);

  std::ostringstream csv, table;
  write_report_csv(csv, report);
  write_report_table(table, report);
  const std::string text = csv.str();
  CHECK(text.rfind("temporal,control,seeds,fc,iou,kv_frames,score_flops,wall_time_s\nself,2d,2,", 0) == 0);
  CHECK(std::count(text.begin(), text.end(), '\n') == 9);
  CHECK(table.str().find("sparse_causal") != std::string::npos);

  save_checkpoint(dir, Checkpoint{net, unet, control, {{"schedule", {{"timesteps", 1000}, {"beta_start", 1e-4},
                                                                        {"beta_end", 0.02}}}}});
  CHECK_NOTHROW((void)run_ablation(cfg));
  cfg.schedule.beta_end = 0.012;
  CHECK_THROWS_WITH_AS((void)run_ablation(cfg), doctest::Contains("schedule"), std::invalid_argument);
  cfg.schedule = {};

  cfg.scenes.size = 64;
  cfg.scenes.max_radius = 10;
  CHECK_THROWS_AS((void)run_ablation(cfg), std::invalid_argument);
  fs::remove_all(dir);
}
