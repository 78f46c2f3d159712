#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "condvid/attention/attention.hpp"
#include "condvid/lab/dataset.hpp"
#include "condvid/numerics/tensor.hpp"
#include "condvid/schedule/schedule.hpp"

namespace condvid {

/// Maps one (H, W, 3) frame to a unit-norm feature vector.
using FrameEmbedder = std::function<std::vector<double>(const Tensor<float>& frame)>;

/// Default embedder: 8x8 area-averaged luma, flattened and normalized. A
/// frame with zero luma everywhere maps to the uniform unit vector.
std::vector<double> toy_frame_embedding(const Tensor<float>& frame);
FrameEmbedder toy_embedder();

/// Mean cosine similarity of consecutive frame embeddings, each clamped to
/// [-1, 1]. video is (F, H, W, 3) with F >= 2.
double frame_consistency(const Tensor<float>& video, const FrameEmbedder& embed = toy_embedder());

/// 1 where any channel differs from the frame's per-channel median by more
/// than threshold. frame is (H, W, 3); the result is (H, W).
Tensor<float> foreground_mask(const Tensor<float>& frame, double threshold);

/// Mean over frames of IoU(foreground_mask(frame), mask). masks are
/// (F, H, W) or (F, 1, H, W). A frame where both sets are empty scores 1;
/// masks empty in every frame are an error.
double condition_accuracy_iou(const Tensor<float>& video, const Tensor<float>& masks, double threshold = 0.25);

/// Frame-wise (2D) or temporally inflated (3D) control branch.
enum class ControlKind { frame_wise, temporal };
std::string to_string(ControlKind kind);

struct AblationConfig {
  std::filesystem::path checkpoint;
  std::vector<AttentionMode> temporal_modes{AttentionMode::self, AttentionMode::sparse_causal, AttentionMode::sbist,
                                            AttentionMode::dense};
  std::vector<ControlKind> control_kinds{ControlKind::frame_wise, ControlKind::temporal};
  /// Attention mode of the 3D control branch.
  AttentionMode control_mode = AttentionMode::sbist;
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  SceneConfig scenes;
  /// Scene stream seed; disjoint from training scenes by construction.
  std::uint64_t scene_seed = 0x5eed5;
  std::size_t steps = 50;
  double guidance_scale = 7.5;
  std::size_t gap = 3;
  double iou_threshold = 0.25;
  /// Forward process the checkpoint was trained with. Set by the run
  /// config, not part of this block's JSON.
  LinearScheduleSpec schedule;

  void validate() const;
};

void to_json(nlohmann::json& j, const AblationConfig& c);
void from_json(const nlohmann::json& j, AblationConfig& c);

struct AblationCell {
  AttentionMode temporal = AttentionMode::self;
  ControlKind control = ControlKind::frame_wise;
  std::vector<double> fc, iou;  // per seed
  double mean_fc = 0, mean_iou = 0;
  /// Analytic cost of the denoiser's temporal attention at its first
  /// attention level; wall time is the mean generation time per seed.
  CostAccount cost;
};

struct MetricReport {
  std::vector<AblationCell> cells;
  std::vector<std::uint64_t> seeds;

  [[nodiscard]] const AblationCell& cell(AttentionMode temporal, ControlKind control) const;
};

using AblationProgress = std::function<void(const AblationCell& cell)>;

/// Generates every (temporal mode, control kind) cell for every seed with
/// shared seeds: seed s uses scene s of the ablation stream, seed_b = s and
/// seed_c = s + 1. Throws naming the checkpoint path when it is missing or
/// records a different schedule.
MetricReport run_ablation(const AblationConfig& cfg, const AblationProgress& progress = {});

/// temporal,control,seeds,fc,iou,kv_frames,score_flops,wall_time_s
void write_report_csv(std::ostream& os, const MetricReport& report);
void write_report_table(std::ostream& os, const MetricReport& report);

}  // namespace condvid
