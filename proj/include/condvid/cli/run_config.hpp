#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>

#include "condvid/attention/attention.hpp"
#include "condvid/lab/dataset.hpp"
#include "condvid/lab/train.hpp"
#include "condvid/metrics/metrics.hpp"
#include "condvid/network/config.hpp"
#include "condvid/sampler/sampler.hpp"
#include "condvid/schedule/schedule.hpp"
#include "json.hpp"

namespace condvid {

/// Synthetic training data: `scenes` scenes drawn from `seed`, or loaded
/// from `dir` when it is set.
struct DatasetSpec {
  std::size_t scenes = 200;
  std::uint64_t seed = 1;
  SceneConfig scene;
  std::string dir;
  /// Held-out scenes for the loss report, drawn from seed + 1.
  std::size_t heldout_scenes = 8;
};

/// Generation knobs besides the condition itself.
struct SamplingSpec {
  std::string text;  // empty: the caption of the synthetic scene
  std::uint64_t seed_b = 0;
  std::uint64_t seed_c = 1;
  int steps = 50;
  double guidance_scale = 7.5;
  BackgroundMode background = BackgroundMode::noise;
  double condition_noise_scale = 1.0;
  std::string inversion_text;
  AttentionMode temporal = AttentionMode::sbist;
  AttentionMode control = AttentionMode::sbist;
  std::size_t gap = 3;
  /// Synthetic scene used as the condition when no mask directory is given.
  std::uint64_t scene_seed = 7;
};

/// Everything a command reads. Every field has a default; unknown keys are
/// an error at any depth.
struct RunConfig {
  NetworkConfig network;
  LinearScheduleSpec schedule;
  DatasetSpec dataset;
  TrainConfig train;
  TrainConfig control_train;
  SamplingSpec generate;
  AblationConfig ablation;
  std::string checkpoint = "checkpoint";

  /// Copies the schedule into both training blocks and the checkpoint path
  /// into the ablation, then validates every block.
  void finalize();
};

void to_json(nlohmann::json& j, const LinearScheduleSpec& s);
void from_json(const nlohmann::json& j, LinearScheduleSpec& s);
void to_json(nlohmann::json& j, const DatasetSpec& s);
void from_json(const nlohmann::json& j, DatasetSpec& s);
void to_json(nlohmann::json& j, const SamplingSpec& s);
void from_json(const nlohmann::json& j, SamplingSpec& s);
void to_json(nlohmann::json& j, const RunConfig& c);
void from_json(const nlohmann::json& j, RunConfig& c);

/// Reads and finalizes a config file; errors name the file.
RunConfig load_run_config(const std::filesystem::path& path);

/// Hex FNV-1a of the canonical JSON.
std::string config_hash(const RunConfig& c);

}  // namespace condvid
