#include "condvid/cli/run_config.hpp"

#include <fstream>
#include <stdexcept>

namespace condvid {

namespace {

template <typename Field>
void get(const nlohmann::json& j, const char* key, Field& field) {
  if (j.contains(key)) j.at(key).get_to(field);
}

}  // namespace

void to_json(nlohmann::json& j, const LinearScheduleSpec& s) {
  j = {{"timesteps", s.timesteps}, {"beta_start", s.beta_start}, {"beta_end", s.beta_end}};
}

void from_json(const nlohmann::json& j, LinearScheduleSpec& s) {
  reject_unknown_keys(j, {"timesteps", "beta_start", "beta_end"}, "schedule");
  get(j, "timesteps", s.timesteps);
  get(j, "beta_start", s.beta_start);
  get(j, "beta_end", s.beta_end);
  (void)s.build();
}

void to_json(nlohmann::json& j, const DatasetSpec& s) {
  j = {{"scenes", s.scenes}, {"seed", s.seed}, {"scene", s.scene}, {"dir", s.dir}, {"heldout_scenes", s.heldout_scenes}};
}

void from_json(const nlohmann::json& j, DatasetSpec& s) {
  reject_unknown_keys(j, {"scenes", "seed", "scene", "dir", "heldout_scenes"}, "dataset");
  get(j, "scenes", s.scenes);
  get(j, "seed", s.seed);
  get(j, "scene", s.scene);
  get(j, "dir", s.dir);
  get(j, "heldout_scenes", s.heldout_scenes);
}

void to_json(nlohmann::json& j, const SamplingSpec& s) {
  j = {{"text", s.text},
       {"seed_b", s.seed_b},
       {"seed_c", s.seed_c},
       {"steps", s.steps},
       {"guidance_scale", s.guidance_scale},
       {"background", to_string(s.background)},
       {"condition_noise_scale", s.condition_noise_scale},
       {"inversion_text", s.inversion_text},
       {"temporal", to_string(s.temporal)},
       {"control", to_string(s.control)},
       {"gap", s.gap},
       {"scene_seed", s.scene_seed}};
}

void from_json(const nlohmann::json& j, SamplingSpec& s) {
  reject_unknown_keys(j,
                      {"text", "seed_b", "seed_c", "steps", "guidance_scale", "background", "condition_noise_scale",
                       "inversion_text", "temporal", "control", "gap", "scene_seed"},
                      "generate");
  get(j, "text", s.text);
  get(j, "seed_b", s.seed_b);
  get(j, "seed_c", s.seed_c);
  get(j, "steps", s.steps);
  get(j, "guidance_scale", s.guidance_scale);
  if (j.contains("background")) s.background = parse_background_mode(j.at("background").get<std::string>());
  get(j, "condition_noise_scale", s.condition_noise_scale);
  get(j, "inversion_text", s.inversion_text);
  if (j.contains("temporal")) s.temporal = parse_attention_mode(j.at("temporal").get<std::string>());
  if (j.contains("control")) s.control = parse_attention_mode(j.at("control").get<std::string>());
  get(j, "gap", s.gap);
  get(j, "scene_seed", s.scene_seed);
  if (s.gap == 0) throw std::invalid_argument("generate.gap must be positive");
}

void RunConfig::finalize() {
  network.validate();
  (void)schedule.build();
  train.schedule = schedule;
  control_train.schedule = schedule;
  train.validate();
  control_train.validate();
  ablation.schedule = schedule;
  if (ablation.checkpoint.empty()) ablation.checkpoint = checkpoint;
  ablation.validate();
  dataset.scene.validate();
  if (dataset.scene.size != network.image_size())
    throw std::invalid_argument("dataset.scene.size " + std::to_string(dataset.scene.size) +
                                " does not match the network image size " + std::to_string(network.image_size()));
}

void to_json(nlohmann::json& j, const RunConfig& c) {
  j = {{"network", c.network},     {"schedule", c.schedule}, {"dataset", c.dataset},
       {"train", c.train},         {"control_train", c.control_train},
       {"generate", c.generate},   {"ablation", c.ablation}, {"checkpoint", c.checkpoint}};
}

void from_json(const nlohmann::json& j, RunConfig& c) {
  if (!j.is_object()) throw std::invalid_argument("run config must be a JSON object");
  reject_unknown_keys(j,
                      {"network", "schedule", "dataset", "train", "control_train", "generate", "ablation",
                       "checkpoint"},
                      "run config");
  get(j, "network", c.network);
  get(j, "schedule", c.schedule);
  get(j, "dataset", c.dataset);
  get(j, "train", c.train);
  get(j, "control_train", c.control_train);
  get(j, "generate", c.generate);
  get(j, "ablation", c.ablation);
  get(j, "checkpoint", c.checkpoint);
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("config file not found: " + path.string());
  try {
    RunConfig c = nlohmann::json::parse(in).get<RunConfig>();
    c.finalize();
    return c;
  } catch (const std::exception& e) {
    throw std::runtime_error("config " + path.string() + ": " + e.what());
  }
}

std::string config_hash(const RunConfig& c) { return hash_hex(json_hash(nlohmann::json(c))); }

}  // namespace condvid
