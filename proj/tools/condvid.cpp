#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "condvid/cli/run_config.hpp"
#include "condvid/lab/image_io.hpp"
#include "condvid/network/text.hpp"
#include "condvid/numerics/cvt1.hpp"
#include "condvid/numerics/parallel.hpp"

using namespace condvid;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

RunConfig config_from(const std::string& path) {
  if (path.empty()) {
    RunConfig c;
    c.finalize();
    return c;
  }
  return load_run_config(path);
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

json run_manifest(const char* command, const RunConfig& cfg, json seeds) {
  return {{"command", command},
          {"config", cfg},
          {"config_hash", config_hash(cfg)},
          {"seeds", std::move(seeds)},
          {"threads", thread_budget()}};
}

std::vector<AttentionMode> parse_modes(const std::string& list) {
  if (list == "all")
    return {AttentionMode::self, AttentionMode::sparse_causal, AttentionMode::sbist, AttentionMode::dense};
  std::vector<AttentionMode> modes;
  std::stringstream ss(list);
  for (std::string item; std::getline(ss, item, ',');) modes.push_back(parse_attention_mode(item));
  if (modes.empty()) throw UsageError("--modes: no attention modes given");
  return modes;
}

// ---------------------------------------------------------------- generate

struct GenerateFlags {
  std::string config, checkpoint, out, video, condition, text, background, temporal, control;
  std::optional<std::uint64_t> seed_b, seed_c, scene_seed;
  std::optional<int> steps;
  std::optional<double> guidance, noise_scale;
  bool precise = false, save_latents = false;
};

template <typename T>
GenerationResult<T> run_generation(const GenerationRequest& req, const Checkpoint& ckpt, const RunConfig& cfg) {
  const auto& g = cfg.generate;
  const auto pipe = make_pipeline<T>(ckpt, FrameSamplingPlan(g.temporal, 1, g.gap), FrameSamplingPlan(g.control, 1, g.gap),
                                     cfg.schedule.build());
  return generate(req, pipe);
}

void check_schedule(const Checkpoint& ckpt, const RunConfig& cfg, const std::string& path) {
  if (!ckpt.meta.contains("schedule")) return;
  if (ckpt.meta.at("schedule").get<LinearScheduleSpec>() != cfg.schedule)
    throw std::runtime_error("checkpoint " + path + " was trained with a different noise schedule than the config");
}

int cmd_generate(const GenerateFlags& f) {
  RunConfig cfg = config_from(f.config);
  auto& g = cfg.generate;
  if (!f.checkpoint.empty()) cfg.checkpoint = f.checkpoint;
  if (f.seed_b) g.seed_b = *f.seed_b;
  if (f.seed_c) g.seed_c = *f.seed_c;
  if (f.scene_seed) g.scene_seed = *f.scene_seed;
  if (f.steps) g.steps = *f.steps;
  if (f.guidance) g.guidance_scale = *f.guidance;
  if (f.noise_scale) g.condition_noise_scale = *f.noise_scale;
  if (!f.text.empty()) g.text = f.text;
  if (!f.background.empty()) g.background = parse_background_mode(f.background);
  if (!f.temporal.empty()) g.temporal = parse_attention_mode(f.temporal);
  if (!f.control.empty()) g.control = parse_attention_mode(f.control);

  if (g.background == BackgroundMode::inverted && f.video.empty())
    throw UsageError("--background inverted requires --video <dir> with the reference frames");
  if (!f.video.empty() && g.background != BackgroundMode::inverted)
    throw UsageError("--video is only used with --background inverted");
  if (!f.video.empty() && !fs::is_directory(f.video))
    throw UsageError("--video: reference directory '" + f.video + "' does not exist");

  const Checkpoint ckpt = load_checkpoint(cfg.checkpoint);
  check_schedule(ckpt, cfg, cfg.checkpoint);

  GenerationRequest req;
  Tensor<float> masks;
  std::string caption;
  if (!f.condition.empty()) {
    masks = read_masks(f.condition);
  } else {
    SeededRng rng(g.scene_seed, Stream::data);
    auto scene = gen_moving_shapes(1, cfg.dataset.scene, rng).front();
    masks = scene.masks;
    caption = scene.caption;
  }
  req.condition = condition_from_masks(masks);
  req.text = g.text.empty() ? caption : g.text;
  req.seed_b = g.seed_b;
  req.seed_c = g.seed_c;
  req.steps = g.steps;
  req.guidance_scale = g.guidance_scale;
  req.background_mode = g.background;
  req.condition_noise_scale = g.condition_noise_scale;
  req.inversion_text = g.inversion_text;
  if (!f.video.empty()) req.reference_video = read_frames(f.video);

  const fs::path out = f.out;
  fs::create_directories(out);
  Tensor<float> frames;
  RngAccount account;
  if (f.precise) {
    auto r = run_generation<double>(req, ckpt, cfg);
    frames = std::move(r.frames);
    account = r.rng;
    if (f.save_latents) write_cvt1(out / "latents.cvt1", r.latent);
  } else {
    auto r = run_generation<float>(req, ckpt, cfg);
    frames = std::move(r.frames);
    account = r.rng;
    if (f.save_latents) write_cvt1(out / "latents.cvt1", r.latent);
  }
  write_frames(out, frames);

  json metrics = {{"frame_consistency", frames.dim(0) >= 2 ? json(frame_consistency(frames)) : json(nullptr)}};
  bool any_mask = false;
  for (float v : masks.values()) any_mask = any_mask || v > 0.5f;
  metrics["condition_iou"] = any_mask ? json(condition_accuracy_iou(frames, masks)) : json(nullptr);
  write_json(out / "metrics.json", metrics);

  json manifest = run_manifest("generate", cfg,
                               {{"seed_b", g.seed_b}, {"seed_c", g.seed_c}, {"scene_seed", g.scene_seed}});
  manifest["checkpoint"] = cfg.checkpoint;
  manifest["checkpoint_config_hash"] = hash_hex(json_hash(json(ckpt.config)));
  manifest["text"] = req.text;
  manifest["condition"] = f.condition.empty() ? json("synthetic") : json(f.condition);
  manifest["reference_video"] = f.video.empty() ? json(nullptr) : json(f.video);
  manifest["precision"] = f.precise ? "f64" : "f32";
  manifest["frames"] = frames.dim(0);
  manifest["rng_blocks"] = {{"background", account.background_blocks}, {"condition", account.condition_blocks}};
  write_json(out / "manifest.json", manifest);
  std::cout << "wrote " << frames.dim(0) << " frames to " << out.string() << '\n' << metrics.dump() << '\n';
  return 0;
}

// ------------------------------------------------------------------- train

struct TrainFlags {
  std::string config, out, data, save_data;
  std::optional<int> steps, control_steps;
  std::optional<std::size_t> scenes;
  std::optional<std::uint64_t> seed;
};

int cmd_train(const TrainFlags& f) {
  RunConfig cfg = config_from(f.config);
  if (!f.out.empty()) cfg.checkpoint = f.out;
  if (f.steps) cfg.train.steps = *f.steps;
  if (f.control_steps) cfg.control_train.steps = *f.control_steps;
  if (f.scenes) cfg.dataset.scenes = *f.scenes;
  if (f.seed) {
    cfg.train.seed = *f.seed;
    cfg.control_train.seed = *f.seed;
  }
  if (!f.data.empty()) cfg.dataset.dir = f.data;
  cfg.ablation.checkpoint = cfg.checkpoint;
  cfg.finalize();

  std::vector<SyntheticScene> scenes;
  if (!cfg.dataset.dir.empty()) {
    scenes = load_dataset(cfg.dataset.dir);
  } else {
    SeededRng rng(cfg.dataset.seed, Stream::data);
    scenes = gen_moving_shapes(cfg.dataset.scenes, cfg.dataset.scene, rng);
  }
  if (!f.save_data.empty()) save_dataset(f.save_data, scenes);
  SeededRng held_rng(cfg.dataset.seed + 1, Stream::data);
  const auto heldout_scenes = gen_moving_shapes(cfg.dataset.heldout_scenes, cfg.dataset.scene, held_rng);
  const LatentCodec codec(cfg.network.patch, cfg.network.latent_channels);
  const TrainingSet data = make_training_set(scenes, codec);
  const TrainingSet heldout = make_training_set(heldout_scenes, codec);

  const fs::path out = cfg.checkpoint;
  fs::create_directories(out);
  std::ofstream log_csv(out / "train_log.csv");
  log_csv << "phase,step,loss\n";
  auto progress = [](const char* phase) {
    return [phase](int step, double loss) { std::cout << phase << " step " << step << " loss " << loss << std::endl; };
  };

  const std::clock_t cpu_start = std::clock();
  TrainLog unet_log, control_log;
  auto unet = train_image_denoiser(data, cfg.network, cfg.train, &heldout, &unet_log, progress("denoiser"));
  for (std::size_t i = 0; i < unet_log.losses.size(); ++i) log_csv << "denoiser," << i << ',' << unet_log.losses[i] << '\n';
  auto control = train_control_branch(data, *unet, cfg.control_train, &heldout, &control_log, progress("control"));
  for (std::size_t i = 0; i < control_log.losses.size(); ++i)
    log_csv << "control," << i << ',' << control_log.losses[i] << '\n';

  json meta = run_manifest("train", cfg,
                           {{"dataset", cfg.dataset.seed}, {"denoiser", cfg.train.seed}, {"control", cfg.control_train.seed}});
  meta["schedule"] = cfg.schedule;
  meta["training_frames"] = data.size();
  meta["train_cpu_s"] = static_cast<double>(std::clock() - cpu_start) / CLOCKS_PER_SEC;
  meta["heldout"] = {{"denoiser_before", unet_log.heldout_before},
                     {"denoiser_after", unet_log.heldout_after},
                     {"control_before", control_log.heldout_before},
                     {"control_after", control_log.heldout_after}};
  save_checkpoint(out, Checkpoint{cfg.network, unet, control, meta});
  std::cout << "held-out denoiser loss " << unet_log.heldout_before << " -> " << unet_log.heldout_after
            << ", control loss " << control_log.heldout_before << " -> " << control_log.heldout_after << '\n'
            << "checkpoint written to " << out.string() << '\n';
  return 0;
}

// ------------------------------------------------------------------ ablate

struct AblateFlags {
  std::string config, checkpoint, out, seeds;
  std::optional<std::size_t> steps;
};

int cmd_ablate(const AblateFlags& f) {
  RunConfig cfg = config_from(f.config);
  if (!f.checkpoint.empty()) cfg.ablation.checkpoint = f.checkpoint;
  if (f.steps) cfg.ablation.steps = *f.steps;
  if (!f.seeds.empty()) {
    cfg.ablation.seeds.clear();
    std::stringstream ss(f.seeds);
    for (std::string item; std::getline(ss, item, ',');) cfg.ablation.seeds.push_back(std::stoull(item));
  }
  cfg.ablation.validate();
  if (!fs::exists(cfg.ablation.checkpoint / "manifest.json"))
    throw std::runtime_error("checkpoint not found: " + cfg.ablation.checkpoint.string() +
                             " (run `condvid train` first or pass --checkpoint)");

  const auto report = run_ablation(cfg.ablation, [](const AblationCell& c) {
    std::cout << to_string(c.temporal) << '/' << to_string(c.control) << " fc " << c.mean_fc << " iou " << c.mean_iou
              << std::endl;
  });
  const fs::path out = f.out;
  fs::create_directories(out);
  std::ofstream csv(out / "report.csv");
  write_report_csv(csv, report);
  std::ofstream txt(out / "report.txt");
  write_report_table(txt, report);
  json seeds = {{"generation", cfg.ablation.seeds}, {"scene_seed", cfg.ablation.scene_seed}};
  write_json(out / "manifest.json", run_manifest("ablate", cfg, seeds));
  write_report_table(std::cout, report);
  return 0;
}

// ------------------------------------------------------------------- bench

struct BenchFlags {
  std::size_t frames = 24, height = 64, width = 64, dim = 32, repeats = 1, gap = 3;
  std::uint64_t seed = 0;
  std::string modes = "all", out;
};

int cmd_bench(const BenchFlags& f) {
  if (f.repeats == 0) throw UsageError("--repeats must be positive");
  const auto modes = parse_modes(f.modes);
  const auto all = benchmark_attention(modes, f.frames, f.height, f.width, f.dim, f.repeats, f.seed, f.gap);
  // One row per mode: the fastest repeat.
  std::vector<CostAccount> rows;
  for (const auto& r : all) {
    auto it = std::find_if(rows.begin(), rows.end(), [&](const CostAccount& x) { return x.mode == r.mode; });
    if (it == rows.end())
      rows.push_back(r);
    else
      it->wall_time_s = std::min(it->wall_time_s, r.wall_time_s);
  }
  std::stable_sort(rows.begin(), rows.end(),
                   [](const CostAccount& a, const CostAccount& b) { return a.kv_frames < b.kv_frames; });
  write_cost_csv(std::cout, rows);
  if (!f.out.empty()) {
    std::ofstream csv(f.out);
    if (!csv) throw std::runtime_error("cannot write " + f.out);
    write_cost_csv(csv, rows);
  }
  return 0;
}

// ------------------------------------------------------------------ invert

struct InvertFlags {
  std::string video, config, checkpoint, out, text, temporal;
  std::optional<int> steps;
  bool precise = false;
};

template <typename T>
json run_inversion(const InvertFlags& f, const RunConfig& cfg, const Checkpoint& ckpt, const Tensor<float>& video,
                   const fs::path& out) {
  const auto& g = cfg.generate;
  const auto pipe = make_pipeline<T>(ckpt, FrameSamplingPlan(g.temporal, 1, g.gap),
                                     FrameSamplingPlan(g.control, 1, g.gap), cfg.schedule.build());
  const Tensor<T> z0 = pipe.codec.template encode<T>(video);
  const Tensor<T> text = encode_text<T>(f.text, ckpt.config.text_dim);
  const Tensor<T> z_T = invert_latents(pipe.video, pipe.schedule, z0, g.steps, text);
  const Tensor<T> back = reconstruct_latents(pipe.video, pipe.schedule, z_T, g.steps, text);
  write_cvt1(out / "inverted.cvt1", z_T);
  write_frames(out, pipe.codec.decode(back));
  const double err = l2_norm(back - z0) / l2_norm(z0);
  return {{"round_trip_rel_l2", err}};
}

int cmd_invert(const InvertFlags& f) {
  RunConfig cfg = config_from(f.config);
  if (!f.checkpoint.empty()) cfg.checkpoint = f.checkpoint;
  if (f.steps) cfg.generate.steps = *f.steps;
  if (!f.temporal.empty()) cfg.generate.temporal = parse_attention_mode(f.temporal);
  const auto video = read_frames(f.video);
  const Checkpoint ckpt = load_checkpoint(cfg.checkpoint);
  check_schedule(ckpt, cfg, cfg.checkpoint);
  const fs::path out = f.out;
  fs::create_directories(out);
  const json result = f.precise ? run_inversion<double>(f, cfg, ckpt, video, out)
                                : run_inversion<float>(f, cfg, ckpt, video, out);
  json manifest = run_manifest("invert", cfg, json::object());
  manifest["video"] = f.video;
  manifest["checkpoint"] = cfg.checkpoint;
  manifest["text"] = f.text;
  manifest["precision"] = f.precise ? "f64" : "f32";
  manifest["result"] = result;
  write_json(out / "manifest.json", manifest);
  std::cout << result.dump() << '\n';
  return 0;
}

// ----------------------------------------------------------------- metrics

struct MetricsFlags {
  std::string video, masks;
  double threshold = 0.25;
};

int cmd_metrics(const MetricsFlags& f) {
  const auto video = read_frames(f.video);
  json j = {{"frames", video.dim(0)}, {"frame_consistency", frame_consistency(video)}};
  if (!f.masks.empty()) j["condition_iou"] = condition_accuracy_iou(video, read_masks(f.masks), f.threshold);
  std::cout << j.dump() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Conditional video generation from a toy image diffusion model"};
  app.require_subcommand(1);

  GenerateFlags gen;
  auto* g = app.add_subcommand("generate", "Sample a video for a condition");
  g->add_option("--config", gen.config, "Run config JSON");
  g->add_option("--checkpoint", gen.checkpoint, "Checkpoint directory (overrides the config)");
  g->add_option("--out", gen.out, "Output directory")->required();
  g->add_option("--seed-b", gen.seed_b, "Background noise seed");
  g->add_option("--seed-c", gen.seed_c, "Condition noise seed");
  g->add_option("--scene-seed", gen.scene_seed, "Synthetic scene used as condition");
  g->add_option("--condition", gen.condition, "Directory of mask_*.pgm condition frames");
  g->add_option("--text", gen.text, "Prompt (default: the synthetic scene caption)");
  g->add_option("--steps", gen.steps, "DDIM steps");
  g->add_option("--guidance", gen.guidance, "Classifier-free guidance scale");
  g->add_option("--noise-scale", gen.noise_scale, "Multiplier on the condition noise");
  g->add_option("--background", gen.background, "noise | inverted");
  g->add_option("--video", gen.video, "Reference frames for --background inverted");
  g->add_option("--temporal", gen.temporal, "Denoiser attention: self | sparse_causal | sbist | dense");
  g->add_option("--control-attention", gen.control, "Control branch attention mode");
  g->add_flag("--f64", gen.precise, "Run in 64-bit precision");
  g->add_flag("--save-latents", gen.save_latents, "Also write latents.cvt1");

  TrainFlags tr;
  auto* t = app.add_subcommand("train", "Train the image denoiser and the control branch");
  t->add_option("--config", tr.config, "Run config JSON");
  t->add_option("--out", tr.out, "Checkpoint directory (overrides the config)");
  t->add_option("--steps", tr.steps, "Denoiser steps");
  t->add_option("--control-steps", tr.control_steps, "Control branch steps");
  t->add_option("--scenes", tr.scenes, "Synthetic scene count");
  t->add_option("--seed", tr.seed, "Training seed for both phases");
  t->add_option("--data", tr.data, "Load the dataset from this directory");
  t->add_option("--save-data", tr.save_data, "Write the dataset to this directory");

  AblateFlags ab;
  auto* a = app.add_subcommand("ablate", "Temporal attention and control branch ablation");
  a->add_option("--config", ab.config, "Run config JSON");
  a->add_option("--checkpoint", ab.checkpoint, "Checkpoint directory (overrides the config)");
  a->add_option("--out", ab.out, "Output directory")->required();
  a->add_option("--seeds", ab.seeds, "Comma-separated generation seeds");
  a->add_option("--steps", ab.steps, "DDIM steps per sample");

  BenchFlags be;
  auto* b = app.add_subcommand("bench", "Time temporal attention per mode");
  b->add_option("--frames", be.frames, "Frame count")->capture_default_str();
  b->add_option("--height", be.height, "Latent height")->capture_default_str();
  b->add_option("--width", be.width, "Latent width")->capture_default_str();
  b->add_option("--dim", be.dim, "Feature width")->capture_default_str();
  b->add_option("--repeats", be.repeats, "Timed repeats; the fastest is reported")->capture_default_str();
  b->add_option("--gap", be.gap, "sbist frame gap")->capture_default_str();
  b->add_option("--seed", be.seed, "Input seed")->capture_default_str();
  b->add_option("--modes", be.modes, "all or a comma-separated list")->capture_default_str();
  b->add_option("--out", be.out, "Also write the CSV here");

  InvertFlags in;
  auto* i = app.add_subcommand("invert", "DDIM-invert a video and reconstruct it");
  i->add_option("video", in.video, "Directory of frame_*.ppm")->required();
  i->add_option("--config", in.config, "Run config JSON");
  i->add_option("--checkpoint", in.checkpoint, "Checkpoint directory (overrides the config)");
  i->add_option("--out", in.out, "Output directory")->required();
  i->add_option("--steps", in.steps, "DDIM steps");
  i->add_option("--text", in.text, "Inversion prompt (default: unconditional)");
  i->add_option("--temporal", in.temporal, "Denoiser attention mode");
  i->add_flag("--f64", in.precise, "Run in 64-bit precision");

  MetricsFlags me;
  auto* m = app.add_subcommand("metrics", "Frame consistency and condition IoU of a frame directory");
  m->add_option("--video", me.video, "Directory of frame_*.ppm")->required();
  m->add_option("--masks", me.masks, "Directory of mask_*.pgm");
  m->add_option("--threshold", me.threshold, "Foreground colour threshold")->capture_default_str();

  CLI11_PARSE(app, argc, argv);
  try {
    if (g->parsed()) return cmd_generate(gen);
    if (t->parsed()) return cmd_train(tr);
    if (a->parsed()) return cmd_ablate(ab);
    if (b->parsed()) return cmd_bench(be);
    if (i->parsed()) return cmd_invert(in);
    if (m->parsed()) return cmd_metrics(me);
  } catch (const UsageError& e) {
    std::cerr << "condvid: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "condvid: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
