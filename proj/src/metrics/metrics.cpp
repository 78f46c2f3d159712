#include "condvid/metrics/metrics.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <stdexcept>

#include "condvid/network/config.hpp"
#include "condvid/sampler/sampler.hpp"

namespace condvid {

namespace {

constexpr std::size_t kGrid = 8;

void require_video(const Tensor<float>& video, const char* what) {
  if (video.rank() != 4 || video.dim(3) != 3)
    throw std::invalid_argument(std::string(what) + ": video must be (F, H, W, 3), got " + shape_string(video.dims()));
}

Tensor<float> frame_of(const Tensor<float>& video, std::size_t f) {
  const auto s = video.slice(f);
  return Tensor<float>({video.dim(1), video.dim(2), 3}, std::vector<float>(s.begin(), s.end()));
}

double mean(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

// First attention level of the denoiser: (tokens, channels).
std::pair<std::size_t, std::size_t> attention_site(const NetworkConfig& net) {
  for (std::size_t l = 0; l < net.levels(); ++l)
    if (net.level_attention[l]) {
      const std::size_t side = net.latent_size >> l;
      return {side * side, net.channels[l]};
    }
  const std::size_t side = net.latent_size >> (net.levels() - 1);
  return {side * side, net.channels.back()};
}

}  // namespace

std::vector<double> toy_frame_embedding(const Tensor<float>& frame) {
  if (frame.rank() != 3 || frame.dim(2) != 3)
    throw std::invalid_argument("frame must be (H, W, 3), got " + shape_string(frame.dims()));
  const std::size_t h = frame.dim(0), w = frame.dim(1);
  if (h < kGrid || w < kGrid) throw std::invalid_argument("frame is smaller than the 8x8 embedding grid");
  std::vector<double> sum(kGrid * kGrid, 0.0), count(kGrid * kGrid, 0.0);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t cell = (y * kGrid / h) * kGrid + x * kGrid / w;
      const float* p = frame.data() + (y * w + x) * 3;
      sum[cell] += 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
      count[cell] += 1;
    }
  double norm = 0;
  for (std::size_t i = 0; i < sum.size(); ++i) {
    sum[i] /= count[i];
    norm += sum[i] * sum[i];
  }
  norm = std::sqrt(norm);
  for (double& v : sum) v = norm > 0 ? v / norm : 1.0 / static_cast<double>(kGrid);
  return sum;
}

FrameEmbedder toy_embedder() { return toy_frame_embedding; }

double frame_consistency(const Tensor<float>& video, const FrameEmbedder& embed) {
  require_video(video, "frame_consistency");
  const std::size_t frames = video.dim(0);
  if (frames < 2) throw std::invalid_argument("frame_consistency needs at least 2 frames");
  std::vector<double> prev = embed(frame_of(video, 0));
  double total = 0;
  for (std::size_t f = 1; f < frames; ++f) {
    std::vector<double> cur = embed(frame_of(video, f));
    if (cur.size() != prev.size()) throw std::runtime_error("embedder returned vectors of different lengths");
    double dot = 0;
    for (std::size_t i = 0; i < cur.size(); ++i) dot += prev[i] * cur[i];
    total += std::clamp(dot, -1.0, 1.0);
    prev = std::move(cur);
  }
  return total / static_cast<double>(frames - 1);
}

Tensor<float> foreground_mask(const Tensor<float>& frame, double threshold) {
  if (frame.rank() != 3 || frame.dim(2) != 3)
    throw std::invalid_argument("frame must be (H, W, 3), got " + shape_string(frame.dims()));
  const std::size_t n = frame.dim(0) * frame.dim(1);
  float median[3];
  std::vector<float> channel(n);
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t i = 0; i < n; ++i) channel[i] = frame[i * 3 + c];
    std::nth_element(channel.begin(), channel.begin() + n / 2, channel.end());
    median[c] = channel[n / 2];
  }
  Tensor<float> mask({frame.dim(0), frame.dim(1)});
  for (std::size_t i = 0; i < n; ++i) {
    double dev = 0;
    for (std::size_t c = 0; c < 3; ++c) dev = std::max(dev, std::abs(double(frame[i * 3 + c]) - median[c]));
    mask[i] = dev > threshold ? 1.0f : 0.0f;
  }
  return mask;
}

double condition_accuracy_iou(const Tensor<float>& video, const Tensor<float>& masks, double threshold) {
  require_video(video, "condition_accuracy_iou");
  const bool four = masks.rank() == 4 && masks.dim(1) == 1;
  if (!(masks.rank() == 3 || four))
    throw std::invalid_argument("masks must be (F, H, W) or (F, 1, H, W), got " + shape_string(masks.dims()));
  const std::size_t frames = masks.dim(0), h = masks.dim(four ? 2 : 1), w = masks.dim(four ? 3 : 2);
  if (frames != video.dim(0) || h != video.dim(1) || w != video.dim(2))
    throw std::invalid_argument("masks " + shape_string(masks.dims()) + " do not match video " + shape_string(video.dims()));
  bool any = false;
  double total = 0;
  for (std::size_t f = 0; f < frames; ++f) {
    const auto pred = foreground_mask(frame_of(video, f), threshold);
    const float* m = masks.data() + f * h * w;
    double inter = 0, uni = 0;
    for (std::size_t i = 0; i < h * w; ++i) {
      const bool a = pred[i] > 0.5f, b = m[i] > 0.5f;
      any = any || b;
      inter += a && b;
      uni += a || b;
    }
    total += uni > 0 ? inter / uni : 1.0;
  }
  if (!any) throw std::invalid_argument("condition masks are empty in every frame");
  return total / static_cast<double>(frames);
}

std::string to_string(ControlKind kind) { return kind == ControlKind::frame_wise ? "2d" : "3d"; }

namespace {

ControlKind parse_control_kind(const std::string& s) {
  if (s == "2d" || s == "frame_wise") return ControlKind::frame_wise;
  if (s == "3d" || s == "temporal") return ControlKind::temporal;
  throw std::invalid_argument("unknown control kind '" + s + "' (expected 2d or 3d)");
}

}  // namespace

void AblationConfig::validate() const {
  if (temporal_modes.empty() || control_kinds.empty()) throw std::invalid_argument("ablation grid is empty");
  if (seeds.empty()) throw std::invalid_argument("ablation needs at least one seed");
  if (steps == 0) throw std::invalid_argument("ablation steps must be positive");
  if (gap == 0) throw std::invalid_argument("ablation gap must be positive");
  if (scenes.frames < 2) throw std::invalid_argument("ablation scenes need at least 2 frames");
  scenes.validate();
}

void to_json(nlohmann::json& j, const AblationConfig& c) {
  std::vector<std::string> modes, kinds;
  for (auto m : c.temporal_modes) modes.push_back(to_string(m));
  for (auto k : c.control_kinds) kinds.push_back(to_string(k));
  j = {{"checkpoint", c.checkpoint.string()},
       {"temporal_modes", modes},
       {"control_kinds", kinds},
       {"control_mode", to_string(c.control_mode)},
       {"seeds", c.seeds},
       {"scenes", c.scenes},
       {"scene_seed", c.scene_seed},
       {"steps", c.steps},
       {"guidance_scale", c.guidance_scale},
       {"gap", c.gap},
       {"iou_threshold", c.iou_threshold}};
}

void from_json(const nlohmann::json& j, AblationConfig& c) {
  reject_unknown_keys(j,
                      {"checkpoint", "temporal_modes", "control_kinds", "control_mode", "seeds", "scenes",
                       "scene_seed", "steps", "guidance_scale", "gap", "iou_threshold"},
                      "ablation");
  if (j.contains("checkpoint")) c.checkpoint = j.at("checkpoint").get<std::string>();
  if (j.contains("temporal_modes")) {
    c.temporal_modes.clear();
    for (const auto& m : j.at("temporal_modes")) c.temporal_modes.push_back(parse_attention_mode(m.get<std::string>()));
  }
  if (j.contains("control_kinds")) {
    c.control_kinds.clear();
    for (const auto& k : j.at("control_kinds")) c.control_kinds.push_back(parse_control_kind(k.get<std::string>()));
  }
  if (j.contains("control_mode")) c.control_mode = parse_attention_mode(j.at("control_mode").get<std::string>());
  if (j.contains("seeds")) j.at("seeds").get_to(c.seeds);
  if (j.contains("scenes")) j.at("scenes").get_to(c.scenes);
  if (j.contains("scene_seed")) j.at("scene_seed").get_to(c.scene_seed);
  if (j.contains("steps")) j.at("steps").get_to(c.steps);
  if (j.contains("guidance_scale")) j.at("guidance_scale").get_to(c.guidance_scale);
  if (j.contains("gap")) j.at("gap").get_to(c.gap);
  if (j.contains("iou_threshold")) j.at("iou_threshold").get_to(c.iou_threshold);
  c.validate();
}

const AblationCell& MetricReport::cell(AttentionMode temporal, ControlKind control) const {
  for (const auto& c : cells)
    if (c.temporal == temporal && c.control == control) return c;
  throw std::out_of_range("no ablation cell " + to_string(temporal) + "/" + to_string(control));
}

MetricReport run_ablation(const AblationConfig& cfg, const AblationProgress& progress) {
  cfg.validate();
  const Checkpoint ckpt = load_checkpoint(cfg.checkpoint);
  if (!ckpt.control) throw std::runtime_error("checkpoint " + cfg.checkpoint.string() + " has no control branch");
  const NetworkConfig& net = ckpt.config;
  if (cfg.scenes.size != net.image_size())
    throw std::invalid_argument("ablation scenes are " + std::to_string(cfg.scenes.size) + " px but the network expects " +
                                std::to_string(net.image_size()));

  SeededRng scene_rng(cfg.scene_seed, Stream::data);
  const auto scenes = gen_moving_shapes(cfg.seeds.size(), cfg.scenes, scene_rng);
  const auto [tokens, dim] = attention_site(net);
  if (ckpt.meta.contains("schedule")) {
    const auto& m = ckpt.meta.at("schedule");
    if (m.value("timesteps", 0) != cfg.schedule.timesteps || m.value("beta_start", 0.0) != cfg.schedule.beta_start ||
        m.value("beta_end", 0.0) != cfg.schedule.beta_end)
      throw std::invalid_argument("checkpoint " + cfg.checkpoint.string() +
                                  " was trained with a different noise schedule than the ablation");
  }
  const auto schedule = cfg.schedule.build();

  MetricReport report;
  report.seeds = cfg.seeds;
  for (AttentionMode temporal : cfg.temporal_modes)
    for (ControlKind kind : cfg.control_kinds) {
      const AttentionMode control_mode = kind == ControlKind::frame_wise ? AttentionMode::self : cfg.control_mode;
      const Pipeline<float> pipe{
          inflate_2d_to_3d(ImageModel<float>{ckpt.unet}, FrameSamplingPlan(temporal, 1, cfg.gap)),
          inflate_control<float>(ckpt.control, FrameSamplingPlan(control_mode, 1, cfg.gap)),
          LatentCodec(net.patch, net.latent_channels), schedule};
      AblationCell cell;
      cell.temporal = temporal;
      cell.control = kind;
      double seconds = 0;
      for (std::size_t i = 0; i < cfg.seeds.size(); ++i) {
        GenerationRequest req;
        req.condition = condition_from_masks(scenes[i].masks);
        req.text = scenes[i].caption;
        req.seed_b = cfg.seeds[i];
        req.seed_c = cfg.seeds[i] + 1;
        req.steps = static_cast<int>(cfg.steps);
        req.guidance_scale = cfg.guidance_scale;
        const auto t0 = std::chrono::steady_clock::now();
        const auto out = generate(req, pipe);
        seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        cell.fc.push_back(frame_consistency(out.frames));
        cell.iou.push_back(condition_accuracy_iou(out.frames, scenes[i].masks, cfg.iou_threshold));
      }
      cell.mean_fc = mean(cell.fc);
      cell.mean_iou = mean(cell.iou);
      cell.cost = cost_account(FrameSamplingPlan(temporal, cfg.scenes.frames, cfg.gap), tokens, dim);
      cell.cost.wall_time_s = seconds / static_cast<double>(cfg.seeds.size());
      if (progress) progress(cell);
      report.cells.push_back(std::move(cell));
    }
  return report;
}

void write_report_csv(std::ostream& os, const MetricReport& report) {
  os << "temporal,control,seeds,fc,iou,kv_frames,score_flops,wall_time_s\n";
  char buf[256];
  for (const auto& c : report.cells) {
    std::snprintf(buf, sizeof buf, "%s,%s,%zu,%.6f,%.6f,%zu,%.0f,%.4f\n", to_string(c.temporal).c_str(),
                  to_string(c.control).c_str(), c.fc.size(), c.mean_fc, c.mean_iou, c.cost.kv_frames,
                  c.cost.score_flops, c.cost.wall_time_s);
    os << buf;
  }
}

void write_report_table(std::ostream& os, const MetricReport& report) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-14s %-8s %9s %9s %4s %10s\n", "temporal", "control", "FC", "IoU", "kv", "time/run");
  os << buf;
  for (const auto& c : report.cells) {
    std::snprintf(buf, sizeof buf, "%-14s %-8s %9.5f %9.5f %4zu %9.2fs\n", to_string(c.temporal).c_str(),
                  to_string(c.control).c_str(), c.mean_fc, c.mean_iou, c.cost.kv_frames, c.cost.wall_time_s);
    os << buf;
  }
  os << "seeds:";
  for (auto s : report.seeds) os << ' ' << s;
  os << '\n';
}

}  // namespace condvid
