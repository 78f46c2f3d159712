#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>

#include "condvid/network/codec.hpp"
#include "condvid/network/model.hpp"
#include "condvid/numerics/rng.hpp"
#include "condvid/schedule/schedule.hpp"

namespace condvid {

enum class BackgroundMode { noise, inverted };

std::string to_string(BackgroundMode mode);
BackgroundMode parse_background_mode(std::string_view name);

/// condition: (F, cond_channels, H_px, W_px) raster in [0, 1].
/// reference_video: (F, H_px, W_px, 3) in [0, 1]; required by, and only
/// accepted with, the inverted background mode.
struct GenerationRequest {
  Tensor<float> condition;
  std::string text;
  std::optional<Tensor<float>> reference_video;
  std::uint64_t seed_b = 0;
  std::uint64_t seed_c = 0;
  int steps = 50;
  double guidance_scale = 7.5;
  BackgroundMode background_mode = BackgroundMode::noise;
  /// Multiplier on the shared condition noise eps_c.
  double condition_noise_scale = 1.0;
  /// Prompt used while inverting the reference video; empty = unconditional.
  std::string inversion_text;

  /// Throws std::invalid_argument when the request is inconsistent.
  void validate() const;
};

enum class Provenance { epsilon_b, inverted };

template <typename T>
struct BackgroundLatent {
  Tensor<T> z_T;
  Provenance provenance = Provenance::epsilon_b;
};

/// Everything generation reads besides the request. The video and control
/// models carry their attention plans.
template <typename T>
struct Pipeline {
  VideoModel<T> video;
  ControlModel<T> control;
  LatentCodec codec;
  NoiseSchedule schedule;
};

/// RNG counters consumed per stream, for disentanglement checks.
struct RngAccount {
  std::uint64_t background_blocks = 0;
  std::uint64_t condition_blocks = 0;
};

template <typename T>
struct GenerationResult {
  Tensor<float> frames;  // (F, H_px, W_px, 3)
  Tensor<T> latent;      // final z_0, (F, C, H, W)
  BackgroundLatent<T> background;
  RngAccount rng;
};

/// One standard-normal latent frame drawn from seed_b on the background
/// stream, replicated across all frames.
template <typename T>
BackgroundLatent<T> make_background_noise(std::uint64_t seed_b, std::size_t frames, const Shape& latent_frame,
                                          std::uint64_t* blocks_used = nullptr);

/// Shared noise frame drawn from seed_c on the condition stream.
template <typename T>
Tensor<T> make_condition_noise(std::uint64_t seed_c, const Shape& latent_frame, std::uint64_t* blocks_used = nullptr);

/// C_cond = scale * eps_c + E_c(cond), with one eps_c frame added to every
/// frame of the encoded condition.
template <typename T>
Tensor<T> make_condition_input(const ControlBranch<T>& branch, const Tensor<float>& cond, std::uint64_t seed_c,
                               double scale = 1.0, std::uint64_t* blocks_used = nullptr);

/// DDIM inversion of a clean latent video through the UNet branch alone.
template <typename T>
Tensor<T> invert_latents(const VideoModel<T>& video, const NoiseSchedule& schedule, const Tensor<T>& z0, int steps,
                         const Tensor<T>& text);

/// Plain DDIM sampling through the UNet branch alone, undoing
/// invert_latents up to discretization error.
template <typename T>
Tensor<T> reconstruct_latents(const VideoModel<T>& video, const NoiseSchedule& schedule, const Tensor<T>& z_T,
                              int steps, const Tensor<T>& text);

/// Pipeline over checkpoint weights, converted to T when T is not float.
/// The checkpoint must carry a control branch.
template <typename T>
Pipeline<T> make_pipeline(const Checkpoint& ckpt, const FrameSamplingPlan& temporal, const FrameSamplingPlan& control,
                          const NoiseSchedule& schedule);

/// The conditional sampling loop: background latent (inverted reference
/// or shared eps_b), C_cond and C_text computed once, then per timestep the
/// control residuals and one guided DDIM step; decoded per frame.
template <typename T>
GenerationResult<T> generate(const GenerationRequest& req, const Pipeline<T>& pipe);

}  // namespace condvid
