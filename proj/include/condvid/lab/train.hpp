#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "condvid/lab/dataset.hpp"
#include "condvid/network/codec.hpp"
#include "condvid/network/unet.hpp"
#include "condvid/schedule/schedule.hpp"

namespace condvid {

/// Epsilon-prediction training knobs. The loss is the mean squared error
/// between predicted and true noise.
struct TrainConfig {
  int steps = 1000;
  std::size_t batch = 8;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  double grad_clip = 1.0;     // global L2 norm; 0 disables
  double text_dropout = 0.1;  // probability of training on the empty prompt
  int log_every = 100;
  /// Forward process the timesteps are drawn from. Set by the run config,
  /// not part of this block's JSON.
  LinearScheduleSpec schedule;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

/// Latents, conditions and prompts of every frame, flattened across scenes.
struct TrainingSet {
  std::vector<Tensor<float>> latents;     // (C, H, W) per frame
  std::vector<Tensor<float>> conditions;  // (H_px, W_px) per frame
  std::vector<std::string> captions;      // per frame

  [[nodiscard]] std::size_t size() const noexcept { return latents.size(); }
};

TrainingSet make_training_set(const std::vector<SyntheticScene>& scenes, const LatentCodec& codec);

/// A batch of independent frames, channel-last, one timestep per frame.
template <typename T>
struct TrainBatch {
  Tensor<T> z_t, eps, cond, eps_c;
  std::vector<int> t;
  TextBatch<T> text;
};

/// Draws frames, timesteps and noises from rng; the prompt is replaced by
/// the empty string with probability text_dropout.
template <typename T>
TrainBatch<T> sample_batch(const TrainingSet& data, std::size_t n, const NoiseSchedule& schedule, std::size_t text_dim,
                           double text_dropout, SeededRng& rng);

/// Denoiser loss on a batch; with `backward` it accumulates gradients into
/// the trainable parameters.
template <typename T>
double denoiser_loss(UNet<T>& unet, const TrainBatch<T>& batch, bool backward);

/// Loss of the frozen denoiser steered by the branch, whose input is
/// eps_c + E_c(cond). With `backward` only branch gradients are produced.
template <typename T>
double control_loss(UNet<T>& unet, ControlBranch<T>& branch, const TrainBatch<T>& batch, bool backward);

/// Adam with bias correction over every trainable parameter of a model.
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  template <typename Model>
  void step(Model& m);

 private:
  double lr_, beta1_, beta2_, eps_;
  long step_ = 0;
  std::vector<std::vector<float>> m_, v_;
};

/// Scales trainable gradients down to `max_norm`; returns the norm before.
template <typename Model>
double clip_gradients(Model& m, double max_norm);

struct TrainLog {
  std::vector<double> losses;  // per step
  double heldout_before = 0;
  double heldout_after = 0;
};

using ProgressFn = std::function<void(int step, double loss)>;

/// Trains the image denoiser on independent frames only; nothing temporal
/// is ever seen or learned. Throws with the step index if the loss diverges.
std::shared_ptr<UNet<float>> train_image_denoiser(const TrainingSet& data, const NetworkConfig& net,
                                                  const TrainConfig& cfg, const TrainingSet* heldout = nullptr,
                                                  TrainLog* log = nullptr, const ProgressFn& progress = {});

/// Clones the denoiser's encoder into a branch and trains the branch with
/// the denoiser frozen, frame by frame.
std::shared_ptr<ControlBranch<float>> train_control_branch(const TrainingSet& data, const UNet<float>& unet,
                                                           const TrainConfig& cfg, const TrainingSet* heldout = nullptr,
                                                           TrainLog* log = nullptr, const ProgressFn& progress = {});

/// Mean loss over a fixed pseudo-random set of held-out samples.
double heldout_denoiser_loss(const UNet<float>& unet, const TrainingSet& data, std::size_t samples,
                             std::uint64_t seed, const LinearScheduleSpec& schedule = {});
double heldout_control_loss(const UNet<float>& unet, const ControlBranch<float>& branch, const TrainingSet& data,
                            std::size_t samples, std::uint64_t seed, const LinearScheduleSpec& schedule = {});

struct GradProbe {
  std::string name;
  std::size_t index = 0;
  double analytic = 0, numeric = 0, rel_error = 0;
};

struct GradCheckReport {
  std::vector<GradProbe> probes;
  double worst = 0;
};

/// Compares the hand-written training gradients (denoiser loss over all
/// denoiser weights, control loss over the branch weights) with central
/// differences in double precision. Weights are drawn at random, the
/// zero-initialized projections included, so every path carries signal.
/// Relative error is |a - n| / max(|a|, |n|, 1e-6).
GradCheckReport gradient_check(const NetworkConfig& net, std::size_t probes, std::uint64_t seed);

}  // namespace condvid
