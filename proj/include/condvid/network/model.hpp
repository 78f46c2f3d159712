#pragma once

#include <cstddef>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>

#include "json.hpp"

#include "condvid/network/unet.hpp"

// Model-level API over video latents laid out (F, C, H, W). Models are
// immutable once built and share weights through shared_ptr, so inflation
// and control-branch wiring never copy or add parameters.
namespace condvid {

template <typename T>
struct ImageModel {
  std::shared_ptr<const UNet<T>> unet;
};

/// Inflated ImageModel: convolutions run per frame (1x3x3) and every
/// self-attention block attends across frames according to the plan. The
/// plan's frame count is a template; it is re-targeted per call.
template <typename T>
struct VideoModel {
  std::shared_ptr<const UNet<T>> unet;
  FrameSamplingPlan plan{AttentionMode::sbist, 1};

  [[nodiscard]] FrameSamplingPlan plan_for(std::size_t frames) const { return plan.with_frames(frames); }
};

/// Control branch plus the attention plan it runs with: a self plan is the
/// frame-wise 2D branch, any other plan its inflated 3D form.
template <typename T>
struct ControlModel {
  std::shared_ptr<const ControlBranch<T>> branch;
  FrameSamplingPlan plan{AttentionMode::sbist, 1};

  [[nodiscard]] FrameSamplingPlan plan_for(std::size_t frames) const { return plan.with_frames(frames); }
};

template <typename T>
VideoModel<T> inflate_2d_to_3d(const ImageModel<T>& m, const FrameSamplingPlan& plan);

template <typename T>
ControlModel<T> inflate_control(std::shared_ptr<const ControlBranch<T>> branch, const FrameSamplingPlan& plan);

/// Per-image eps prediction; z is (N, C, H, W) of independent images.
template <typename T>
Tensor<T> image_denoise(const ImageModel<T>& m, const Tensor<T>& z, int t, const Tensor<T>& text);

/// eps prediction for z_t (F, C, H, W). Residuals, when given, are added to
/// the skip connections and the middle block before decoding.
template <typename T>
Tensor<T> unet_denoise(const VideoModel<T>& m, const Tensor<T>& z_t, int t, const Tensor<T>& text,
                       const ControlResiduals<T>* residuals);

/// c_cond: (F, C, H, W) at latent resolution.
template <typename T>
ControlResiduals<T> control_forward(const ControlModel<T>& c, const Tensor<T>& c_cond, int t, const Tensor<T>& text);

/// cond: (F, cond_channels, H_px, W_px) -> E_c(cond), (F, C, H, W).
template <typename T>
Tensor<T> encode_condition(const ControlBranch<T>& branch, const Tensor<T>& cond);

/// Weights on disk: one CVT1 file per parameter plus manifest.json with
/// names, shapes, the network config and its hash.
struct Checkpoint {
  NetworkConfig config;
  std::shared_ptr<UNet<float>> unet;
  std::shared_ptr<ControlBranch<float>> control;  // null when not trained yet
  nlohmann::json meta = nlohmann::json::object();
};

void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

/// Lists the tensor names a checkpoint manifest declares.
std::vector<std::string> checkpoint_tensor_names(const std::filesystem::path& dir);

}  // namespace condvid
