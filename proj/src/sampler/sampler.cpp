#include "condvid/sampler/sampler.hpp"

#include <stdexcept>
#include <type_traits>

#include "condvid/network/text.hpp"

namespace condvid {

std::string to_string(BackgroundMode mode) { return mode == BackgroundMode::noise ? "noise" : "inverted"; }

BackgroundMode parse_background_mode(std::string_view name) {
  if (name == "noise") return BackgroundMode::noise;
  if (name == "inverted") return BackgroundMode::inverted;
  throw std::invalid_argument("unknown background mode '" + std::string(name) + "' (expected noise or inverted)");
}

void GenerationRequest::validate() const {
  if (condition.rank() != 4) throw std::invalid_argument("condition must be (F, channels, H, W)");
  if (steps < 1) throw std::invalid_argument("steps must be at least 1");
  if (!(guidance_scale >= 0.0)) throw std::invalid_argument("guidance scale must be non-negative");
  if (background_mode == BackgroundMode::inverted && !reference_video)
    throw std::invalid_argument("inverted background requires a reference video");
  if (background_mode == BackgroundMode::noise && reference_video)
    throw std::invalid_argument("a reference video is only used with the inverted background mode");
  if (reference_video && (reference_video->rank() != 4 || reference_video->dim(0) != condition.dim(0)))
    throw std::invalid_argument("reference video must be (F, H, W, 3) with as many frames as the condition");
}

template <typename T>
BackgroundLatent<T> make_background_noise(std::uint64_t seed_b, std::size_t frames, const Shape& latent_frame,
                                          std::uint64_t* blocks_used) {
  if (frames == 0) throw std::invalid_argument("background noise needs at least one frame");
  SeededRng rng(seed_b, Stream::background);
  const auto frame = gaussian_noise<T>(latent_frame, rng);
  if (blocks_used) *blocks_used = rng.counter();
  return {repeat_leading(frame, frames), Provenance::epsilon_b};
}

template <typename T>
Tensor<T> make_condition_noise(std::uint64_t seed_c, const Shape& latent_frame, std::uint64_t* blocks_used) {
  SeededRng rng(seed_c, Stream::condition);
  auto frame = gaussian_noise<T>(latent_frame, rng);
  if (blocks_used) *blocks_used = rng.counter();
  return frame;
}

template <typename T>
Tensor<T> make_condition_input(const ControlBranch<T>& branch, const Tensor<float>& cond, std::uint64_t seed_c,
                               double scale, std::uint64_t* blocks_used) {
  Tensor<T> c = encode_condition(branch, cond.template cast<T>());
  Tensor<T> eps = make_condition_noise<T>(seed_c, {c.dim(1), c.dim(2), c.dim(3)}, blocks_used);
  if (scale != 1.0) eps *= static_cast<T>(scale);
  for (std::size_t f = 0; f < c.dim(0); ++f) {
    auto s = c.slice(f);
    for (std::size_t i = 0; i < s.size(); ++i) s[i] = eps[i] + s[i];
  }
  return c;
}

template <typename T>
Tensor<T> invert_latents(const VideoModel<T>& video, const NoiseSchedule& schedule, const Tensor<T>& z0, int steps,
                         const Tensor<T>& text) {
  const Denoiser<T> eps = [&](const Tensor<T>& z, int t, const Tensor<T>& c) {
    return unet_denoise<T>(video, z, t, c, nullptr);
  };
  return ddim_invert(z0, eps, schedule, make_step_plan(schedule.steps(), steps), text);
}

template <typename T>
Tensor<T> reconstruct_latents(const VideoModel<T>& video, const NoiseSchedule& schedule, const Tensor<T>& z_T,
                              int steps, const Tensor<T>& text) {
  const Denoiser<T> eps = [&](const Tensor<T>& z, int t, const Tensor<T>& c) {
    return unet_denoise<T>(video, z, t, c, nullptr);
  };
  return ddim_sample(z_T, eps, schedule, make_step_plan(schedule.steps(), steps), text);
}

template <typename T>
Pipeline<T> make_pipeline(const Checkpoint& ckpt, const FrameSamplingPlan& temporal, const FrameSamplingPlan& control,
                          const NoiseSchedule& schedule) {
  if (!ckpt.unet) throw std::invalid_argument("checkpoint has no denoiser weights");
  if (!ckpt.control) throw std::invalid_argument("checkpoint has no control branch; train one first");
  std::shared_ptr<const UNet<T>> unet;
  std::shared_ptr<const ControlBranch<T>> branch;
  if constexpr (std::is_same_v<T, float>) {
    unet = ckpt.unet;
    branch = ckpt.control;
  } else {
    auto u = std::make_shared<UNet<T>>(ckpt.config);
    copy_parameters(*u, *ckpt.unet);
    auto b = std::make_shared<ControlBranch<T>>(ckpt.config);
    copy_parameters(*b, *ckpt.control);
    unet = std::move(u);
    branch = std::move(b);
  }
  return Pipeline<T>{inflate_2d_to_3d(ImageModel<T>{unet}, temporal), inflate_control<T>(branch, control),
                     LatentCodec(ckpt.config.patch, ckpt.config.latent_channels), schedule};
}

template <typename T>
GenerationResult<T> generate(const GenerationRequest& req, const Pipeline<T>& pipe) {
  req.validate();
  if (!pipe.video.unet) throw std::invalid_argument("generate: no denoiser weights");
  if (!pipe.control.branch) throw std::invalid_argument("generate: no control branch weights");
  const NetworkConfig& cfg = pipe.video.unet->config;
  const std::size_t frames = req.condition.dim(0);
  const Shape latent_frame{cfg.latent_channels, cfg.latent_size, cfg.latent_size};

  GenerationResult<T> out;
  const Tensor<T> empty_text = encode_text<T>("", cfg.text_dim);
  if (req.background_mode == BackgroundMode::inverted) {
    const Tensor<T> z0 = pipe.codec.template encode<T>(*req.reference_video);
    if (z0.dims() != Shape{frames, cfg.latent_channels, cfg.latent_size, cfg.latent_size})
      throw std::invalid_argument("reference video does not match the latent resolution: " +
                                  shape_string(req.reference_video->dims()));
    const Tensor<T> inv_text =
        req.inversion_text.empty() ? empty_text : encode_text<T>(req.inversion_text, cfg.text_dim);
    out.background = {invert_latents(pipe.video, pipe.schedule, z0, req.steps, inv_text), Provenance::inverted};
  } else {
    out.background = make_background_noise<T>(req.seed_b, frames, latent_frame, &out.rng.background_blocks);
  }

  const Tensor<T> c_cond = make_condition_input(*pipe.control.branch, req.condition, req.seed_c,
                                                req.condition_noise_scale, &out.rng.condition_blocks);
  const Tensor<T> c_text = encode_text<T>(req.text, cfg.text_dim);
  const bool guided = req.guidance_scale != 1.0;
  const T w = static_cast<T>(req.guidance_scale);

  Tensor<T> z = out.background.z_T;
  for (const auto& [t, t_prev] : make_step_plan(pipe.schedule.steps(), req.steps).pairs) {
    const ControlResiduals<T> c_t = control_forward(pipe.control, c_cond, t, c_text);
    Tensor<T> eps = unet_denoise(pipe.video, z, t, c_text, &c_t);
    if (guided) {
      const Tensor<T> eps_u = unet_denoise<T>(pipe.video, z, t, empty_text, nullptr);
      for (std::size_t i = 0; i < eps.size(); ++i) eps[i] = eps_u[i] + w * (eps[i] - eps_u[i]);
    }
    z = ddim_step(z, eps, t, t_prev, pipe.schedule);
  }
  out.frames = pipe.codec.decode(z);
  out.latent = std::move(z);
  return out;
}

#define CONDVID_INSTANTIATE(T)                                                                                   \
  template BackgroundLatent<T> make_background_noise<T>(std::uint64_t, std::size_t, const Shape&,               \
                                                        std::uint64_t*);                                         \
  template Tensor<T> make_condition_noise<T>(std::uint64_t, const Shape&, std::uint64_t*);                       \
  template Tensor<T> make_condition_input<T>(const ControlBranch<T>&, const Tensor<float>&, std::uint64_t,       \
                                             double, std::uint64_t*);                                            \
  template Tensor<T> invert_latents<T>(const VideoModel<T>&, const NoiseSchedule&, const Tensor<T>&, int,        \
                                       const Tensor<T>&);                                                        \
  template Tensor<T> reconstruct_latents<T>(const VideoModel<T>&, const NoiseSchedule&, const Tensor<T>&, int,   \
                                            const Tensor<T>&);                                                   \
  template Pipeline<T> make_pipeline<T>(const Checkpoint&, const FrameSamplingPlan&, const FrameSamplingPlan&,    \
                                        const NoiseSchedule&);                                                   \
  template GenerationResult<T> generate<T>(const GenerationRequest&, const Pipeline<T>&);
CONDVID_INSTANTIATE(float)
CONDVID_INSTANTIATE(double)
#undef CONDVID_INSTANTIATE

}  // namespace condvid
