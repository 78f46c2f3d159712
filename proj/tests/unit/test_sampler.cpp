#include <cmath>
#include <iomanip>

#include "doctest.h"
#include "condvid/network/text.hpp"
#include "condvid/sampler/sampler.hpp"

using namespace condvid;

namespace {

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

// Random denoiser plus a control branch whose projections are no longer
// zero, so the condition actually reaches the output.
template <typename T>
Pipeline<T> make_pipeline(std::uint64_t seed, AttentionMode mode = AttentionMode::sbist) {
  const auto cfg = small_config();
  auto unet = std::make_shared<UNet<T>>(cfg);
  SeededRng rng(seed, Stream::weights);
  unet->init(rng);
  auto branch = std::make_shared<ControlBranch<T>>(ControlBranch<T>::clone_from(*unet, rng));
  for (auto& p : branch->proj) p.init(rng, 0.5);
  branch->proj_mid.init(rng, 0.5);
  const FrameSamplingPlan plan(mode, 1, 3);
  return Pipeline<T>{inflate_2d_to_3d(ImageModel<T>{unet}, plan), inflate_control<T>(branch, plan), LatentCodec(),
                     make_linear_schedule(1000, 1e-4, 0.02)};
}

Tensor<float> disc_condition(std::size_t frames, bool moving) {
  Tensor<float> c({frames, 1, 32, 32});
  for (std::size_t f = 0; f < frames; ++f) {
    const double cx = 12.0 + (moving ? 2.0 * f : 0.0);
    for (std::size_t y = 0; y < 32; ++y)
      for (std::size_t x = 0; x < 32; ++x)
        if ((x - cx) * (x - cx) + (y - 14.0) * (y - 14.0) < 36.0) c[(f * 32 + y) * 32 + x] = 1.0f;
  }
  return c;
}

template <typename T>
bool frames_identical(const Tensor<T>& v) {
  for (std::size_t f = 1; f < v.dim(0); ++f)
    for (std::size_t i = 0; i < v.slice_size(); ++i)
      if (v.slice(f)[i] != v.slice(0)[i]) return false;
  return true;
}

GenerationRequest request(std::size_t frames, bool moving) {
  GenerationRequest r;
  r.condition = disc_condition(frames, moving);
  r.text = "a red circle";
  r.seed_b = 11;
  r.seed_c = 22;
  r.steps = 6;
  r.guidance_scale = 3.0;
  return r;
}

}  // namespace

TEST_CASE("background noise is one shared frame with standard normal marginals") {
  std::uint64_t blocks = 0;
  const auto b = make_background_noise<double>(5, 3, {4, 158, 158}, &blocks);
  CHECK(b.provenance == Provenance::epsilon_b);
  CHECK(b.z_T.dims() == Shape{3, 4, 158, 158});
  CHECK(frames_identical(b.z_T));
  CHECK(blocks == (4 * 158 * 158 + 3) / 4);
  CHECK(make_background_noise<double>(5, 3, {4, 158, 158}).z_T == b.z_T);

  const auto frame = b.z_T.slice(0);
  const double n = static_cast<double>(frame.size());
  double m1 = 0, m2 = 0, m3 = 0, m4 = 0;
  for (double v : frame) m1 += v;
  m1 /= n;
  for (double v : frame) {
    const double d = v - m1;
    m2 += d * d;
    m3 += d * d * d;
    m4 += d * d * d * d;
  }
  m2 /= n;
  const double skew = m3 / n / std::pow(m2, 1.5), kurt = m4 / n / (m2 * m2);
  CHECK(std::abs(m1) < 5 / std::sqrt(n));
  CHECK(std::abs(m2 - 1) < 5 * std::sqrt(2 / n));
  CHECK(std::abs(skew) < 5 * std::sqrt(6 / n));
  CHECK(std::abs(kurt - 3) < 5 * std::sqrt(24 / n));
}

TEST_CASE("condition input adds one shared noise frame to the encoded condition") {
  const auto pipe = make_pipeline<double>(1);
  const auto& branch = *pipe.control.branch;
  const auto cond = disc_condition(4, true);
  const auto c = make_condition_input(branch, cond, 7);
  const auto enc = encode_condition(branch, cond.cast<double>());
  const auto diff = c - enc;
  for (std::size_t f = 1; f < 4; ++f)
    for (std::size_t i = 0; i < diff.slice_size(); ++i)
      CHECK(diff.slice(f)[i] == doctest::Approx(diff.slice(0)[i]).epsilon(1e-12));

  const auto zero = make_condition_input(branch, Tensor<float>({3, 1, 32, 32}), 7);
  const auto eps = make_condition_noise<double>(7, {4, 8, 8});
  CHECK(zero == repeat_leading(eps, 3));

  const auto halved = make_condition_input(branch, Tensor<float>({3, 1, 32, 32}), 7, 0.5);
  CHECK(halved == repeat_leading(eps * 0.5, 3));
  CHECK_THROWS_AS((void)make_condition_input(branch, Tensor<float>({3, 2, 32, 32}), 7), std::invalid_argument);

  // Frozen from the reference run.
  double s = 0, s2 = 0;
  for (double v : c.values()) {
    s += v;
    s2 += v * v;
  }
  MESSAGE(std::setprecision(17) << s << " " << s2);
  CHECK(s == doctest::Approx(-58.622380078415325).epsilon(1e-9));
  CHECK(s2 == doctest::Approx(820.71506121996492).epsilon(1e-9));
}

TEST_CASE("background and condition streams never share state") {
  const auto a = make_background_noise<float>(9, 1, {4, 8, 8});
  const auto b = make_condition_noise<float>(9, {4, 8, 8});
  CHECK(max_abs_diff(a.z_T.reshaped({4, 8, 8}), b) > 0.5);

  const auto pipe = make_pipeline<float>(2);
  auto req = request(3, true);
  const auto base = generate(req, pipe);
  CHECK(base.rng.background_blocks == 64);
  CHECK(base.rng.condition_blocks == 64);

  auto other_c = req;
  other_c.seed_c = 23;
  const auto rc = generate(other_c, pipe);
  CHECK(rc.background.z_T == base.background.z_T);
  CHECK(max_abs_diff(rc.latent, base.latent) > 1e-4);

  auto other_b = req;
  other_b.seed_b = 12;
  const auto rb = generate(other_b, pipe);
  CHECK(max_abs_diff(rb.background.z_T, base.background.z_T) > 0.5);
  CHECK(max_abs_diff(rb.latent, base.latent) > 1e-4);
}

TEST_CASE("static condition with shared noise yields bit-identical frames") {
  for (AttentionMode mode :
       {AttentionMode::sbist, AttentionMode::sparse_causal, AttentionMode::dense, AttentionMode::self}) {
    const auto pipe = make_pipeline<float>(3, mode);
    const auto out = generate(request(5, false), pipe);
    CHECK(frames_identical(out.latent));
    CHECK(frames_identical(out.frames));
    CHECK(out.frames.dims() == Shape{5, 32, 32, 3});
  }
  const auto moving = generate(request(5, true), make_pipeline<float>(3));
  CHECK_FALSE(frames_identical(moving.latent));
}

TEST_CASE("generation is deterministic and matches the frozen summary") {
  const auto pipe = make_pipeline<double>(4);
  const auto a = generate(request(3, true), pipe);
  const auto b = generate(request(3, true), pipe);
  CHECK(a.latent == b.latent);
  CHECK(a.frames == b.frames);
  double s = 0, s2 = 0;
  for (double v : a.latent.values()) {
    s += v;
    s2 += v * v;
  }
  MESSAGE(std::setprecision(17) << s << " " << s2);
  CHECK(s == doctest::Approx(-19863.385475758714).epsilon(1e-8));
  CHECK(s2 == doctest::Approx(78515540.596564218).epsilon(1e-8));
}

TEST_CASE("guidance scale one is the plain conditional sampler") {
  const auto pipe = make_pipeline<double>(5);
  auto req = request(2, true);
  req.guidance_scale = 1.0;
  const auto plain = generate(req, pipe);

  const auto& cfg = pipe.video.unet->config;
  const auto c_cond = make_condition_input(*pipe.control.branch, req.condition, req.seed_c);
  const auto text = encode_text<double>(req.text, cfg.text_dim);
  auto z = make_background_noise<double>(req.seed_b, 2, {4, 8, 8}).z_T;
  for (const auto& [t, t_prev] : make_step_plan(1000, req.steps).pairs) {
    const auto res = control_forward(pipe.control, c_cond, t, text);
    z = ddim_step(z, unet_denoise(pipe.video, z, t, text, &res), t, t_prev, pipe.schedule);
  }
  CHECK(max_abs_diff(z, plain.latent) == 0.0);

  req.guidance_scale = 7.5;
  CHECK(max_abs_diff(generate(req, pipe).latent, plain.latent) > 1e-4);
}

TEST_CASE("reference video switches the background to DDIM inversion") {
  const auto pipe = make_pipeline<float>(6);
  auto req = request(4, false);
  req.background_mode = BackgroundMode::inverted;
  CHECK_THROWS_WITH_AS((void)generate(req, pipe), doctest::Contains("reference video"), std::invalid_argument);

  Tensor<float> still({32, 32, 3});
  for (std::size_t i = 0; i < still.size(); ++i) still[i] = static_cast<float>((i * 37 % 101) / 100.0);
  req.reference_video = repeat_leading(still, 4);
  const auto out = generate(req, pipe);
  CHECK(out.background.provenance == Provenance::inverted);
  CHECK(out.rng.background_blocks == 0);
  CHECK(frames_identical(out.background.z_T));
  CHECK(frames_identical(out.frames));

  req.background_mode = BackgroundMode::noise;
  CHECK_THROWS_AS((void)generate(req, pipe), std::invalid_argument);
}

TEST_CASE("malformed requests are rejected") {
  const auto pipe = make_pipeline<float>(7);
  auto req = request(2, false);
  req.steps = 0;
  CHECK_THROWS_AS((void)generate(req, pipe), std::invalid_argument);
  req = request(2, false);
  req.condition = Tensor<float>({2, 1, 16, 16});
  CHECK_THROWS_AS((void)generate(req, pipe), std::invalid_argument);
  CHECK(parse_background_mode("inverted") == BackgroundMode::inverted);
  CHECK_THROWS_AS((void)parse_background_mode("scenery"), std::invalid_argument);
}
