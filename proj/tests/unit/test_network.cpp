#include <array>
#include <cmath>
#include <filesystem>
#include <functional>
#include <iomanip>

#include "doctest.h"
#include "condvid/network/codec.hpp"
#include "condvid/network/model.hpp"
#include "condvid/network/text.hpp"
#include "condvid/numerics/rng.hpp"

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

template <typename Model>
void randomize(Model& m, SeededRng& rng, double scale) {
  m.visit("", [&](const std::string&, nn::Param<double>& p) {
    for (double& v : p.value.values()) v = scale * rng.normal();
  });
}

template <typename T>
Tensor<T> noise(const Shape& s, std::uint64_t seed, double scale = 1.0) {
  SeededRng rng(seed, Stream::data);
  auto t = gaussian_noise<T>(s, rng);
  t *= static_cast<T>(scale);
  return t;
}

double dot(const Tensor<double>& a, const Tensor<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double rel_err(double a, double n) { return std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-7}); }

struct ProbeResult {
  double worst = 0;
  std::size_t probes = 0;
};

// Central differences on randomly chosen scalars of randomly chosen tensors.
template <typename Model>
ProbeResult probe_parameters(Model& m, const std::function<double()>& loss, std::size_t count, std::uint64_t seed) {
  std::vector<nn::Param<double>*> params;
  m.visit("", [&](const std::string&, nn::Param<double>& p) {
    if (p.trainable()) params.push_back(&p);
  });
  SeededRng rng(seed, Stream::general);
  ProbeResult r;
  const double h = 1e-5;
  for (std::size_t k = 0; k < count; ++k) {
    nn::Param<double>& p = *params[rng.below(params.size())];
    const std::size_t i = rng.below(p.value.size());
    const double keep = p.value[i];
    p.value[i] = keep + h;
    const double up = loss();
    p.value[i] = keep - h;
    const double down = loss();
    p.value[i] = keep;
    r.worst = std::max(r.worst, rel_err(p.grad[i], (up - down) / (2 * h)));
    ++r.probes;
  }
  return r;
}

template <typename Model>
void zero_grads(Model& m) {
  m.visit("", [](const std::string&, nn::Param<double>& p) { p.zero_grad(); });
}

}  // namespace

TEST_CASE("conv3x3 forward matches a direct convolution and backward matches finite differences") {
  SeededRng rng(1, Stream::weights);
  for (std::size_t stride : {1u, 2u}) {
    nn::Conv3x3<double> conv(3, 4, stride, true);
    conv.init(rng);
    for (double& v : conv.b.value.values()) v = rng.normal();
    const auto x = noise<double>({2, 6, 6, 3}, 10 + stride);
    const auto y = conv.forward(x);
    const std::size_t ho = stride == 1 ? 6 : 3;
    REQUIRE(y.dims() == Shape{2, ho, ho, 4});
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t oy = 0; oy < ho; ++oy)
        for (std::size_t ox = 0; ox < ho; ++ox)
          for (std::size_t co = 0; co < 4; ++co) {
            double acc = conv.b.value[co];
            for (int ky = 0; ky < 3; ++ky)
              for (int kx = 0; kx < 3; ++kx) {
                const int iy = static_cast<int>(oy * stride) + ky - 1, ix = static_cast<int>(ox * stride) + kx - 1;
                if (iy < 0 || ix < 0 || iy >= 6 || ix >= 6) continue;
                for (std::size_t c = 0; c < 3; ++c)
                  acc += x[((n * 6 + iy) * 6 + ix) * 3 + c] * conv.w.value[((ky * 3 + kx) * 3 + c) * 4 + co];
              }
            CHECK(y[((n * ho + oy) * ho + ox) * 4 + co] == doctest::Approx(acc).epsilon(1e-12));
          }

    const auto r = noise<double>(y.dims(), 99);
    conv.w.zero_grad();
    conv.b.zero_grad();
    auto dx = conv.backward(r, x);
    auto xp = x;
    for (std::size_t i = 0; i < x.size(); i += 7) {
      const double keep = xp[i];
      xp[i] = keep + 1e-5;
      const double up = dot(conv.forward(xp), r);
      xp[i] = keep - 1e-5;
      const double down = dot(conv.forward(xp), r);
      xp[i] = keep;
      CHECK(rel_err(dx[i], (up - down) / 2e-5) < 1e-6);
    }
    const auto pr = probe_parameters(conv, [&] { return dot(conv.forward(x), r); }, 40, stride);
    CHECK(pr.worst < 1e-6);
  }
}

TEST_CASE("group norm normalizes each frame and group") {
  nn::GroupNorm<double> gn(8, 4);
  gn.init();
  const auto x = noise<double>({3, 4, 4, 8}, 5, 3.0);
  const auto y = gn.forward(x, nullptr);
  for (std::size_t n = 0; n < 3; ++n)
    for (std::size_t g = 0; g < 4; ++g) {
      double s = 0, s2 = 0;
      for (std::size_t p = 0; p < 16; ++p)
        for (std::size_t c = 2 * g; c < 2 * g + 2; ++c) {
          const double v = y[(n * 16 + p) * 8 + c];
          s += v;
          s2 += v * v;
        }
      CHECK(std::abs(s / 32) < 1e-12);
      CHECK(s2 / 32 == doctest::Approx(1.0).epsilon(1e-5));
    }
}

TEST_CASE("whole denoiser gradients match finite differences") {
  const auto cfg = small_config();
  UNet<double> unet(cfg);
  SeededRng rng(7, Stream::weights);
  randomize(unet, rng, 0.3);
  zero_grads(unet);

  const std::size_t F = 4;
  const FrameSamplingPlan plan(AttentionMode::sbist, F, 2);
  const auto x = noise<double>({F, 8, 8, 4}, 21);
  const std::vector<int> t{10, 500, 999, 250};
  TextBatch<double> text{{noise<double>({3, 6}, 22), noise<double>({1, 6}, 23)}, {0, 1, 1, 0}};
  ControlResiduals<double> res;
  const auto shapes = unet.residual_shapes(F);
  for (std::size_t l = 0; l < cfg.levels(); ++l) res.skips.push_back(noise<double>(shapes[l], 30 + l));
  res.mid = noise<double>(shapes.back(), 39);
  const auto r = noise<double>({F, 8, 8, 4}, 24);

  UNet<double>::Cache cache;
  const auto y = unet.forward(x, t, text, plan, &res, &cache);
  ControlResiduals<double> dres;
  unet.backward(r, text, plan, cache, &dres);
  auto loss = [&] { return dot(unet.forward(x, t, text, plan, &res, nullptr), r); };

  const auto pr = probe_parameters(unet, loss, 80, 3);
  MESSAGE("denoiser worst relative error " << pr.worst);
  CHECK(pr.probes == 80);
  CHECK(pr.worst < 1e-5);

  SeededRng pick(4, Stream::general);
  double worst = 0;
  for (std::size_t k = 0; k < 30; ++k) {
    const bool mid = k % 3 == 2;
    Tensor<double>& target = mid ? res.mid : res.skips[k % 2];
    const Tensor<double>& grad = mid ? dres.mid : dres.skips[k % 2];
    const std::size_t i = pick.below(target.size());
    const double keep = target[i];
    target[i] = keep + 1e-5;
    const double up = loss();
    target[i] = keep - 1e-5;
    const double down = loss();
    target[i] = keep;
    worst = std::max(worst, rel_err(grad[i], (up - down) / 2e-5));
  }
  CHECK(worst < 1e-5);
}

TEST_CASE("control branch gradients match finite differences, stem included") {
  const auto cfg = small_config();
  ControlBranch<double> branch(cfg);
  SeededRng rng(8, Stream::weights);
  randomize(branch, rng, 0.3);
  zero_grads(branch);

  const std::size_t F = 3;
  const FrameSamplingPlan plan(AttentionMode::sparse_causal, F);
  const auto cond = noise<double>({F, 32, 32, 1}, 40);
  const auto eps = noise<double>({F, 8, 8, 4}, 41);
  const std::vector<int> t{100, 100, 100};
  const auto text = TextBatch<double>::shared(noise<double>({2, 6}, 42), F);
  std::vector<Tensor<double>> r;
  for (const auto& s : UNet<double>(cfg).residual_shapes(F)) r.push_back(noise<double>(s, 50 + r.size()));

  auto loss_of = [&](const ControlResiduals<double>& o) {
    return dot(o.skips[0], r[0]) + dot(o.skips[1], r[1]) + dot(o.mid, r[2]);
  };
  auto loss = [&] { return loss_of(branch.forward(branch.encode_condition(cond, nullptr) + eps, t, text, plan, nullptr)); };

  ControlBranch<double>::StemCache sc;
  ControlBranch<double>::Cache cc;
  (void)branch.forward(branch.encode_condition(cond, &sc) + eps, t, text, plan, &cc);
  const auto dc = branch.backward({{r[0], r[1]}, r[2]}, text, plan, cc);
  branch.encode_condition_backward(dc, sc);

  const auto pr = probe_parameters(branch, loss, 80, 5);
  MESSAGE("control worst relative error " << pr.worst);
  CHECK(pr.worst < 1e-5);
}

TEST_CASE("inflated model on a static video reproduces the image model per frame") {
  auto cfg = small_config();
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    auto unet = std::make_shared<UNet<double>>(cfg);
    SeededRng rng(seed, Stream::weights);
    unet->init(rng);
    const ImageModel<double> image{unet};
    const auto x = noise<double>({1, 4, 8, 8}, 60 + seed);
    const auto text = noise<double>({2, 6}, 70 + seed);
    const auto ref = image_denoise(image, x, 321, text);
    for (AttentionMode mode : {AttentionMode::sbist, AttentionMode::sparse_causal, AttentionMode::dense}) {
      const auto video = inflate_2d_to_3d(image, FrameSamplingPlan(mode, 1, 3));
      CHECK(video.unet.get() == unet.get());
      const std::size_t F = 7;
      const auto y = unet_denoise<double>(video, repeat_leading(x.reshaped({4, 8, 8}), F), 321, text, nullptr);
      double worst = 0;
      for (std::size_t f = 0; f < F; ++f)
        for (std::size_t i = 0; i < ref.size(); ++i) worst = std::max(worst, std::abs(y.slice(f)[i] - ref[i]));
      CHECK(worst < 1e-6);
    }
  }
}

TEST_CASE("inflated model mixes information across differing frames") {
  const auto cfg = small_config();
  auto unet = std::make_shared<UNet<double>>(cfg);
  SeededRng rng(11, Stream::weights);
  unet->init(rng);
  const ImageModel<double> image{unet};
  const auto video = inflate_2d_to_3d(image, FrameSamplingPlan(AttentionMode::sbist, 1, 3));
  const auto z = noise<double>({4, 4, 8, 8}, 80);
  const auto text = noise<double>({1, 6}, 81);
  const auto y = unet_denoise<double>(video, z, 500, text, nullptr);
  const auto per_frame = image_denoise(image, z, 500, text);
  CHECK(max_abs_diff(y, per_frame) > 1e-3);
}

TEST_CASE("zero residuals leave the denoiser output unchanged") {
  const auto cfg = small_config();
  auto unet = std::make_shared<UNet<double>>(cfg);
  SeededRng rng(12, Stream::weights);
  unet->init(rng);
  const VideoModel<double> video{unet, FrameSamplingPlan(AttentionMode::sbist, 1)};
  const auto z = noise<double>({3, 4, 8, 8}, 90);
  const auto text = noise<double>({1, 6}, 91);
  ControlResiduals<double> zero;
  const auto shapes = unet->residual_shapes(3);
  for (std::size_t l = 0; l < cfg.levels(); ++l) zero.skips.emplace_back(shapes[l]);
  zero.mid = Tensor<double>(shapes.back());
  const auto a = unet_denoise<double>(video, z, 40, text, nullptr);
  const auto b = unet_denoise(video, z, 40, text, &zero);
  CHECK(a.dims() == z.dims());
  CHECK(max_abs_diff(a, b) <= 1e-7);

  zero.mid = Tensor<double>({3, 2, 2, 12});
  CHECK_THROWS_AS((void)unet_denoise(video, z, 40, text, &zero), std::invalid_argument);
}

TEST_CASE("fresh control branch is an exact clone emitting zero residuals") {
  NetworkConfig cfg;
  auto unet = std::make_shared<UNet<float>>(cfg);
  SeededRng rng(13, Stream::weights);
  unet->init(rng);
  auto branch = std::make_shared<ControlBranch<float>>(ControlBranch<float>::clone_from(*unet, rng));

  std::vector<Tensor<float>> a, b;
  visit_parameters<float>(unet->encoder, [&](const std::string&, const nn::Param<float>& p) { a.push_back(p.value); });
  visit_parameters<float>(branch->encoder, [&](const std::string&, const nn::Param<float>& p) { b.push_back(p.value); });
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);

  const std::size_t F = 8;
  const auto ctrl = inflate_control<float>(branch, FrameSamplingPlan(AttentionMode::sbist, 1));
  const auto c_cond = noise<float>({F, 4, 32, 32}, 100);
  const auto res = control_forward(ctrl, c_cond, 700, encode_text<float>("a red square", cfg.text_dim));
  const auto shapes = unet->residual_shapes(F);
  REQUIRE(res.skips.size() == 2);
  CHECK(res.skips[0].dims() == Shape{8, 32, 32, 16});
  CHECK(res.skips[1].dims() == Shape{8, 16, 16, 32});
  CHECK(res.mid.dims() == Shape{8, 16, 16, 32});
  CHECK(res.skips[0].dims() == shapes[0]);
  CHECK(res.mid.dims() == shapes[2]);
  for (const auto* t : {&res.skips[0], &res.skips[1], &res.mid})
    for (float v : t->values()) REQUIRE(v == 0.0f);
}

TEST_CASE("condition stem maps rasters to latent resolution and zero to zero") {
  const auto cfg = small_config();
  ControlBranch<double> branch(cfg);
  SeededRng rng(14, Stream::weights);
  randomize(branch, rng, 0.5);
  const auto zero = encode_condition(branch, Tensor<double>({2, 1, 32, 32}));
  CHECK(zero.dims() == Shape{2, 4, 8, 8});
  for (double v : zero.values()) CHECK(v == 0.0);
  CHECK_THROWS_AS((void)encode_condition(branch, Tensor<double>({2, 3, 32, 32})), std::invalid_argument);
  CHECK_THROWS_AS((void)encode_condition(branch, Tensor<double>({2, 1, 16, 16})), std::invalid_argument);
}

TEST_CASE("golden summaries of denoiser, control branch and condition stem") {
  // Frozen from the reference run; double precision so the values do not
  // depend on vectorization.
  const auto cfg = small_config();
  auto unet = std::make_shared<UNet<double>>(cfg);
  SeededRng rng(2024, Stream::weights);
  unet->init(rng);
  ControlBranch<double> branch = ControlBranch<double>::clone_from(*unet, rng);
  randomize(branch, rng, 0.2);
  const auto text = encode_text<double>("a blue circle", cfg.text_dim);
  const auto z = noise<double>({3, 4, 8, 8}, 2025);
  const auto cond = noise<double>({3, 1, 32, 32}, 2026);

  auto summary = [](const Tensor<double>& t) {
    double s = 0, s2 = 0;
    for (double v : t.values()) {
      s += v;
      s2 += v * v;
    }
    return std::array<double, 3>{s, s2, t[t.size() / 3]};
  };
  const VideoModel<double> video{unet, FrameSamplingPlan(AttentionMode::sbist, 1)};
  const ControlModel<double> ctrl{std::make_shared<ControlBranch<double>>(branch), video.plan};
  const auto enc = encode_condition(branch, cond);
  const auto res = control_forward(ctrl, enc + z, 480, text);
  const auto eps = unet_denoise(video, z, 480, text, &res);

  const auto se = summary(enc), sr = summary(res.mid), sy = summary(eps);
  MESSAGE(std::setprecision(17) << se[0] << " " << se[1] << " " << se[2] << " | " << sr[0] << " " << sr[1] << ' '
                                << sr[2] << " | " << sy[0] << " " << sy[1] << " " << sy[2]);
  const std::array<double, 9> got{se[0], se[1], se[2], sr[0], sr[1], sr[2], sy[0], sy[1], sy[2]};
  const std::array<double, 9> golden{10.448830219884737, 25.405526916849375, -0.029530470280368204,
                                     183.78933016975992, 614.61009076852804,  -1.0931824087055058,
                                     -5.3680963692229478, 258.87933318950599, 0.69536286870615915};
  for (std::size_t i = 0; i < 9; ++i) CHECK(got[i] == doctest::Approx(golden[i]).epsilon(1e-9));
}

TEST_CASE("network config round-trips through JSON and rejects unknown keys") {
  const auto cfg = small_config();
  const nlohmann::json j = cfg;
  const auto back = j.get<NetworkConfig>();
  CHECK(nlohmann::json(back) == j);
  CHECK(json_hash(j) == json_hash(nlohmann::json(back)));
  auto bad = j;
  bad["chanels"] = 3;
  CHECK_THROWS_WITH_AS((void)bad.get<NetworkConfig>(), doctest::Contains("chanels"), std::invalid_argument);
  auto inconsistent = j;
  inconsistent["patch"] = 8;
  CHECK_THROWS_AS((void)inconsistent.get<NetworkConfig>(), std::invalid_argument);
}

TEST_CASE("text stub is deterministic, padded and order sensitive") {
  CHECK(encode_text<float>("red square", 32) == encode_text<float>("red square", 32));
  CHECK(encode_text<float>("  red   square ", 32) == encode_text<float>("red square", 32));
  const auto empty = encode_text<float>("", 32);
  CHECK(empty.dims() == Shape{1, 32});
  CHECK(encode_text<float>("   ", 32) == empty);
  const auto ab = encode_text<double>("a b", 32), ba = encode_text<double>("b a", 32);
  CHECK(ab.dims() == Shape{2, 32});
  CHECK(max_abs_diff(ab, ba) > 0.1);
  CHECK(max_abs_diff(encode_text<float>("red", 32), encode_text<float>("blue", 32)) > 0.1);
}

TEST_CASE("latent codec basis is orthonormal and round-trips on the decoder range") {
  const LatentCodec codec;
  const auto& b = codec.basis();
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) {
      double s = 0;
      for (std::size_t k = 0; k < b[i].size(); ++k) s += b[i][k] * b[j][k];
      CHECK(s == doctest::Approx(i == j ? 1.0 : 0.0).epsilon(1e-14));
    }
  auto z = noise<double>({2, 4, 4, 4}, 110, 0.05);
  const auto img = codec.decode(z);
  CHECK(img.dims() == Shape{2, 16, 16, 3});
  const auto z2 = codec.encode<double>(img);
  CHECK(max_abs_diff(z, z2) < 1e-6);
  const auto img2 = codec.decode(z2);
  CHECK(max_abs_diff(img, img2) < 1e-5);

  Tensor<float> flat({1, 8, 8, 3}, 0.5f);
  const auto flat_z = codec.encode<float>(flat);
  for (float v : flat_z.values()) CHECK(v == doctest::Approx(0.0f).epsilon(1e-7));
  CHECK_THROWS_AS((void)codec.encode<float>(Tensor<float>({1, 6, 8, 3})), std::invalid_argument);
  CHECK_THROWS_AS((void)codec.decode(Tensor<float>({1, 3, 4, 4})), std::invalid_argument);
}

TEST_CASE("checkpoint round trip preserves every tensor and adds none for inflation") {
  NetworkConfig cfg = small_config();
  cfg.level_attention = {false, true};
  Checkpoint ckpt;
  ckpt.config = cfg;
  ckpt.unet = std::make_shared<UNet<float>>(cfg);
  SeededRng rng(15, Stream::weights);
  ckpt.unet->init(rng);
  ckpt.control = std::make_shared<ControlBranch<float>>(ControlBranch<float>::clone_from(*ckpt.unet, rng));
  ckpt.meta = {{"seed", 15}};
  const auto dir = std::filesystem::temp_directory_path() / "condvid_test_ckpt";
  std::filesystem::remove_all(dir);
  save_checkpoint(dir, ckpt);
  const auto back = load_checkpoint(dir);
  CHECK(back.meta.at("seed") == 15);
  CHECK(nlohmann::json(back.config) == nlohmann::json(cfg));
  REQUIRE(back.control);

  std::vector<Tensor<float>> a, b;
  visit_parameters<float>(*ckpt.unet, [&](const std::string&, const nn::Param<float>& p) { a.push_back(p.value); });
  visit_parameters<float>(*back.unet, [&](const std::string&, const nn::Param<float>& p) { b.push_back(p.value); });
  CHECK(a == b);

  const auto names = checkpoint_tensor_names(dir);
  std::size_t tensors = 0;
  auto count = [&](const std::string&, const nn::Param<float>&) { ++tensors; };
  visit_parameters<float>(*ckpt.unet, count);
  visit_parameters<float>(*ckpt.control, count);
  CHECK(names.size() == tensors);
  for (const auto& n : names) CHECK((n.rfind("unet.", 0) == 0 || n.rfind("control.", 0) == 0));

  const ImageModel<float> image{back.unet};
  const auto video = inflate_2d_to_3d(image, FrameSamplingPlan(AttentionMode::dense, 1));
  CHECK(parameter_count(*video.unet) == parameter_count(*ckpt.unet));

  std::filesystem::remove(dir / names.front() += ".cvt1");
  CHECK_THROWS_WITH_AS((void)load_checkpoint(dir), doctest::Contains("cvt1"), std::exception);
  std::filesystem::remove_all(dir);
  CHECK_THROWS_WITH_AS((void)load_checkpoint(dir), doctest::Contains("manifest"), std::runtime_error);
}
