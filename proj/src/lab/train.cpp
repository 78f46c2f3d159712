#include "condvid/lab/train.hpp"

#include <cmath>
#include <stdexcept>

#include "condvid/network/config.hpp"
#include "condvid/network/text.hpp"

namespace condvid {

void TrainConfig::validate() const {
  if (steps < 1 || batch < 1 || !(lr > 0) || log_every < 1)
    throw std::invalid_argument("train config: steps, batch, lr and log_every must be positive");
  if (grad_clip < 0) throw std::invalid_argument("train config: grad_clip must be non-negative");
  if (text_dropout < 0 || text_dropout > 1) throw std::invalid_argument("train config: text_dropout must be in [0, 1]");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"steps", c.steps},         {"batch", c.batch},
       {"lr", c.lr},               {"seed", c.seed},
       {"grad_clip", c.grad_clip}, {"text_dropout", c.text_dropout},
       {"log_every", c.log_every}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  reject_unknown_keys(j, {"steps", "batch", "lr", "seed", "grad_clip", "text_dropout", "log_every"}, "train");
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("steps", c.steps);
  get("batch", c.batch);
  get("lr", c.lr);
  get("seed", c.seed);
  get("grad_clip", c.grad_clip);
  get("text_dropout", c.text_dropout);
  get("log_every", c.log_every);
  c.validate();
}

TrainingSet make_training_set(const std::vector<SyntheticScene>& scenes, const LatentCodec& codec) {
  TrainingSet set;
  for (const auto& sc : scenes) {
    const auto z = codec.encode<float>(sc.frames);
    const Shape latent{z.dim(1), z.dim(2), z.dim(3)};
    const Shape raster{sc.masks.dim(1), sc.masks.dim(2)};
    for (std::size_t f = 0; f < z.dim(0); ++f) {
      const auto zs = z.slice(f);
      const auto ms = sc.masks.slice(f);
      set.latents.emplace_back(latent, std::vector<float>(zs.begin(), zs.end()));
      set.conditions.emplace_back(raster, std::vector<float>(ms.begin(), ms.end()));
      set.captions.push_back(sc.caption);
    }
  }
  return set;
}

template <typename T>
TrainBatch<T> sample_batch(const TrainingSet& data, std::size_t n, const NoiseSchedule& schedule, std::size_t text_dim,
                           double text_dropout, SeededRng& rng) {
  if (data.size() == 0) throw std::invalid_argument("training set is empty");
  const Shape& latent = data.latents[0].dims();
  const std::size_t c = latent[0], h = latent[1], w = latent[2];
  const std::size_t hp = data.conditions[0].dim(0), wp = data.conditions[0].dim(1);
  TrainBatch<T> b;
  b.z_t = Tensor<T>({n, h, w, c});
  b.eps = Tensor<T>({n, h, w, c});
  b.eps_c = Tensor<T>({n, h, w, c});
  b.cond = Tensor<T>({n, hp, wp, 1});
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t idx = rng.below(data.size());
    const int t = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(schedule.steps())));
    const auto eps = gaussian_noise<double>(latent, rng);
    const auto eps_c = gaussian_noise<double>(latent, rng);
    const bool drop = rng.uniform() < text_dropout;
    const double a = std::sqrt(schedule.alpha_bar(t)), s = std::sqrt(1.0 - schedule.alpha_bar(t));
    const auto& z0 = data.latents[idx];
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t p = 0; p < h * w; ++p) {
        const std::size_t src = ch * h * w + p, dst = (i * h * w + p) * c + ch;
        b.eps[dst] = static_cast<T>(eps[src]);
        b.eps_c[dst] = static_cast<T>(eps_c[src]);
        b.z_t[dst] = static_cast<T>(a * z0[src] + s * eps[src]);
      }
    const auto& m = data.conditions[idx];
    for (std::size_t p = 0; p < hp * wp; ++p) b.cond[i * hp * wp + p] = static_cast<T>(m[p]);
    b.t.push_back(t);
    b.text.items.push_back(encode_text<T>(drop ? "" : data.captions[idx], text_dim));
    b.text.of_frame.push_back(i);
  }
  return b;
}

namespace {

template <typename T>
double mse_and_grad(const Tensor<T>& y, const Tensor<T>& target, Tensor<T>* dy) {
  double loss = 0;
  const double scale = 2.0 / static_cast<double>(y.size());
  if (dy) *dy = Tensor<T>(y.dims());
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double d = static_cast<double>(y[i]) - static_cast<double>(target[i]);
    loss += d * d;
    if (dy) (*dy)[i] = static_cast<T>(scale * d);
  }
  return loss / static_cast<double>(y.size());
}

template <typename Model>
void zero_trainable(Model& m) {
  m.visit("", [](const std::string&, auto& p) {
    if (p.trainable()) p.grad.fill(0);
  });
}

template <typename Model>
void set_trainable(Model& m, bool on) {
  m.visit("", [on](const std::string&, auto& p) { on ? p.zero_grad() : p.freeze(); });
}

}  // namespace

template <typename T>
double denoiser_loss(UNet<T>& unet, const TrainBatch<T>& batch, bool backward) {
  const FrameSamplingPlan plan(AttentionMode::self, batch.t.size());
  typename UNet<T>::Cache cache;
  const auto y = unet.forward(batch.z_t, batch.t, batch.text, plan, nullptr, backward ? &cache : nullptr);
  Tensor<T> dy;
  const double loss = mse_and_grad(y, batch.eps, backward ? &dy : nullptr);
  if (backward) unet.backward(dy, batch.text, plan, cache, nullptr);
  return loss;
}

template <typename T>
double control_loss(UNet<T>& unet, ControlBranch<T>& branch, const TrainBatch<T>& batch, bool backward) {
  const FrameSamplingPlan plan(AttentionMode::self, batch.t.size());
  typename ControlBranch<T>::StemCache stem_cache;
  typename ControlBranch<T>::Cache branch_cache;
  typename UNet<T>::Cache unet_cache;
  const auto c_cond = branch.encode_condition(batch.cond, backward ? &stem_cache : nullptr) + batch.eps_c;
  const auto res = branch.forward(c_cond, batch.t, batch.text, plan, backward ? &branch_cache : nullptr);
  const auto y = unet.forward(batch.z_t, batch.t, batch.text, plan, &res, backward ? &unet_cache : nullptr);
  Tensor<T> dy;
  const double loss = mse_and_grad(y, batch.eps, backward ? &dy : nullptr);
  if (backward) {
    ControlResiduals<T> dres;
    unet.backward(dy, batch.text, plan, unet_cache, &dres, false);
    const auto dc = branch.backward(dres, batch.text, plan, branch_cache);
    branch.encode_condition_backward(dc, stem_cache);
  }
  return loss;
}

template <typename Model>
void Adam::step(Model& m) {
  ++step_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(step_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(step_));
  std::size_t k = 0;
  m.visit("", [&](const std::string&, nn::Param<float>& p) {
    if (!p.trainable()) return;
    if (k == m_.size()) {
      m_.emplace_back(p.value.size(), 0.0f);
      v_.emplace_back(p.value.size(), 0.0f);
    }
    auto& mk = m_[k];
    auto& vk = v_[k];
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = p.grad[i];
      mk[i] = static_cast<float>(beta1_ * mk[i] + (1 - beta1_) * g);
      vk[i] = static_cast<float>(beta2_ * vk[i] + (1 - beta2_) * g * g);
      p.value[i] -= static_cast<float>(lr_ * (mk[i] / c1) / (std::sqrt(vk[i] / c2) + eps_));
    }
    ++k;
  });
}

template <typename Model>
double clip_gradients(Model& m, double max_norm) {
  double sq = 0;
  m.visit("", [&](const std::string&, auto& p) {
    if (p.trainable())
      for (auto g : p.grad.values()) sq += static_cast<double>(g) * static_cast<double>(g);
  });
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const double s = max_norm / norm;
    m.visit("", [&](const std::string&, auto& p) {
      if (p.trainable())
        for (auto& g : p.grad.values()) g = static_cast<std::remove_reference_t<decltype(g)>>(g * s);
    });
  }
  return norm;
}

namespace {

void check_finite(double loss, int step) {
  if (!std::isfinite(loss)) throw std::runtime_error("training diverged: non-finite loss at step " + std::to_string(step));
}

constexpr std::size_t kHeldoutSamples = 64;
constexpr std::uint64_t kHeldoutSeed = 0x4e1d07;

}  // namespace

std::shared_ptr<UNet<float>> train_image_denoiser(const TrainingSet& data, const NetworkConfig& net,
                                                  const TrainConfig& cfg, const TrainingSet* heldout, TrainLog* log,
                                                  const ProgressFn& progress) {
  cfg.validate();
  if (data.size() == 0) throw std::invalid_argument("train_image_denoiser: dataset is empty");
  auto unet = std::make_shared<UNet<float>>(net);
  SeededRng init(cfg.seed, Stream::weights);
  unet->init(init);
  set_trainable(*unet, true);
  if (log && heldout)
    log->heldout_before = heldout_denoiser_loss(*unet, *heldout, kHeldoutSamples, kHeldoutSeed, cfg.schedule);

  const NoiseSchedule schedule = cfg.schedule.build();
  SeededRng rng(cfg.seed, Stream::training);
  Adam adam(cfg.lr);
  for (int step = 0; step < cfg.steps; ++step) {
    const auto batch = sample_batch<float>(data, cfg.batch, schedule, net.text_dim, cfg.text_dropout, rng);
    zero_trainable(*unet);
    const double loss = denoiser_loss(*unet, batch, true);
    check_finite(loss, step);
    clip_gradients(*unet, cfg.grad_clip);
    adam.step(*unet);
    if (log) log->losses.push_back(loss);
    if (progress && (step % cfg.log_every == 0 || step + 1 == cfg.steps)) progress(step, loss);
  }
  if (log && heldout)
    log->heldout_after = heldout_denoiser_loss(*unet, *heldout, kHeldoutSamples, kHeldoutSeed, cfg.schedule);
  set_trainable(*unet, false);
  return unet;
}

std::shared_ptr<ControlBranch<float>> train_control_branch(const TrainingSet& data, const UNet<float>& unet,
                                                           const TrainConfig& cfg, const TrainingSet* heldout,
                                                           TrainLog* log, const ProgressFn& progress) {
  cfg.validate();
  if (data.size() == 0) throw std::invalid_argument("train_control_branch: dataset is empty");
  UNet<float> frozen = unet;
  set_trainable(frozen, false);
  SeededRng init(cfg.seed, Stream::weights);
  auto branch = std::make_shared<ControlBranch<float>>(ControlBranch<float>::clone_from(frozen, init));
  set_trainable(*branch, true);
  if (log && heldout)
    log->heldout_before = heldout_control_loss(frozen, *branch, *heldout, kHeldoutSamples, kHeldoutSeed, cfg.schedule);

  const NoiseSchedule schedule = cfg.schedule.build();
  SeededRng rng(cfg.seed, Stream::training);
  Adam adam(cfg.lr);
  for (int step = 0; step < cfg.steps; ++step) {
    const auto batch = sample_batch<float>(data, cfg.batch, schedule, frozen.config.text_dim, cfg.text_dropout, rng);
    zero_trainable(*branch);
    const double loss = control_loss(frozen, *branch, batch, true);
    check_finite(loss, step);
    clip_gradients(*branch, cfg.grad_clip);
    adam.step(*branch);
    if (log) log->losses.push_back(loss);
    if (progress && (step % cfg.log_every == 0 || step + 1 == cfg.steps)) progress(step, loss);
  }
  if (log && heldout)
    log->heldout_after = heldout_control_loss(frozen, *branch, *heldout, kHeldoutSamples, kHeldoutSeed, cfg.schedule);
  set_trainable(*branch, false);
  return branch;
}

double heldout_denoiser_loss(const UNet<float>& unet, const TrainingSet& data, std::size_t samples,
                             std::uint64_t seed, const LinearScheduleSpec& schedule_spec) {
  const NoiseSchedule schedule = schedule_spec.build();
  UNet<float> m = unet;
  SeededRng rng(seed, Stream::data);
  double total = 0;
  std::size_t seen = 0;
  while (seen < samples) {
    const std::size_t n = std::min<std::size_t>(8, samples - seen);
    const auto batch = sample_batch<float>(data, n, schedule, m.config.text_dim, 0.0, rng);
    total += denoiser_loss(m, batch, false) * static_cast<double>(n);
    seen += n;
  }
  return total / static_cast<double>(samples);
}

double heldout_control_loss(const UNet<float>& unet, const ControlBranch<float>& branch, const TrainingSet& data,
                            std::size_t samples, std::uint64_t seed, const LinearScheduleSpec& schedule_spec) {
  const NoiseSchedule schedule = schedule_spec.build();
  UNet<float> m = unet;
  ControlBranch<float> b = branch;
  SeededRng rng(seed, Stream::data);
  double total = 0;
  std::size_t seen = 0;
  while (seen < samples) {
    const std::size_t n = std::min<std::size_t>(8, samples - seen);
    const auto batch = sample_batch<float>(data, n, schedule, m.config.text_dim, 0.0, rng);
    total += control_loss(m, b, batch, false) * static_cast<double>(n);
    seen += n;
  }
  return total / static_cast<double>(samples);
}

GradCheckReport gradient_check(const NetworkConfig& net, std::size_t probes, std::uint64_t seed) {
  SeededRng wrng(seed, Stream::weights);
  UNet<double> unet(net);
  unet.init(wrng);
  auto jitter = [&](auto& model) {
    model.visit("", [&](const std::string&, nn::Param<double>& p) {
      for (double& v : p.value.values()) v += 0.1 * wrng.normal();
    });
  };
  jitter(unet);
  ControlBranch<double> branch = ControlBranch<double>::clone_from(unet, wrng);
  jitter(branch);

  SceneConfig sc;
  sc.size = net.image_size();
  sc.frames = 2;
  sc.min_radius = static_cast<double>(sc.size) / 8;
  sc.max_radius = static_cast<double>(sc.size) / 4;
  SeededRng drng(seed, Stream::data);
  const auto data = make_training_set(gen_moving_shapes(2, sc, drng), LatentCodec(net.patch, net.latent_channels));
  SeededRng brng(seed, Stream::training);
  const auto batch = sample_batch<double>(data, 2, LinearScheduleSpec{}.build(), net.text_dim, 0.5, brng);

  GradCheckReport report;
  SeededRng pick(seed, Stream::general);
  const double h = 1e-6;
  auto run = [&](auto& model, const std::string& prefix, const std::function<double(bool)>& loss, std::size_t count) {
    std::vector<std::pair<std::string, nn::Param<double>*>> params;
    model.visit(prefix, [&](const std::string& name, nn::Param<double>& p) {
      if (p.trainable()) params.emplace_back(name, &p);
    });
    zero_trainable(model);
    (void)loss(true);
    for (std::size_t k = 0; k < count; ++k) {
      auto& [name, p] = params[pick.below(params.size())];
      const std::size_t i = pick.below(p->value.size());
      const double keep = p->value[i];
      p->value[i] = keep + h;
      const double up = loss(false);
      p->value[i] = keep - h;
      const double down = loss(false);
      p->value[i] = keep;
      GradProbe g{name, i, p->grad[i], (up - down) / (2 * h), 0};
      g.rel_error = std::abs(g.analytic - g.numeric) / std::max({std::abs(g.analytic), std::abs(g.numeric), 1e-6});
      report.worst = std::max(report.worst, g.rel_error);
      report.probes.push_back(std::move(g));
    }
  };

  set_trainable(unet, true);
  run(unet, "unet", [&](bool bw) { return denoiser_loss(unet, batch, bw); }, probes - probes / 2);
  set_trainable(unet, false);
  set_trainable(branch, true);
  run(branch, "control", [&](bool bw) { return control_loss(unet, branch, batch, bw); }, probes / 2);
  return report;
}

#define CONDVID_INSTANTIATE(T)                                                                                   \
  template TrainBatch<T> sample_batch<T>(const TrainingSet&, std::size_t, const NoiseSchedule&, std::size_t,    \
                                         double, SeededRng&);                                                    \
  template double denoiser_loss<T>(UNet<T>&, const TrainBatch<T>&, bool);                                        \
  template double control_loss<T>(UNet<T>&, ControlBranch<T>&, const TrainBatch<T>&, bool);                     \
  template double clip_gradients<UNet<T>>(UNet<T>&, double);                                                     \
  template double clip_gradients<ControlBranch<T>>(ControlBranch<T>&, double);
CONDVID_INSTANTIATE(float)
CONDVID_INSTANTIATE(double)
#undef CONDVID_INSTANTIATE

template void Adam::step<UNet<float>>(UNet<float>&);
template void Adam::step<ControlBranch<float>>(ControlBranch<float>&);

}  // namespace condvid
