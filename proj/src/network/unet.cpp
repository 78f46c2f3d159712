#include "condvid/network/unet.hpp"

#include <stdexcept>

namespace condvid {

namespace {

std::string child(const std::string& prefix, const std::string& name) {
  return prefix.empty() ? name : prefix + "." + name;
}

void require_shape(const Shape& got, const Shape& want, const char* what) {
  if (got != want)
    throw std::invalid_argument(std::string(what) + ": expected " + shape_string(want) + ", got " + shape_string(got));
}

}  // namespace

// ---- BasicBlock -------------------------------------------------------------------

namespace nn {

template <typename T>
BasicBlock<T>::BasicBlock(std::size_t cin, std::size_t cout, bool attention, const NetworkConfig& cfg)
    : has_attention(attention),
      res(cin, cout, cfg.temb_dim, cfg.groups),
      attn(attention ? AttentionBlock<T>(cout, cfg.heads) : AttentionBlock<T>()),
      cross(cout, cfg.text_dim),
      ff(cout) {}

template <typename T>
void BasicBlock<T>::init(SeededRng& rng) {
  res.init(rng);
  if (has_attention) attn.init(rng);
  cross.init(rng);
  ff.init(rng);
}

template <typename T>
Tensor<T> BasicBlock<T>::forward(const Tensor<T>& x, const Tensor<T>& temb, const TextBatch<T>& text,
                                 const FrameSamplingPlan& plan, Cache* cache) const {
  Tensor<T> h = res.forward(x, temb, cache ? &cache->res : nullptr);
  const Shape spatial = h.dims();
  h.reshape({spatial[0], spatial[1] * spatial[2], spatial[3]});
  if (has_attention) h = attn.forward(h, plan, cache ? &cache->attn : nullptr);
  h = cross.forward(h, text, cache ? &cache->cross : nullptr);
  h = ff.forward(h, cache ? &cache->ff : nullptr);
  h.reshape(spatial);
  return h;
}

template <typename T>
Tensor<T> BasicBlock<T>::backward(const Tensor<T>& dy, const TextBatch<T>& text, const FrameSamplingPlan& plan,
                                  const Cache& cache, Tensor<T>& dtemb) {
  const Shape spatial = dy.dims();
  Tensor<T> d = dy.reshaped({spatial[0], spatial[1] * spatial[2], spatial[3]});
  d = ff.backward(d, cache.ff);
  d = cross.backward(d, text, cache.cross);
  if (has_attention) d = attn.backward(d, plan, cache.attn);
  d.reshape(spatial);
  return res.backward(d, cache.res, dtemb);
}

template <typename T>
void BasicBlock<T>::visit(const std::string& prefix, const ParamFn<T>& fn) {
  res.visit(prefix + ".res", fn);
  if (has_attention) attn.visit(prefix + ".attn", fn);
  cross.visit(prefix + ".cross", fn);
  ff.visit(prefix + ".ff", fn);
}

}  // namespace nn

// ---- UNetEncoder ------------------------------------------------------------------

template <typename T>
UNetEncoder<T>::UNetEncoder(const NetworkConfig& cfg)
    : time(cfg.time_dim, cfg.temb_dim), conv_in(cfg.latent_channels, cfg.channels[0]) {
  cfg.validate();
  const std::size_t levels = cfg.levels();
  for (std::size_t l = 0; l < levels; ++l) {
    const std::size_t cin = l == 0 ? cfg.channels[0] : cfg.channels[l - 1];
    blocks.emplace_back(cin, cfg.channels[l], cfg.level_attention[l], cfg);
    if (l + 1 < levels) downs.emplace_back(cfg.channels[l], cfg.channels[l], 2);
  }
  mid = nn::BasicBlock<T>(cfg.channels.back(), cfg.channels.back(), cfg.mid_attention, cfg);
}

template <typename T>
void UNetEncoder<T>::init(SeededRng& rng) {
  time.init(rng);
  conv_in.init(rng);
  for (auto& b : blocks) b.init(rng);
  for (auto& d : downs) d.init(rng);
  mid.init(rng);
}

template <typename T>
typename UNetEncoder<T>::Output UNetEncoder<T>::forward(const Tensor<T>& x, const std::vector<int>& t,
                                                        const TextBatch<T>& text, const FrameSamplingPlan& plan,
                                                        Cache* cache) const {
  if (x.rank() != 4 || t.size() != x.dim(0))
    throw std::invalid_argument("encoder needs (N, H, W, C) input and one timestep per frame");
  if (plan.frames() != x.dim(0))
    throw std::invalid_argument("attention plan covers " + std::to_string(plan.frames()) + " frames, input has " +
                                std::to_string(x.dim(0)));
  Output out;
  out.temb = time.forward(t, cache ? &cache->time : nullptr);
  if (cache) {
    cache->x = x;
    cache->blocks.resize(blocks.size());
    cache->down_in.clear();
  }
  Tensor<T> h = conv_in.forward(x);
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    h = blocks[l].forward(h, out.temb, text, plan, cache ? &cache->blocks[l] : nullptr);
    out.skips.push_back(h);
    if (l < downs.size()) {
      if (cache) cache->down_in.push_back(h);
      h = downs[l].forward(h);
    }
  }
  out.mid = mid.forward(h, out.temb, text, plan, cache ? &cache->mid : nullptr);
  return out;
}

template <typename T>
Tensor<T> UNetEncoder<T>::backward(const std::vector<Tensor<T>>& dskips, const Tensor<T>& dmid, Tensor<T> dtemb,
                                   const TextBatch<T>& text, const FrameSamplingPlan& plan, const Cache& cache) {
  if (dtemb.empty()) dtemb = Tensor<T>({dmid.dim(0), time.out_dim});
  Tensor<T> dh = mid.backward(dmid, text, plan, cache.mid, dtemb);
  for (std::size_t l = blocks.size(); l-- > 0;) {
    if (l < downs.size()) dh = downs[l].backward(dh, cache.down_in[l]);
    dh += dskips[l];
    dh = blocks[l].backward(dh, text, plan, cache.blocks[l], dtemb);
  }
  Tensor<T> dx = conv_in.backward(dh, cache.x);
  time.backward(dtemb, cache.time);
  return dx;
}

template <typename T>
void UNetEncoder<T>::visit(const std::string& prefix, const nn::ParamFn<T>& fn) {
  time.visit(prefix + ".time", fn);
  conv_in.visit(prefix + ".conv_in", fn);
  for (std::size_t l = 0; l < blocks.size(); ++l) blocks[l].visit(prefix + ".block" + std::to_string(l), fn);
  for (std::size_t l = 0; l < downs.size(); ++l) downs[l].visit(prefix + ".down" + std::to_string(l), fn);
  mid.visit(prefix + ".mid", fn);
}

// ---- UNet -----------------------------------------------------------------------------

template <typename T>
UNet<T>::UNet(const NetworkConfig& cfg)
    : config(cfg),
      encoder(cfg),
      out_norm(cfg.channels[0], cfg.groups),
      conv_out(cfg.channels[0], cfg.latent_channels) {
  const std::size_t levels = cfg.levels();
  for (std::size_t l = 0; l < levels; ++l) {
    const std::size_t below = l + 1 < levels ? cfg.channels[l + 1] : cfg.channels[l];
    dec_blocks.emplace_back(below + cfg.channels[l], cfg.channels[l], cfg.level_attention[l], cfg);
    if (l + 1 < levels) ups.emplace_back(cfg.channels[l + 1], cfg.channels[l + 1]);
  }
}

template <typename T>
void UNet<T>::init(SeededRng& rng) {
  encoder.init(rng);
  for (auto& b : dec_blocks) b.init(rng);
  for (auto& u : ups) u.init(rng);
  out_norm.init();
  conv_out.init(rng);
}

template <typename T>
std::vector<Shape> UNet<T>::residual_shapes(std::size_t frames) const {
  std::vector<Shape> shapes;
  for (std::size_t l = 0; l < config.levels(); ++l) {
    const std::size_t s = config.latent_size >> l;
    shapes.push_back({frames, s, s, config.channels[l]});
  }
  shapes.push_back(shapes.back());
  return shapes;
}

template <typename T>
Tensor<T> UNet<T>::forward(const Tensor<T>& x, const std::vector<int>& t, const TextBatch<T>& text,
                           const FrameSamplingPlan& plan, const ControlResiduals<T>* residuals, Cache* cache) const {
  const std::size_t n = x.rank() == 4 ? x.dim(0) : 0;
  require_shape(x.dims(), {n, config.latent_size, config.latent_size, config.latent_channels}, "denoiser input");
  const std::size_t levels = config.levels();
  if (residuals) {
    const auto shapes = residual_shapes(n);
    if (residuals->skips.size() != levels)
      throw std::invalid_argument("control residuals need " + std::to_string(levels) + " skip tensors");
    for (std::size_t l = 0; l < levels; ++l) require_shape(residuals->skips[l].dims(), shapes[l], "skip residual");
    require_shape(residuals->mid.dims(), shapes.back(), "middle residual");
  }

  auto enc = encoder.forward(x, t, text, plan, cache ? &cache->enc : nullptr);
  if (cache) {
    cache->blocks.resize(levels);
    cache->up_in.assign(levels, Tensor<T>());
  }
  Tensor<T> h = std::move(enc.mid);
  if (residuals) h += residuals->mid;
  for (std::size_t l = levels; l-- > 0;) {
    Tensor<T> skip = std::move(enc.skips[l]);
    if (residuals) skip += residuals->skips[l];
    h = dec_blocks[l].forward(nn::concat_channels(h, skip), enc.temb, text, plan, cache ? &cache->blocks[l] : nullptr);
    if (l > 0) {
      Tensor<T> u = nn::upsample_nearest2(h);
      h = ups[l - 1].forward(u);
      if (cache) cache->up_in[l] = std::move(u);
    }
  }
  Tensor<T> a = out_norm.forward(h, cache ? &cache->out_norm : nullptr);
  Tensor<T> y = conv_out.forward(nn::silu(a));
  if (cache) {
    cache->out_pre = std::move(a);
    cache->temb = std::move(enc.temb);
  }
  return y;
}

template <typename T>
void UNet<T>::backward(const Tensor<T>& dy, const TextBatch<T>& text, const FrameSamplingPlan& plan,
                       const Cache& cache, ControlResiduals<T>* dres, bool through_encoder) {
  const std::size_t levels = config.levels();
  Tensor<T> dtemb({dy.dim(0), config.temb_dim});
  const Tensor<T> ds = conv_out.backward(dy, nn::silu(cache.out_pre));
  Tensor<T> dh = out_norm.backward(nn::silu_backward(ds, cache.out_pre), cache.out_norm);
  std::vector<Tensor<T>> dskips(levels);
  for (std::size_t l = 0; l < levels; ++l) {
    if (l > 0) dh = nn::upsample_nearest2_backward(ups[l - 1].backward(dh, cache.up_in[l]));
    const Tensor<T> dcat = dec_blocks[l].backward(dh, text, plan, cache.blocks[l], dtemb);
    const std::size_t below = l + 1 < levels ? config.channels[l + 1] : config.channels[l];
    nn::split_channels(dcat, below, dh, dskips[l]);
  }
  if (through_encoder) (void)encoder.backward(dskips, dh, dtemb, text, plan, cache.enc);
  if (dres) {
    dres->skips = std::move(dskips);
    dres->mid = std::move(dh);
  }
}

template <typename T>
void UNet<T>::visit(const std::string& prefix, const nn::ParamFn<T>& fn) {
  encoder.visit(child(prefix, "encoder"), fn);
  for (std::size_t l = 0; l < dec_blocks.size(); ++l) dec_blocks[l].visit(child(prefix, "dec" + std::to_string(l)), fn);
  for (std::size_t l = 0; l < ups.size(); ++l) ups[l].visit(child(prefix, "up" + std::to_string(l)), fn);
  out_norm.visit(child(prefix, "out_norm"), fn);
  conv_out.visit(child(prefix, "conv_out"), fn);
}

// ---- ControlBranch ------------------------------------------------------------------------

template <typename T>
ControlBranch<T>::ControlBranch(const NetworkConfig& cfg)
    : config(cfg), encoder(cfg), proj_mid(cfg.channels.back(), cfg.channels.back(), true) {
  std::size_t prev = cfg.cond_channels;
  for (std::size_t c : cfg.stem_channels) {
    stem.emplace_back(prev, c, 2, false);
    prev = c;
  }
  stem.emplace_back(prev, cfg.latent_channels, 1, false);
  for (std::size_t c : cfg.channels) proj.emplace_back(c, c, true);
}

template <typename T>
ControlBranch<T> ControlBranch<T>::clone_from(const UNet<T>& unet, SeededRng& rng) {
  ControlBranch b(unet.config);
  b.encoder = unet.encoder;
  for (auto& s : b.stem) s.init(rng);
  for (auto& p : b.proj) p.init(rng, 0.0);
  b.proj_mid.init(rng, 0.0);
  return b;
}

template <typename T>
Tensor<T> ControlBranch<T>::encode_condition(const Tensor<T>& cond, StemCache* cache) const {
  const std::size_t n = cond.rank() == 4 ? cond.dim(0) : 0;
  require_shape(cond.dims(), {n, config.image_size(), config.image_size(), config.cond_channels}, "condition raster");
  if (cache) {
    cache->inputs.clear();
    cache->pre.clear();
  }
  Tensor<T> h = cond;
  for (std::size_t i = 0; i < stem.size(); ++i) {
    Tensor<T> a = stem[i].forward(h);
    if (cache) cache->inputs.push_back(std::move(h));
    if (i + 1 == stem.size()) return a;
    h = nn::silu(a);
    if (cache) cache->pre.push_back(std::move(a));
  }
  return h;
}

template <typename T>
void ControlBranch<T>::encode_condition_backward(const Tensor<T>& dy, const StemCache& cache) {
  Tensor<T> d = dy;
  for (std::size_t i = stem.size(); i-- > 0;) {
    if (i + 1 < stem.size()) d = nn::silu_backward(d, cache.pre[i]);
    d = stem[i].backward(d, cache.inputs[i]);
  }
}

template <typename T>
ControlResiduals<T> ControlBranch<T>::forward(const Tensor<T>& c_cond, const std::vector<int>& t,
                                              const TextBatch<T>& text, const FrameSamplingPlan& plan,
                                              Cache* cache) const {
  auto enc = encoder.forward(c_cond, t, text, plan, cache ? &cache->enc : nullptr);
  ControlResiduals<T> out;
  for (std::size_t l = 0; l < proj.size(); ++l) out.skips.push_back(proj[l].forward(enc.skips[l]));
  out.mid = proj_mid.forward(enc.mid);
  if (cache) {
    cache->skips = std::move(enc.skips);
    cache->mid = std::move(enc.mid);
  }
  return out;
}

template <typename T>
Tensor<T> ControlBranch<T>::backward(const ControlResiduals<T>& dres, const TextBatch<T>& text,
                                     const FrameSamplingPlan& plan, const Cache& cache) {
  std::vector<Tensor<T>> dskips;
  for (std::size_t l = 0; l < proj.size(); ++l) dskips.push_back(proj[l].backward(dres.skips[l], cache.skips[l]));
  const Tensor<T> dmid = proj_mid.backward(dres.mid, cache.mid);
  return encoder.backward(dskips, dmid, Tensor<T>(), text, plan, cache.enc);
}

template <typename T>
void ControlBranch<T>::visit(const std::string& prefix, const nn::ParamFn<T>& fn) {
  for (std::size_t i = 0; i < stem.size(); ++i) stem[i].visit(child(prefix, "stem" + std::to_string(i)), fn);
  encoder.visit(child(prefix, "encoder"), fn);
  for (std::size_t l = 0; l < proj.size(); ++l) proj[l].visit(child(prefix, "proj" + std::to_string(l)), fn);
  proj_mid.visit(child(prefix, "proj_mid"), fn);
}

template class nn::BasicBlock<float>;
template class nn::BasicBlock<double>;
template class UNetEncoder<float>;
template class UNetEncoder<double>;
template class UNet<float>;
template class UNet<double>;
template class ControlBranch<float>;
template class ControlBranch<double>;

}  // namespace condvid
