#include "condvid/network/layers.hpp"

#include <cmath>
#include <stdexcept>

#include "condvid/numerics/kernels.hpp"
#include "condvid/numerics/parallel.hpp"

namespace condvid::nn {

namespace {

constexpr double kNormEps = 1e-5;

template <typename T>
void init_weight(Param<T>& p, SeededRng& rng, std::size_t fan_in, double gain) {
  p.value = gaussian_noise<T>(p.value.dims(), rng);
  p.value *= static_cast<T>(gain / std::sqrt(static_cast<double>(fan_in)));
}

template <typename T>
void add_bias(Tensor<T>& y, const Param<T>& b) {
  if (b.value.empty()) return;
  const std::size_t c = b.value.size();
  for (std::size_t r = 0; r < y.size() / c; ++r)
    for (std::size_t j = 0; j < c; ++j) y[r * c + j] += b.value[j];
}

template <typename T>
void bias_grad(Param<T>& b, const Tensor<T>& dy) {
  if (b.value.empty() || !b.trainable()) return;
  const std::size_t c = b.value.size();
  for (std::size_t r = 0; r < dy.size() / c; ++r)
    for (std::size_t j = 0; j < c; ++j) b.grad[j] += dy[r * c + j];
}

// Shared normalization: `rows` independent units, each normalizing groups of
// (positions x C/groups) values. GroupNorm uses rows = frames, LayerNorm
// rows = tokens with one position and one group.
template <typename T>
Tensor<T> norm_forward(const Tensor<T>& x, std::size_t rows, std::size_t channels, std::size_t groups,
                       const Param<T>& gamma, const Param<T>& beta, NormCache<T>* cache) {
  const std::size_t positions = x.size() / (rows * channels);
  const std::size_t cg = channels / groups;
  Tensor<T> y(x.dims());
  if (cache) {
    cache->xhat = Tensor<T>(x.dims());
    cache->rstd.assign(rows * groups, T(0));
  }
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t g = 0; g < groups; ++g) {
      const std::size_t base = r * positions * channels + g * cg;
      double sum = 0.0, sq = 0.0;
      for (std::size_t p = 0; p < positions; ++p)
        for (std::size_t c = 0; c < cg; ++c) sum += static_cast<double>(x[base + p * channels + c]);
      const double count = static_cast<double>(positions * cg);
      const double mean = sum / count;
      for (std::size_t p = 0; p < positions; ++p)
        for (std::size_t c = 0; c < cg; ++c) {
          const double d = static_cast<double>(x[base + p * channels + c]) - mean;
          sq += d * d;
        }
      const T rstd = static_cast<T>(1.0 / std::sqrt(sq / count + kNormEps));
      const T m = static_cast<T>(mean);
      if (cache) cache->rstd[r * groups + g] = rstd;
      for (std::size_t p = 0; p < positions; ++p)
        for (std::size_t c = 0; c < cg; ++c) {
          const std::size_t i = base + p * channels + c;
          const T xh = (x[i] - m) * rstd;
          if (cache) cache->xhat[i] = xh;
          y[i] = xh * gamma.value[g * cg + c] + beta.value[g * cg + c];
        }
    }
  return y;
}

template <typename T>
Tensor<T> norm_backward(const Tensor<T>& dy, std::size_t rows, std::size_t channels, std::size_t groups,
                        Param<T>& gamma, Param<T>& beta, const NormCache<T>& cache) {
  const std::size_t positions = dy.size() / (rows * channels);
  const std::size_t cg = channels / groups;
  const Tensor<T>& xhat = cache.xhat;
  if (gamma.trainable())
    for (std::size_t i = 0; i < dy.size(); ++i) gamma.grad[i % channels] += dy[i] * xhat[i];
  if (beta.trainable())
    for (std::size_t i = 0; i < dy.size(); ++i) beta.grad[i % channels] += dy[i];
  Tensor<T> dx(dy.dims());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t g = 0; g < groups; ++g) {
      const std::size_t base = r * positions * channels + g * cg;
      double m1 = 0.0, m2 = 0.0;
      for (std::size_t p = 0; p < positions; ++p)
        for (std::size_t c = 0; c < cg; ++c) {
          const std::size_t i = base + p * channels + c;
          const double dxh = static_cast<double>(dy[i]) * gamma.value[g * cg + c];
          m1 += dxh;
          m2 += dxh * xhat[i];
        }
      const double count = static_cast<double>(positions * cg);
      m1 /= count;
      m2 /= count;
      const double rstd = cache.rstd[r * groups + g];
      for (std::size_t p = 0; p < positions; ++p)
        for (std::size_t c = 0; c < cg; ++c) {
          const std::size_t i = base + p * channels + c;
          const double dxh = static_cast<double>(dy[i]) * gamma.value[g * cg + c];
          dx[i] = static_cast<T>(rstd * (dxh - m1 - xhat[i] * m2));
        }
    }
  return dx;
}

template <typename T>
void require_last_dim(const Tensor<T>& x, std::size_t c, const char* who) {
  if (x.rank() < 2 || x.dims().back() != c)
    throw std::invalid_argument(std::string(who) + ": expected trailing extent " + std::to_string(c) + ", got " +
                                shape_string(x.dims()));
}

}  // namespace

// ---- Linear ---------------------------------------------------------------

template <typename T>
Linear<T>::Linear(std::size_t in_, std::size_t out_, bool bias) : in(in_), out(out_) {
  w.value = Tensor<T>({in, out});
  if (bias) b.value = Tensor<T>({out});
}

template <typename T>
void Linear<T>::init(SeededRng& rng, double gain) {
  init_weight(w, rng, in, gain);
  if (!b.value.empty()) b.value.fill(T(0));
}

template <typename T>
Tensor<T> Linear<T>::forward(const Tensor<T>& x) const {
  if (x.dims().back() != in)
    throw std::invalid_argument("linear layer expects width " + std::to_string(in) + ", got " +
                                shape_string(x.dims()));
  Shape dims = x.dims();
  dims.back() = out;
  Tensor<T> y(dims);
  gemm(x.size() / in, out, in, x.data(), w.value.data(), y.data(), false);
  add_bias(y, b);
  return y;
}

template <typename T>
Tensor<T> Linear<T>::backward(const Tensor<T>& dy, const Tensor<T>& x) {
  const std::size_t m = x.size() / in;
  if (w.trainable()) {
    gemm_tn(in, out, m, x.data(), dy.data(), w.grad.data(), true);
  }
  bias_grad(b, dy);
  Tensor<T> dx(x.dims());
  gemm_nt(m, in, out, dy.data(), w.value.data(), dx.data(), false);
  return dx;
}

template <typename T>
void Linear<T>::visit(const std::string& prefix, const ParamFn<T>& fn) {
  fn(prefix + ".w", w);
  if (!b.value.empty()) fn(prefix + ".b", b);
}

// ---- Conv3x3 ----------------------------------------------------------------

namespace {

template <typename T>
void im2col(const T* x, std::size_t h, std::size_t w, std::size_t c, std::size_t stride, std::size_t ho,
            std::size_t wo, T* col) {
  const std::size_t row_len = 9 * c;
  for (std::size_t oy = 0; oy < ho; ++oy)
    for (std::size_t ox = 0; ox < wo; ++ox) {
      T* dst = col + (oy * wo + ox) * row_len;
      for (std::size_t ky = 0; ky < 3; ++ky)
        for (std::size_t kx = 0; kx < 3; ++kx) {
          T* cell = dst + (ky * 3 + kx) * c;
          const long iy = static_cast<long>(oy * stride + ky) - 1;
          const long ix = static_cast<long>(ox * stride + kx) - 1;
          if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(w)) {
            std::fill(cell, cell + c, T(0));
          } else {
            const T* src = x + (static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix)) * c;
            std::copy(src, src + c, cell);
          }
        }
    }
}

template <typename T>
void col2im_add(const T* col, std::size_t h, std::size_t w, std::size_t c, std::size_t stride, std::size_t ho,
                std::size_t wo, T* x) {
  const std::size_t row_len = 9 * c;
  for (std::size_t oy = 0; oy < ho; ++oy)
    for (std::size_t ox = 0; ox < wo; ++ox) {
      const T* src = col + (oy * wo + ox) * row_len;
      for (std::size_t ky = 0; ky < 3; ++ky)
        for (std::size_t kx = 0; kx < 3; ++kx) {
          const long iy = static_cast<long>(oy * stride + ky) - 1;
          const long ix = static_cast<long>(ox * stride + kx) - 1;
          if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(w)) continue;
          T* dst = x + (static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix)) * c;
          const T* cell = src + (ky * 3 + kx) * c;
          for (std::size_t i = 0; i < c; ++i) dst[i] += cell[i];
        }
    }
}

}  // namespace

template <typename T>
Conv3x3<T>::Conv3x3(std::size_t cin_, std::size_t cout_, std::size_t stride_, bool bias)
    : cin(cin_), cout(cout_), stride(stride_) {
  if (stride != 1 && stride != 2) throw std::invalid_argument("conv stride must be 1 or 2");
  w.value = Tensor<T>({9 * cin, cout});
  if (bias) b.value = Tensor<T>({cout});
}

template <typename T>
void Conv3x3<T>::init(SeededRng& rng, double gain) {
  init_weight(w, rng, 9 * cin, gain);
  if (!b.value.empty()) b.value.fill(T(0));
}

template <typename T>
Tensor<T> Conv3x3<T>::forward(const Tensor<T>& x) const {
  if (x.rank() != 4 || x.dim(3) != cin)
    throw std::invalid_argument("conv expects (N, H, W, " + std::to_string(cin) + "), got " + shape_string(x.dims()));
  const std::size_t n = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const std::size_t ho = (h - 1) / stride + 1, wo = (wd - 1) / stride + 1, so = ho * wo;
  Tensor<T> y({n, ho, wo, cout});
  parallel_for(n, [&](std::size_t f) {
    std::vector<T> col(so * 9 * cin);
    im2col(x.data() + f * h * wd * cin, h, wd, cin, stride, ho, wo, col.data());
    gemm(so, cout, 9 * cin, col.data(), w.value.data(), y.data() + f * so * cout, false);
  });
  add_bias(y, b);
  return y;
}

template <typename T>
Tensor<T> Conv3x3<T>::backward(const Tensor<T>& dy, const Tensor<T>& x) {
  const std::size_t n = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const std::size_t ho = dy.dim(1), wo = dy.dim(2), so = ho * wo, k = 9 * cin;
  Tensor<T> dx(x.dims());
  std::vector<T> wt(k * cout);
  transpose(k, cout, w.value.data(), wt.data());
  std::vector<T> col(so * k), dcol(so * k);
  for (std::size_t f = 0; f < n; ++f) {
    const T* dyf = dy.data() + f * so * cout;
    if (w.trainable()) {
      im2col(x.data() + f * h * wd * cin, h, wd, cin, stride, ho, wo, col.data());
      gemm_tn(k, cout, so, col.data(), dyf, w.grad.data(), true);
    }
    gemm(so, k, cout, dyf, wt.data(), dcol.data(), false);
    col2im_add(dcol.data(), h, wd, cin, stride, ho, wo, dx.data() + f * h * wd * cin);
  }
  bias_grad(b, dy);
  return dx;
}

template <typename T>
void Conv3x3<T>::visit(const std::string& prefix, const ParamFn<T>& fn) {
  fn(prefix + ".w", w);
  if (!b.value.empty()) fn(prefix + ".b", b);
}

// ---- Normalization ------------------------------------------------------------

template <typename T>
GroupNorm<T>::GroupNorm(std::size_t channels_, std::size_t groups_) : channels(channels_), groups(groups_) {
  if (groups == 0 || channels % groups != 0)
    throw std::invalid_argument("group count must divide the channel count");
  gamma.value = Tensor<T>({channels}, T(1));
  beta.value = Tensor<T>({channels});
}

template <typename T>
void GroupNorm<T>::init() {
  gamma.value.fill(T(1));
  beta.value.fill(T(0));
}

template <typename T>
Tensor<T> GroupNorm<T>::forward(const Tensor<T>& x, NormCache<T>* cache) const {
  require_last_dim(x, channels, "group norm");
  return norm_forward(x, x.dim(0), channels, groups, gamma, beta, cache);
}

template <typename T>
Tensor<T> GroupNorm<T>::backward(const Tensor<T>& dy, const NormCache<T>& cache) {
  return norm_backward(dy, dy.dim(0), channels, groups, gamma, beta, cache);
}

template <typename T>
void GroupNorm<T>::visit(const std::string& prefix, const ParamFn<T>& fn) {
  fn(prefix + ".gamma", gamma);
  fn(prefix + ".beta", beta);
}

template <typename T>
LayerNorm<T>::LayerNorm(std::size_t channels_) : channels(channels_) {
  gamma.value = Tensor<T>({channels}, T(1));
  beta.value = Tensor<T>({channels});
}

template <typename T>
void LayerNorm<T>::init() {
  gamma.value.fill(T(1));
  beta.value.fill(T(0));
}

template <typename T>
Tensor<T> LayerNorm<T>::forward(const Tensor<T>& x, NormCache<T>* cache) const {
  require_last_dim(x, channels, "layer norm");
  return norm_forward(x, x.size() / channels, channels, 1, gamma, beta, cache);
}

template <typename T>
Tensor<T> LayerNorm<T>::backward(const Tensor<T>& dy, const NormCache<T>& cache) {
  return norm_backward(dy, dy.size() / channels, channels, 1, gamma, beta, cache);
}

template <typename T>
void LayerNorm<T>::visit(const std::string& prefix, const ParamFn<T>& fn) {
  fn(prefix + ".gamma", gamma);
  fn(prefix + ".beta", beta);
}

// ---- SiLU -------------------------------------------------------------------

template <typename T>
Tensor<T> silu(const Tensor<T>& x) {
  Tensor<T> y(x.dims());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] / (T(1) + std::exp(-x[i]));
  return y;
}

template <typename T>
Tensor<T> silu_backward(const Tensor<T>& dy, const Tensor<T>& x) {
  Tensor<T> dx(x.dims());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T s = T(1) / (T(1) + std::exp(-x[i]));
    dx[i] = dy[i] * s * (T(1) + x[i] * (T(1) - s));
  }
  return dx;
}

// ---- AttentionBlock -----------------------------------------------------------

template <typename T>
AttentionBlock<T>::AttentionBlock(std::size_t dim_, std::size_t heads_)
    : dim(dim_),
      heads(heads_),
      norm(dim_),
      wq(dim_, dim_, false),
      wk(dim_, dim_, false),
      wv(dim_, dim_, false),
      wo(dim_, dim_, true) {
  if (heads == 0 || dim % heads != 0) throw std::invalid_argument("head count must divide the attention width");
}

template <typename T>
void AttentionBlock<T>::init(SeededRng& rng) {
  norm.init();
  for (Linear<T>* l : {&wq, &wk, &wv, &wo}) l->init(rng);
}

template <typename T>
Tensor<T> AttentionBlock<T>::forward(const Tensor<T>& x, const FrameSamplingPlan& plan, Cache* cache) const {
  if (x.rank() != 3) throw std::invalid_argument("attention block expects (N, S, C) tokens");
  Tensor<T> h = norm.forward(x, cache ? &cache->norm : nullptr);
  Tensor<T> q = wq.forward(h), k = wk.forward(h), v = wv.forward(h);
  Tensor<T> a = attend_frames(q, k, v, plan, heads, cache ? &cache->probs : nullptr);
  Tensor<T> y = x + wo.forward(a);
  if (cache) {
    cache->h = std::move(h);
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
    cache->attn = std::move(a);
  }
  return y;
}

template <typename T>
Tensor<T> AttentionBlock<T>::backward(const Tensor<T>& dy, const FrameSamplingPlan& plan, const Cache& c) {
  const Tensor<T> da = wo.backward(dy, c.attn);
  Tensor<T> dq(c.q.dims()), dk(c.q.dims()), dv(c.q.dims());
  attend_frames_backward(da, c.q, c.k, c.v, plan, heads, c.probs, dq, dk, dv);
  Tensor<T> dh = wq.backward(dq, c.h);
  dh += wk.backward(dk, c.h);
  dh += wv.backward(dv, c.h);
  return dy + norm.backward(dh, c.norm);
}

template <typename T>
void AttentionBlock<T>::visit(const std::string& prefix, const ParamFn<T>& fn) {
  norm.visit(prefix + ".norm", fn);
  wq.visit(prefix + ".q", fn);
  wk.visit(prefix + ".k", fn);
  wv.visit(prefix + ".v", fn);
  wo.visit(prefix + ".o", fn);
}

// ---- CrossAttention -----------------------------------------------------------

template <typename T>
CrossAttention<T>::CrossAttention(std::size_t dim_, std::size_t text_dim_)
    : dim(dim_),
      text_dim(text_dim_),
      norm(dim_),
      wq(dim_, dim_, false),
      wk(text_dim_, dim_, false),
      wv(text_dim_, dim_, false),
      wo(dim_, dim_, true) {}

template <typename T>
void CrossAttention<T>::init(SeededRng& rng) {
  norm.init();
  for (Linear<T>* l : {&wq, &wk, &wv, &wo}) l->init(rng);
}

template <typename T>
Tensor<T> CrossAttention<T>::forward(const Tensor<T>& x, const TextBatch<T>& text, Cache* cache) const {
  if (x.rank() != 3) throw std::invalid_argument("cross-attention expects (N, S, C) tokens");
  const std::size_t n = x.dim(0), s = x.dim(1);
  if (text.of_frame.size() != n)
    throw std::invalid_argument("text batch covers " + std::to_string(text.of_frame.size()) + " frames, input has " +
                                std::to_string(n));
  for (std::size_t item : text.of_frame)
    if (item >= text.items.size()) throw std::invalid_argument("text batch frame index out of range");
  for (const auto& t : text.items)
    if (t.rank() != 2 || t.dim(1) != text_dim)
      throw std::invalid_argument("text embedding must be (L, " + std::to_string(text_dim) + "), got " +
                                  shape_string(t.dims()));

  Tensor<T> h = norm.forward(x, cache ? &cache->norm : nullptr);
  Tensor<T> q = wq.forward(h);
  std::vector<Tensor<T>> k, v;
  for (const auto& t : text.items) {
    k.push_back(wk.forward(t));
    v.push_back(wv.forward(t));
  }
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dim)));
  Tensor<T> a({n, s, dim});
  if (cache) cache->probs.assign(n, Tensor<T>());
  parallel_for(n, [&](std::size_t f) {
    const std::size_t item = text.of_frame[f];
    const std::size_t len = k[item].dim(0);
    Tensor<T> p({s, len});
    gemm_nt(s, len, dim, q.data() + f * s * dim, k[item].data(), p.data(), false);
    for (std::size_t r = 0; r < s; ++r) {
      std::span<T> row = p.values().subspan(r * len, len);
      for (T& val : row) val *= scale;
      softmax_row(row);
    }
    gemm(s, dim, len, p.data(), v[item].data(), a.data() + f * s * dim, false);
    if (cache) cache->probs[f] = std::move(p);
  });
  Tensor<T> y = x + wo.forward(a);
  if (cache) {
    cache->h = std::move(h);
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
    cache->attn = std::move(a);
  }
  return y;
}

template <typename T>
Tensor<T> CrossAttention<T>::backward(const Tensor<T>& dy, const TextBatch<T>& text, const Cache& c) {
  const std::size_t n = dy.dim(0), s = dy.dim(1);
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dim)));
  const Tensor<T> da = wo.backward(dy, c.attn);
  Tensor<T> dq(c.q.dims());
  std::vector<Tensor<T>> dk, dv;
  for (const auto& k : c.k) {
    dk.emplace_back(k.dims());
    dv.emplace_back(k.dims());
  }
  for (std::size_t f = 0; f < n; ++f) {
    const std::size_t item = text.of_frame[f];
    const std::size_t len = c.k[item].dim(0);
    const Tensor<T>& p = c.probs[f];
    const T* daf = da.data() + f * s * dim;
    std::vector<T> dp(s * len);
    gemm_tn(len, dim, s, p.data(), daf, dv[item].data(), true);
    gemm_nt(s, len, dim, daf, c.v[item].data(), dp.data(), false);
    for (std::size_t r = 0; r < s; ++r) {
      const T* pr = p.data() + r * len;
      T* dr = dp.data() + r * len;
      T dot = 0;
      for (std::size_t j = 0; j < len; ++j) dot += pr[j] * dr[j];
      for (std::size_t j = 0; j < len; ++j) dr[j] = pr[j] * (dr[j] - dot) * scale;
    }
    gemm(s, dim, len, dp.data(), c.k[item].data(), dq.data() + f * s * dim, false);
    gemm_tn(len, dim, s, dp.data(), c.q.data() + f * s * dim, dk[item].data(), true);
  }
  for (std::size_t i = 0; i < text.items.size(); ++i) {
    (void)wk.backward(dk[i], text.items[i]);
    (void)wv.backward(dv[i], text.items[i]);
  }
  return dy + norm.backward(wq.backward(dq, c.h), c.norm);
}

template <typename T>
void CrossAttention<T>::visit(const std::string& prefix, const ParamFn<T>& fn) {
  norm.visit(prefix + ".norm", fn);
  wq.visit(prefix + ".q", fn);
  wk.visit(prefix + ".k", fn);
  wv.visit(prefix + ".v", fn);
  wo.visit(prefix + ".o", fn);
}

// ---- FeedForward ----------------------------------------------------------------

template <typename T>
FeedForward<T>::FeedForward(std::size_t dim_) : dim(dim_), norm(dim_), fc1(dim_, 2 * dim_, true), fc2(2 * dim_, dim_, true) {}

template <typename T>
void FeedForward<T>::init(SeededRng& rng) {
  norm.init();
  fc1.init(rng);
  fc2.init(rng);
}

template <typename T>
Tensor<T> FeedForward<T>::forward(const Tensor<T>& x, Cache* cache) const {
  Tensor<T> h = norm.forward(x, cache ? &cache->norm : nullptr);
  Tensor<T> a = fc1.forward(h);
  Tensor<T> y = x + fc2.forward(silu(a));
  if (cache) {
    cache->h = std::move(h);
    cache->a = std::move(a);
  }
  return y;
}

template <typename T>
Tensor<T> FeedForward<T>::backward(const Tensor<T>& dy, const Cache& c) {
  const Tensor<T> ds = fc2.backward(dy, silu(c.a));
  const Tensor<T> dh = fc1.backward(silu_backward(ds, c.a), c.h);
  return dy + norm.backward(dh, c.norm);
}

template <typename T>
void FeedForward<T>::visit(const std::string& prefix, const ParamFn<T>& fn) {
  norm.visit(prefix + ".norm", fn);
  fc1.visit(prefix + ".fc1", fn);
  fc2.visit(prefix + ".fc2", fn);
}

// ---- ResBlock -------------------------------------------------------------------

template <typename T>
ResBlock<T>::ResBlock(std::size_t cin_, std::size_t cout_, std::size_t temb_dim, std::size_t groups)
    : cin(cin_),
      cout(cout_),
      norm1(cin_, groups),
      norm2(cout_, groups),
      conv1(cin_, cout_),
      conv2(cout_, cout_),
      temb_proj(temb_dim, cout_, true) {
  if (cin != cout) shortcut = Linear<T>(cin, cout, true);
}

template <typename T>
void ResBlock<T>::init(SeededRng& rng) {
  norm1.init();
  norm2.init();
  conv1.init(rng);
  conv2.init(rng);
  temb_proj.init(rng);
  if (cin != cout) shortcut.init(rng);
}

template <typename T>
Tensor<T> ResBlock<T>::forward(const Tensor<T>& x, const Tensor<T>& temb, Cache* cache) const {
  const std::size_t n = x.dim(0);
  if (temb.rank() != 2 || temb.dim(0) != n)
    throw std::invalid_argument("timestep embedding must have one row per frame");
  Tensor<T> a1 = norm1.forward(x, cache ? &cache->n1 : nullptr);
  Tensor<T> h = conv1.forward(silu(a1));
  const Tensor<T> te = silu(temb);
  const Tensor<T> tp = temb_proj.forward(te);
  const std::size_t per_frame = h.size() / n;
  for (std::size_t f = 0; f < n; ++f)
    for (std::size_t i = 0; i < per_frame; ++i) h[f * per_frame + i] += tp[f * cout + i % cout];
  Tensor<T> a2 = norm2.forward(h, cache ? &cache->n2 : nullptr);
  Tensor<T> y = conv2.forward(silu(a2));
  if (cin == cout) y += x;
  else y += shortcut.forward(x);
  if (cache) {
    cache->x = x;
    cache->a1 = std::move(a1);
    cache->a2 = std::move(a2);
    cache->temb_act = temb;
  }
  return y;
}

template <typename T>
Tensor<T> ResBlock<T>::backward(const Tensor<T>& dy, const Cache& c, Tensor<T>& dtemb) {
  const std::size_t n = dy.dim(0);
  const Tensor<T> ds2 = conv2.backward(dy, silu(c.a2));
  const Tensor<T> dh = norm2.backward(silu_backward(ds2, c.a2), c.n2);
  Tensor<T> dtp({n, cout});
  const std::size_t per_frame = dh.size() / n;
  for (std::size_t f = 0; f < n; ++f)
    for (std::size_t i = 0; i < per_frame; ++i) dtp[f * cout + i % cout] += dh[f * per_frame + i];
  const Tensor<T> dte = temb_proj.backward(dtp, silu(c.temb_act));
  dtemb += silu_backward(dte, c.temb_act);
  const Tensor<T> ds1 = conv1.backward(dh, silu(c.a1));
  Tensor<T> dx = norm1.backward(silu_backward(ds1, c.a1), c.n1);
  if (cin == cout) dx += dy;
  else dx += shortcut.backward(dy, c.x);
  return dx;
}

template <typename T>
void ResBlock<T>::visit(const std::string& prefix, const ParamFn<T>& fn) {
  norm1.visit(prefix + ".norm1", fn);
  conv1.visit(prefix + ".conv1", fn);
  temb_proj.visit(prefix + ".temb", fn);
  norm2.visit(prefix + ".norm2", fn);
  conv2.visit(prefix + ".conv2", fn);
  if (cin != cout) shortcut.visit(prefix + ".shortcut", fn);
}

// ---- TimeEmbedding ----------------------------------------------------------------

template <typename T>
Tensor<T> timestep_features(const std::vector<int>& t, std::size_t dim) {
  if (dim % 2 != 0 || dim == 0) throw std::invalid_argument("timestep feature width must be even");
  const std::size_t half = dim / 2;
  Tensor<T> e({t.size(), dim});
  for (std::size_t n = 0; n < t.size(); ++n)
    for (std::size_t k = 0; k < half; ++k) {
      const double freq = std::exp(-std::log(10000.0) * static_cast<double>(k) / static_cast<double>(half));
      e[n * dim + k] = static_cast<T>(std::sin(t[n] * freq));
      e[n * dim + half + k] = static_cast<T>(std::cos(t[n] * freq));
    }
  return e;
}

template <typename T>
TimeEmbedding<T>::TimeEmbedding(std::size_t sin_dim_, std::size_t out_dim_)
    : sin_dim(sin_dim_), out_dim(out_dim_), fc1(sin_dim_, out_dim_, true), fc2(out_dim_, out_dim_, true) {}

template <typename T>
void TimeEmbedding<T>::init(SeededRng& rng) {
  fc1.init(rng);
  fc2.init(rng);
}

template <typename T>
Tensor<T> TimeEmbedding<T>::forward(const std::vector<int>& t, Cache* cache) const {
  Tensor<T> e = timestep_features<T>(t, sin_dim);
  Tensor<T> a = fc1.forward(e);
  Tensor<T> y = fc2.forward(silu(a));
  if (cache) {
    cache->e = std::move(e);
    cache->a = std::move(a);
  }
  return y;
}

template <typename T>
void TimeEmbedding<T>::backward(const Tensor<T>& dy, const Cache& c) {
  const Tensor<T> ds = fc2.backward(dy, silu(c.a));
  (void)fc1.backward(silu_backward(ds, c.a), c.e);
}

template <typename T>
void TimeEmbedding<T>::visit(const std::string& prefix, const ParamFn<T>& fn) {
  fc1.visit(prefix + ".fc1", fn);
  fc2.visit(prefix + ".fc2", fn);
}

// ---- Layout helpers -----------------------------------------------------------------

template <typename T>
Tensor<T> upsample_nearest2(const Tensor<T>& x) {
  const std::size_t n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  Tensor<T> y({n, 2 * h, 2 * w, c});
  for (std::size_t f = 0; f < n; ++f)
    for (std::size_t yy = 0; yy < 2 * h; ++yy)
      for (std::size_t xx = 0; xx < 2 * w; ++xx) {
        const T* src = x.data() + ((f * h + yy / 2) * w + xx / 2) * c;
        std::copy(src, src + c, y.data() + ((f * 2 * h + yy) * 2 * w + xx) * c);
      }
  return y;
}

template <typename T>
Tensor<T> upsample_nearest2_backward(const Tensor<T>& dy) {
  const std::size_t n = dy.dim(0), h = dy.dim(1) / 2, w = dy.dim(2) / 2, c = dy.dim(3);
  Tensor<T> dx({n, h, w, c});
  for (std::size_t f = 0; f < n; ++f)
    for (std::size_t yy = 0; yy < 2 * h; ++yy)
      for (std::size_t xx = 0; xx < 2 * w; ++xx) {
        const T* src = dy.data() + ((f * 2 * h + yy) * 2 * w + xx) * c;
        T* dst = dx.data() + ((f * h + yy / 2) * w + xx / 2) * c;
        for (std::size_t i = 0; i < c; ++i) dst[i] += src[i];
      }
  return dx;
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 4 || b.rank() != 4 || a.dim(0) != b.dim(0) || a.dim(1) != b.dim(1) || a.dim(2) != b.dim(2))
    throw std::invalid_argument("cannot concatenate " + shape_string(a.dims()) + " and " + shape_string(b.dims()));
  const std::size_t ca = a.dim(3), cb = b.dim(3), rows = a.size() / ca;
  Tensor<T> y({a.dim(0), a.dim(1), a.dim(2), ca + cb});
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy(a.data() + r * ca, a.data() + (r + 1) * ca, y.data() + r * (ca + cb));
    std::copy(b.data() + r * cb, b.data() + (r + 1) * cb, y.data() + r * (ca + cb) + ca);
  }
  return y;
}

template <typename T>
void split_channels(const Tensor<T>& d, std::size_t ca, Tensor<T>& da, Tensor<T>& db) {
  const std::size_t c = d.dim(3), cb = c - ca, rows = d.size() / c;
  da = Tensor<T>({d.dim(0), d.dim(1), d.dim(2), ca});
  db = Tensor<T>({d.dim(0), d.dim(1), d.dim(2), cb});
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy(d.data() + r * c, d.data() + r * c + ca, da.data() + r * ca);
    std::copy(d.data() + r * c + ca, d.data() + (r + 1) * c, db.data() + r * cb);
  }
}

template <typename T>
Tensor<T> to_channel_last(const Tensor<T>& x) {
  if (x.rank() != 4) throw std::invalid_argument("expected (N, C, H, W), got " + shape_string(x.dims()));
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor<T> y({n, h, w, c});
  for (std::size_t f = 0; f < n; ++f)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t p = 0; p < h * w; ++p) y[(f * h * w + p) * c + ch] = x[(f * c + ch) * h * w + p];
  return y;
}

template <typename T>
Tensor<T> to_channel_first(const Tensor<T>& x) {
  if (x.rank() != 4) throw std::invalid_argument("expected (N, H, W, C), got " + shape_string(x.dims()));
  const std::size_t n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  Tensor<T> y({n, c, h, w});
  for (std::size_t f = 0; f < n; ++f)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t p = 0; p < h * w; ++p) y[(f * c + ch) * h * w + p] = x[(f * h * w + p) * c + ch];
  return y;
}

#define CONDVID_INSTANTIATE(T)                                                               \
  template class Linear<T>;                                                                  \
  template class Conv3x3<T>;                                                                 \
  template class GroupNorm<T>;                                                               \
  template class LayerNorm<T>;                                                               \
  template class AttentionBlock<T>;                                                          \
  template class CrossAttention<T>;                                                          \
  template class FeedForward<T>;                                                             \
  template class ResBlock<T>;                                                                \
  template class TimeEmbedding<T>;                                                           \
  template Tensor<T> silu<T>(const Tensor<T>&);                                              \
  template Tensor<T> silu_backward<T>(const Tensor<T>&, const Tensor<T>&);                   \
  template Tensor<T> timestep_features<T>(const std::vector<int>&, std::size_t);             \
  template Tensor<T> upsample_nearest2<T>(const Tensor<T>&);                                 \
  template Tensor<T> upsample_nearest2_backward<T>(const Tensor<T>&);                        \
  template Tensor<T> concat_channels<T>(const Tensor<T>&, const Tensor<T>&);                 \
  template void split_channels<T>(const Tensor<T>&, std::size_t, Tensor<T>&, Tensor<T>&);    \
  template Tensor<T> to_channel_last<T>(const Tensor<T>&);                                   \
  template Tensor<T> to_channel_first<T>(const Tensor<T>&);

CONDVID_INSTANTIATE(float)
CONDVID_INSTANTIATE(double)

#undef CONDVID_INSTANTIATE

}  // namespace condvid::nn
