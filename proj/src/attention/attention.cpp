#include "condvid/attention/attention.hpp"

#include <chrono>
#include <cmath>
#include <ostream>
#include <span>
#include <stdexcept>

#include "condvid/numerics/kernels.hpp"
#include "condvid/numerics/parallel.hpp"
#include "condvid/numerics/rng.hpp"

namespace condvid {

std::string to_string(AttentionMode mode) {
  switch (mode) {
    case AttentionMode::self: return "self";
    case AttentionMode::sparse_causal: return "sparse_causal";
    case AttentionMode::sbist: return "sbist";
    case AttentionMode::dense: return "dense";
  }
  return "unknown";
}

AttentionMode parse_attention_mode(std::string_view name) {
  if (name == "self" || name == "none" || name == "no-temporal") return AttentionMode::self;
  if (name == "sparse_causal" || name == "sparse-causal") return AttentionMode::sparse_causal;
  if (name == "sbist") return AttentionMode::sbist;
  if (name == "dense") return AttentionMode::dense;
  throw std::invalid_argument("unknown attention mode '" + std::string(name) + "'");
}

std::vector<std::size_t> sbist_frame_indices(std::size_t frames, std::size_t gap) {
  if (frames == 0) throw std::invalid_argument("sbist_frame_indices: frame count must be >= 1");
  if (gap == 0) throw std::invalid_argument("sbist_frame_indices: gap must be >= 1");
  std::vector<std::size_t> out;
  for (std::size_t j = 0; j <= (frames - 1) / gap; ++j) out.push_back(j * gap);
  return out;
}

FrameSamplingPlan::FrameSamplingPlan(AttentionMode mode, std::size_t frames, std::size_t gap)
    : mode_(mode), frames_(frames), gap_(gap) {
  if (frames == 0) throw std::invalid_argument("attention plan needs at least one frame");
  if (gap == 0) throw std::invalid_argument("attention plan gap must be >= 1");
}

std::vector<std::size_t> FrameSamplingPlan::kv_indices(std::size_t i) const {
  if (i >= frames_) throw std::out_of_range("query frame index out of range");
  switch (mode_) {
    case AttentionMode::self: return {i};
    case AttentionMode::sparse_causal: return {0, i == 0 ? 0 : i - 1};
    case AttentionMode::sbist: return sbist_frame_indices(frames_, gap_);
    case AttentionMode::dense: {
      std::vector<std::size_t> all(frames_);
      for (std::size_t f = 0; f < frames_; ++f) all[f] = f;
      return all;
    }
  }
  return {i};
}

std::size_t FrameSamplingPlan::kv_frames() const { return kv_indices(0).size(); }

namespace {

constexpr std::size_t kRowBlock = 64;

void check_qkv(const auto& q, const auto& k, const auto& v, const FrameSamplingPlan& plan, std::size_t heads) {
  if (q.rank() != 3) throw std::invalid_argument("attention expects (F, S, d) tensors");
  if (k.dims() != q.dims() || v.dims() != q.dims())
    throw std::invalid_argument("attention q/k/v shapes differ: " + shape_string(q.dims()) + ", " +
                                shape_string(k.dims()) + ", " + shape_string(v.dims()));
  if (q.dim(0) != plan.frames())
    throw std::invalid_argument("attention plan covers " + std::to_string(plan.frames()) + " frames but input has " +
                                std::to_string(q.dim(0)));
  if (heads == 0 || q.dim(2) % heads != 0)
    throw std::invalid_argument("head count must divide the attention width");
}

// Copies the column block [h*dh, (h+1)*dh) of the (S, d) slice of frame f.
template <typename T>
void gather_head(const Tensor<T>& x, std::size_t f, std::size_t h, std::size_t dh, T* out) {
  const std::size_t s = x.dim(1), d = x.dim(2);
  const T* src = x.data() + f * s * d + h * dh;
  for (std::size_t r = 0; r < s; ++r)
    for (std::size_t c = 0; c < dh; ++c) out[r * dh + c] = src[r * d + c];
}

template <typename T>
void scatter_head_add(const T* in, std::size_t f, std::size_t h, std::size_t dh, Tensor<T>& x) {
  const std::size_t s = x.dim(1), d = x.dim(2);
  T* dst = x.data() + f * s * d + h * dh;
  for (std::size_t r = 0; r < s; ++r)
    for (std::size_t c = 0; c < dh; ++c) dst[r * d + c] += in[r * dh + c];
}

}  // namespace

template <typename T>
Tensor<T> attend_frames(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, const FrameSamplingPlan& plan,
                        std::size_t heads, AttentionCache<T>* cache) {
  check_qkv(q, k, v, plan, heads);
  const std::size_t frames = q.dim(0), s = q.dim(1), d = q.dim(2), dh = d / heads;
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  Tensor<T> out(q.dims());
  if (cache) cache->probs.assign(frames * heads, Tensor<T>());

  parallel_for(frames, [&](std::size_t i) {
    const auto kv = plan.kv_indices(i);
    const std::size_t n = kv.size() * s;
    std::vector<T> qh(s * dh), kt(dh * n), vc(n * dh), tmp(s * dh), oh(s * dh);
    std::vector<T> scores(std::min(kRowBlock, s) * n);
    for (std::size_t h = 0; h < heads; ++h) {
      // K^T (dh x n) and V (n x dh) over the concatenated frames.
      for (std::size_t j = 0; j < kv.size(); ++j) {
        gather_head(k, kv[j], h, dh, tmp.data());
        for (std::size_t r = 0; r < s; ++r)
          for (std::size_t c = 0; c < dh; ++c) kt[c * n + j * s + r] = tmp[r * dh + c];
        gather_head(v, kv[j], h, dh, vc.data() + j * s * dh);
      }
      gather_head(q, i, h, dh, qh.data());
      Tensor<T> probs;
      if (cache) probs = Tensor<T>({s, n});
      for (std::size_t r0 = 0; r0 < s; r0 += kRowBlock) {
        const std::size_t rows = std::min(kRowBlock, s - r0);
        T* sc = cache ? probs.data() + r0 * n : scores.data();
        gemm(rows, n, dh, qh.data() + r0 * dh, kt.data(), sc, false);
        for (std::size_t r = 0; r < rows; ++r) {
          std::span<T> row(sc + r * n, n);
          for (T& x : row) x *= scale;
          softmax_row(row);
        }
        gemm(rows, dh, n, sc, vc.data(), oh.data() + r0 * dh, false);
      }
      T* dst = out.data() + i * s * d + h * dh;
      for (std::size_t r = 0; r < s; ++r)
        for (std::size_t c = 0; c < dh; ++c) dst[r * d + c] = oh[r * dh + c];
      if (cache) cache->probs[i * heads + h] = std::move(probs);
    }
  });
  return out;
}

template <typename T>
void attend_frames_backward(const Tensor<T>& dout, const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                            const FrameSamplingPlan& plan, std::size_t heads, const AttentionCache<T>& cache,
                            Tensor<T>& dq, Tensor<T>& dk, Tensor<T>& dv) {
  check_qkv(q, k, v, plan, heads);
  const std::size_t frames = q.dim(0), s = q.dim(1), d = q.dim(2), dh = d / heads;
  if (cache.probs.size() != frames * heads) throw std::invalid_argument("attention cache does not match input");
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));

  // Frames scatter into shared dk/dv, so this loop stays sequential.
  for (std::size_t i = 0; i < frames; ++i) {
    const auto kv = plan.kv_indices(i);
    const std::size_t n = kv.size() * s;
    std::vector<T> qh(s * dh), kc(n * dh), vc(n * dh), doh(s * dh);
    std::vector<T> dp(s * n), dkc(n * dh), dvc(n * dh), dqh(s * dh);
    for (std::size_t h = 0; h < heads; ++h) {
      const Tensor<T>& p = cache.probs[i * heads + h];
      for (std::size_t j = 0; j < kv.size(); ++j) {
        gather_head(k, kv[j], h, dh, kc.data() + j * s * dh);
        gather_head(v, kv[j], h, dh, vc.data() + j * s * dh);
      }
      gather_head(q, i, h, dh, qh.data());
      gather_head(dout, i, h, dh, doh.data());

      // dV = P^T dO
      gemm_tn(n, dh, s, p.data(), doh.data(), dvc.data(), false);
      // dP = dO V^T, then the softmax Jacobian.
      gemm_nt(s, n, dh, doh.data(), vc.data(), dp.data(), false);
      for (std::size_t r = 0; r < s; ++r) {
        const T* pr = p.data() + r * n;
        T* dr = dp.data() + r * n;
        T dot = 0;
        for (std::size_t c = 0; c < n; ++c) dot += pr[c] * dr[c];
        for (std::size_t c = 0; c < n; ++c) dr[c] = pr[c] * (dr[c] - dot) * scale;
      }
      gemm(s, dh, n, dp.data(), kc.data(), dqh.data(), false);
      gemm_tn(n, dh, s, dp.data(), qh.data(), dkc.data(), false);

      scatter_head_add(dqh.data(), i, h, dh, dq);
      for (std::size_t j = 0; j < kv.size(); ++j) {
        scatter_head_add(dkc.data() + j * s * dh, kv[j], h, dh, dk);
        scatter_head_add(dvc.data() + j * s * dh, kv[j], h, dh, dv);
      }
    }
  }
}

template <typename T>
Tensor<T> temporal_attention(const Tensor<T>& z, const AttentionWeights<T>& w, const FrameSamplingPlan& plan,
                             std::size_t heads) {
  if (z.rank() != 3) throw std::invalid_argument("temporal_attention expects (F, S, d_in) tokens");
  const std::size_t frames = z.dim(0), s = z.dim(1), d_in = z.dim(2);
  for (const Tensor<T>* m : {&w.w_q, &w.w_k, &w.w_v})
    if (m->rank() != 2 || m->dim(0) != d_in || m->dim(1) != w.w_q.dim(1))
      throw std::invalid_argument("attention weights " + shape_string(m->dims()) + " do not fit tokens of width " +
                                  std::to_string(d_in));
  const std::size_t d = w.w_q.dim(1);
  auto project = [&](const Tensor<T>& m) {
    Tensor<T> out({frames, s, d});
    gemm(frames * s, d, d_in, z.data(), m.data(), out.data(), false);
    return out;
  };
  return attend_frames(project(w.w_q), project(w.w_k), project(w.w_v), plan, heads);
}

CostAccount cost_account(const FrameSamplingPlan& plan, std::size_t tokens, std::size_t dim) {
  CostAccount c;
  c.mode = plan.mode();
  c.frames = plan.frames();
  c.tokens = tokens;
  c.dim = dim;
  c.kv_frames = plan.kv_frames();
  c.score_flops = static_cast<double>(c.frames) * tokens * (static_cast<double>(c.kv_frames) * tokens) * dim * 2.0;
  return c;
}

std::vector<CostAccount> benchmark_attention(const std::vector<AttentionMode>& modes, std::size_t frames,
                                             std::size_t height, std::size_t width, std::size_t dim,
                                             std::size_t repeats, std::uint64_t seed, std::size_t gap) {
  const std::size_t tokens = height * width;
  SeededRng rng(seed);
  const auto z = gaussian_noise<float>({frames, tokens, dim}, rng);
  AttentionWeights<float> w;
  for (Tensor<float>* m : {&w.w_q, &w.w_k, &w.w_v}) {
    *m = gaussian_noise<float>({dim, dim}, rng);
    *m *= static_cast<float>(1.0 / std::sqrt(static_cast<double>(dim)));
  }
  std::vector<CostAccount> rows;
  for (std::size_t rep = 0; rep < repeats; ++rep)
    for (AttentionMode mode : modes) {
      const FrameSamplingPlan plan(mode, frames, gap);
      const auto t0 = std::chrono::steady_clock::now();
      const auto out = temporal_attention(z, w, plan);
      const auto t1 = std::chrono::steady_clock::now();
      if (!out.all_finite()) throw std::runtime_error("benchmark produced non-finite attention output");
      CostAccount row = cost_account(plan, tokens, dim);
      row.wall_time_s = std::chrono::duration<double>(t1 - t0).count();
      rows.push_back(row);
    }
  return rows;
}

void write_cost_csv(std::ostream& os, const std::vector<CostAccount>& rows) {
  os << "mode,F,S,d,kv_frames,score_flops,wall_time_s\n";
  for (const auto& r : rows)
    os << to_string(r.mode) << ',' << r.frames << ',' << r.tokens << ',' << r.dim << ',' << r.kv_frames << ','
       << static_cast<long long>(r.score_flops) << ',' << r.wall_time_s << '\n';
}

#define CONDVID_INSTANTIATE(T)                                                                                \
  template Tensor<T> attend_frames<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,                  \
                                      const FrameSamplingPlan&, std::size_t, AttentionCache<T>*);            \
  template void attend_frames_backward<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,              \
                                          const Tensor<T>&, const FrameSamplingPlan&, std::size_t,          \
                                          const AttentionCache<T>&, Tensor<T>&, Tensor<T>&, Tensor<T>&);     \
  template Tensor<T> temporal_attention<T>(const Tensor<T>&, const AttentionWeights<T>&,                     \
                                           const FrameSamplingPlan&, std::size_t);

CONDVID_INSTANTIATE(float)
CONDVID_INSTANTIATE(double)

#undef CONDVID_INSTANTIATE

}  // namespace condvid
