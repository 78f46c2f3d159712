#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "condvid/attention/attention.hpp"
#include "condvid/numerics/rng.hpp"
#include "condvid/numerics/tensor.hpp"

// Building blocks of the toy denoiser. Spatial activations are channel-last
// (N, H, W, C) where N counts frames (or independent images while training).
// Every layer has a forward pass and a hand-written backward pass that
// returns the input gradient and accumulates parameter gradients. A
// parameter whose `grad` is empty is frozen and skipped.
namespace condvid {

/// Per-frame text context for cross-attention: frame n attends to
/// items[of_frame[n]].
template <typename T>
struct TextBatch {
  std::vector<Tensor<T>> items;
  std::vector<std::size_t> of_frame;

  static TextBatch shared(const Tensor<T>& text, std::size_t frames) {
    return TextBatch{{text}, std::vector<std::size_t>(frames, 0)};
  }
};

}  // namespace condvid

namespace condvid::nn {

template <typename T>
struct Param {
  Tensor<T> value;
  Tensor<T> grad;

  void zero_grad() { grad = Tensor<T>(value.dims()); }
  void freeze() { grad = Tensor<T>(); }
  [[nodiscard]] bool trainable() const noexcept { return !grad.empty(); }
};

template <typename T>
using ParamFn = std::function<void(const std::string& name, Param<T>& p)>;

template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(std::size_t in, std::size_t out, bool bias);

  void init(SeededRng& rng, double gain = 1.0);
  /// x: (..., in) -> (..., out)
  [[nodiscard]] Tensor<T> forward(const Tensor<T>& x) const;
  Tensor<T> backward(const Tensor<T>& dy, const Tensor<T>& x);
  void visit(const std::string& prefix, const ParamFn<T>& fn);

  std::size_t in = 0, out = 0;
  Param<T> w;  // (in, out)
  Param<T> b;  // (out) or empty
};

template <typename T>
class Conv3x3 {
 public:
  Conv3x3() = default;
  Conv3x3(std::size_t cin, std::size_t cout, std::size_t stride = 1, bool bias = true);

  void init(SeededRng& rng, double gain = 1.0);
  /// x: (N, H, W, cin) -> (N, Ho, Wo, cout), padding 1.
  [[nodiscard]] Tensor<T> forward(const Tensor<T>& x) const;
  Tensor<T> backward(const Tensor<T>& dy, const Tensor<T>& x);
  void visit(const std::string& prefix, const ParamFn<T>& fn);

  std::size_t cin = 0, cout = 0, stride = 1;
  Param<T> w;  // (9 * cin, cout), rows ordered (ky, kx, c)
  Param<T> b;  // (cout) or empty
};

template <typename T>
struct NormCache {
  Tensor<T> xhat;
  std::vector<T> rstd;
};

/// Normalizes each (frame, group) over all positions and the group's
/// channels; x is (N, ..., C).
template <typename T>
class GroupNorm {
 public:
  GroupNorm() = default;
  GroupNorm(std::size_t channels, std::size_t groups);

  void init();
  Tensor<T> forward(const Tensor<T>& x, NormCache<T>* cache) const;
  Tensor<T> backward(const Tensor<T>& dy, const NormCache<T>& cache);
  void visit(const std::string& prefix, const ParamFn<T>& fn);

  std::size_t channels = 0, groups = 1;
  Param<T> gamma, beta;
};

/// Normalizes each row of the last axis.
template <typename T>
class LayerNorm {
 public:
  LayerNorm() = default;
  explicit LayerNorm(std::size_t channels);

  void init();
  Tensor<T> forward(const Tensor<T>& x, NormCache<T>* cache) const;
  Tensor<T> backward(const Tensor<T>& dy, const NormCache<T>& cache);
  void visit(const std::string& prefix, const ParamFn<T>& fn);

  std::size_t channels = 0;
  Param<T> gamma, beta;
};

template <typename T>
Tensor<T> silu(const Tensor<T>& x);
/// dy * d silu(x) / dx
template <typename T>
Tensor<T> silu_backward(const Tensor<T>& dy, const Tensor<T>& x);

/// Pre-norm residual attention over tokens (N, S, C). With a self plan this
/// is the image model's spatial self-attention; other plans turn the same
/// weights into temporal attention across frames.
template <typename T>
class AttentionBlock {
 public:
  struct Cache {
    NormCache<T> norm;
    Tensor<T> h, q, k, v, attn;
    AttentionCache<T> probs;
  };

  AttentionBlock() = default;
  AttentionBlock(std::size_t dim, std::size_t heads);

  void init(SeededRng& rng);
  Tensor<T> forward(const Tensor<T>& x, const FrameSamplingPlan& plan, Cache* cache) const;
  Tensor<T> backward(const Tensor<T>& dy, const FrameSamplingPlan& plan, const Cache& cache);
  void visit(const std::string& prefix, const ParamFn<T>& fn);

  [[nodiscard]] AttentionWeights<T> projections() const { return {wq.w.value, wk.w.value, wv.w.value}; }

  std::size_t dim = 0, heads = 1;
  LayerNorm<T> norm;
  Linear<T> wq, wk, wv, wo;
};

/// Pre-norm residual cross-attention from image tokens to text tokens.
template <typename T>
class CrossAttention {
 public:
  struct Cache {
    NormCache<T> norm;
    Tensor<T> h, q, attn;
    std::vector<Tensor<T>> k, v;
    std::vector<Tensor<T>> probs;  // per frame, (S, L)
  };

  CrossAttention() = default;
  CrossAttention(std::size_t dim, std::size_t text_dim);

  void init(SeededRng& rng);
  Tensor<T> forward(const Tensor<T>& x, const TextBatch<T>& text, Cache* cache) const;
  Tensor<T> backward(const Tensor<T>& dy, const TextBatch<T>& text, const Cache& cache);
  void visit(const std::string& prefix, const ParamFn<T>& fn);

  std::size_t dim = 0, text_dim = 0;
  LayerNorm<T> norm;
  Linear<T> wq, wk, wv, wo;
};

template <typename T>
class FeedForward {
 public:
  struct Cache {
    NormCache<T> norm;
    Tensor<T> h, a;
  };

  FeedForward() = default;
  explicit FeedForward(std::size_t dim);

  void init(SeededRng& rng);
  Tensor<T> forward(const Tensor<T>& x, Cache* cache) const;
  Tensor<T> backward(const Tensor<T>& dy, const Cache& cache);
  void visit(const std::string& prefix, const ParamFn<T>& fn);

  std::size_t dim = 0;
  LayerNorm<T> norm;
  Linear<T> fc1, fc2;
};

/// GroupNorm, SiLU, conv, + timestep projection, GroupNorm, SiLU, conv,
/// plus a (1x1 when channels change) shortcut.
template <typename T>
class ResBlock {
 public:
  struct Cache {
    Tensor<T> x, a1, a2, temb_act;
    NormCache<T> n1, n2;
  };

  ResBlock() = default;
  ResBlock(std::size_t cin, std::size_t cout, std::size_t temb_dim, std::size_t groups);

  void init(SeededRng& rng);
  /// x: (N, H, W, cin), temb: (N, temb_dim)
  Tensor<T> forward(const Tensor<T>& x, const Tensor<T>& temb, Cache* cache) const;
  /// Returns dx; adds the timestep-embedding gradient into dtemb.
  Tensor<T> backward(const Tensor<T>& dy, const Cache& cache, Tensor<T>& dtemb);
  void visit(const std::string& prefix, const ParamFn<T>& fn);

  std::size_t cin = 0, cout = 0;
  GroupNorm<T> norm1, norm2;
  Conv3x3<T> conv1, conv2;
  Linear<T> temb_proj;
  Linear<T> shortcut;  // unused when cin == cout
};

/// Sinusoidal timestep features followed by Linear, SiLU, Linear.
template <typename T>
class TimeEmbedding {
 public:
  struct Cache {
    Tensor<T> e, a;
  };

  TimeEmbedding() = default;
  TimeEmbedding(std::size_t sin_dim, std::size_t out_dim);

  void init(SeededRng& rng);
  /// One timestep per frame -> (N, out_dim).
  Tensor<T> forward(const std::vector<int>& t, Cache* cache) const;
  void backward(const Tensor<T>& dy, const Cache& cache);
  void visit(const std::string& prefix, const ParamFn<T>& fn);

  std::size_t sin_dim = 0, out_dim = 0;
  Linear<T> fc1, fc2;
};

/// Sinusoidal features [sin(t w_k), cos(t w_k)] with w_k = 10000^(-k / (dim/2)).
template <typename T>
Tensor<T> timestep_features(const std::vector<int>& t, std::size_t dim);

/// Nearest-neighbour 2x upsampling of (N, H, W, C) and its adjoint.
template <typename T>
Tensor<T> upsample_nearest2(const Tensor<T>& x);
template <typename T>
Tensor<T> upsample_nearest2_backward(const Tensor<T>& dy);

/// Channel concatenation of (N, H, W, Ca) and (N, H, W, Cb), and its split.
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
void split_channels(const Tensor<T>& d, std::size_t ca, Tensor<T>& da, Tensor<T>& db);

/// Reorders (N, C, H, W) <-> (N, H, W, C).
template <typename T>
Tensor<T> to_channel_last(const Tensor<T>& x);
template <typename T>
Tensor<T> to_channel_first(const Tensor<T>& x);

}  // namespace condvid::nn
