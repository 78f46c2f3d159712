#pragma once

#include <cstddef>
#include <functional>
#include <stdexcept>
#include <memory>
#include <string>
#include <vector>

#include "condvid/network/config.hpp"
#include "condvid/network/layers.hpp"

namespace condvid {

/// Residual features injected into the denoiser: one per skip connection
/// (level order, channel-last (N, H_l, W_l, C_l)) plus one for the middle
/// block output.
template <typename T>
struct ControlResiduals {
  std::vector<Tensor<T>> skips;
  Tensor<T> mid;
};

namespace nn {

/// ResBlock, then (optionally) self/temporal attention, cross-attention with
/// the text and a feed-forward layer.
template <typename T>
class BasicBlock {
 public:
  struct Cache {
    typename ResBlock<T>::Cache res;
    typename AttentionBlock<T>::Cache attn;
    typename CrossAttention<T>::Cache cross;
    typename FeedForward<T>::Cache ff;
  };

  BasicBlock() = default;
  BasicBlock(std::size_t cin, std::size_t cout, bool attention, const NetworkConfig& cfg);

  void init(SeededRng& rng);
  Tensor<T> forward(const Tensor<T>& x, const Tensor<T>& temb, const TextBatch<T>& text,
                    const FrameSamplingPlan& plan, Cache* cache) const;
  Tensor<T> backward(const Tensor<T>& dy, const TextBatch<T>& text, const FrameSamplingPlan& plan, const Cache& cache,
                     Tensor<T>& dtemb);
  void visit(const std::string& prefix, const ParamFn<T>& fn);

  bool has_attention = false;
  ResBlock<T> res;
  AttentionBlock<T> attn;
  CrossAttention<T> cross;
  FeedForward<T> ff;
};

}  // namespace nn

/// Time embedding, input convolution, encoder levels and middle block. The
/// denoiser owns one; the control branch owns a clone.
template <typename T>
class UNetEncoder {
 public:
  struct Cache {
    typename nn::TimeEmbedding<T>::Cache time;
    Tensor<T> x;
    std::vector<typename nn::BasicBlock<T>::Cache> blocks;
    std::vector<Tensor<T>> down_in;
    typename nn::BasicBlock<T>::Cache mid;
  };
  struct Output {
    Tensor<T> temb;
    std::vector<Tensor<T>> skips;
    Tensor<T> mid;
  };

  UNetEncoder() = default;
  explicit UNetEncoder(const NetworkConfig& cfg);

  void init(SeededRng& rng);
  /// x: (N, H, W, latent_channels) channel-last, one timestep per frame.
  Output forward(const Tensor<T>& x, const std::vector<int>& t, const TextBatch<T>& text,
                 const FrameSamplingPlan& plan, Cache* cache) const;
  /// Backpropagates gradients of the skips, the middle output and the
  /// timestep embedding; returns the input gradient.
  Tensor<T> backward(const std::vector<Tensor<T>>& dskips, const Tensor<T>& dmid, Tensor<T> dtemb,
                     const TextBatch<T>& text, const FrameSamplingPlan& plan, const Cache& cache);
  void visit(const std::string& prefix, const nn::ParamFn<T>& fn);

  nn::TimeEmbedding<T> time;
  nn::Conv3x3<T> conv_in;
  std::vector<nn::BasicBlock<T>> blocks;
  std::vector<nn::Conv3x3<T>> downs;
  nn::BasicBlock<T> mid;
};

/// The UNet noise predictor. Attention behaviour is chosen per call through
/// the frame plan, so one set of weights serves both the image model (self
/// plan) and its inflated video model.
template <typename T>
class UNet {
 public:
  struct Cache {
    typename UNetEncoder<T>::Cache enc;
    Tensor<T> temb;
    std::vector<typename nn::BasicBlock<T>::Cache> blocks;
    std::vector<Tensor<T>> up_in;
    Tensor<T> out_pre;
    nn::NormCache<T> out_norm;
  };

  UNet() = default;
  explicit UNet(const NetworkConfig& cfg);

  void init(SeededRng& rng);
  /// x: (N, H, W, latent_channels) channel-last -> eps prediction, same shape.
  Tensor<T> forward(const Tensor<T>& x, const std::vector<int>& t, const TextBatch<T>& text,
                    const FrameSamplingPlan& plan, const ControlResiduals<T>* residuals, Cache* cache) const;
  /// Accumulates parameter gradients (trainable params only). When `dres`
  /// is non-null it receives the gradients of the injected residuals; the
  /// encoder is skipped when `through_encoder` is false.
  void backward(const Tensor<T>& dy, const TextBatch<T>& text, const FrameSamplingPlan& plan, const Cache& cache,
                ControlResiduals<T>* dres, bool through_encoder = true);
  void visit(const std::string& prefix, const nn::ParamFn<T>& fn);

  /// Shapes of the residual injection points for N frames.
  [[nodiscard]] std::vector<Shape> residual_shapes(std::size_t frames) const;

  NetworkConfig config;
  UNetEncoder<T> encoder;
  std::vector<nn::BasicBlock<T>> dec_blocks;  // indexed by level
  std::vector<nn::Conv3x3<T>> ups;           // ups[l] maps level l + 1 to level l
  nn::GroupNorm<T> out_norm;
  nn::Conv3x3<T> conv_out;
};

/// Conditional branch: a bias-free strided stem E_c that maps the condition
/// raster to latent resolution, a clone of the denoiser's encoder, and one
/// zero-initialized 1x1 projection per injection point.
template <typename T>
class ControlBranch {
 public:
  struct StemCache {
    std::vector<Tensor<T>> inputs;  // input of every conv
    std::vector<Tensor<T>> pre;     // pre-activation outputs of all but the last conv
  };
  struct Cache {
    typename UNetEncoder<T>::Cache enc;
    std::vector<Tensor<T>> skips;
    Tensor<T> mid;
  };

  ControlBranch() = default;
  explicit ControlBranch(const NetworkConfig& cfg);

  /// Copies the denoiser's encoder, draws the stem from rng and zeroes the
  /// output projections.
  static ControlBranch clone_from(const UNet<T>& unet, SeededRng& rng);

  /// cond: (N, H_px, W_px, cond_channels) -> (N, H, W, latent_channels).
  Tensor<T> encode_condition(const Tensor<T>& cond, StemCache* cache) const;
  void encode_condition_backward(const Tensor<T>& dy, const StemCache& cache);

  /// c_cond: (N, H, W, latent_channels) channel-last.
  ControlResiduals<T> forward(const Tensor<T>& c_cond, const std::vector<int>& t, const TextBatch<T>& text,
                              const FrameSamplingPlan& plan, Cache* cache) const;
  /// Returns the gradient with respect to c_cond.
  Tensor<T> backward(const ControlResiduals<T>& dres, const TextBatch<T>& text, const FrameSamplingPlan& plan,
                     const Cache& cache);
  void visit(const std::string& prefix, const nn::ParamFn<T>& fn);

  NetworkConfig config;
  std::vector<nn::Conv3x3<T>> stem;
  UNetEncoder<T> encoder;
  std::vector<nn::Linear<T>> proj;
  nn::Linear<T> proj_mid;
};

/// Visits a model's parameters without modifying them.
template <typename T, template <class> class Model>
void visit_parameters(const Model<T>& m, const std::function<void(const std::string&, const nn::Param<T>&)>& fn) {
  const_cast<Model<T>&>(m).visit("", [&](const std::string& name, nn::Param<T>& p) { fn(name, p); });
}

template <typename T, template <class> class Model>
std::size_t parameter_count(const Model<T>& m) {
  std::size_t n = 0;
  visit_parameters<T>(m, [&](const std::string&, const nn::Param<T>& p) { n += p.value.size(); });
  return n;
}

/// Copies parameter values between models of identical topology, possibly
/// converting precision.
template <typename TD, typename TS, template <class> class Model>
void copy_parameters(Model<TD>& dst, const Model<TS>& src) {
  std::vector<const nn::Param<TS>*> from;
  visit_parameters<TS>(src, [&](const std::string&, const nn::Param<TS>& p) { from.push_back(&p); });
  std::size_t i = 0;
  dst.visit("", [&](const std::string& name, nn::Param<TD>& p) {
    if (i >= from.size() || from[i]->value.dims() != p.value.dims())
      throw std::invalid_argument("parameter layout differs at '" + name + "'");
    p.value = from[i++]->value.template cast<TD>();
  });
  if (i != from.size()) throw std::invalid_argument("parameter layout differs: source has extra tensors");
}

}  // namespace condvid
