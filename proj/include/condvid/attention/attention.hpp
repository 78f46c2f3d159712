#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "condvid/numerics/tensor.hpp"

namespace condvid {

/// Which frames a query frame may attend to.
///   self           {i}                  (no temporal mixing)
///   sparse_causal  {0, max(i - 1, 0)}
///   sbist          {0, gap, 2 gap, ...} (same set for every i)
///   dense          all frames
enum class AttentionMode { self, sparse_causal, sbist, dense };

std::string to_string(AttentionMode mode);
/// Accepts the canonical names plus "none" / "no-temporal" for self and
/// "sparse-causal" for sparse_causal.
AttentionMode parse_attention_mode(std::string_view name);

/// Frame indices {j * gap : j = 0 .. floor((F - 1) / gap)}, 0-based.
std::vector<std::size_t> sbist_frame_indices(std::size_t frames, std::size_t gap);

class FrameSamplingPlan {
 public:
  FrameSamplingPlan(AttentionMode mode, std::size_t frames, std::size_t gap = 3);

  [[nodiscard]] AttentionMode mode() const noexcept { return mode_; }
  [[nodiscard]] std::size_t frames() const noexcept { return frames_; }
  [[nodiscard]] std::size_t gap() const noexcept { return gap_; }

  /// Ordered key/value frame list for query frame i. May repeat a frame
  /// (sparse_causal at i <= 1).
  [[nodiscard]] std::vector<std::size_t> kv_indices(std::size_t i) const;

  /// Length of every kv_indices list.
  [[nodiscard]] std::size_t kv_frames() const;

  /// The same mode applied to a different frame count.
  [[nodiscard]] FrameSamplingPlan with_frames(std::size_t frames) const {
    return FrameSamplingPlan(mode_, frames, gap_);
  }

 private:
  AttentionMode mode_;
  std::size_t frames_;
  std::size_t gap_;
};

/// Query/key/value projections (d_in x d each). The image model's
/// self-attention weights are used as-is.
template <typename T>
struct AttentionWeights {
  Tensor<T> w_q;
  Tensor<T> w_k;
  Tensor<T> w_v;
};

/// Softmax probabilities kept for the backward pass, one S x (kv * S)
/// matrix per (frame, head).
template <typename T>
struct AttentionCache {
  std::vector<Tensor<T>> probs;
};

/// Attention over frame-concatenated keys/values.
///
/// q, k, v are (F, S, d). For each query frame i the keys and values of the
/// frames in plan.kv_indices(i) are concatenated along the token axis and
/// out_i = softmax(q_i K^T / sqrt(d_head)) V, computed per head on column
/// slices of width d / heads.
template <typename T>
Tensor<T> attend_frames(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, const FrameSamplingPlan& plan,
                        std::size_t heads = 1, AttentionCache<T>* cache = nullptr);

/// Gradients of attend_frames. dq, dk, dv must be zero-initialized or hold
/// values to accumulate into; shapes match q.
template <typename T>
void attend_frames_backward(const Tensor<T>& dout, const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                            const FrameSamplingPlan& plan, std::size_t heads, const AttentionCache<T>& cache,
                            Tensor<T>& dq, Tensor<T>& dk, Tensor<T>& dv);

/// Projects z (F, S, d_in) with w and applies attend_frames. Output is
/// (F, S, d).
template <typename T>
Tensor<T> temporal_attention(const Tensor<T>& z, const AttentionWeights<T>& w, const FrameSamplingPlan& plan,
                             std::size_t heads = 1);

struct CostAccount {
  AttentionMode mode = AttentionMode::self;
  std::size_t frames = 0;
  std::size_t tokens = 0;
  std::size_t dim = 0;
  std::size_t kv_frames = 0;
  /// F * S * (kv_frames * S) * d * 2: multiply-adds of the score product.
  double score_flops = 0.0;
  /// Filled by the benchmark runner only; negative when not measured.
  double wall_time_s = -1.0;
};

CostAccount cost_account(const FrameSamplingPlan& plan, std::size_t tokens, std::size_t dim);

/// Times temporal_attention on random inputs for each mode. Returns one row
/// per (mode, repeat), modes in the given order.
std::vector<CostAccount> benchmark_attention(const std::vector<AttentionMode>& modes, std::size_t frames,
                                             std::size_t height, std::size_t width, std::size_t dim,
                                             std::size_t repeats, std::uint64_t seed, std::size_t gap = 3);

/// CSV: mode,F,S,d,kv_frames,score_flops,wall_time_s
void write_cost_csv(std::ostream& os, const std::vector<CostAccount>& rows);

}  // namespace condvid
