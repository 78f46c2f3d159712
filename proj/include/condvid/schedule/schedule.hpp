#pragma once

#include <cstddef>
#include <functional>
#include <utility>
#include <vector>

#include "condvid/numerics/tensor.hpp"

namespace condvid {

/// Discrete forward-process tables for t = 1..T.
///
/// `betas[k]` holds beta_{k+1}. `alpha_bars` has T + 1 entries and uses the
/// boundary convention alpha_bar_0 = 1, so timestep 0 is the clean latent.
struct NoiseSchedule {
  std::vector<double> betas;
  std::vector<double> alphas;
  std::vector<double> alpha_bars;

  [[nodiscard]] int steps() const noexcept { return static_cast<int>(betas.size()); }
  [[nodiscard]] double alpha_bar(int t) const;
};

/// Builds the derived tables from explicit betas (each in (0, 1)).
NoiseSchedule schedule_from_betas(std::vector<double> betas);

/// Betas linearly spaced from beta_start to beta_end inclusive.
NoiseSchedule make_linear_schedule(int steps, double beta_start, double beta_end);

/// Parameters of make_linear_schedule.
struct LinearScheduleSpec {
  int timesteps = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;

  [[nodiscard]] NoiseSchedule build() const { return make_linear_schedule(timesteps, beta_start, beta_end); }
  bool operator==(const LinearScheduleSpec&) const = default;
};

/// Betas only; the derived tables are recomputed on load.
Tensor<double> schedule_to_tensor(const NoiseSchedule& s);
NoiseSchedule schedule_from_tensor(const Tensor<double>& t);

/// Sampling trajectory (t, t_prev), strictly decreasing from T to 0.
struct StepPlan {
  std::vector<std::pair<int, int>> pairs;

  [[nodiscard]] std::size_t size() const noexcept { return pairs.size(); }
};

/// `count` evenly spaced DDIM steps over [0, T], rounded to integers.
StepPlan make_step_plan(int T, int count);

template <typename T>
Tensor<T> forward_marginal(const Tensor<T>& z0, int t, const Tensor<T>& noise, const NoiseSchedule& s);

/// One deterministic (eta = 0) DDIM update from t down to t_prev.
template <typename T>
Tensor<T> ddim_step(const Tensor<T>& z_t, const Tensor<T>& eps_pred, int t, int t_prev, const NoiseSchedule& s);

/// Exact algebraic inverse of ddim_step for a fixed eps: maps z_{t_prev} to z_t.
template <typename T>
Tensor<T> ddim_invert_step(const Tensor<T>& z_prev, const Tensor<T>& eps_pred, int t_prev, int t,
                           const NoiseSchedule& s);

/// Noise predictor: (latent, timestep, text embedding) -> eps.
template <typename T>
using Denoiser = std::function<Tensor<T>(const Tensor<T>& latent, int t, const Tensor<T>& text)>;

/// Deterministic DDIM inversion: walks the plan backwards from z0 to z_T.
/// At each step eps is predicted from the current (less noisy) latent at
/// the target timestep.
template <typename T>
Tensor<T> ddim_invert(const Tensor<T>& z0, const Denoiser<T>& denoiser, const NoiseSchedule& s, const StepPlan& plan,
                      const Tensor<T>& text);

/// Plain DDIM sampling along the plan.
template <typename T>
Tensor<T> ddim_sample(const Tensor<T>& z_T, const Denoiser<T>& denoiser, const NoiseSchedule& s, const StepPlan& plan,
                      const Tensor<T>& text);

}  // namespace condvid
