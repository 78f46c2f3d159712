#include "condvid/schedule/schedule.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace condvid {

double NoiseSchedule::alpha_bar(int t) const {
  if (t < 0 || t > steps())
    throw std::out_of_range("timestep " + std::to_string(t) + " outside [0, " + std::to_string(steps()) + "]");
  return alpha_bars[static_cast<std::size_t>(t)];
}

NoiseSchedule schedule_from_betas(std::vector<double> betas) {
  if (betas.empty()) throw std::invalid_argument("schedule needs at least one step");
  NoiseSchedule s;
  s.alpha_bars.reserve(betas.size() + 1);
  s.alpha_bars.push_back(1.0);
  for (double b : betas) {
    if (!(b > 0.0 && b < 1.0)) throw std::invalid_argument("beta outside (0, 1): " + std::to_string(b));
    s.alphas.push_back(1.0 - b);
    s.alpha_bars.push_back(s.alpha_bars.back() * (1.0 - b));
  }
  s.betas = std::move(betas);
  return s;
}

NoiseSchedule make_linear_schedule(int steps, double beta_start, double beta_end) {
  if (steps < 1) throw std::invalid_argument("schedule step count must be >= 1");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
    throw std::invalid_argument("linear schedule needs 0 < beta_start <= beta_end < 1");
  std::vector<double> betas(static_cast<std::size_t>(steps));
  for (int k = 0; k < steps; ++k)
    betas[k] = steps == 1 ? beta_start : beta_start + (beta_end - beta_start) * k / (steps - 1);
  return schedule_from_betas(std::move(betas));
}

Tensor<double> schedule_to_tensor(const NoiseSchedule& s) { return Tensor<double>({s.betas.size()}, s.betas); }

NoiseSchedule schedule_from_tensor(const Tensor<double>& t) {
  if (t.rank() != 1) throw std::invalid_argument("schedule tensor must be rank 1");
  return schedule_from_betas(t.storage());
}

StepPlan make_step_plan(int T, int count) {
  if (count < 1 || count > T)
    throw std::invalid_argument("step count must lie in [1, " + std::to_string(T) + "]");
  StepPlan plan;
  auto at = [&](int k) { return static_cast<int>(std::lround(static_cast<double>(k) * T / count)); };
  for (int k = count; k >= 1; --k) plan.pairs.emplace_back(at(k), at(k - 1));
  return plan;
}

namespace {

// out = a * x + b * y, elementwise, coefficients in double.
template <typename T>
Tensor<T> affine2(double a, const Tensor<T>& x, double b, const Tensor<T>& y) {
  x.require_same_shape(y, "affine combination");
  Tensor<T> out(x.dims());
  for (std::size_t i = 0; i < x.size(); ++i)
    out[i] = static_cast<T>(a * static_cast<double>(x[i]) + b * static_cast<double>(y[i]));
  return out;
}

void check_pair(int hi, int lo, const NoiseSchedule& s) {
  if (!(hi > lo && lo >= 0 && hi <= s.steps()))
    throw std::invalid_argument("DDIM timesteps must satisfy T >= t > t_prev >= 0 (got t=" + std::to_string(hi) +
                                ", t_prev=" + std::to_string(lo) + ")");
}

}  // namespace

template <typename T>
Tensor<T> forward_marginal(const Tensor<T>& z0, int t, const Tensor<T>& noise, const NoiseSchedule& s) {
  const double ab = s.alpha_bar(t);
  return affine2(std::sqrt(ab), z0, std::sqrt(1.0 - ab), noise);
}

// Both DDIM directions share the same map: predict x0 from (z, eps) at the
// source level, then re-noise to the target level with the same eps.
template <typename T>
Tensor<T> ddim_step(const Tensor<T>& z_t, const Tensor<T>& eps_pred, int t, int t_prev, const NoiseSchedule& s) {
  check_pair(t, t_prev, s);
  const double ab_t = s.alpha_bar(t);
  const double ab_prev = s.alpha_bar(t_prev);
  const double scale = std::sqrt(ab_prev / ab_t);
  const double eps_coef = std::sqrt(1.0 - ab_prev) - scale * std::sqrt(1.0 - ab_t);
  return affine2(scale, z_t, eps_coef, eps_pred);
}

template <typename T>
Tensor<T> ddim_invert_step(const Tensor<T>& z_prev, const Tensor<T>& eps_pred, int t_prev, int t,
                           const NoiseSchedule& s) {
  check_pair(t, t_prev, s);
  const double ab_t = s.alpha_bar(t);
  const double ab_prev = s.alpha_bar(t_prev);
  const double scale = std::sqrt(ab_t / ab_prev);
  const double eps_coef = std::sqrt(1.0 - ab_t) - scale * std::sqrt(1.0 - ab_prev);
  return affine2(scale, z_prev, eps_coef, eps_pred);
}

namespace {

template <typename T>
Tensor<T> predict(const Denoiser<T>& denoiser, const Tensor<T>& z, int t, const Tensor<T>& text) {
  Tensor<T> eps = denoiser(z, t, text);
  if (eps.dims() != z.dims())
    throw std::invalid_argument("denoiser returned shape " + shape_string(eps.dims()) + " for latent " +
                                shape_string(z.dims()));
  return eps;
}

}  // namespace

template <typename T>
Tensor<T> ddim_invert(const Tensor<T>& z0, const Denoiser<T>& denoiser, const NoiseSchedule& s, const StepPlan& plan,
                      const Tensor<T>& text) {
  Tensor<T> z = z0;
  for (auto it = plan.pairs.rbegin(); it != plan.pairs.rend(); ++it) {
    const auto [t, t_prev] = *it;
    z = ddim_invert_step(z, predict(denoiser, z, t, text), t_prev, t, s);
  }
  return z;
}

template <typename T>
Tensor<T> ddim_sample(const Tensor<T>& z_T, const Denoiser<T>& denoiser, const NoiseSchedule& s, const StepPlan& plan,
                      const Tensor<T>& text) {
  Tensor<T> z = z_T;
  for (const auto& [t, t_prev] : plan.pairs) z = ddim_step(z, predict(denoiser, z, t, text), t, t_prev, s);
  return z;
}

#define CONDVID_INSTANTIATE(T)                                                                                    \
  template Tensor<T> forward_marginal<T>(const Tensor<T>&, int, const Tensor<T>&, const NoiseSchedule&);        \
  template Tensor<T> ddim_step<T>(const Tensor<T>&, const Tensor<T>&, int, int, const NoiseSchedule&);          \
  template Tensor<T> ddim_invert_step<T>(const Tensor<T>&, const Tensor<T>&, int, int, const NoiseSchedule&);   \
  template Tensor<T> ddim_invert<T>(const Tensor<T>&, const Denoiser<T>&, const NoiseSchedule&, const StepPlan&, \
                                    const Tensor<T>&);                                                           \
  template Tensor<T> ddim_sample<T>(const Tensor<T>&, const Denoiser<T>&, const NoiseSchedule&, const StepPlan&, \
                                    const Tensor<T>&);

CONDVID_INSTANTIATE(float)
CONDVID_INSTANTIATE(double)

#undef CONDVID_INSTANTIATE

}  // namespace condvid
