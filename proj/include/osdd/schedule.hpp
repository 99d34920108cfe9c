#pragma once

#include <cmath>
#include <vector>

#include "osdd/tensor.hpp"

namespace osdd {

// Precomputed variance schedule. Public timestep indexing is 1-based: t runs
// over [1, steps]; storage index t-1. Coefficients are kept in double and the
// elementwise ops below compute in double before casting back, so the only
// precision loss is the final rounding of each output element.
struct NoiseSchedule {
  int64_t steps = 0;
  std::vector<double> betas;       // beta_t
  std::vector<double> alphas;      // 1 - beta_t
  std::vector<double> alpha_bars;  // prod_{i<=t} alpha_i
  std::vector<double> sigma_sq;    // reverse variance, = beta_t

  size_t idx(int64_t t) const {
    if (t < 1 || t > steps)
      fail_validation("timestep ", t, " outside [1, ", steps, "]");
    return static_cast<size_t>(t - 1);
  }

  double beta(int64_t t) const { return betas[idx(t)]; }
  double alpha(int64_t t) const { return alphas[idx(t)]; }
  double alpha_bar(int64_t t) const { return alpha_bars[idx(t)]; }
  double sigma(int64_t t) const { return std::sqrt(sigma_sq[idx(t)]); }
};

// Linear beta interpolation from beta_start to beta_end inclusive.
inline NoiseSchedule make_schedule(int64_t steps, double beta_start = 1e-4,
                                   double beta_end = 0.02) {
  if (steps < 1) fail_validation("make_schedule: steps must be >= 1, got ", steps);
  if (!(beta_start > 0.0))
    fail_validation("make_schedule: beta_start must be > 0, got ", beta_start);
  if (!(beta_end < 1.0))
    fail_validation("make_schedule: beta_end must be < 1, got ", beta_end);
  if (beta_start > beta_end)
    fail_validation("make_schedule: beta_start ", beta_start, " > beta_end ", beta_end);
  NoiseSchedule s;
  s.steps = steps;
  s.betas.resize(static_cast<size_t>(steps));
  s.alphas.resize(static_cast<size_t>(steps));
  s.alpha_bars.resize(static_cast<size_t>(steps));
  s.sigma_sq.resize(static_cast<size_t>(steps));
  double running = 1.0;
  for (int64_t i = 0; i < steps; ++i) {
    const double b = steps == 1 ? beta_start
                                : beta_start + (beta_end - beta_start) *
                                                   double(i) / double(steps - 1);
    s.betas[static_cast<size_t>(i)] = b;
    s.alphas[static_cast<size_t>(i)] = 1.0 - b;
    running *= 1.0 - b;
    s.alpha_bars[static_cast<size_t>(i)] = running;
    s.sigma_sq[static_cast<size_t>(i)] = b;
  }
  return s;
}

// z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps
template <typename T>
Tensor<T> add_noise(const Tensor<T>& z0, const Tensor<T>& eps, int64_t t,
                    const NoiseSchedule& s) {
  check_same_shape(z0, eps, "add_noise");
  const double ab = s.alpha_bar(t);
  const double a = std::sqrt(ab);
  const double b = std::sqrt(1.0 - ab);
  Tensor<T> out(z0.shape);
  for (size_t i = 0; i < out.data.size(); ++i)
    out.data[i] = static_cast<T>(a * double(z0.data[i]) + b * double(eps.data[i]));
  return out;
}

// zhat_0 = (z_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t)
template <typename T>
Tensor<T> predict_clean_latent(const Tensor<T>& zt, const Tensor<T>& eps_hat, int64_t t,
                               const NoiseSchedule& s) {
  check_same_shape(zt, eps_hat, "predict_clean_latent");
  if (!zt.all_finite() || !eps_hat.all_finite())
    fail_numeric("predict_clean_latent: non-finite input at t=", t);
  const double ab = s.alpha_bar(t);
  const double a = std::sqrt(ab);
  const double b = std::sqrt(1.0 - ab);
  Tensor<T> out(zt.shape);
  for (size_t i = 0; i < out.data.size(); ++i)
    out.data[i] = static_cast<T>((double(zt.data[i]) - b * double(eps_hat.data[i])) / a);
  return out;
}

// z_{t-1} = (z_t - beta_t / sqrt(1 - abar_t) eps_hat) / sqrt(alpha_t) + sigma_t noise.
// At t = 1 the noise term is suppressed (final-step convention).
template <typename T>
Tensor<T> reverse_step(const Tensor<T>& zt, const Tensor<T>& eps_hat, const Tensor<T>& noise,
                       int64_t t, const NoiseSchedule& s) {
  check_same_shape(zt, eps_hat, "reverse_step");
  check_same_shape(zt, noise, "reverse_step");
  const double beta = s.beta(t);
  const double inv_sqrt_alpha = 1.0 / std::sqrt(s.alpha(t));
  const double coef = beta / std::sqrt(1.0 - s.alpha_bar(t));
  const double sig = t == 1 ? 0.0 : s.sigma(t);
  Tensor<T> out(zt.shape);
  for (size_t i = 0; i < out.data.size(); ++i)
    out.data[i] = static_cast<T>(
        inv_sqrt_alpha * (double(zt.data[i]) - coef * double(eps_hat.data[i])) +
        sig * double(noise.data[i]));
  return out;
}

}  // namespace osdd
