#include "sona/diffusion/schedule.hpp"

#include <cmath>
#include <string>

#include "sona/core/error.hpp"

namespace sona::diffusion {

NoiseSchedule make_schedule(int T, double beta_start, double beta_end) {
  if (T < 1) throw ConfigError("schedule needs T >= 1, got " + std::to_string(T));
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw ConfigError("schedule needs 0 < beta_start <= beta_end < 1, got " + std::to_string(beta_start) + ".." +
                      std::to_string(beta_end));
  }
  NoiseSchedule s;
  s.steps = T;
  s.beta.assign(static_cast<std::size_t>(T) + 1, 0.0);
  s.alpha.assign(static_cast<std::size_t>(T) + 1, 1.0);
  s.alpha_bar.assign(static_cast<std::size_t>(T) + 1, 1.0);
  for (int t = 1; t <= T; ++t) {
    const double frac = T == 1 ? 0.0 : static_cast<double>(t - 1) / static_cast<double>(T - 1);
    const auto i = static_cast<std::size_t>(t);
    s.beta[i] = beta_start + frac * (beta_end - beta_start);
    s.alpha[i] = 1.0 - s.beta[i];
    s.alpha_bar[i] = s.alpha_bar[i - 1] * s.alpha[i];
  }
  return s;
}

Tensor add_noise(const Tensor& z0, int t, const Tensor& eps, const NoiseSchedule& sched) {
  if (t < 0 || t > sched.T()) {
    throw ArgumentError("add_noise timestep " + std::to_string(t) + " outside [0, " + std::to_string(sched.T()) + "]");
  }
  if (!z0.same_shape(eps)) throw ArgumentError("add_noise: signal and noise shapes differ");
  if (t == 0) return z0;
  const double ab = sched.alpha_bar[static_cast<std::size_t>(t)];
  const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
  Tensor out = Tensor::zeros_like(z0);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = static_cast<real>(a * z0[i] + b * eps[i]);
  return out;
}

Tensor ddpm_step(const Tensor& z_t, int t, const Tensor& eps_hat, const Tensor& noise, const NoiseSchedule& sched) {
  if (t < 1 || t > sched.T()) {
    throw ArgumentError("ddpm_step timestep " + std::to_string(t) + " outside [1, " + std::to_string(sched.T()) + "]");
  }
  if (!z_t.same_shape(eps_hat)) throw ArgumentError("ddpm_step: latent and noise estimate shapes differ");
  const auto i = static_cast<std::size_t>(t);
  const double inv_sqrt_alpha = 1.0 / std::sqrt(sched.alpha[i]);
  const double eps_coef = sched.beta[i] / std::sqrt(1.0 - sched.alpha_bar[i]);
  const double sigma = t > 1 ? std::sqrt(sched.beta[i]) : 0.0;
  if (sigma > 0.0 && !noise.same_shape(z_t)) throw ArgumentError("ddpm_step: noise shape differs from latent");
  Tensor out = Tensor::zeros_like(z_t);
  for (std::size_t k = 0; k < out.numel(); ++k) {
    double v = inv_sqrt_alpha * (z_t[k] - eps_coef * eps_hat[k]);
    if (sigma > 0.0) v += sigma * noise[k];
    out[k] = static_cast<real>(v);
  }
  return out;
}

Tensor ddpm_step(const Tensor& z_t, int t, const Tensor& eps_hat, const NoiseSchedule& sched, Rng& rng) {
  if (t > 1) return ddpm_step(z_t, t, eps_hat, rng.normal_tensor(z_t.shape()), sched);
  return ddpm_step(z_t, t, eps_hat, Tensor(), sched);
}

}  // namespace sona::diffusion
