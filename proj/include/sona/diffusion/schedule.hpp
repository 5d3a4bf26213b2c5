#pragma once

#include <vector>

#include "sona/core/rng.hpp"
#include "sona/core/tensor.hpp"

namespace sona::diffusion {

/// Fixed variance schedule. Index 0 of alpha_bar is the identity (alpha_bar[0] = 1);
/// beta and alpha are indexed 1..T with slot 0 unused.
struct NoiseSchedule {
  int steps = 0;
  std::vector<double> beta;
  std::vector<double> alpha;
  std::vector<double> alpha_bar;

  int T() const noexcept { return steps; }
};

/// Linear beta from beta_start to beta_end over T steps.
NoiseSchedule make_schedule(int T, double beta_start, double beta_end);

/// z_t = sqrt(alpha_bar_t) * z0 + sqrt(1 - alpha_bar_t) * eps, for 0 <= t <= T.
Tensor add_noise(const Tensor& z0, int t, const Tensor& eps, const NoiseSchedule& sched);

/// DDPM ancestral update with caller-supplied Gaussian noise (ignored at t = 1).
Tensor ddpm_step(const Tensor& z_t, int t, const Tensor& eps_hat, const Tensor& noise, const NoiseSchedule& sched);

/// DDPM ancestral update drawing its noise from `rng` (no draw at t = 1).
Tensor ddpm_step(const Tensor& z_t, int t, const Tensor& eps_hat, const NoiseSchedule& sched, Rng& rng);

}  // namespace sona::diffusion
