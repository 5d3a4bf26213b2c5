#pragma once

#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "sona/diffusion/denoiser.hpp"
#include "sona/diffusion/schedule.hpp"
#include "sona/nn/optim.hpp"

namespace sona::diffusion {

/// Classifier-free-guidance training loss for one batch: each row draws t ~ U{1..T} and
/// eps ~ N(0, I), and its label is replaced by the null token with probability p_uncond.
/// Returns the graph of mean ||eps_theta(z_t, t, c) - eps||^2.
nn::Var cfg_loss(const NoisePredictor& denoiser, const Tensor& z0, std::span<const std::int32_t> labels,
                 double p_uncond, const NoiseSchedule& sched, Rng& rng);

/// cfg_loss, backward, and one optimizer step. Returns the batch loss.
double cfg_train_step(NoisePredictor& denoiser, nn::OptimizerState& optimizer, const Tensor& z0,
                      std::span<const std::int32_t> labels, double p_uncond, const NoiseSchedule& sched, Rng& rng);

/// Unconditional prediction plus one conditional prediction per label set at timestep t.
/// Each branch is its own forward call.
struct BranchPredictions {
  Tensor uncond;
  std::vector<Tensor> cond;
};
BranchPredictions predict_branches(const NoisePredictor& denoiser, const Tensor& z_t, int t,
                                   std::span<const std::span<const std::int32_t>> label_sets);

Tensor unconditional_noise(const NoisePredictor& denoiser, const Tensor& z_t, int t);

/// psi(z_t, c) = eps(z_t, c) - eps(z_t). Null labels are rejected.
Tensor psi(const NoisePredictor& denoiser, const Tensor& z_t, int t, std::span<const std::int32_t> labels);

/// eps(z_t) + s * psi(z_t, c), evaluated as lerp(eps(z_t), eps(z_t, c), s) so that
/// s = 0 and s = 1 reproduce the unconditional and conditional predictions exactly.
Tensor cfg_noise(const NoisePredictor& denoiser, const Tensor& z_t, int t, std::span<const std::int32_t> labels,
                 double s);

/// Elementwise lerp(a, b, s) with the exactness guarantees of std::lerp.
Tensor guided_combination(const Tensor& uncond, const Tensor& cond, double s);

using NoiseFn = std::function<Tensor(const Tensor& z_t, int t)>;

/// Ancestral DDPM iterations from t_start down to 1; returns z_0.
Tensor denoise_loop(Tensor z, int t_start, const NoiseFn& noise_fn, const NoiseSchedule& sched, Rng& rng);

struct SampleStart {
  Tensor latent;  // z at step `step`
  int step = 0;
};

/// CFG sampling for a batch of labels. Without `start`, begins from z_T ~ N(0, I).
Tensor sample(const NoisePredictor& denoiser, std::span<const std::int32_t> labels, double s,
              const NoiseSchedule& sched, Rng& rng, std::optional<SampleStart> start = std::nullopt);

}  // namespace sona::diffusion
