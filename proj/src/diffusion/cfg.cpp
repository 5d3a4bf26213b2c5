#include "sona/diffusion/cfg.hpp"

#include <cmath>

#include "sona/core/error.hpp"

namespace sona::diffusion {

namespace {

Shape batch_shape(const NoisePredictor& d, std::size_t batch) {
  Shape s{batch};
  const auto latent = d.latent_shape();
  s.insert(s.end(), latent.begin(), latent.end());
  return s;
}

}  // namespace

nn::Var cfg_loss(const NoisePredictor& denoiser, const Tensor& z0, std::span<const std::int32_t> labels,
                 double p_uncond, const NoiseSchedule& sched, Rng& rng) {
  if (labels.empty() || z0.ndim() == 0 || z0.dim(0) != labels.size()) {
    throw ArgumentError("cfg training needs a non-empty batch with one label per row");
  }
  if (p_uncond < 0.0 || p_uncond > 1.0) throw ArgumentError("p_uncond must lie in [0, 1]");
  const std::size_t batch = labels.size();
  const std::size_t row = z0.numel() / batch;
  std::vector<std::int32_t> steps(batch), conds(batch);
  for (std::size_t i = 0; i < batch; ++i) {
    if (!denoiser.vocab().contains(labels[i])) throw ArgumentError("label outside the denoiser vocabulary");
    steps[i] = static_cast<std::int32_t>(rng.uniform_int(1, sched.T()));
    conds[i] = rng.bernoulli(p_uncond) ? denoiser.vocab().null_id() : labels[i];
  }
  const Tensor eps = rng.normal_tensor(z0.shape());
  Tensor zt = Tensor::zeros_like(z0);
  for (std::size_t i = 0; i < batch; ++i) {
    const double ab = sched.alpha_bar[static_cast<std::size_t>(steps[i])];
    const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
    for (std::size_t k = i * row; k < (i + 1) * row; ++k) zt[k] = static_cast<real>(a * z0[k] + b * eps[k]);
  }
  const nn::Var pred = denoiser.forward(nn::constant(std::move(zt)), steps, conds);
  return nn::mse(pred, nn::constant(eps));
}

double cfg_train_step(NoisePredictor& denoiser, nn::OptimizerState& optimizer, const Tensor& z0,
                      std::span<const std::int32_t> labels, double p_uncond, const NoiseSchedule& sched, Rng& rng) {
  nn::ParamBlock* block = denoiser.params();
  if (!block) throw ConfigError("denoiser has no trainable parameters");
  const double loss =
      nn::forward_backward(*block, [&] { return cfg_loss(denoiser, z0, labels, p_uncond, sched, rng); });
  nn::adam_step(*block, optimizer);
  return loss;
}

BranchPredictions predict_branches(const NoisePredictor& denoiser, const Tensor& z_t, int t,
                                   std::span<const std::span<const std::int32_t>> label_sets) {
  // One forward pass per branch (not one stacked batch) so the unconditional branch is
  // computed exactly as a plain unconditional call on the same batch would compute it.
  const std::size_t batch = z_t.dim(0);
  const std::vector<std::int32_t> steps(batch, t);
  const std::vector<std::int32_t> nulls(batch, denoiser.vocab().null_id());
  BranchPredictions out;
  out.uncond = denoiser.predict(z_t, steps, nulls);
  for (const auto& set : label_sets) {
    if (set.size() != batch) throw ArgumentError("label set size does not match latent batch");
    out.cond.push_back(denoiser.predict(z_t, steps, set));
  }
  return out;
}

Tensor unconditional_noise(const NoisePredictor& denoiser, const Tensor& z_t, int t) {
  return predict_branches(denoiser, z_t, t, {}).uncond;
}

namespace {
void reject_null(const NoisePredictor& denoiser, std::span<const std::int32_t> labels) {
  for (auto c : labels) {
    if (denoiser.vocab().is_null(c)) throw ArgumentError("psi of the null condition is identically zero");
  }
}
}  // namespace

Tensor psi(const NoisePredictor& denoiser, const Tensor& z_t, int t, std::span<const std::int32_t> labels) {
  reject_null(denoiser, labels);
  const std::span<const std::int32_t> sets[] = {labels};
  auto p = predict_branches(denoiser, z_t, t, sets);
  Tensor out = p.cond[0];
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= p.uncond[i];
  return out;
}

Tensor guided_combination(const Tensor& uncond, const Tensor& cond, double s) {
  if (!uncond.same_shape(cond)) throw ArgumentError("guidance branches differ in shape");
  Tensor out = Tensor::zeros_like(uncond);
  const auto k = static_cast<real>(s);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = std::lerp(uncond[i], cond[i], k);
  return out;
}

Tensor cfg_noise(const NoisePredictor& denoiser, const Tensor& z_t, int t, std::span<const std::int32_t> labels,
                 double s) {
  if (s < 0.0) throw ArgumentError("guidance scale must be non-negative");
  reject_null(denoiser, labels);
  const std::span<const std::int32_t> sets[] = {labels};
  auto p = predict_branches(denoiser, z_t, t, sets);
  return guided_combination(p.uncond, p.cond[0], s);
}

Tensor denoise_loop(Tensor z, int t_start, const NoiseFn& noise_fn, const NoiseSchedule& sched, Rng& rng) {
  if (t_start < 0 || t_start > sched.T()) {
    throw ArgumentError("start step " + std::to_string(t_start) + " outside [0, " + std::to_string(sched.T()) + "]");
  }
  for (int t = t_start; t >= 1; --t) z = ddpm_step(z, t, noise_fn(z, t), sched, rng);
  return z;
}

Tensor sample(const NoisePredictor& denoiser, std::span<const std::int32_t> labels, double s,
              const NoiseSchedule& sched, Rng& rng, std::optional<SampleStart> start) {
  if (labels.empty()) throw ArgumentError("sample needs at least one label");
  Tensor z;
  int t0 = sched.T();
  if (start) {
    if (start->step > sched.T() || start->step < 0) {
      throw ArgumentError("start step " + std::to_string(start->step) + " exceeds T=" + std::to_string(sched.T()));
    }
    z = std::move(start->latent);
    t0 = start->step;
  } else {
    z = rng.normal_tensor(batch_shape(denoiser, labels.size()));
  }
  std::vector<std::int32_t> lab(labels.begin(), labels.end());
  return denoise_loop(std::move(z), t0, [&](const Tensor& zt, int t) { return cfg_noise(denoiser, zt, t, lab, s); },
                      sched, rng);
}

}  // namespace sona::diffusion
