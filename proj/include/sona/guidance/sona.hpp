#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "sona/diffusion/cfg.hpp"
#include "sona/guidance/masks.hpp"

namespace sona::guidance {

/// How the early-stop timestep is chosen for each outlier.
struct TildeTPolicy {
  enum class Kind { kFixed, kUniform };
  Kind kind = Kind::kUniform;
  int fixed = 0;

  static TildeTPolicy uniform() { return {Kind::kUniform, 0}; }
  static TildeTPolicy fixed_at(int t) { return {Kind::kFixed, t}; }
  /// "uniform" or "fixed:N".
  static TildeTPolicy parse(const std::string& text);
  std::string to_string() const;

  /// Fixed value, or a draw from U{1..T}.
  int draw(int T, Rng& rng) const;
};

struct SonaConfig {
  double scale = 10.0;
  double lambda = 0.2;
  TildeTPolicy tilde_t = TildeTPolicy::uniform();

  void validate(int T) const;
};

enum class GuidanceMode {
  kSona,            // masked three-term guidance
  kGlobal,          // eps(z) + s * psi(z, c_ood) everywhere
  kGlobalContrast,  // eps(z) + s * (psi(z, c_ood) - psi(z, c_id)) everywhere
};

GuidanceMode parse_guidance_mode(const std::string& text);
std::string to_string(GuidanceMode mode);

/// Per-sample components of one SONA-guided prediction, kept for inspection.
struct SonaTerms {
  Tensor uncond;
  Tensor delta_id, delta_n, delta_ood;
};

/// Unconditional prediction and the three guidance terms for a batch z_t [B, ...].
/// Masks are computed per sample from fresh psi values at this timestep.
SonaTerms sona_terms(const diffusion::NoisePredictor& denoiser, const Tensor& z_t, int t,
                     std::span<const std::int32_t> c_id, std::span<const std::int32_t> c_ood, double lambda);

/// eps(z_t) + s * (delta_id + delta_ood + delta_n).
Tensor compose_sona(const SonaTerms& terms, double scale);

/// SONA-guided noise prediction for a batch. Rejects c_id == c_ood and null labels.
Tensor sona_noise(const diffusion::NoisePredictor& denoiser, const Tensor& z_t, int t,
                  std::span<const std::int32_t> c_id, std::span<const std::int32_t> c_ood, const SonaConfig& cfg);

/// Per-step noise estimate for the requested guidance mode.
Tensor guided_noise(GuidanceMode mode, const diffusion::NoisePredictor& denoiser, const Tensor& z_t, int t,
                    std::span<const std::int32_t> c_id, std::span<const std::int32_t> c_ood, const SonaConfig& cfg);

struct OutlierBatch {
  Tensor images;
  std::vector<std::int32_t> tilde_ts;
};

/// Partial noising to a per-sample T~ followed by guided ancestral denoising, for a batch of
/// ID images [B, C, H, W] in [0, 1]. Sample i draws T~, its start noise and every step's noise
/// from rngs[i] in that order. Encode/decode are the identity; outputs are clamped to [0, 1].
OutlierBatch generate_outliers(const diffusion::NoisePredictor& denoiser, const Tensor& images,
                               std::span<const std::int32_t> c_id, std::span<const std::int32_t> c_ood,
                               const diffusion::NoiseSchedule& sched, GuidanceMode mode, const SonaConfig& cfg,
                               std::span<Rng> rngs);

struct OutlierRecord {
  std::int32_t tilde_t = 0;
  std::int32_t c_ood = 0;
};

/// Single-image SONA outlier; `x` has the latent shape (no batch dimension).
std::pair<Tensor, OutlierRecord> generate_outlier(const Tensor& x, std::int32_t c_id, std::int32_t c_ood,
                                                  const diffusion::NoisePredictor& denoiser, const SonaConfig& cfg,
                                                  const diffusion::NoiseSchedule& sched, Rng& rng);

/// Single-image baseline with unmasked guidance toward c_ood (or the contrast variant).
std::pair<Tensor, OutlierRecord> generate_outlier_global(const Tensor& x, std::int32_t c_id, std::int32_t c_ood,
                                                         const diffusion::NoisePredictor& denoiser, double scale,
                                                         TildeTPolicy tilde_t, const diffusion::NoiseSchedule& sched,
                                                         Rng& rng, bool contrast = false);

}  // namespace sona::guidance
