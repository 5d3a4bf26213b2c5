#include "sona/guidance/sona.hpp"

#include <algorithm>
#include <cmath>

#include "sona/core/error.hpp"

namespace sona::guidance {

using diffusion::NoisePredictor;
using diffusion::NoiseSchedule;

TildeTPolicy TildeTPolicy::parse(const std::string& text) {
  if (text == "uniform") return uniform();
  const std::string prefix = "fixed:";
  if (text.rfind(prefix, 0) == 0) {
    const std::string num = text.substr(prefix.size());
    std::size_t used = 0;
    int v = 0;
    try {
      v = std::stoi(num, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == num.size() && !num.empty() && v >= 0) return fixed_at(v);
  }
  throw ConfigError("tilde-t policy must be 'uniform' or 'fixed:N' with N >= 0, got '" + text + "'");
}

std::string TildeTPolicy::to_string() const {
  return kind == Kind::kUniform ? "uniform" : "fixed:" + std::to_string(fixed);
}

int TildeTPolicy::draw(int T, Rng& rng) const {
  if (kind == Kind::kFixed) {
    if (fixed < 0 || fixed > T) {
      throw ConfigError("fixed tilde-t " + std::to_string(fixed) + " outside [0, " + std::to_string(T) + "]");
    }
    return fixed;
  }
  return static_cast<int>(rng.uniform_int(1, T));
}

void SonaConfig::validate(int T) const {
  if (!(scale >= 0.0) || !std::isfinite(scale)) throw ConfigError("guidance scale must be finite and non-negative");
  if (!(lambda >= 0.0 && lambda <= 0.5)) throw ConfigError("lambda must lie in [0, 0.5]");
  if (tilde_t.kind == TildeTPolicy::Kind::kFixed && (tilde_t.fixed < 0 || tilde_t.fixed > T)) {
    throw ConfigError("fixed tilde-t " + std::to_string(tilde_t.fixed) + " outside [0, " + std::to_string(T) + "]");
  }
}

GuidanceMode parse_guidance_mode(const std::string& text) {
  if (text == "sona") return GuidanceMode::kSona;
  if (text == "global") return GuidanceMode::kGlobal;
  if (text == "global-contrast") return GuidanceMode::kGlobalContrast;
  throw ConfigError("unknown guidance mode '" + text + "' (expected sona, global or global-contrast)");
}

std::string to_string(GuidanceMode mode) {
  switch (mode) {
    case GuidanceMode::kSona: return "sona";
    case GuidanceMode::kGlobal: return "global";
    case GuidanceMode::kGlobalContrast: return "global-contrast";
  }
  return "?";
}

namespace {

void check_pair(const NoisePredictor& denoiser, const Tensor& z_t, std::span<const std::int32_t> c_id,
                std::span<const std::int32_t> c_ood) {
  if (z_t.ndim() == 0 || c_id.size() != z_t.dim(0) || c_ood.size() != z_t.dim(0)) {
    throw ArgumentError("need one ID and one OOD label per latent row");
  }
  const auto& vocab = denoiser.vocab();
  for (std::size_t i = 0; i < c_id.size(); ++i) {
    if (!vocab.contains(c_id[i]) || !vocab.contains(c_ood[i]) || vocab.is_null(c_id[i]) || vocab.is_null(c_ood[i])) {
      throw ArgumentError("guidance labels must be real classes of the denoiser vocabulary");
    }
    if (c_id[i] == c_ood[i]) {
      throw ArgumentError("ID and OOD condition coincide (" + vocab.name(c_id[i]) + ")");
    }
  }
}

void copy_row(const Tensor& src, std::size_t row, Tensor& dst, std::size_t dst_row) {
  const std::size_t n = src.numel() / src.dim(0);
  std::copy_n(src.data().begin() + static_cast<std::ptrdiff_t>(row * n), n,
              dst.data().begin() + static_cast<std::ptrdiff_t>(dst_row * n));
}

}  // namespace

SonaTerms sona_terms(const NoisePredictor& denoiser, const Tensor& z_t, int t, std::span<const std::int32_t> c_id,
                     std::span<const std::int32_t> c_ood, double lambda) {
  check_pair(denoiser, z_t, c_id, c_ood);
  const std::span<const std::int32_t> sets[] = {c_id, c_ood};
  auto branches = diffusion::predict_branches(denoiser, z_t, t, sets);
  const Tensor& u = branches.uncond;

  SonaTerms out{u, Tensor::zeros_like(u), Tensor::zeros_like(u), Tensor::zeros_like(u)};
  const std::size_t batch = z_t.dim(0);
  for (std::size_t i = 0; i < batch; ++i) {
    const Tensor u_i = u.slice_rows(i, i + 1);
    Tensor psi_id = branches.cond[0].slice_rows(i, i + 1);
    Tensor psi_ood = branches.cond[1].slice_rows(i, i + 1);
    for (std::size_t k = 0; k < psi_id.numel(); ++k) {
      psi_id[k] -= u_i[k];
      psi_ood[k] -= u_i[k];
    }
    const GuidanceMasks m = get_masks(psi_id, psi_ood, lambda);
    copy_row(delta_id(m.semantic_id, psi_id), 0, out.delta_id, i);
    copy_row(delta_n(m.nuisance_id, psi_id), 0, out.delta_n, i);
    copy_row(delta_ood(m.semantic_ood, m.nuisance_id, psi_ood), 0, out.delta_ood, i);
  }
  return out;
}

Tensor compose_sona(const SonaTerms& terms, double scale) {
  Tensor out = Tensor::zeros_like(terms.uncond);
  const auto s = static_cast<real>(scale);
  for (std::size_t k = 0; k < out.numel(); ++k) {
    out[k] = terms.uncond[k] + s * (terms.delta_id[k] + terms.delta_ood[k] + terms.delta_n[k]);
  }
  return out;
}

Tensor sona_noise(const NoisePredictor& denoiser, const Tensor& z_t, int t, std::span<const std::int32_t> c_id,
                  std::span<const std::int32_t> c_ood, const SonaConfig& cfg) {
  if (!(cfg.scale >= 0.0)) throw ArgumentError("guidance scale must be non-negative");
  return compose_sona(sona_terms(denoiser, z_t, t, c_id, c_ood, cfg.lambda), cfg.scale);
}

Tensor guided_noise(GuidanceMode mode, const NoisePredictor& denoiser, const Tensor& z_t, int t,
                    std::span<const std::int32_t> c_id, std::span<const std::int32_t> c_ood, const SonaConfig& cfg) {
  switch (mode) {
    case GuidanceMode::kSona:
      return sona_noise(denoiser, z_t, t, c_id, c_ood, cfg);
    case GuidanceMode::kGlobal:
      check_pair(denoiser, z_t, c_id, c_ood);
      return diffusion::cfg_noise(denoiser, z_t, t, c_ood, cfg.scale);
    case GuidanceMode::kGlobalContrast: {
      check_pair(denoiser, z_t, c_id, c_ood);
      const std::span<const std::int32_t> sets[] = {c_id, c_ood};
      auto b = diffusion::predict_branches(denoiser, z_t, t, sets);
      Tensor out = b.uncond;
      const auto s = static_cast<real>(cfg.scale);
      for (std::size_t k = 0; k < out.numel(); ++k) out[k] += s * (b.cond[1][k] - b.cond[0][k]);
      return out;
    }
  }
  throw ArgumentError("unknown guidance mode");
}

OutlierBatch generate_outliers(const NoisePredictor& denoiser, const Tensor& images,
                               std::span<const std::int32_t> c_id, std::span<const std::int32_t> c_ood,
                               const NoiseSchedule& sched, GuidanceMode mode, const SonaConfig& cfg,
                               std::span<Rng> rngs) {
  cfg.validate(sched.T());
  if (images.ndim() == 0) throw ArgumentError("generate_outliers needs a batch of images");
  const std::size_t batch = images.dim(0);
  if (rngs.size() != batch) throw ArgumentError("generate_outliers needs one generator per image");
  check_pair(denoiser, images, c_id, c_ood);

  OutlierBatch out;
  out.tilde_ts.resize(batch);
  Tensor z = Tensor::zeros_like(images);
  int t_max = 0;
  for (std::size_t i = 0; i < batch; ++i) {
    const int tt = cfg.tilde_t.draw(sched.T(), rngs[i]);
    out.tilde_ts[i] = tt;
    t_max = std::max(t_max, tt);
    const Tensor x = images.slice_rows(i, i + 1);
    const Tensor eps = rngs[i].normal_tensor(x.shape());
    copy_row(diffusion::add_noise(x, tt, eps, sched), 0, z, i);
  }

  // Samples join the loop once t reaches their own T~; each step runs on the active subset.
  std::vector<std::size_t> active;
  std::vector<std::int32_t> a_id, a_ood;
  std::vector<Tensor> rows;
  for (int t = t_max; t >= 1; --t) {
    active.clear();
    a_id.clear();
    a_ood.clear();
    rows.clear();
    for (std::size_t i = 0; i < batch; ++i) {
      if (out.tilde_ts[i] < t) continue;
      active.push_back(i);
      a_id.push_back(c_id[i]);
      a_ood.push_back(c_ood[i]);
      rows.push_back(z.slice_rows(i, i + 1));
    }
    const Tensor z_act = stack_rows(rows);
    const Tensor eps_hat = guided_noise(mode, denoiser, z_act, t, a_id, a_ood, cfg);
    for (std::size_t j = 0; j < active.size(); ++j) {
      const std::size_t i = active[j];
      const Tensor next = diffusion::ddpm_step(rows[j], t, eps_hat.slice_rows(j, j + 1), sched, rngs[i]);
      copy_row(next, 0, z, i);
    }
  }

  for (auto& v : z.data()) v = std::clamp(v, real(0), real(1));
  out.images = std::move(z);
  return out;
}

namespace {

std::pair<Tensor, OutlierRecord> single(const Tensor& x, std::int32_t c_id, std::int32_t c_ood,
                                        const NoisePredictor& denoiser, GuidanceMode mode, const SonaConfig& cfg,
                                        const NoiseSchedule& sched, Rng& rng) {
  if (x.shape() != denoiser.latent_shape()) {
    throw ArgumentError("image shape " + shape_str(x.shape()) + " does not match latent " +
                        shape_str(denoiser.latent_shape()));
  }
  Shape batched{1};
  batched.insert(batched.end(), x.shape().begin(), x.shape().end());
  const std::int32_t id[] = {c_id};
  const std::int32_t ood[] = {c_ood};
  std::span<Rng> rngs(&rng, 1);
  auto b = generate_outliers(denoiser, x.reshaped(batched), id, ood, sched, mode, cfg, rngs);
  return {b.images.reshaped(x.shape()), OutlierRecord{b.tilde_ts[0], c_ood}};
}

}  // namespace

std::pair<Tensor, OutlierRecord> generate_outlier(const Tensor& x, std::int32_t c_id, std::int32_t c_ood,
                                                  const NoisePredictor& denoiser, const SonaConfig& cfg,
                                                  const NoiseSchedule& sched, Rng& rng) {
  return single(x, c_id, c_ood, denoiser, GuidanceMode::kSona, cfg, sched, rng);
}

std::pair<Tensor, OutlierRecord> generate_outlier_global(const Tensor& x, std::int32_t c_id, std::int32_t c_ood,
                                                         const NoisePredictor& denoiser, double scale,
                                                         TildeTPolicy tilde_t, const NoiseSchedule& sched, Rng& rng,
                                                         bool contrast) {
  SonaConfig cfg;
  cfg.scale = scale;
  cfg.lambda = 0.0;
  cfg.tilde_t = tilde_t;
  return single(x, c_id, c_ood, denoiser, contrast ? GuidanceMode::kGlobalContrast : GuidanceMode::kGlobal, cfg,
                sched, rng);
}

}  // namespace sona::guidance
