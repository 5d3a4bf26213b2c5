#include "sona/diffusion/denoiser.hpp"

#include <algorithm>

#include "sona/core/error.hpp"

namespace sona::diffusion {

namespace {
constexpr std::size_t kTimeFeatures = 32;

void check_batch(const nn::Var& z, const Shape& latent, std::span<const std::int32_t> steps,
                 std::span<const std::int32_t> labels, const ConditionVocab& vocab) {
  const auto& s = z->value.shape();
  if (s.size() != latent.size() + 1 || !std::equal(latent.begin(), latent.end(), s.begin() + 1)) {
    throw ArgumentError("denoiser input " + shape_str(s) + " does not match latent " + shape_str(latent));
  }
  if (steps.size() != s[0] || labels.size() != s[0]) {
    throw ArgumentError("denoiser needs one timestep and one label per batch row");
  }
  for (auto c : labels) {
    if (!vocab.contains(c)) throw ArgumentError("label id " + std::to_string(c) + " not in vocabulary");
  }
}
}  // namespace

ConditionVocab::ConditionVocab(std::vector<std::string> names) : names_(std::move(names)) {
  for (std::size_t i = 0; i < names_.size(); ++i) {
    if (std::find(names_.begin() + static_cast<std::ptrdiff_t>(i) + 1, names_.end(), names_[i]) != names_.end()) {
      throw ConfigError("duplicate condition label '" + names_[i] + "'");
    }
  }
}

const std::string& ConditionVocab::name(std::int32_t id) const {
  static const std::string null_name = "<null>";
  if (id == null_id()) return null_name;
  if (id < 0 || id > null_id()) throw ArgumentError("label id " + std::to_string(id) + " not in vocabulary");
  return names_[static_cast<std::size_t>(id)];
}

std::int32_t ConditionVocab::id_of(const std::string& name) const {
  auto it = std::find(names_.begin(), names_.end(), name);
  if (it == names_.end()) throw ArgumentError("unknown condition label '" + name + "'");
  return static_cast<std::int32_t>(it - names_.begin());
}

Tensor NoisePredictor::predict(const Tensor& z, std::span<const std::int32_t> steps,
                               std::span<const std::int32_t> labels) const {
  nn::NoGradGuard no_grad;
  return forward(nn::constant(z), steps, labels)->value;
}

ConvDenoiser::ConvDenoiser(ConvDenoiserConfig config, ConditionVocab vocab, std::uint64_t seed)
    : cfg_(config), vocab_(std::move(vocab)) {
  if (cfg_.side % 4 != 0) throw ConfigError("denoiser side must be divisible by 4");
  Rng rng(seed);
  const auto c = cfg_.channels, b = cfg_.base_width, w = cfg_.inner_width, e = cfg_.embed_width;
  time1_ = nn::Dense(block_, "time1", kTimeFeatures, e, rng);
  time2_ = nn::Dense(block_, "time2", e, e, rng);
  label_ = nn::Embedding(block_, "label", vocab_.table_rows(), e, rng);
  conv_in_ = nn::Conv2d(block_, "conv_in", c, b, 3, 1, 1, rng);
  norm_in_ = nn::GroupNorm(block_, "norm_in", b, cfg_.groups);
  down1_ = nn::Conv2d(block_, "down1", b, w, 3, 2, 1, rng);
  norm_down1_ = nn::GroupNorm(block_, "norm_down1", w, cfg_.groups);
  proj_down1_ = nn::Dense(block_, "proj_down1", e, w, rng);
  mid1_ = nn::Conv2d(block_, "mid1", w, w, 3, 1, 1, rng);
  norm_mid1_ = nn::GroupNorm(block_, "norm_mid1", w, cfg_.groups);
  proj_mid1_ = nn::Dense(block_, "proj_mid1", e, w, rng);
  down2_ = nn::Conv2d(block_, "down2", w, w, 3, 2, 1, rng);
  norm_down2_ = nn::GroupNorm(block_, "norm_down2", w, cfg_.groups);
  proj_down2_ = nn::Dense(block_, "proj_down2", e, w, rng);
  mid2_ = nn::Conv2d(block_, "mid2", w, w, 3, 1, 1, rng);
  norm_mid2_ = nn::GroupNorm(block_, "norm_mid2", w, cfg_.groups);
  proj_mid2_ = nn::Dense(block_, "proj_mid2", e, w, rng);
  up1_ = nn::Conv2d(block_, "up1", w, w, 3, 1, 1, rng);
  norm_up1_ = nn::GroupNorm(block_, "norm_up1", w, cfg_.groups);
  proj_up1_ = nn::Dense(block_, "proj_up1", e, w, rng);
  up2_ = nn::Conv2d(block_, "up2", w, b, 3, 1, 1, rng);
  norm_up2_ = nn::GroupNorm(block_, "norm_up2", b, cfg_.groups);
  proj_up2_ = nn::Dense(block_, "proj_up2", e, b, rng);
  conv_out_ = nn::Conv2d(block_, "conv_out", b, c, 3, 1, 1, rng);
}

nn::Var ConvDenoiser::forward(const nn::Var& z, std::span<const std::int32_t> steps,
                              std::span<const std::int32_t> labels) const {
  using namespace sona::nn;
  check_batch(z, latent_shape(), steps, labels, vocab_);
  const Var temb = time2_(silu(time1_(constant(sinusoidal_embedding(steps, kTimeFeatures)))));
  const Var emb = silu(add(temb, label_(labels)));

  auto stage = [&](const Conv2d& conv, const GroupNorm& norm, const Dense& proj, const Var& x) {
    return silu(norm(add_channel_bias(conv(x), proj(emb))));
  };
  const Var h1 = silu(norm_in_(conv_in_(z)));
  const Var h2 = stage(down1_, norm_down1_, proj_down1_, h1);
  const Var h3 = stage(mid1_, norm_mid1_, proj_mid1_, h2);
  const Var h4 = stage(down2_, norm_down2_, proj_down2_, h3);
  const Var h5 = stage(mid2_, norm_mid2_, proj_mid2_, h4);
  const Var u1 = stage(up1_, norm_up1_, proj_up1_, add(upsample_nearest2x(h5), h3));
  const Var u2 = stage(up2_, norm_up2_, proj_up2_, upsample_nearest2x(u1));
  return conv_out_(add(u2, h1));
}

MlpDenoiser::MlpDenoiser(MlpDenoiserConfig config, ConditionVocab vocab, std::uint64_t seed)
    : cfg_(std::move(config)), vocab_(std::move(vocab)) {
  Rng rng(seed);
  const std::size_t d = shape_numel(cfg_.latent), h = cfg_.hidden, e = cfg_.embed_width;
  time1_ = nn::Dense(block_, "time1", kTimeFeatures, e, rng);
  time2_ = nn::Dense(block_, "time2", e, e, rng);
  label_ = nn::Embedding(block_, "label", vocab_.table_rows(), e, rng);
  in_ = nn::Dense(block_, "in", d, h, rng);
  emb_ = nn::Dense(block_, "emb", e, h, rng);
  hidden_ = nn::Dense(block_, "hidden", h, h, rng);
  out_ = nn::Dense(block_, "out", h, d, rng);
}

nn::Var MlpDenoiser::forward(const nn::Var& z, std::span<const std::int32_t> steps,
                             std::span<const std::int32_t> labels) const {
  using namespace sona::nn;
  check_batch(z, latent_shape(), steps, labels, vocab_);
  const std::size_t batch = z->value.dim(0), d = shape_numel(cfg_.latent);
  const Var temb = time2_(silu(time1_(constant(sinusoidal_embedding(steps, kTimeFeatures)))));
  const Var emb = silu(add(temb, label_(labels)));
  const Var h = silu(add(in_(reshape(z, {batch, d})), emb_(emb)));
  const Var out = out_(silu(hidden_(h)));
  return reshape(out, z->value.shape());
}

}  // namespace sona::diffusion
