#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "sona/nn/layers.hpp"

namespace sona::diffusion {

/// Condition labels known to a denoiser. Ids 0..size()-1 name real classes;
/// id size() is the reserved null token used for unconditional prediction.
class ConditionVocab {
 public:
  ConditionVocab() = default;
  explicit ConditionVocab(std::vector<std::string> names);

  std::size_t size() const noexcept { return names_.size(); }
  std::size_t table_rows() const noexcept { return names_.size() + 1; }
  std::int32_t null_id() const noexcept { return static_cast<std::int32_t>(names_.size()); }
  bool is_null(std::int32_t id) const noexcept { return id == null_id(); }
  bool contains(std::int32_t id) const noexcept { return id >= 0 && id <= null_id(); }
  const std::string& name(std::int32_t id) const;
  std::int32_t id_of(const std::string& name) const;
  const std::vector<std::string>& names() const noexcept { return names_; }

 private:
  std::vector<std::string> names_;
};

/// Conditional noise predictor eps(z_t, t, c). Output shape equals input latent shape.
class NoisePredictor {
 public:
  virtual ~NoisePredictor() = default;

  /// Shape of one latent, without the batch dimension.
  virtual Shape latent_shape() const = 0;
  virtual const ConditionVocab& vocab() const = 0;

  /// Differentiable prediction for a batch: z [B, ...latent], one timestep and label per row.
  virtual nn::Var forward(const nn::Var& z, std::span<const std::int32_t> steps,
                          std::span<const std::int32_t> labels) const = 0;

  /// Trainable parameters, or nullptr for fixed predictors.
  virtual nn::ParamBlock* params() { return nullptr; }
  virtual const nn::ParamBlock* params() const { return nullptr; }

  /// Inference without graph construction.
  Tensor predict(const Tensor& z, std::span<const std::int32_t> steps, std::span<const std::int32_t> labels) const;
};

struct ConvDenoiserConfig {
  std::size_t channels = 3;
  std::size_t side = 16;
  std::size_t base_width = 16;
  std::size_t inner_width = 32;
  std::size_t embed_width = 64;
  std::size_t groups = 4;
};

/// Small convolutional encoder-decoder: two stride-2 stages down, nearest-neighbour
/// upsampling back, additive skips, and per-stage channel biases from a summed
/// timestep + condition embedding.
class ConvDenoiser final : public NoisePredictor {
 public:
  ConvDenoiser(ConvDenoiserConfig config, ConditionVocab vocab, std::uint64_t seed);

  Shape latent_shape() const override { return {cfg_.channels, cfg_.side, cfg_.side}; }
  const ConditionVocab& vocab() const override { return vocab_; }
  nn::Var forward(const nn::Var& z, std::span<const std::int32_t> steps,
                  std::span<const std::int32_t> labels) const override;
  nn::ParamBlock* params() override { return &block_; }
  const nn::ParamBlock* params() const override { return &block_; }
  const ConvDenoiserConfig& config() const noexcept { return cfg_; }

 private:
  ConvDenoiserConfig cfg_;
  ConditionVocab vocab_;
  nn::ParamBlock block_;
  nn::Dense time1_, time2_;
  nn::Embedding label_;
  nn::Conv2d conv_in_, down1_, mid1_, down2_, mid2_, up1_, up2_, conv_out_;
  nn::GroupNorm norm_in_, norm_down1_, norm_mid1_, norm_down2_, norm_mid2_, norm_up1_, norm_up2_;
  nn::Dense proj_down1_, proj_mid1_, proj_down2_, proj_mid2_, proj_up1_, proj_up2_;
};

struct MlpDenoiserConfig {
  Shape latent{1, 1, 1};
  std::size_t hidden = 64;
  std::size_t embed_width = 32;
};

/// Perceptron noise predictor for tiny flat latents (toy problems and tests).
class MlpDenoiser final : public NoisePredictor {
 public:
  MlpDenoiser(MlpDenoiserConfig config, ConditionVocab vocab, std::uint64_t seed);

  Shape latent_shape() const override { return cfg_.latent; }
  const ConditionVocab& vocab() const override { return vocab_; }
  nn::Var forward(const nn::Var& z, std::span<const std::int32_t> steps,
                  std::span<const std::int32_t> labels) const override;
  nn::ParamBlock* params() override { return &block_; }
  const nn::ParamBlock* params() const override { return &block_; }

 private:
  MlpDenoiserConfig cfg_;
  ConditionVocab vocab_;
  nn::ParamBlock block_;
  nn::Dense time1_, time2_, in_, emb_, hidden_, out_;
  nn::Embedding label_;
};

}  // namespace sona::diffusion
