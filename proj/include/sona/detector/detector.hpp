#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "sona/core/rng.hpp"
#include "sona/nn/layers.hpp"
#include "sona/nn/optim.hpp"

namespace sona::detector {

struct DetectorConfig {
  std::size_t channels = 3;
  std::size_t side = 16;
  std::size_t width = 16;  // first conv stage; later stages use 2x and 4x
  std::size_t feature_dim = 128;
  std::size_t classes = 4;
  std::size_t club_hidden = 64;
};

inline constexpr double kLogVarRange = 2.0;

/// Conv encoder f, linear head g, and the CLUB head q (diagonal Gaussian over features).
/// f and g live in `body`; q lives in its own block with its own optimizer.
class DetectorModel {
 public:
  DetectorModel(DetectorConfig config, std::uint64_t seed);

  const DetectorConfig& config() const noexcept { return cfg_; }

  nn::Var features(const nn::Var& x) const;
  nn::Var logits_from_features(const nn::Var& f) const { return head_(f); }
  nn::Var logits(const nn::Var& x) const { return logits_from_features(features(x)); }
  /// q(y | x) parameters for features x: mean and log-variance in (-kLogVarRange, kLogVarRange).
  std::pair<nn::Var, nn::Var> club_head(const nn::Var& f) const;

  nn::ParamBlock& body() noexcept { return body_; }
  const nn::ParamBlock& body() const noexcept { return body_; }
  nn::ParamBlock& club() noexcept { return club_; }
  const nn::ParamBlock& club() const noexcept { return club_; }

  /// Logits for a batch of images without graph construction, processed in chunks.
  Tensor predict_logits(const Tensor& images, std::size_t chunk = 256) const;

 private:
  DetectorConfig cfg_;
  nn::ParamBlock body_, club_;
  nn::Conv2d c1_, c2_, c3_;
  nn::Dense proj_, head_;
  nn::Dense mu1_, mu2_, lv1_, lv2_;
};

/// Mean negative log-softmax of the true class.
nn::Var loss_ce(const nn::Var& logits, std::span<const std::int32_t> labels);

enum class OeForm {
  kUniformCrossEntropy,  // -(1/C) sum_c log softmax_c
  kNegativeMeanSoftmax,  // -(1/C) sum_c softmax_c, constant in the logits
};
nn::Var loss_oe(const nn::Var& logits, OeForm form = OeForm::kUniformCrossEntropy);

/// Features as seen by the MI term: rows scaled to length sqrt(d), so coordinates are O(1).
/// Without this the body can drive the estimate toward minus infinity by growing features
/// faster than q can follow.
nn::Var mi_space(const nn::Var& features);

/// CLUB estimate of I(f_id; f_ood) on mi_space features, with q from the model's club head.
/// Rows are paired.
nn::Var club_mi(const DetectorModel& model, const nn::Var& features_id, const nn::Var& features_ood);

/// -logsumexp of each logit row, in double precision. Higher means more OOD.
std::vector<double> energy_from_logits(const Tensor& logits);
std::vector<double> energy_scores(const DetectorModel& model, const Tensor& images);

enum class LossTier { kCe, kCeOe, kFull };
LossTier parse_loss_tier(const std::string& text);
std::string to_string(LossTier tier);

struct TrainConfig {
  LossTier tier = LossTier::kFull;
  double beta = 0.5;
  double gamma_mi = 0.02;
  std::size_t epochs = 12;
  std::size_t batch_size = 64;
  double lr = 1e-3;
  double club_lr = 5e-3;
  // The MI weight ramps linearly from 0 to gamma_mi over these epochs while q catches up.
  std::size_t mi_warmup_epochs = 2;
  OeForm oe_form = OeForm::kUniformCrossEntropy;
  std::uint64_t seed = 0;

  void validate() const;
  /// Weights after applying the tier: kCe zeroes both, kCeOe zeroes gamma_mi.
  double effective_beta() const { return tier == LossTier::kCe ? 0.0 : beta; }
  double effective_gamma() const { return tier == LossTier::kFull ? gamma_mi : 0.0; }
};

struct EpochLosses {
  double ce = 0, oe = 0, mi = 0, q_nll = 0;
};

/// Outlier images with the ID-train index each was generated from.
struct PairedOutliers {
  const Tensor* images = nullptr;  // [M, C, H, W]
  std::span<const std::int32_t> source_indices;
};

/// Shuffled mini-batches over ID indices; each ID sample brings its paired outlier when one exists.
/// Per step: (a) when gamma_mi > 0, one q step maximizing paired log-likelihood on detached
/// features; (b) one step on f, g for CE + beta * OE + gamma_mi * CLUB, with the CLUB weight
/// ramped up over the warm-up epochs. With beta = gamma_mi = 0
/// no outlier is touched and training is a plain classifier.
std::vector<EpochLosses> train_detector(DetectorModel& model, const Tensor& id_images,
                                        std::span<const std::int32_t> id_labels, const PairedOutliers& outliers,
                                        const TrainConfig& cfg);

/// Fraction of rows whose argmax logit equals the label.
double accuracy(const Tensor& logits, std::span<const std::int32_t> labels);

}  // namespace sona::detector
