#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "sona/data/archive.hpp"
#include "sona/diffusion/cfg.hpp"
#include "sona/pipeline/config.hpp"

namespace sona::pipeline {

using Log = std::function<void(const std::string&)>;

/// Each stage draws from its own stream of the run seed.
enum class Stage : std::uint64_t { kData = 1, kDenoiserInit, kDenoiserTrain, kOutliers, kDetector, kProbe };
inline std::uint64_t stage_seed(std::uint64_t seed, Stage stage) {
  return mix_seed(seed, static_cast<std::uint64_t>(stage));
}

/// Denoiser vocabulary: ID class names followed by OOD-prompt class names.
diffusion::ConditionVocab make_vocab(const data::BenchmarkSplits& splits);
/// Vocabulary id of a global class id.
std::int32_t vocab_id(const data::BenchmarkSplits& splits, const diffusion::ConditionVocab& vocab,
                      std::int32_t class_id);

diffusion::NoiseSchedule make_schedule(const PipelineConfig& cfg);

std::unique_ptr<diffusion::ConvDenoiser> make_denoiser(const PipelineConfig& cfg, diffusion::ConditionVocab vocab,
                                                       std::uint64_t seed);

/// CFG training on id_train plus prompt_train. Returns the mean loss of every 100 steps.
std::vector<double> train_diffusion(diffusion::ConvDenoiser& denoiser, const PipelineConfig& cfg,
                                    const data::BenchmarkSplits& splits, std::uint64_t seed, const Log& log = {});

data::Archive denoiser_to_archive(const diffusion::ConvDenoiser& denoiser, const PipelineConfig& cfg);
std::unique_ptr<diffusion::ConvDenoiser> denoiser_from_archive(const data::Archive& archive);

struct OutlierSet {
  Tensor images;
  std::vector<std::int32_t> source_indices;
  std::vector<std::int32_t> ood_labels;  // global class ids
  std::vector<std::int32_t> tilde_ts;
  std::vector<std::uint64_t> seeds;
  std::string guidance;

  std::size_t size() const noexcept { return source_indices.size(); }
};

/// One outlier per source (source j = i mod |id_train|). Outlier i uses generator
/// mix_seed(seed, i) for its c_ood draw, T~, start noise and step noise.
OutlierSet generate_outlier_set(const diffusion::NoisePredictor& denoiser, const diffusion::NoiseSchedule& sched,
                                const data::BenchmarkSplits& splits, const OutlierConfig& cfg, std::uint64_t seed,
                                const Log& log = {});

data::Archive outliers_to_archive(const OutlierSet& set, const std::string& config_hash);
OutlierSet outliers_from_archive(const data::Archive& archive);

/// Detector labels (0..C-1) of an ID image set.
std::vector<std::int32_t> detector_labels(const data::BenchmarkSplits& splits, const data::ImageSet& set);

detector::DetectorModel make_detector(const PipelineConfig& cfg, const data::BenchmarkSplits& splits,
                                      std::uint64_t seed);

/// Trains a detector at the configured loss tier. `outliers` may be null for the CE tier.
detector::DetectorModel train_detector_stage(const PipelineConfig& cfg, const data::BenchmarkSplits& splits,
                                             const OutlierSet* outliers, std::uint64_t seed,
                                             std::vector<detector::EpochLosses>* curves = nullptr);

/// CE-only classifier used to measure semantic shift; independent of any detector under test.
detector::DetectorModel train_probe(const PipelineConfig& cfg, const data::BenchmarkSplits& splits,
                                    std::uint64_t seed);

data::Archive detector_to_archive(const detector::DetectorModel& model, const std::string& tier,
                                  const std::string& config_hash);
detector::DetectorModel detector_from_archive(const data::Archive& archive);

}  // namespace sona::pipeline
