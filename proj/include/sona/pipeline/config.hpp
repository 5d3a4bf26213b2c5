#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include "sona/data/synthetic.hpp"
#include "sona/detector/detector.hpp"
#include "sona/diffusion/denoiser.hpp"
#include "sona/guidance/sona.hpp"

namespace sona::pipeline {

struct DiffusionConfig {
  int T = 50;
  // Linear range equivalent to the common 1000-step 1e-4..0.02 schedule compressed to T steps.
  double beta_start = 0.017;
  double beta_end = 0.24;
  double p_uncond = 0.1;
  std::size_t train_steps = 6000;
  std::size_t batch_size = 32;
  double lr = 1e-3;
  std::size_t base_width = 16;
  std::size_t inner_width = 32;
  std::size_t embed_width = 64;
};

/// How c_ood is picked for each outlier.
enum class PromptPolicy { kRandom, kClose, kFar };
PromptPolicy parse_prompt_policy(const std::string& text);
std::string to_string(PromptPolicy p);

struct OutlierConfig {
  guidance::GuidanceMode mode = guidance::GuidanceMode::kSona;
  guidance::SonaConfig sona;
  PromptPolicy prompt_policy = PromptPolicy::kRandom;
  std::size_t count = 0;  // 0: one outlier per ID training image
  std::size_t batch_size = 64;
};

struct PipelineConfig {
  std::uint64_t seed = 0;
  data::FactorSpec data;
  data::SplitCounts counts;
  DiffusionConfig diffusion;
  OutlierConfig outliers;
  detector::TrainConfig detector;
  std::size_t detector_width = 16;
  std::size_t feature_dim = 128;
  std::size_t probe_epochs = 8;
  std::size_t grid_sources = 32;

  /// Every key with its current value ("data.side", "sona.lambda", ...).
  std::map<std::string, std::string> to_key_values() const;
  /// Starts from defaults; unknown keys and malformed values are configuration errors.
  static PipelineConfig from_key_values(const std::map<std::string, std::string>& values);
  static PipelineConfig load(const std::filesystem::path& path);

  /// Digest of the canonical resolved configuration, excluding the seed.
  std::string hash() const;
  void validate() const;
};

}  // namespace sona::pipeline
