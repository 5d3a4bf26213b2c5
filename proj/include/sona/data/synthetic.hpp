#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "sona/core/rng.hpp"
#include "sona/core/tensor.hpp"
#include "sona/data/archive.hpp"

namespace sona::data {

struct Range {
  double lo = 0.0, hi = 0.0;
  bool contains(double v) const { return v >= lo && v <= hi; }
};

enum class Shape2D { kCircle, kSquare, kTriangle, kCross, kRing, kStar, kDiamond, kPlus };

Shape2D parse_shape(const std::string& name);
std::string shape_name(Shape2D s);

/// Background nuisance parameters for one image.
struct Background {
  enum class Family { kStriped, kNoise };
  Family family = Family::kStriped;
  std::array<double, 3> base{};
  double frequency = 0.0;    // stripes across the image (striped family)
  double phase = 0.0;        // radians
  double orientation = 0.0;  // radians
};

/// Factors of variation and class roles of the synthetic benchmark.
struct FactorSpec {
  std::size_t side = 16;
  std::vector<std::string> classes{"circle", "square", "triangle", "cross", "ring", "star", "diamond", "plus"};
  std::vector<std::string> id_classes{"circle", "square", "triangle", "cross"};
  std::vector<std::string> near_classes{"ring", "diamond"};
  std::vector<std::string> far_classes{"star", "plus"};
  std::vector<std::string> prompt_classes{"star", "plus"};
  bool allow_near_prompts = false;

  // ID nuisance family: striped backgrounds.
  Range base_color{0.35, 0.75};
  Range stripe_frequency{1.0, 3.0};
  double stripe_amplitude = 0.12;
  // Far-OOD nuisance family: blocky noise textures on a disjoint base-color range.
  Range far_base_color{0.82, 0.95};
  double noise_amplitude = 0.1;
  std::size_t noise_cell = 2;

  Range foreground{0.0, 0.2};
  Range radius{0.28, 0.36};  // fraction of side
  double jitter = 0.1;       // max centre offset as a fraction of side

  /// Throws ConfigError on unknown names, overlapping roles or an empty role.
  void validate() const;
  std::int32_t class_id(const std::string& name) const;
};

/// FactorSpec as key-value pairs (lists comma-separated, ranges "lo,hi") and back.
/// Unknown keys are configuration errors; absent keys keep their defaults.
std::map<std::string, std::string> spec_to_key_values(const FactorSpec& spec);
FactorSpec spec_from_key_values(const std::map<std::string, std::string>& values);

/// A single rendered image with its ground-truth foreground mask.
struct LabeledImage {
  Tensor pixels;  // [3, H, W] in [0, 1]
  std::int32_t label = 0;
  Tensor mask;  // [H, W], 1 on the shape
  Background background;
};

/// Renders one image. Pixels on the mask take the foreground colour, all others the background.
LabeledImage render_image(const FactorSpec& spec, std::int32_t class_id, Background::Family family, Rng& rng);

/// Binary [side, side] mask of a shape centred at (cx, cy) with radius r, in pixels.
Tensor shape_mask(Shape2D shape, std::size_t side, double cx, double cy, double r);

/// Number of mask pixels an ideal disc of radius r covers, for comparison with rendering.
double disc_area(double radius);

/// A set of images with labels (global class ids) and masks.
struct ImageSet {
  Tensor images;  // [N, 3, H, W]
  Tensor masks;   // [N, H, W]
  std::vector<std::int32_t> labels;
  std::vector<Background> backgrounds;

  std::size_t size() const noexcept { return labels.size(); }
  LabeledImage at(std::size_t i) const;
};

struct SplitCounts {
  std::size_t id_train = 2048;
  std::size_t id_test = 512;
  std::size_t near_ood = 512;
  std::size_t far_ood = 512;
  std::size_t prompt_train = 512;  // prompt-class images on ID nuisances, for the diffusion model only
};

struct BenchmarkSplits {
  FactorSpec spec;
  ImageSet id_train, id_test, near_ood, far_ood, prompt_train;
  std::vector<std::int32_t> id_classes;  // global ids; detector label k means id_classes[k]
  std::vector<std::int32_t> ood_prompt_labels;

  /// Detector label of a global ID class id, or -1.
  std::int32_t id_index(std::int32_t class_id) const;
};

/// Deterministic, class-balanced generation. Image i of a split uses the seed
/// mix_seed(seed, split_tag * 2^32 + i), so any image can be regenerated alone.
BenchmarkSplits generate_benchmark(const FactorSpec& spec, const SplitCounts& counts, std::uint64_t seed);

Archive benchmark_to_archive(const BenchmarkSplits& splits);
BenchmarkSplits benchmark_from_archive(const Archive& archive);

}  // namespace sona::data
