#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "sona/data/synthetic.hpp"
#include "sona/detector/detector.hpp"

namespace sona::eval {

/// Detection scores where higher means more OOD.
struct ScoreSet {
  std::vector<double> id_scores;
  std::vector<double> ood_scores;
};

/// P(ood > id) + 0.5 P(ood == id), from average ranks (Mann-Whitney U).
double auroc(const ScoreSet& scores);

/// Pair-counting AUROC, O(n m). Reference implementation for tests and small inputs.
double auroc_bruteforce(const ScoreSet& scores);

/// Operating point: kappa is the largest threshold with P(ood >= kappa) >= tpr; returns
/// P(id >= kappa).
double fpr_at_tpr(const ScoreSet& scores, double tpr = 0.95);

/// Mean squared pixel error over background pixels (mask complement) and all channels.
double nuisance_retention(const data::LabeledImage& source, const Tensor& outlier);

/// 1 - p_probe(source class | outlier) for each outlier row. `class_index` is the detector
/// label of each source.
std::vector<double> semantic_shift(const detector::DetectorModel& probe, const Tensor& outliers,
                                   std::span<const std::int32_t> class_index);

struct MeanStd {
  double mean = 0, std = 0;
};
/// Sample mean and (n - 1) standard deviation; std is 0 for a single value.
MeanStd mean_std(std::span<const double> values);

}  // namespace sona::eval
