#include "sona/eval/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "sona/core/error.hpp"

namespace sona::eval {

namespace {

void check_nonempty(const ScoreSet& s) {
  if (s.id_scores.empty() || s.ood_scores.empty()) throw ArgumentError("score set needs ID and OOD scores");
}

}  // namespace

double auroc(const ScoreSet& scores) {
  check_nonempty(scores);
  const std::size_t n = scores.id_scores.size(), m = scores.ood_scores.size();
  std::vector<std::pair<double, bool>> all;  // (score, is_ood)
  all.reserve(n + m);
  for (double v : scores.id_scores) all.emplace_back(v, false);
  for (double v : scores.ood_scores) all.emplace_back(v, true);
  std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  // Sum of twice the average rank of OOD entries, kept integral.
  std::uint64_t twice_rank_sum = 0;
  for (std::size_t i = 0; i < all.size();) {
    std::size_t j = i;
    while (j < all.size() && all[j].first == all[i].first) ++j;
    std::uint64_t ood_in_group = 0;
    for (std::size_t k = i; k < j; ++k) ood_in_group += all[k].second;
    // Ranks i+1..j average (i + 1 + j) / 2.
    twice_rank_sum += ood_in_group * (i + 1 + j);
    i = j;
  }
  const std::uint64_t twice_u = twice_rank_sum - m * (m + 1);
  return static_cast<double>(twice_u) / (2.0 * static_cast<double>(n) * static_cast<double>(m));
}

double auroc_bruteforce(const ScoreSet& scores) {
  check_nonempty(scores);
  std::uint64_t twice = 0;
  for (double o : scores.ood_scores) {
    for (double i : scores.id_scores) twice += o > i ? 2 : (o == i ? 1 : 0);
  }
  return static_cast<double>(twice) /
         (2.0 * static_cast<double>(scores.id_scores.size()) * static_cast<double>(scores.ood_scores.size()));
}

double fpr_at_tpr(const ScoreSet& scores, double tpr) {
  check_nonempty(scores);
  if (!(tpr > 0.0 && tpr <= 1.0)) throw ArgumentError("tpr must lie in (0, 1]");
  std::vector<double> ood = scores.ood_scores;
  std::sort(ood.begin(), ood.end(), std::greater<>());
  const std::size_t m = ood.size();
  // Smallest k with k / m >= tpr; the k-th largest OOD score is the threshold.
  std::size_t k = static_cast<std::size_t>(std::ceil(tpr * static_cast<double>(m) - 1e-9));
  k = std::clamp<std::size_t>(k, 1, m);
  const double kappa = ood[k - 1];
  const auto above = std::count_if(scores.id_scores.begin(), scores.id_scores.end(),
                                   [&](double v) { return v >= kappa; });
  return static_cast<double>(above) / static_cast<double>(scores.id_scores.size());
}

double nuisance_retention(const data::LabeledImage& source, const Tensor& outlier) {
  if (source.mask.empty()) throw ArgumentError("nuisance retention needs the source's foreground mask");
  if (!source.pixels.same_shape(outlier)) {
    throw ArgumentError("outlier shape " + shape_str(outlier.shape()) + " differs from source " +
                        shape_str(source.pixels.shape()));
  }
  const std::size_t hw = source.mask.numel();
  const std::size_t channels = source.pixels.numel() / hw;
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t p = 0; p < hw; ++p) {
      if (source.mask[p] != real(0)) continue;
      const double d = static_cast<double>(outlier[c * hw + p]) - static_cast<double>(source.pixels[c * hw + p]);
      sum += d * d;
      ++count;
    }
  }
  if (count == 0) throw ArgumentError("foreground mask covers the whole image; no background to compare");
  return sum / static_cast<double>(count);
}

std::vector<double> semantic_shift(const detector::DetectorModel& probe, const Tensor& outliers,
                                   std::span<const std::int32_t> class_index) {
  if (outliers.ndim() == 0 || outliers.dim(0) != class_index.size()) {
    throw ArgumentError("semantic shift needs one source class per outlier");
  }
  const Tensor logits = probe.predict_logits(outliers);
  const std::size_t c = logits.dim(1);
  std::vector<double> out(class_index.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const auto k = class_index[i];
    if (k < 0 || static_cast<std::size_t>(k) >= c) throw ArgumentError("source class outside the probe's classes");
    double mx = logits[i * c];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, static_cast<double>(logits[i * c + j]));
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(static_cast<double>(logits[i * c + j]) - mx);
    out[i] = 1.0 - std::exp(static_cast<double>(logits[i * c + static_cast<std::size_t>(k)]) - mx) / z;
  }
  return out;
}

MeanStd mean_std(std::span<const double> values) {
  if (values.empty()) throw ArgumentError("mean of nothing");
  const double n = static_cast<double>(values.size());
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  if (values.size() == 1) return {mean, 0.0};
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  return {mean, std::sqrt(ss / (n - 1.0))};
}

}  // namespace sona::eval
