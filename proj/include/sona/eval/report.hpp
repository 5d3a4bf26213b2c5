#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sona/data/synthetic.hpp"
#include "sona/detector/detector.hpp"

namespace sona::eval {

struct ReportRow {
  std::string section, metric, split;
  double value = 0.0;
};

struct EvalReport {
  std::vector<ReportRow> rows;
  std::uint64_t seed = 0;
  std::string config_hash;

  std::optional<double> find(const std::string& section, const std::string& metric, const std::string& split) const;
  double get(const std::string& section, const std::string& metric, const std::string& split) const;
};

/// CSV with header section,metric,split,value,seed,config_hash; values printed round-trip exact.
std::string format_report_csv(const EvalReport& report);
std::string format_double(double v);

/// Outliers with the ID-train index each came from.
struct OutlierSetView {
  std::string name;
  const Tensor* images = nullptr;
  std::span<const std::int32_t> source_indices;
};

struct ReportOptions {
  std::filesystem::path out_dir;  // empty: no files written
  std::uint64_t seed = 0;
  std::string config_hash;
  std::size_t grid_sources = 32;
};

/// Detection metrics on near/far-OOD against id_test, ID accuracy, and per outlier set the mean
/// nuisance retention and (with a probe) semantic shift. With out_dir set, writes report.csv,
/// scores.csv (sample_id,split,energy) and, when outlier sets exist, grid.png with one group per
/// source (source then each set's outlier), 8 groups per row.
EvalReport run_report(const detector::DetectorModel& model, const data::BenchmarkSplits& splits,
                      std::span<const OutlierSetView> outlier_sets, const detector::DetectorModel* probe,
                      const ReportOptions& options);

/// Energy scores of id_test, near_ood and far_ood.
std::map<std::string, std::vector<double>> split_scores(const detector::DetectorModel& model,
                                                        const data::BenchmarkSplits& splits);
std::string format_scores_csv(const std::map<std::string, std::vector<double>>& scores);
/// Parses a scores CSV back into split -> scores (in sample order).
std::map<std::string, std::vector<double>> parse_scores_csv(const std::string& text);

/// Mean nuisance retention of an outlier set against its sources in id_train.
double mean_nuisance_retention(const data::ImageSet& id_train, const Tensor& outliers,
                               std::span<const std::int32_t> source_indices);

/// 8-bit RGB PNG from [3, H, W] images laid out in groups of `per_group`, `groups_per_row` groups
/// per row, with a one-pixel white gap between groups.
void write_image_grid(const std::filesystem::path& path, std::span<const Tensor> images, std::size_t per_group,
                      std::size_t groups_per_row = 8);

}  // namespace sona::eval
