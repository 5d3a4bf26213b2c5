#include "sona/eval/report.hpp"

#include <png.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "sona/core/error.hpp"
#include "sona/eval/metrics.hpp"

namespace sona::eval {

namespace {

const char* const kScoreSplits[] = {"id_test", "near_ood", "far_ood"};

std::vector<std::int32_t> detector_labels(const data::BenchmarkSplits& splits, const data::ImageSet& set) {
  std::vector<std::int32_t> out;
  for (auto c : set.labels) {
    const auto k = splits.id_index(c);
    if (k < 0) throw ArgumentError("image label is not an ID class");
    out.push_back(k);
  }
  return out;
}

}  // namespace

std::optional<double> EvalReport::find(const std::string& section, const std::string& metric,
                                       const std::string& split) const {
  for (const auto& r : rows) {
    if (r.section == section && r.metric == metric && r.split == split) return r.value;
  }
  return std::nullopt;
}

double EvalReport::get(const std::string& section, const std::string& metric, const std::string& split) const {
  auto v = find(section, metric, split);
  if (!v) throw ArgumentError("report has no row " + section + "/" + metric + "/" + split);
  return *v;
}

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string format_report_csv(const EvalReport& report) {
  std::string out = "section,metric,split,value,seed,config_hash\n";
  for (const auto& r : report.rows) {
    out += r.section + "," + r.metric + "," + r.split + "," + format_double(r.value) + "," +
           std::to_string(report.seed) + "," + report.config_hash + "\n";
  }
  return out;
}

std::map<std::string, std::vector<double>> split_scores(const detector::DetectorModel& model,
                                                        const data::BenchmarkSplits& splits) {
  std::map<std::string, std::vector<double>> out;
  const data::ImageSet* sets[] = {&splits.id_test, &splits.near_ood, &splits.far_ood};
  for (int i = 0; i < 3; ++i) {
    if (sets[i]->size() > 0) out[kScoreSplits[i]] = detector::energy_scores(model, sets[i]->images);
  }
  return out;
}

std::string format_scores_csv(const std::map<std::string, std::vector<double>>& scores) {
  std::string out = "sample_id,split,energy\n";
  for (const char* split : kScoreSplits) {
    auto it = scores.find(split);
    if (it == scores.end()) continue;
    for (std::size_t i = 0; i < it->second.size(); ++i) {
      out += std::to_string(i) + "," + split + "," + format_double(it->second[i]) + "\n";
    }
  }
  return out;
}

std::map<std::string, std::vector<double>> parse_scores_csv(const std::string& text) {
  std::map<std::string, std::vector<double>> out;
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "sample_id,split,energy") throw FormatError("unexpected score CSV header");
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto a = line.find(','), b = line.rfind(',');
    if (a == std::string::npos || a == b) throw FormatError("score CSV line " + std::to_string(lineno) + " malformed");
    const std::string split = line.substr(a + 1, b - a - 1);
    double v = 0.0;
    const char* first = line.data() + b + 1;
    const char* last = line.data() + line.size();
    auto res = std::from_chars(first, last, v);
    if (res.ec != std::errc() || res.ptr != last) {
      throw FormatError("score CSV line " + std::to_string(lineno) + " has a bad value");
    }
    out[split].push_back(v);
  }
  return out;
}

double mean_nuisance_retention(const data::ImageSet& id_train, const Tensor& outliers,
                               std::span<const std::int32_t> source_indices) {
  if (source_indices.empty()) throw ArgumentError("empty outlier set");
  if (outliers.dim(0) != source_indices.size()) throw ArgumentError("one source index per outlier required");
  const Shape one(outliers.shape().begin() + 1, outliers.shape().end());
  double sum = 0.0;
  for (std::size_t j = 0; j < source_indices.size(); ++j) {
    const auto s = source_indices[j];
    if (s < 0 || static_cast<std::size_t>(s) >= id_train.size()) throw ArgumentError("outlier source out of range");
    sum += nuisance_retention(id_train.at(static_cast<std::size_t>(s)), outliers.slice_rows(j, j + 1).reshaped(one));
  }
  return sum / static_cast<double>(source_indices.size());
}

void write_image_grid(const std::filesystem::path& path, std::span<const Tensor> images, std::size_t per_group,
                      std::size_t groups_per_row) {
  if (images.empty() || per_group == 0 || images.size() % per_group != 0) {
    throw ArgumentError("image grid needs whole groups of images");
  }
  const std::size_t h = images[0].dim(1), w = images[0].dim(2);
  const std::size_t groups = images.size() / per_group;
  const std::size_t cols = std::min(groups, groups_per_row);
  const std::size_t rows = (groups + groups_per_row - 1) / groups_per_row;
  const std::size_t cell_w = per_group * w + 1, cell_h = h + 1;
  const std::size_t width = cols * cell_w + 1, height = rows * cell_h + 1;
  std::vector<png_byte> pixels(width * height * 3, 255);
  for (std::size_t i = 0; i < images.size(); ++i) {
    const Tensor& img = images[i];
    if (img.ndim() != 3 || img.dim(0) != 3 || img.dim(1) != h || img.dim(2) != w) {
      throw ArgumentError("grid images must all be [3, H, W] of one size");
    }
    const std::size_t g = i / per_group, k = i % per_group;
    const std::size_t x0 = (g % groups_per_row) * cell_w + 1 + k * w, y0 = (g / groups_per_row) * cell_h + 1;
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        for (std::size_t c = 0; c < 3; ++c) {
          const double v = std::clamp(static_cast<double>(img[(c * h + y) * w + x]), 0.0, 1.0);
          pixels[((y0 + y) * width + x0 + x) * 3 + c] = static_cast<png_byte>(std::lround(v * 255.0));
        }
      }
    }
  }

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  FILE* f = std::fopen(tmp.c_str(), "wb");
  if (!f) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(f);
    throw std::runtime_error("PNG encoding failed for " + path.string());
  }
  png_init_io(png, f);
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t y = 0; y < height; ++y) png_write_row(png, pixels.data() + y * width * 3);
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  if (std::fclose(f) != 0) throw std::runtime_error("write failed for " + tmp.string());
  std::filesystem::rename(tmp, path);
}

EvalReport run_report(const detector::DetectorModel& model, const data::BenchmarkSplits& splits,
                      std::span<const OutlierSetView> outlier_sets, const detector::DetectorModel* probe,
                      const ReportOptions& options) {
  EvalReport report;
  report.seed = options.seed;
  report.config_hash = options.config_hash;

  const auto scores = split_scores(model, splits);
  if (splits.id_test.size() > 0) {
    const auto labels = detector_labels(splits, splits.id_test);
    report.rows.push_back(
        {"classification", "accuracy", "id_test", detector::accuracy(model.predict_logits(splits.id_test.images), labels)});
    for (const char* split : {"near_ood", "far_ood"}) {
      auto it = scores.find(split);
      if (it == scores.end()) continue;
      const ScoreSet s{scores.at("id_test"), it->second};
      report.rows.push_back({"detection", "auroc", split, auroc(s)});
      report.rows.push_back({"detection", "fpr95", split, fpr_at_tpr(s, 0.95)});
    }
  }

  for (const auto& set : outlier_sets) {
    if (!set.images || set.source_indices.empty()) continue;
    report.rows.push_back({"outliers", "nuisance_retention", set.name,
                           mean_nuisance_retention(splits.id_train, *set.images, set.source_indices)});
    if (probe) {
      std::vector<std::int32_t> cls;
      for (auto s : set.source_indices) {
        cls.push_back(splits.id_index(splits.id_train.labels[static_cast<std::size_t>(s)]));
      }
      const auto shift = semantic_shift(*probe, *set.images, cls);
      report.rows.push_back({"outliers", "semantic_shift", set.name, mean_std(shift).mean});
    }
  }

  if (!options.out_dir.empty()) {
    data::write_file_atomic(options.out_dir / "report.csv", format_report_csv(report));
    data::write_file_atomic(options.out_dir / "scores.csv", format_scores_csv(scores));
    std::vector<const OutlierSetView*> usable;
    for (const auto& s : outlier_sets) {
      if (s.images && !s.source_indices.empty()) usable.push_back(&s);
    }
    if (!usable.empty()) {
      std::vector<Tensor> tiles;
      const Shape one(usable[0]->images->shape().begin() + 1, usable[0]->images->shape().end());
      std::size_t groups = 0;
      for (std::size_t j = 0; j < usable[0]->source_indices.size() && groups < options.grid_sources; ++j) {
        const auto src = usable[0]->source_indices[j];
        std::vector<Tensor> group{splits.id_train.at(static_cast<std::size_t>(src)).pixels};
        for (const auto* s : usable) {
          const auto it = std::find(s->source_indices.begin(), s->source_indices.end(), src);
          if (it == s->source_indices.end()) break;
          const auto k = static_cast<std::size_t>(it - s->source_indices.begin());
          group.push_back(s->images->slice_rows(k, k + 1).reshaped(one));
        }
        if (group.size() != usable.size() + 1) continue;
        tiles.insert(tiles.end(), group.begin(), group.end());
        ++groups;
      }
      if (!tiles.empty()) write_image_grid(options.out_dir / "grid.png", tiles, usable.size() + 1);
    }
  }
  return report;
}

}  // namespace sona::eval
