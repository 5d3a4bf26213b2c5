#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "sona/core/error.hpp"
#include "sona/core/kvconfig.hpp"
#include "sona/eval/report.hpp"
#include "sona/pipeline/stages.hpp"

namespace fs = std::filesystem;
using namespace sona;
using pipeline::PipelineConfig;
using pipeline::Stage;

namespace {

class MissingArtifact : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Context {
  PipelineConfig cfg;
  std::string hash;
  fs::path workdir;
  bool force = false;

  std::uint64_t seed(Stage s) const { return pipeline::stage_seed(cfg.seed, s); }
};

void log_line(const std::string& s) { std::cerr << s << '\n'; }

std::string outlier_file(const std::string& name) { return "outliers-" + name + ".sona"; }
std::string detector_file(const std::string& tier) { return "detector-" + tier + ".sona"; }

data::Archive load_artifact(const Context& ctx, const std::string& file, const std::string& producer) {
  const fs::path p = ctx.workdir / file;
  if (!fs::exists(p)) {
    throw MissingArtifact("missing " + p.string() + "; run `sona " + producer + "` first");
  }
  data::Archive a = data::load_archive(p);
  const std::string stamped = a.contains("config_hash") ? a.text("config_hash") : "";
  if (stamped != ctx.hash) {
    const std::string msg = p.string() + " was produced with config " + stamped + ", current config is " + ctx.hash;
    if (!ctx.force) throw ConfigError(msg + " (pass --force to use it anyway)");
    log_line("warning: " + msg);
  }
  return a;
}

data::BenchmarkSplits load_data(const Context& ctx) {
  return data::benchmark_from_archive(load_artifact(ctx, "data.sona", "gen-data"));
}

std::unique_ptr<diffusion::ConvDenoiser> load_denoiser(const Context& ctx) {
  return pipeline::denoiser_from_archive(load_artifact(ctx, "diffusion.sona", "train-diffusion"));
}

pipeline::OutlierSet load_outliers(const Context& ctx, const std::string& name) {
  return pipeline::outliers_from_archive(
      load_artifact(ctx, outlier_file(name), "gen-outliers --name " + name));
}

detector::DetectorModel load_or_train_probe(const Context& ctx, const data::BenchmarkSplits& splits) {
  const fs::path p = ctx.workdir / "probe.sona";
  if (fs::exists(p)) return pipeline::detector_from_archive(load_artifact(ctx, "probe.sona", "eval"));
  log_line("training probe classifier");
  auto probe = pipeline::train_probe(ctx.cfg, splits, ctx.seed(Stage::kProbe));
  data::save_archive(pipeline::detector_to_archive(probe, "probe", ctx.hash), p);
  return probe;
}

pipeline::OutlierSet make_outliers(const Context& ctx, const pipeline::OutlierConfig& oc,
                                   const data::BenchmarkSplits& splits, const diffusion::ConvDenoiser& den) {
  return pipeline::generate_outlier_set(den, pipeline::make_schedule(ctx.cfg), splits, oc, ctx.seed(Stage::kOutliers),
                                        log_line);
}

void cmd_gen_data(const Context& ctx, const std::string& out) {
  const auto splits = data::generate_benchmark(ctx.cfg.data, ctx.cfg.counts, ctx.seed(Stage::kData));
  auto a = data::benchmark_to_archive(splits);
  a.add("config_hash", ctx.hash);
  data::save_archive(a, ctx.workdir / out);
}

void cmd_train_diffusion(const Context& ctx) {
  const auto splits = load_data(ctx);
  auto den = pipeline::make_denoiser(ctx.cfg, pipeline::make_vocab(splits), ctx.seed(Stage::kDenoiserInit));
  pipeline::train_diffusion(*den, ctx.cfg, splits, ctx.seed(Stage::kDenoiserTrain), log_line);
  data::save_archive(pipeline::denoiser_to_archive(*den, ctx.cfg), ctx.workdir / "diffusion.sona");
}

void cmd_gen_outliers(const Context& ctx, const pipeline::OutlierConfig& oc, const std::string& name) {
  const auto splits = load_data(ctx);
  const auto den = load_denoiser(ctx);
  const auto set = make_outliers(ctx, oc, splits, *den);
  data::save_archive(pipeline::outliers_to_archive(set, ctx.hash), ctx.workdir / outlier_file(name));
}

detector::DetectorModel train_detector(const Context& ctx, const PipelineConfig& cfg,
                                       const data::BenchmarkSplits& splits, const pipeline::OutlierSet* set) {
  std::vector<detector::EpochLosses> curves;
  auto model = pipeline::train_detector_stage(cfg, splits, set, ctx.seed(Stage::kDetector), &curves);
  for (std::size_t e = 0; e < curves.size(); ++e) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "epoch %zu ce %.4f oe %.4f mi %.4f", e + 1, curves[e].ce, curves[e].oe,
                  curves[e].mi);
    log_line(buf);
  }
  return model;
}

void cmd_train_detector(const Context& ctx, detector::LossTier tier, const std::string& outliers) {
  PipelineConfig cfg = ctx.cfg;
  cfg.detector.tier = tier;
  const auto splits = load_data(ctx);
  std::optional<pipeline::OutlierSet> set;
  if (tier != detector::LossTier::kCe) set = load_outliers(ctx, outliers);
  const auto model = train_detector(ctx, cfg, splits, set ? &*set : nullptr);
  const std::string name = detector::to_string(tier);
  data::save_archive(pipeline::detector_to_archive(model, name, ctx.hash), ctx.workdir / detector_file(name));
}

void cmd_eval(const Context& ctx, detector::LossTier tier) {
  const std::string name = detector::to_string(tier);
  const auto splits = load_data(ctx);
  const auto model =
      pipeline::detector_from_archive(load_artifact(ctx, detector_file(name), "train-detector --loss " + name));

  std::vector<std::string> names;
  for (const auto& entry : fs::directory_iterator(ctx.workdir)) {
    const std::string f = entry.path().filename().string();
    if (f.starts_with("outliers-") && f.ends_with(".sona")) names.push_back(f.substr(9, f.size() - 14));
  }
  std::sort(names.begin(), names.end());
  std::vector<pipeline::OutlierSet> sets;
  for (const auto& n : names) sets.push_back(load_outliers(ctx, n));
  std::vector<eval::OutlierSetView> views;
  for (std::size_t i = 0; i < sets.size(); ++i) {
    views.push_back({names[i], &sets[i].images, sets[i].source_indices});
  }
  const auto probe = load_or_train_probe(ctx, splits);
  const auto report = eval::run_report(model, splits, views, &probe,
                                       {ctx.workdir / ("report-" + name), ctx.cfg.seed, ctx.hash,
                                        ctx.cfg.grid_sources});
  std::cout << eval::format_report_csv(report);
}

PipelineConfig sweep_variant(const PipelineConfig& base, const std::string& param, const std::string& value) {
  auto kv = base.to_key_values();
  if (param == "lambda") kv["sona.lambda"] = value;
  else if (param == "s") kv["sona.scale"] = value;
  else if (param == "tilde_t") {
    kv["sona.tilde_t"] = (value == "uniform" || value.starts_with("fixed:")) ? value : "fixed:" + value;
  } else {
    throw ConfigError("unknown sweep parameter '" + param + "' (expected lambda, s or tilde_t)");
  }
  auto cfg = PipelineConfig::from_key_values(kv);
  cfg.validate();
  return cfg;
}

void cmd_ablate(const Context& ctx, const std::string& param, const std::vector<std::string>& values) {
  if (values.empty()) throw ConfigError("ablate needs at least one value");
  std::vector<PipelineConfig> variants;
  for (const auto& v : values) variants.push_back(sweep_variant(ctx.cfg, param, v));

  const auto splits = load_data(ctx);
  const auto den = load_denoiser(ctx);
  const auto probe = load_or_train_probe(ctx, splits);
  std::string csv = "param,value,near_auroc,far_auroc,near_fpr95,far_fpr95,accuracy,nuisance_retention,"
                    "semantic_shift,seed,config_hash\n";
  for (std::size_t i = 0; i < values.size(); ++i) {
    log_line(param + " = " + values[i]);
    const auto set = make_outliers(ctx, variants[i].outliers, splits, *den);
    const auto model = train_detector(ctx, variants[i], splits, &set);
    const eval::OutlierSetView view{"variant", &set.images, set.source_indices};
    const auto r = eval::run_report(model, splits, {&view, 1}, &probe, {{}, ctx.cfg.seed, ctx.hash});
    csv += param + "," + values[i];
    for (const auto& [metric, split] : std::vector<std::pair<std::string, std::string>>{
             {"auroc", "near_ood"}, {"auroc", "far_ood"}, {"fpr95", "near_ood"}, {"fpr95", "far_ood"}}) {
      csv += "," + eval::format_double(r.get("detection", metric, split));
    }
    csv += "," + eval::format_double(r.get("classification", "accuracy", "id_test"));
    csv += "," + eval::format_double(r.get("outliers", "nuisance_retention", "variant"));
    csv += "," + eval::format_double(r.get("outliers", "semantic_shift", "variant"));
    csv += "," + std::to_string(ctx.cfg.seed) + "," + ctx.hash + "\n";
  }
  data::write_file_atomic(ctx.workdir / ("ablate-" + param + ".csv"), csv);
  std::cout << csv;
}

void append_manifest(const Context& ctx, const std::string& command, double seconds, const std::string& status) {
  std::ofstream out(ctx.workdir / "manifest.log", std::ios::app);
  char dur[32];
  std::snprintf(dur, sizeof dur, "%.3f", seconds);
  out << "command=" << command << " config_hash=" << ctx.hash << " seed=" << ctx.cfg.seed << " seconds=" << dur
      << " status=" << status << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Synthetic outlier generation and OOD detector training"};
  app.require_subcommand(1);
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string workdir = "sona-work";
  bool force = false;
  app.add_option("--config", config_path, "Key-value config file")->check(CLI::ExistingFile);
  app.add_option("--seed", seed, "Override the config seed");
  app.add_option("--workdir", workdir, "Directory for every artifact")->capture_default_str();
  app.add_flag("--force", force, "Use artifacts stamped with a different config hash");
  app.fallthrough();

  auto* show = app.add_subcommand("show-config", "Print the resolved configuration");

  std::string data_out = "data.sona";
  auto* gen_data = app.add_subcommand("gen-data", "Render the synthetic benchmark");
  gen_data->add_option("--out", data_out, "Archive name inside the workdir")->capture_default_str();

  auto* train_diff = app.add_subcommand("train-diffusion", "Train the conditional denoiser");

  std::string guidance, tilde_t, outlier_name;
  auto* gen_out = app.add_subcommand("gen-outliers", "Generate one outlier per ID training image");
  gen_out->add_option("--guidance", guidance, "sona, global or global-contrast");
  gen_out->add_option("--tilde-t", tilde_t, "fixed:N or uniform");
  gen_out->add_option("--name", outlier_name, "Set name (default: the guidance mode)");

  std::string loss, det_outliers = "sona";
  auto* train_det = app.add_subcommand("train-detector", "Train an OOD detector");
  train_det->add_option("--loss", loss, "ce, ce+oe or full");
  train_det->add_option("--outliers", det_outliers, "Outlier set name")->capture_default_str();

  std::string eval_loss;
  auto* eval_cmd = app.add_subcommand("eval", "Score a trained detector and write a report");
  eval_cmd->add_option("--loss", eval_loss, "Detector tier to evaluate");

  std::string sweep;
  std::vector<std::string> sweep_values;
  auto* ablate = app.add_subcommand("ablate", "Sweep one guidance parameter");
  ablate->add_option("--sweep", sweep, "lambda, s or tilde_t")->required();
  ablate->add_option("values", sweep_values, "Values to try")->required();

  CLI11_PARSE(app, argc, argv);

  Context ctx;
  std::string command = app.get_subcommands().front()->get_name();
  const auto start = std::chrono::steady_clock::now();
  try {
    ctx.cfg = config_path.empty() ? PipelineConfig{} : PipelineConfig::load(config_path);
    if (seed) ctx.cfg.seed = *seed;
    ctx.cfg.validate();
    ctx.hash = ctx.cfg.hash();
    ctx.workdir = workdir;
    ctx.force = force;

    if (show->parsed()) {
      std::cout << canonical_key_values(ctx.cfg.to_key_values());
      return 0;
    }
    fs::create_directories(ctx.workdir);

    if (gen_data->parsed()) {
      cmd_gen_data(ctx, data_out);
    } else if (train_diff->parsed()) {
      cmd_train_diffusion(ctx);
    } else if (gen_out->parsed()) {
      pipeline::OutlierConfig oc = ctx.cfg.outliers;
      if (!guidance.empty()) oc.mode = guidance::parse_guidance_mode(guidance);
      if (!tilde_t.empty()) oc.sona.tilde_t = guidance::TildeTPolicy::parse(tilde_t);
      oc.sona.validate(ctx.cfg.diffusion.T);
      cmd_gen_outliers(ctx, oc, outlier_name.empty() ? guidance::to_string(oc.mode) : outlier_name);
    } else if (train_det->parsed()) {
      cmd_train_detector(ctx, loss.empty() ? ctx.cfg.detector.tier : detector::parse_loss_tier(loss), det_outliers);
    } else if (eval_cmd->parsed()) {
      cmd_eval(ctx, eval_loss.empty() ? ctx.cfg.detector.tier : detector::parse_loss_tier(eval_loss));
    } else if (ablate->parsed()) {
      cmd_ablate(ctx, sweep, sweep_values);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    if (!ctx.workdir.empty() && fs::exists(ctx.workdir)) {
      append_manifest(ctx, command, std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count(),
                      "failed");
    }
    return dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const MissingArtifact*>(&e) ? 2 : 1;
  }
  append_manifest(ctx, command, std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count(),
                  "ok");
  return 0;
}
