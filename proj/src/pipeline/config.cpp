#include "sona/pipeline/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "sona/core/error.hpp"
#include "sona/core/kvconfig.hpp"

namespace sona::pipeline {

namespace {

std::string fmt(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

double to_double(const std::string& key, const std::string& s) {
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size() || !std::isfinite(v)) {
    throw ConfigError("'" + key + "': expected a number, got '" + s + "'");
  }
  return v;
}

template <class Int>
Int to_int(const std::string& key, const std::string& s) {
  Int v{};
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw ConfigError("'" + key + "': expected an integer, got '" + s + "'");
  }
  return v;
}

}  // namespace

PromptPolicy parse_prompt_policy(const std::string& text) {
  if (text == "rand") return PromptPolicy::kRandom;
  if (text == "close") return PromptPolicy::kClose;
  if (text == "far") return PromptPolicy::kFar;
  throw ConfigError("unknown prompt policy '" + text + "' (expected rand, close or far)");
}

std::string to_string(PromptPolicy p) {
  switch (p) {
    case PromptPolicy::kRandom: return "rand";
    case PromptPolicy::kClose: return "close";
    case PromptPolicy::kFar: return "far";
  }
  return "?";
}

std::map<std::string, std::string> PipelineConfig::to_key_values() const {
  std::map<std::string, std::string> kv;
  kv["seed"] = std::to_string(seed);
  for (const auto& [k, v] : data::spec_to_key_values(data)) kv["data." + k] = v;
  kv["counts.id_train"] = std::to_string(counts.id_train);
  kv["counts.id_test"] = std::to_string(counts.id_test);
  kv["counts.near_ood"] = std::to_string(counts.near_ood);
  kv["counts.far_ood"] = std::to_string(counts.far_ood);
  kv["counts.prompt_train"] = std::to_string(counts.prompt_train);
  kv["diffusion.T"] = std::to_string(diffusion.T);
  kv["diffusion.beta_start"] = fmt(diffusion.beta_start);
  kv["diffusion.beta_end"] = fmt(diffusion.beta_end);
  kv["diffusion.p_uncond"] = fmt(diffusion.p_uncond);
  kv["diffusion.train_steps"] = std::to_string(diffusion.train_steps);
  kv["diffusion.batch_size"] = std::to_string(diffusion.batch_size);
  kv["diffusion.lr"] = fmt(diffusion.lr);
  kv["diffusion.base_width"] = std::to_string(diffusion.base_width);
  kv["diffusion.inner_width"] = std::to_string(diffusion.inner_width);
  kv["diffusion.embed_width"] = std::to_string(diffusion.embed_width);
  kv["sona.guidance"] = guidance::to_string(outliers.mode);
  kv["sona.scale"] = fmt(outliers.sona.scale);
  kv["sona.lambda"] = fmt(outliers.sona.lambda);
  kv["sona.tilde_t"] = outliers.sona.tilde_t.to_string();
  kv["sona.prompt_policy"] = to_string(outliers.prompt_policy);
  kv["sona.count"] = std::to_string(outliers.count);
  kv["sona.batch_size"] = std::to_string(outliers.batch_size);
  kv["detector.loss"] = detector::to_string(detector.tier);
  kv["detector.beta"] = fmt(detector.beta);
  kv["detector.gamma_mi"] = fmt(detector.gamma_mi);
  kv["detector.epochs"] = std::to_string(detector.epochs);
  kv["detector.batch_size"] = std::to_string(detector.batch_size);
  kv["detector.lr"] = fmt(detector.lr);
  kv["detector.club_lr"] = fmt(detector.club_lr);
  kv["detector.mi_warmup_epochs"] = std::to_string(detector.mi_warmup_epochs);
  kv["detector.oe_form"] = detector.oe_form == detector::OeForm::kUniformCrossEntropy ? "log" : "literal";
  kv["detector.width"] = std::to_string(detector_width);
  kv["detector.feature_dim"] = std::to_string(feature_dim);
  kv["eval.probe_epochs"] = std::to_string(probe_epochs);
  kv["eval.grid_sources"] = std::to_string(grid_sources);
  return kv;
}

PipelineConfig PipelineConfig::from_key_values(const std::map<std::string, std::string>& values) {
  PipelineConfig c;
  std::map<std::string, std::string> data_kv;
  for (const auto& [k, v] : values) {
    using std::size_t;
    if (k == "seed") c.seed = to_int<std::uint64_t>(k, v);
    else if (k.rfind("data.", 0) == 0) data_kv[k.substr(5)] = v;
    else if (k == "counts.id_train") c.counts.id_train = to_int<size_t>(k, v);
    else if (k == "counts.id_test") c.counts.id_test = to_int<size_t>(k, v);
    else if (k == "counts.near_ood") c.counts.near_ood = to_int<size_t>(k, v);
    else if (k == "counts.far_ood") c.counts.far_ood = to_int<size_t>(k, v);
    else if (k == "counts.prompt_train") c.counts.prompt_train = to_int<size_t>(k, v);
    else if (k == "diffusion.T") c.diffusion.T = to_int<int>(k, v);
    else if (k == "diffusion.beta_start") c.diffusion.beta_start = to_double(k, v);
    else if (k == "diffusion.beta_end") c.diffusion.beta_end = to_double(k, v);
    else if (k == "diffusion.p_uncond") c.diffusion.p_uncond = to_double(k, v);
    else if (k == "diffusion.train_steps") c.diffusion.train_steps = to_int<size_t>(k, v);
    else if (k == "diffusion.batch_size") c.diffusion.batch_size = to_int<size_t>(k, v);
    else if (k == "diffusion.lr") c.diffusion.lr = to_double(k, v);
    else if (k == "diffusion.base_width") c.diffusion.base_width = to_int<size_t>(k, v);
    else if (k == "diffusion.inner_width") c.diffusion.inner_width = to_int<size_t>(k, v);
    else if (k == "diffusion.embed_width") c.diffusion.embed_width = to_int<size_t>(k, v);
    else if (k == "sona.guidance") c.outliers.mode = guidance::parse_guidance_mode(v);
    else if (k == "sona.scale") c.outliers.sona.scale = to_double(k, v);
    else if (k == "sona.lambda") c.outliers.sona.lambda = to_double(k, v);
    else if (k == "sona.tilde_t") c.outliers.sona.tilde_t = guidance::TildeTPolicy::parse(v);
    else if (k == "sona.prompt_policy") c.outliers.prompt_policy = parse_prompt_policy(v);
    else if (k == "sona.count") c.outliers.count = to_int<size_t>(k, v);
    else if (k == "sona.batch_size") c.outliers.batch_size = to_int<size_t>(k, v);
    else if (k == "detector.loss") c.detector.tier = detector::parse_loss_tier(v);
    else if (k == "detector.beta") c.detector.beta = to_double(k, v);
    else if (k == "detector.gamma_mi") c.detector.gamma_mi = to_double(k, v);
    else if (k == "detector.epochs") c.detector.epochs = to_int<size_t>(k, v);
    else if (k == "detector.batch_size") c.detector.batch_size = to_int<size_t>(k, v);
    else if (k == "detector.lr") c.detector.lr = to_double(k, v);
    else if (k == "detector.club_lr") c.detector.club_lr = to_double(k, v);
    else if (k == "detector.mi_warmup_epochs") c.detector.mi_warmup_epochs = to_int<size_t>(k, v);
    else if (k == "detector.oe_form") {
      if (v == "log") c.detector.oe_form = detector::OeForm::kUniformCrossEntropy;
      else if (v == "literal") c.detector.oe_form = detector::OeForm::kNegativeMeanSoftmax;
      else throw ConfigError("'detector.oe_form': expected log or literal, got '" + v + "'");
    } else if (k == "detector.width") c.detector_width = to_int<size_t>(k, v);
    else if (k == "detector.feature_dim") c.feature_dim = to_int<size_t>(k, v);
    else if (k == "eval.probe_epochs") c.probe_epochs = to_int<size_t>(k, v);
    else if (k == "eval.grid_sources") c.grid_sources = to_int<size_t>(k, v);
    else throw ConfigError("unknown config key '" + k + "'");
  }
  c.data = data::spec_from_key_values(data_kv);
  c.validate();
  return c;
}

PipelineConfig PipelineConfig::load(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return from_key_values(parse_key_values(ss.str(), path.string()));
}

std::string PipelineConfig::hash() const {
  auto kv = to_key_values();
  kv.erase("seed");
  return config_hash(kv);
}

void PipelineConfig::validate() const {
  data.validate();
  if (counts.id_train == 0) throw ConfigError("counts.id_train must be positive");
  if (diffusion.T < 1) throw ConfigError("diffusion.T must be at least 1");
  if (!(diffusion.beta_start > 0.0 && diffusion.beta_start <= diffusion.beta_end && diffusion.beta_end < 1.0)) {
    throw ConfigError("diffusion beta range must satisfy 0 < beta_start <= beta_end < 1");
  }
  if (!(diffusion.p_uncond >= 0.0 && diffusion.p_uncond <= 1.0)) throw ConfigError("diffusion.p_uncond must be in [0, 1]");
  if (diffusion.batch_size == 0 || outliers.batch_size == 0) throw ConfigError("batch sizes must be positive");
  if (data.side % 4 != 0) throw ConfigError("data.side must be a multiple of 4");
  outliers.sona.validate(diffusion.T);
  detector.validate();
}

}  // namespace sona::pipeline
