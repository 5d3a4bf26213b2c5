#include "sona/pipeline/stages.hpp"

#include <algorithm>
#include <charconv>
#include <numeric>
#include <sstream>

#include "sona/core/error.hpp"
#include "sona/core/kvconfig.hpp"
#include "sona/data/checkpoint.hpp"

namespace sona::pipeline {

namespace {

std::size_t get_size(const std::map<std::string, std::string>& kv, const std::string& key) {
  auto it = kv.find(key);
  if (it == kv.end()) throw FormatError("checkpoint metadata lacks '" + key + "'");
  std::size_t v = 0;
  auto res = std::from_chars(it->second.data(), it->second.data() + it->second.size(), v);
  if (res.ec != std::errc()) throw FormatError("checkpoint metadata '" + key + "' is not an integer");
  return v;
}

std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) out.push_back(item);
  return out;
}

std::string join(const std::vector<std::string>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + v[i];
  return out;
}

void shuffle(std::vector<std::size_t>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1));
    std::swap(v[i - 1], v[j]);
  }
}

Tensor gather_rows(const Tensor& src, std::span<const std::size_t> rows) {
  Shape shape = src.shape();
  const std::size_t row = src.numel() / shape[0];
  shape[0] = rows.size();
  Tensor out(shape);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(src.data().begin() + static_cast<std::ptrdiff_t>(rows[i] * row), row,
                out.data().begin() + static_cast<std::ptrdiff_t>(i * row));
  }
  return out;
}

// 1 - IoU of canonical centred masks, used to rank prompt classes by shape similarity.
double shape_distance(const data::FactorSpec& spec, std::int32_t a, std::int32_t b) {
  constexpr std::size_t side = 32;
  const auto ma = data::shape_mask(data::parse_shape(spec.classes[static_cast<std::size_t>(a)]), side, 16, 16, 11);
  const auto mb = data::shape_mask(data::parse_shape(spec.classes[static_cast<std::size_t>(b)]), side, 16, 16, 11);
  double inter = 0, uni = 0;
  for (std::size_t i = 0; i < ma.numel(); ++i) {
    inter += ma[i] * mb[i];
    uni += std::max(ma[i], mb[i]);
  }
  return uni > 0 ? 1.0 - inter / uni : 0.0;
}

}  // namespace

diffusion::ConditionVocab make_vocab(const data::BenchmarkSplits& splits) {
  std::vector<std::string> names = splits.spec.id_classes;
  names.insert(names.end(), splits.spec.prompt_classes.begin(), splits.spec.prompt_classes.end());
  return diffusion::ConditionVocab(std::move(names));
}

std::int32_t vocab_id(const data::BenchmarkSplits& splits, const diffusion::ConditionVocab& vocab,
                      std::int32_t class_id) {
  return vocab.id_of(splits.spec.classes.at(static_cast<std::size_t>(class_id)));
}

diffusion::NoiseSchedule make_schedule(const PipelineConfig& cfg) {
  return diffusion::make_schedule(cfg.diffusion.T, cfg.diffusion.beta_start, cfg.diffusion.beta_end);
}

std::unique_ptr<diffusion::ConvDenoiser> make_denoiser(const PipelineConfig& cfg, diffusion::ConditionVocab vocab,
                                                       std::uint64_t seed) {
  diffusion::ConvDenoiserConfig dc;
  dc.side = cfg.data.side;
  dc.base_width = cfg.diffusion.base_width;
  dc.inner_width = cfg.diffusion.inner_width;
  dc.embed_width = cfg.diffusion.embed_width;
  return std::make_unique<diffusion::ConvDenoiser>(dc, std::move(vocab), seed);
}

std::vector<double> train_diffusion(diffusion::ConvDenoiser& denoiser, const PipelineConfig& cfg,
                                    const data::BenchmarkSplits& splits, std::uint64_t seed, const Log& log) {
  const auto& vocab = denoiser.vocab();
  std::vector<Tensor> parts{splits.id_train.images};
  std::vector<std::int32_t> labels;
  for (auto c : splits.id_train.labels) labels.push_back(vocab_id(splits, vocab, c));
  if (splits.prompt_train.size() > 0) {
    parts.push_back(splits.prompt_train.images);
    for (auto c : splits.prompt_train.labels) labels.push_back(vocab_id(splits, vocab, c));
  }
  const Tensor images = stack_rows(parts);
  const std::size_t n = labels.size();
  const auto sched = make_schedule(cfg);

  nn::OptimizerState opt = nn::OptimizerState::for_block(*denoiser.params(), {cfg.diffusion.lr});
  Rng root(seed);
  Rng order_rng = root.fork(1);
  Rng noise_rng = root.fork(2);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t cursor = n;
  const std::size_t bs = std::min(cfg.diffusion.batch_size, n);
  const auto total = static_cast<std::int64_t>(cfg.diffusion.train_steps);
  std::vector<double> curve;
  double window = 0.0;
  std::vector<std::size_t> rows(bs);
  std::vector<std::int32_t> batch_labels(bs);
  for (std::int64_t step = 0; step < total; ++step) {
    for (std::size_t i = 0; i < bs; ++i) {
      if (cursor == n) {
        shuffle(order, order_rng);
        cursor = 0;
      }
      rows[i] = order[cursor++];
      batch_labels[i] = labels[rows[i]];
    }
    opt.hyper.lr = nn::cosine_lr(cfg.diffusion.lr, step, total);
    window += diffusion::cfg_train_step(denoiser, opt, gather_rows(images, rows), batch_labels,
                                        cfg.diffusion.p_uncond, sched, noise_rng);
    if ((step + 1) % 100 == 0 || step + 1 == total) {
      const auto k = static_cast<double>((step % 100) + 1);
      curve.push_back(window / k);
      window = 0.0;
      if (log && ((step + 1) % 1000 == 0 || step + 1 == total)) {
        log("diffusion step " + std::to_string(step + 1) + "/" + std::to_string(total) +
            " loss " + std::to_string(curve.back()));
      }
    }
  }
  return curve;
}

data::Archive denoiser_to_archive(const diffusion::ConvDenoiser& denoiser, const PipelineConfig& cfg) {
  const auto& dc = denoiser.config();
  std::map<std::string, std::string> meta{{"channels", std::to_string(dc.channels)},
                                          {"side", std::to_string(dc.side)},
                                          {"base_width", std::to_string(dc.base_width)},
                                          {"inner_width", std::to_string(dc.inner_width)},
                                          {"embed_width", std::to_string(dc.embed_width)},
                                          {"groups", std::to_string(dc.groups)},
                                          {"vocab", join(denoiser.vocab().names())},
                                          {"T", std::to_string(cfg.diffusion.T)},
                                          {"train_steps", std::to_string(cfg.diffusion.train_steps)}};
  data::Archive a;
  a.add("config_hash", cfg.hash());
  a.add("denoiser.meta", canonical_key_values(meta));
  data::add_params(a, "denoiser", *denoiser.params());
  return a;
}

std::unique_ptr<diffusion::ConvDenoiser> denoiser_from_archive(const data::Archive& archive) {
  const auto meta = parse_key_values(archive.text("denoiser.meta"), "denoiser metadata");
  diffusion::ConvDenoiserConfig dc;
  dc.channels = get_size(meta, "channels");
  dc.side = get_size(meta, "side");
  dc.base_width = get_size(meta, "base_width");
  dc.inner_width = get_size(meta, "inner_width");
  dc.embed_width = get_size(meta, "embed_width");
  dc.groups = get_size(meta, "groups");
  auto model = std::make_unique<diffusion::ConvDenoiser>(
      dc, diffusion::ConditionVocab(split_commas(meta.at("vocab"))), 0);
  data::load_params(archive, "denoiser", *model->params());
  return model;
}

OutlierSet generate_outlier_set(const diffusion::NoisePredictor& denoiser, const diffusion::NoiseSchedule& sched,
                                const data::BenchmarkSplits& splits, const OutlierConfig& cfg, std::uint64_t seed,
                                const Log& log) {
  cfg.sona.validate(sched.T());
  const std::size_t n_src = splits.id_train.size();
  if (n_src == 0) throw ConfigError("no ID training images to deform");
  const std::size_t count = cfg.count == 0 ? n_src : cfg.count;
  const auto& vocab = denoiser.vocab();
  const auto& prompts = splits.ood_prompt_labels;

  OutlierSet out;
  out.guidance = guidance::to_string(cfg.mode);
  std::vector<Tensor> chunks;
  for (std::size_t b = 0; b < count; b += cfg.batch_size) {
    const std::size_t e = std::min(count, b + cfg.batch_size);
    std::vector<Rng> rngs;
    std::vector<std::size_t> src;
    std::vector<std::int32_t> c_id, c_ood;
    for (std::size_t i = b; i < e; ++i) {
      const std::uint64_t s = mix_seed(seed, i);
      rngs.emplace_back(s);
      const std::size_t j = i % n_src;
      const std::int32_t id_class = splits.id_train.labels[j];
      std::int32_t ood_class = prompts.front();
      if (cfg.prompt_policy == PromptPolicy::kRandom) {
        ood_class = prompts[static_cast<std::size_t>(rngs.back().uniform_int(0, static_cast<std::int64_t>(prompts.size()) - 1))];
      } else {
        double best = cfg.prompt_policy == PromptPolicy::kClose ? 2.0 : -1.0;
        for (auto p : prompts) {
          const double d = shape_distance(splits.spec, id_class, p);
          if (cfg.prompt_policy == PromptPolicy::kClose ? d < best : d > best) {
            best = d;
            ood_class = p;
          }
        }
      }
      src.push_back(j);
      c_id.push_back(vocab_id(splits, vocab, id_class));
      c_ood.push_back(vocab_id(splits, vocab, ood_class));
      out.source_indices.push_back(static_cast<std::int32_t>(j));
      out.ood_labels.push_back(ood_class);
      out.seeds.push_back(s);
    }
    auto batch = guidance::generate_outliers(denoiser, gather_rows(splits.id_train.images, src), c_id, c_ood, sched,
                                             cfg.mode, cfg.sona, rngs);
    out.tilde_ts.insert(out.tilde_ts.end(), batch.tilde_ts.begin(), batch.tilde_ts.end());
    chunks.push_back(std::move(batch.images));
    if (log && (chunks.size() % 8 == 0 || e == count)) {
      log("outliers " + std::to_string(e) + "/" + std::to_string(count));
    }
  }
  out.images = stack_rows(chunks);
  return out;
}

data::Archive outliers_to_archive(const OutlierSet& set, const std::string& config_hash) {
  data::Archive a;
  a.add("config_hash", config_hash);
  a.add("guidance", set.guidance);
  a.add("images", set.images);
  a.add("source_indices", data::ints_to_tensor(set.source_indices));
  a.add("ood_labels", data::ints_to_tensor(set.ood_labels));
  a.add("tilde_ts", data::ints_to_tensor(set.tilde_ts));
  std::string seeds;
  for (std::size_t i = 0; i < set.seeds.size(); ++i) seeds += (i ? "," : "") + std::to_string(set.seeds[i]);
  a.add("seeds", seeds);
  return a;
}

OutlierSet outliers_from_archive(const data::Archive& a) {
  OutlierSet s;
  s.guidance = a.text("guidance");
  s.images = a.tensor("images");
  s.source_indices = data::tensor_to_ints(a.tensor("source_indices"));
  s.ood_labels = data::tensor_to_ints(a.tensor("ood_labels"));
  s.tilde_ts = data::tensor_to_ints(a.tensor("tilde_ts"));
  for (const auto& t : split_commas(a.text("seeds"))) {
    std::uint64_t v = 0;
    auto res = std::from_chars(t.data(), t.data() + t.size(), v);
    if (res.ec != std::errc() || res.ptr != t.data() + t.size()) throw FormatError("bad outlier seed '" + t + "'");
    s.seeds.push_back(v);
  }
  const std::size_t n = s.source_indices.size();
  if (s.images.dim(0) != n || s.ood_labels.size() != n || s.tilde_ts.size() != n || s.seeds.size() != n) {
    throw FormatError("outlier archive entries disagree in length");
  }
  return s;
}

std::vector<std::int32_t> detector_labels(const data::BenchmarkSplits& splits, const data::ImageSet& set) {
  std::vector<std::int32_t> out;
  out.reserve(set.size());
  for (auto c : set.labels) {
    const auto k = splits.id_index(c);
    if (k < 0) throw ArgumentError("image label is not an ID class");
    out.push_back(k);
  }
  return out;
}

detector::DetectorModel make_detector(const PipelineConfig& cfg, const data::BenchmarkSplits& splits,
                                      std::uint64_t seed) {
  detector::DetectorConfig dc;
  dc.side = splits.spec.side;
  dc.width = cfg.detector_width;
  dc.feature_dim = cfg.feature_dim;
  dc.classes = splits.id_classes.size();
  return detector::DetectorModel(dc, seed);
}

detector::DetectorModel train_detector_stage(const PipelineConfig& cfg, const data::BenchmarkSplits& splits,
                                             const OutlierSet* outliers, std::uint64_t seed,
                                             std::vector<detector::EpochLosses>* curves) {
  auto model = make_detector(cfg, splits, mix_seed(seed, 11));
  detector::TrainConfig tc = cfg.detector;
  tc.seed = mix_seed(seed, 12);
  detector::PairedOutliers paired;
  if (outliers) {
    paired.images = &outliers->images;
    paired.source_indices = outliers->source_indices;
  } else if (tc.tier != detector::LossTier::kCe) {
    throw ConfigError("loss tier " + detector::to_string(tc.tier) + " needs an outlier set");
  }
  const auto labels = detector_labels(splits, splits.id_train);
  auto c = detector::train_detector(model, splits.id_train.images, labels, paired, tc);
  if (curves) *curves = std::move(c);
  return model;
}

detector::DetectorModel train_probe(const PipelineConfig& cfg, const data::BenchmarkSplits& splits,
                                    std::uint64_t seed) {
  PipelineConfig pc = cfg;
  pc.detector.tier = detector::LossTier::kCe;
  pc.detector.epochs = cfg.probe_epochs;
  return train_detector_stage(pc, splits, nullptr, mix_seed(seed, 99));
}

data::Archive detector_to_archive(const detector::DetectorModel& model, const std::string& tier,
                                  const std::string& config_hash) {
  const auto& dc = model.config();
  std::map<std::string, std::string> meta{{"channels", std::to_string(dc.channels)},
                                          {"side", std::to_string(dc.side)},
                                          {"width", std::to_string(dc.width)},
                                          {"feature_dim", std::to_string(dc.feature_dim)},
                                          {"classes", std::to_string(dc.classes)},
                                          {"club_hidden", std::to_string(dc.club_hidden)},
                                          {"loss", tier}};
  data::Archive a;
  a.add("config_hash", config_hash);
  a.add("detector.meta", canonical_key_values(meta));
  data::add_params(a, "detector.body", model.body());
  data::add_params(a, "detector.club", model.club());
  return a;
}

detector::DetectorModel detector_from_archive(const data::Archive& archive) {
  const auto meta = parse_key_values(archive.text("detector.meta"), "detector metadata");
  detector::DetectorConfig dc;
  dc.channels = get_size(meta, "channels");
  dc.side = get_size(meta, "side");
  dc.width = get_size(meta, "width");
  dc.feature_dim = get_size(meta, "feature_dim");
  dc.classes = get_size(meta, "classes");
  dc.club_hidden = get_size(meta, "club_hidden");
  detector::DetectorModel model(dc, 0);
  data::load_params(archive, "detector.body", model.body());
  data::load_params(archive, "detector.club", model.club());
  return model;
}

}  // namespace sona::pipeline
