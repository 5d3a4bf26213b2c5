#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "sona/core/error.hpp"
#include "sona/pipeline/stages.hpp"

using namespace sona;
using namespace sona::pipeline;

namespace {

PipelineConfig tiny_config() {
  PipelineConfig cfg;
  cfg.counts = {16, 8, 8, 8, 8};
  cfg.diffusion.T = 6;
  cfg.diffusion.train_steps = 6;
  cfg.diffusion.batch_size = 4;
  cfg.diffusion.base_width = 4;
  cfg.diffusion.inner_width = 8;
  cfg.diffusion.embed_width = 8;
  cfg.outliers.count = 6;
  cfg.outliers.batch_size = 4;
  cfg.detector.epochs = 1;
  cfg.detector.batch_size = 8;
  cfg.detector_width = 4;
  cfg.feature_dim = 8;
  cfg.probe_epochs = 1;
  return cfg;
}

}  // namespace

TEST_CASE("config key-value round trip") {
  PipelineConfig cfg;
  cfg.seed = 4;
  cfg.outliers.sona.lambda = 0.15;
  cfg.outliers.sona.tilde_t = guidance::TildeTPolicy::fixed_at(40);
  cfg.outliers.mode = guidance::GuidanceMode::kGlobal;
  cfg.detector.tier = detector::LossTier::kCeOe;
  cfg.detector.oe_form = detector::OeForm::kNegativeMeanSoftmax;
  const auto kv = cfg.to_key_values();
  const auto back = PipelineConfig::from_key_values(kv);
  CHECK(back.to_key_values() == kv);
  CHECK(back.outliers.sona.lambda == 0.15);
  CHECK(back.outliers.sona.tilde_t.fixed == 40);
  CHECK(back.detector.tier == detector::LossTier::kCeOe);
  CHECK(back.hash() == cfg.hash());
}

TEST_CASE("config rejects unknown keys and malformed values") {
  CHECK_THROWS_AS(PipelineConfig::from_key_values({{"sona.lamda", "0.2"}}), ConfigError);
  CHECK_THROWS_AS(PipelineConfig::from_key_values({{"sona.lambda", "abc"}}), ConfigError);
  CHECK_THROWS_AS(PipelineConfig::from_key_values({{"sona.guidance", "local"}}), ConfigError);
  CHECK_THROWS_AS(PipelineConfig::from_key_values({{"detector.loss", "mi"}}), ConfigError);
  CHECK_THROWS_AS(PipelineConfig::from_key_values({{"sona.lambda", "0.8"}}), ConfigError);
  CHECK_THROWS_AS(PipelineConfig::load("/nonexistent/dir/sona.cfg"), ConfigError);
}

TEST_CASE("config hash ignores the seed and tracks everything else") {
  PipelineConfig a, b;
  b.seed = 99;
  CHECK(a.hash() == b.hash());
  b.outliers.sona.scale = 5;
  CHECK(a.hash() != b.hash());
  PipelineConfig c;
  c.data.side = 24;
  CHECK(a.hash() != c.hash());
}

TEST_CASE("prompt policies") {
  for (auto p : {PromptPolicy::kRandom, PromptPolicy::kClose, PromptPolicy::kFar}) {
    CHECK(parse_prompt_policy(to_string(p)) == p);
  }
  CHECK_THROWS_AS(parse_prompt_policy("nearest"), ConfigError);
}

TEST_CASE("stages produce byte-identical archives on rerun") {
  const PipelineConfig cfg = tiny_config();
  auto run = [&] {
    const auto splits = data::generate_benchmark(cfg.data, cfg.counts, 1);
    auto den = make_denoiser(cfg, make_vocab(splits), 2);
    train_diffusion(*den, cfg, splits, 3);
    const auto sched = make_schedule(cfg);
    const auto set = generate_outlier_set(*den, sched, splits, cfg.outliers, 4);
    const auto det = train_detector_stage(cfg, splits, &set, 5);
    return std::vector<std::vector<std::uint8_t>>{
        data::encode_archive(data::benchmark_to_archive(splits)),
        data::encode_archive(denoiser_to_archive(*den, cfg)),
        data::encode_archive(outliers_to_archive(set, cfg.hash())),
        data::encode_archive(detector_to_archive(det, "full", cfg.hash())),
    };
  };
  const auto a = run(), b = run();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("outlier sets keep provenance through their archive") {
  const PipelineConfig cfg = tiny_config();
  const auto splits = data::generate_benchmark(cfg.data, cfg.counts, 1);
  auto den = make_denoiser(cfg, make_vocab(splits), 2);
  const auto set = generate_outlier_set(*den, make_schedule(cfg), splits, cfg.outliers, 7);
  REQUIRE(set.size() == 6);
  for (std::size_t i = 0; i < set.size(); ++i) {
    CHECK(set.source_indices[i] == static_cast<std::int32_t>(i));
    CHECK(std::find(splits.ood_prompt_labels.begin(), splits.ood_prompt_labels.end(), set.ood_labels[i]) !=
          splits.ood_prompt_labels.end());
    CHECK(set.tilde_ts[i] >= 1);
    CHECK(set.tilde_ts[i] <= cfg.diffusion.T);
  }
  const auto back = outliers_from_archive(outliers_to_archive(set, "h"));
  CHECK(back.images == set.images);
  CHECK(back.source_indices == set.source_indices);
  CHECK(back.ood_labels == set.ood_labels);
  CHECK(back.tilde_ts == set.tilde_ts);
  CHECK(back.seeds == set.seeds);
  CHECK(back.guidance == set.guidance);
}

TEST_CASE("checkpoints restore identical predictions") {
  const PipelineConfig cfg = tiny_config();
  const auto splits = data::generate_benchmark(cfg.data, cfg.counts, 1);
  auto den = make_denoiser(cfg, make_vocab(splits), 2);
  train_diffusion(*den, cfg, splits, 3);
  const auto restored = denoiser_from_archive(denoiser_to_archive(*den, cfg));
  const Tensor z = Rng(8).normal_tensor({2, 3, 16, 16});
  const std::vector<std::int32_t> steps{1, 5}, labels{0, 1};
  CHECK(restored->predict(z, steps, labels) == den->predict(z, steps, labels));

  PipelineConfig ce = cfg;
  ce.detector.tier = detector::LossTier::kCe;
  const auto det = train_detector_stage(ce, splits, nullptr, 5);
  const auto det2 = detector_from_archive(detector_to_archive(det, "ce", "h"));
  CHECK(det2.predict_logits(splits.id_test.images) == det.predict_logits(splits.id_test.images));
}
