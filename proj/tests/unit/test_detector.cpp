#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "sona/core/error.hpp"
#include "sona/detector/detector.hpp"
#include "sona/nn/optim.hpp"

using namespace sona;
using namespace sona::detector;
using nn::Var;

namespace {

DetectorConfig tiny() {
  DetectorConfig c;
  c.side = 8;
  c.width = 4;
  c.feature_dim = 16;
  c.classes = 3;
  c.club_hidden = 16;
  return c;
}

struct ToyData {
  Tensor images, outliers;
  std::vector<std::int32_t> labels, sources;
};

ToyData toy_data(std::size_t n) {
  Rng rng(21);
  ToyData d;
  d.images = rng.uniform_tensor({n, 3, 8, 8}, 0, 1);
  d.outliers = rng.uniform_tensor({n / 2, 3, 8, 8}, 0, 1);
  for (std::size_t i = 0; i < n; ++i) d.labels.push_back(static_cast<std::int32_t>(i % 3));
  for (std::size_t j = 0; j < n / 2; ++j) d.sources.push_back(static_cast<std::int32_t>(2 * j));
  return d;
}

std::vector<std::pair<std::string, Tensor>> trained(const TrainConfig& cfg, const ToyData& d, bool with_outliers) {
  DetectorModel m(tiny(), 5);
  PairedOutliers po;
  if (with_outliers) po = {&d.outliers, d.sources};
  train_detector(m, d.images, d.labels, po, cfg);
  auto snap = m.body().snapshot();
  for (auto& e : m.club().snapshot()) snap.push_back(std::move(e));
  return snap;
}

Var row(std::vector<real> v) {
  const std::size_t c = v.size();
  return nn::constant(Tensor(Shape{1, c}, std::move(v)));
}

}  // namespace

TEST_CASE("cross entropy and outlier exposure values") {
  const std::int32_t y[] = {0};
  CHECK(loss_ce(row({0, 0, 0, 0}), y)->value.item() == doctest::Approx(std::log(4.0)));
  // Uniform cross-entropy of [2, 0]: mean of softplus(-2) and softplus(2).
  CHECK(loss_oe(row({2, 0}))->value.item() == doctest::Approx(1.12693).epsilon(1e-5));
  CHECK(loss_oe(row({0, 0, 0}))->value.item() == doctest::Approx(std::log(3.0)));
  CHECK(loss_oe(row({5, -1, 2}), OeForm::kNegativeMeanSoftmax)->value.item() == doctest::Approx(-1.0 / 3));
}

TEST_CASE("energy score values and shift identity") {
  const Tensor l(Shape{2, 3}, std::vector<real>{1, 2, 3, -4, 0.5f, 0.25f});
  const auto e = energy_from_logits(l);
  CHECK(e[0] == doctest::Approx(-3.40761).epsilon(1e-5));
  CHECK(e[0] == doctest::Approx(-std::log(std::exp(1.0) + std::exp(2.0) + std::exp(3.0))).epsilon(1e-12));
  Tensor shifted = l;
  for (auto& v : shifted.data()) v += 8;
  const auto es = energy_from_logits(shifted);
  for (std::size_t i = 0; i < 2; ++i) CHECK(std::abs(es[i] - (e[i] - 8)) < 1e-12);
  // Large logits stay finite.
  const auto big = energy_from_logits(Tensor(Shape{1, 2}, std::vector<real>{1000, 1000}));
  CHECK(big[0] == doctest::Approx(-1000 - std::log(2.0)));
}

TEST_CASE("CLUB of a single pair is zero") {
  Rng rng(1);
  const Var mu = nn::constant(rng.normal_tensor({1, 5}));
  const Var lv = nn::constant(rng.uniform_tensor({1, 5}, -1, 1));
  const Var y = nn::constant(rng.normal_tensor({1, 5}));
  CHECK(nn::club_upper_bound(mu, lv, y)->value.item() == 0);
}

TEST_CASE("CLUB through the detector's q tracks analytic Gaussian MI") {
  // y = rho x + sqrt(1 - rho^2) n per dimension; I(x; y) = -d/2 log(1 - rho^2).
  const std::size_t n = 2000, d = 2;
  const double rho = 0.9;
  Rng rng(2);
  Tensor x = rng.normal_tensor({n, d}), y(Shape{n, d}), indep = rng.normal_tensor({n, d});
  const Tensor noise = rng.normal_tensor({n, d});
  for (std::size_t i = 0; i < n * d; ++i) y[i] = static_cast<real>(rho * x[i] + std::sqrt(1 - rho * rho) * noise[i]);

  auto fit = [&](const Tensor& target) {
    DetectorConfig c = tiny();
    c.feature_dim = d;
    c.club_hidden = 32;
    auto m = std::make_unique<DetectorModel>(c, 3);
    auto opt = nn::OptimizerState::for_block(m->club(), {5e-3});
    for (int step = 0; step < 400; ++step) {
      nn::forward_backward(m->club(), [&] {
        auto [mu, lv] = m->club_head(nn::constant(x));
        return nn::gaussian_nll(mu, lv, nn::constant(target));
      });
      nn::adam_step(m->club(), opt);
    }
    nn::NoGradGuard g;
    auto [mu, lv] = m->club_head(nn::constant(x));
    return nn::club_upper_bound(mu, lv, nn::constant(target))->value.item();
  };
  const double mi = -0.5 * static_cast<double>(d) * std::log(1 - rho * rho);
  CHECK(fit(y) >= mi - 0.05);
  CHECK(std::abs(fit(indep)) <= 0.05 * static_cast<double>(d));
}

TEST_CASE("mi_space rows have length sqrt(d)") {
  Rng rng(4);
  const Tensor f = rng.uniform_tensor({3, 16}, 0, 5);
  const Tensor z = mi_space(nn::constant(f))->value;
  for (std::size_t r = 0; r < 3; ++r) {
    double ss = 0;
    for (std::size_t k = 0; k < 16; ++k) ss += static_cast<double>(z[r * 16 + k]) * z[r * 16 + k];
    CHECK(ss == doctest::Approx(16.0).epsilon(1e-5));
  }
}

TEST_CASE("with beta = gamma = 0 training ignores outliers entirely") {
  const ToyData d = toy_data(24);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 8;
  cfg.seed = 9;
  cfg.tier = LossTier::kCe;
  const auto plain = trained(cfg, d, false);
  CHECK(trained(cfg, d, true) == plain);
  cfg.tier = LossTier::kFull;
  cfg.beta = 0;
  cfg.gamma_mi = 0;
  CHECK(trained(cfg, d, true) == plain);
  cfg.beta = 0.5;
  CHECK_FALSE(trained(cfg, d, true) == plain);
}

TEST_CASE("training is bit-reproducible for a fixed seed") {
  const ToyData d = toy_data(24);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 8;
  cfg.seed = 10;
  CHECK(trained(cfg, d, true) == trained(cfg, d, true));
}

TEST_CASE("training reduces cross entropy on a separable toy task") {
  Rng rng(6);
  const std::size_t n = 60;
  Tensor images(Shape{n, 3, 8, 8});
  std::vector<std::int32_t> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    labels[i] = static_cast<std::int32_t>(i % 3);
    for (std::size_t p = 0; p < 64; ++p) {
      images[i * 192 + static_cast<std::size_t>(labels[i]) * 64 + p] = static_cast<real>(0.8 + 0.1 * rng.uniform());
    }
  }
  DetectorModel m(tiny(), 7);
  TrainConfig cfg;
  cfg.tier = LossTier::kCe;
  cfg.epochs = 15;
  cfg.batch_size = 12;
  cfg.lr = 3e-3;
  const auto curves = train_detector(m, images, labels, {}, cfg);
  CHECK(curves.back().ce < curves.front().ce);
  CHECK(accuracy(m.predict_logits(images), labels) == 1.0);
}

TEST_CASE("outliers without provenance are rejected") {
  const ToyData d = toy_data(12);
  DetectorModel m(tiny(), 1);
  TrainConfig cfg;
  cfg.epochs = 1;
  const std::vector<std::int32_t> short_sources{0, 1};
  CHECK_THROWS_AS(train_detector(m, d.images, d.labels, {&d.outliers, short_sources}, cfg), ConfigError);
  const std::vector<std::int32_t> bad_sources(6, 40);
  CHECK_THROWS_AS(train_detector(m, d.images, d.labels, {&d.outliers, bad_sources}, cfg), ConfigError);
  CHECK_THROWS_AS(train_detector(m, d.images, d.labels, {}, cfg), ConfigError);
}

TEST_CASE("loss tier names and validation") {
  for (auto t : {LossTier::kCe, LossTier::kCeOe, LossTier::kFull}) CHECK(parse_loss_tier(to_string(t)) == t);
  CHECK_THROWS_AS(parse_loss_tier("oe"), ConfigError);
  TrainConfig cfg;
  cfg.beta = -1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  TrainConfig tiers;
  tiers.tier = LossTier::kCeOe;
  CHECK(tiers.effective_gamma() == 0);
  CHECK(tiers.effective_beta() == tiers.beta);
  CHECK_THROWS_AS(DetectorModel(DetectorConfig{3, 10, 4, 8, 3, 8}, 1), ConfigError);
}

TEST_CASE("accuracy counts argmax hits") {
  const Tensor l(Shape{3, 2}, std::vector<real>{1, 0, 0, 1, 2, 3});
  const std::int32_t y[] = {0, 0, 1};
  CHECK(accuracy(l, y) == doctest::Approx(2.0 / 3));
}
