#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "sona/core/error.hpp"
#include "sona/diffusion/cfg.hpp"

using namespace sona;
using namespace sona::diffusion;

namespace {

ConditionVocab two_classes() { return ConditionVocab({"neg", "pos"}); }

}  // namespace

TEST_CASE("schedule: alpha_bar is the running product of 1 - beta") {
  const auto s = make_schedule(50, 1e-4, 0.02);
  REQUIRE(s.T() == 50);
  CHECK(s.alpha_bar[0] == 1.0);
  long double prod = 1.0L;
  for (int t = 1; t <= 50; ++t) {
    CHECK(s.beta[t] > 0.0);
    CHECK(s.beta[t] < 1.0);
    CHECK(s.alpha[t] == 1.0 - s.beta[t]);
    prod *= 1.0L - static_cast<long double>(s.beta[t]);
    CHECK(std::abs(s.alpha_bar[t] - static_cast<double>(prod)) < 1e-12);
    CHECK(s.alpha_bar[t] < s.alpha_bar[t - 1]);
  }
  CHECK(s.beta[1] == doctest::Approx(1e-4));
  CHECK(s.beta[50] == doctest::Approx(0.02));
}

TEST_CASE("schedule: T = 1 uses beta_start") {
  const auto s = make_schedule(1, 0.1, 0.2);
  CHECK(s.beta[1] == doctest::Approx(0.1));
}

TEST_CASE("schedule: invalid parameters are configuration errors") {
  CHECK_THROWS_AS(make_schedule(0, 1e-4, 0.02), ConfigError);
  CHECK_THROWS_AS(make_schedule(10, 0.02, 1e-4), ConfigError);
  CHECK_THROWS_AS(make_schedule(10, 0.0, 0.02), ConfigError);
  CHECK_THROWS_AS(make_schedule(10, 1e-4, 1.0), ConfigError);
}

TEST_CASE("add_noise at t = 0 returns z0 exactly") {
  Rng rng(1);
  const auto s = make_schedule(50, 1e-4, 0.02);
  const Tensor z0 = rng.normal_tensor({2, 3, 4, 4});
  const Tensor eps = rng.normal_tensor({2, 3, 4, 4});
  CHECK(add_noise(z0, 0, eps, s) == z0);
  CHECK_THROWS_AS(add_noise(z0, 51, eps, s), ArgumentError);
  CHECK_THROWS_AS(add_noise(z0, -1, eps, s), ArgumentError);
}

TEST_CASE("T = 1 round trip with the true noise recovers z0") {
  Rng rng(2);
  const auto s = make_schedule(1, 0.3, 0.3);
  const Tensor z0 = rng.normal_tensor({64});
  const Tensor eps = rng.normal_tensor({64});
  const Tensor z1 = add_noise(z0, 1, eps, s);
  Rng step_rng(3);
  const Tensor back = ddpm_step(z1, 1, eps, s, step_rng);
  // z1 is stored in 32-bit, so recovery is exact up to one rounding of z1 scaled by 1/sqrt(alpha).
  CHECK(max_abs_diff(back, z0) < 4e-6);
  // No noise is drawn at t = 1.
  Rng untouched(3);
  CHECK(step_rng.uniform() == untouched.uniform());
}

TEST_CASE("forward marginal matches its mean and variance") {
  const auto s = make_schedule(50, 1e-4, 0.02);
  const int t = 30;
  const std::size_t n = 10000;
  const Tensor z0(Shape{n}, real(0.7f));
  Rng rng(4);
  const Tensor zt = add_noise(z0, t, rng.normal_tensor({n}), s);
  double mean = 0, var = 0;
  for (real v : zt.data()) mean += v;
  mean /= n;
  for (real v : zt.data()) var += (v - mean) * (v - mean);
  var /= (n - 1);
  const double ab = s.alpha_bar[t];
  const double want_mean = std::sqrt(ab) * 0.7, want_var = 1.0 - ab;
  CHECK(std::abs(mean - want_mean) < 5.0 * std::sqrt(want_var / n));
  CHECK(std::abs(var - want_var) < 5.0 * want_var * std::sqrt(2.0 / (n - 1)));
}

TEST_CASE("ddpm step uses the posterior mean and sqrt(beta) noise") {
  const auto s = make_schedule(10, 0.01, 0.1);
  const Tensor z(Shape{1}, real(0.5f)), eps(Shape{1}, real(0.2f)), noise(Shape{1}, real(-1.0f));
  const int t = 5;
  const double want = (0.5 - s.beta[t] / std::sqrt(1 - s.alpha_bar[t]) * 0.2) / std::sqrt(s.alpha[t]) +
                      std::sqrt(s.beta[t]) * -1.0;
  CHECK(ddpm_step(z, t, eps, noise, s)[0] == doctest::Approx(want).epsilon(1e-6));
}

TEST_CASE("denoiser output shape equals the latent shape") {
  ConvDenoiserConfig cfg;
  cfg.side = 8;
  ConvDenoiser d(cfg, two_classes(), 5);
  Rng rng(6);
  const Tensor z = rng.normal_tensor({3, 3, 8, 8});
  const std::int32_t steps[] = {1, 10, 50};
  const std::int32_t labels[] = {0, 1, d.vocab().null_id()};
  CHECK(d.predict(z, steps, labels).shape() == z.shape());
}

TEST_CASE("vocabulary reserves a distinct null token") {
  const auto v = two_classes();
  CHECK(v.null_id() == 2);
  CHECK(v.is_null(2));
  CHECK_FALSE(v.is_null(1));
  CHECK(v.id_of("pos") == 1);
  CHECK_THROWS(v.id_of("missing"));
}

TEST_CASE("cfg_noise at s = 0 and s = 1 reproduces the branches exactly") {
  MlpDenoiser d({{1, 2, 2}, 16, 8}, two_classes(), 7);
  Rng rng(8);
  const Tensor z = rng.normal_tensor({4, 1, 2, 2});
  const std::int32_t labels[] = {0, 1, 1, 0};
  const std::vector<std::int32_t> steps(4, 12), nulls(4, d.vocab().null_id());
  const Tensor uncond = d.predict(z, steps, nulls);
  const Tensor cond = d.predict(z, steps, labels);
  CHECK(cfg_noise(d, z, 12, labels, 0.0) == uncond);
  CHECK(cfg_noise(d, z, 12, labels, 1.0) == cond);
  const Tensor s10 = cfg_noise(d, z, 12, labels, 10.0);
  for (std::size_t i = 0; i < s10.numel(); ++i) {
    CHECK(s10[i] == doctest::Approx(uncond[i] + 10.0 * (cond[i] - uncond[i])).epsilon(1e-5));
  }
  CHECK_THROWS_AS(cfg_noise(d, z, 12, labels, -1.0), ArgumentError);
  const std::int32_t null_labels[] = {2, 2, 2, 2};
  CHECK_THROWS_AS(psi(d, z, 12, null_labels), ArgumentError);
}

TEST_CASE("psi is the conditional minus unconditional prediction") {
  MlpDenoiser d({{1, 1, 3}, 16, 8}, two_classes(), 9);
  Rng rng(10);
  const Tensor z = rng.normal_tensor({2, 1, 1, 3});
  const std::int32_t labels[] = {1, 0};
  const std::vector<std::int32_t> steps(2, 4), nulls(2, 2);
  const Tensor u = d.predict(z, steps, nulls), c = d.predict(z, steps, labels);
  const Tensor p = psi(d, z, 4, labels);
  for (std::size_t i = 0; i < p.numel(); ++i) CHECK(p[i] == c[i] - u[i]);
}

TEST_CASE("sampling from a start at step 0 returns the latent unchanged") {
  MlpDenoiser d({{1, 1, 2}, 8, 8}, two_classes(), 11);
  const auto s = make_schedule(10, 1e-3, 0.05);
  Rng rng(12);
  const Tensor z = rng.normal_tensor({2, 1, 1, 2});
  const std::int32_t labels[] = {0, 1};
  CHECK(sample(d, labels, 3.0, s, rng, SampleStart{z, 0}) == z);
  CHECK_THROWS_AS(sample(d, labels, 3.0, s, rng, SampleStart{z, 11}), ArgumentError);
}

TEST_CASE("cfg training learns a two-class one-pixel distribution") {
  // Class "neg" sits at -1, class "pos" at +1. After training, guided samples land on their class.
  MlpDenoiser d({{1, 1, 1}, 64, 32}, two_classes(), 13);
  const auto s = make_schedule(20, 1e-3, 0.2);
  nn::OptimizerState opt = nn::OptimizerState::for_block(*d.params(), {3e-3});
  Rng rng(14);
  std::vector<std::int32_t> labels(64);
  Tensor z0(Shape{64, 1, 1, 1});
  for (std::size_t i = 0; i < 64; ++i) {
    labels[i] = static_cast<std::int32_t>(i % 2);
    z0[i] = labels[i] ? real(1) : real(-1);
  }
  double first = 0, last = 0;
  for (int step = 0; step < 1500; ++step) {
    const double l = cfg_train_step(d, opt, z0, labels, 0.2, s, rng);
    if (step < 50) first += l / 50;
    if (step >= 1450) last += l / 50;
  }
  CHECK(last < first);
  std::vector<std::int32_t> pos(200, 1), neg(200, 0);
  Rng srng(15);
  const Tensor a = sample(d, pos, 2.0, s, srng);
  const Tensor b = sample(d, neg, 2.0, s, srng);
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < 200; ++i) {
    ma += a[i] / 200.0;
    mb += b[i] / 200.0;
  }
  CHECK(ma > 0.7);
  CHECK(mb < -0.7);
}

TEST_CASE("cfg loss rejects labels outside the vocabulary") {
  MlpDenoiser d({{1, 1, 1}, 8, 8}, two_classes(), 16);
  const auto s = make_schedule(5, 1e-3, 0.1);
  Rng rng(17);
  const Tensor z0(Shape{2, 1, 1, 1});
  const std::int32_t bad[] = {0, 7};
  CHECK_THROWS_AS(cfg_loss(d, z0, bad, 0.1, s, rng), ArgumentError);
}
