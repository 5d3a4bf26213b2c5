#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <vector>

#include "sona/core/error.hpp"
#include "sona/guidance/sona.hpp"

using namespace sona;
using namespace sona::guidance;
using diffusion::ConditionVocab;
using diffusion::MlpDenoiser;

namespace {

Tensor vec(std::vector<real> v) {
  const std::size_t n = v.size();
  return Tensor(Shape{n}, std::move(v));
}

std::vector<std::size_t> ones(const Tensor& m) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < m.numel(); ++i) {
    if (m[i] == 1) idx.push_back(i);
    else REQUIRE(m[i] == 0);
  }
  return idx;
}

MlpDenoiser toy_denoiser(std::uint64_t seed) {
  return MlpDenoiser({{2, 3, 3}, 32, 16}, ConditionVocab({"a", "b", "c"}), seed);
}

// Unconditional ancestral sampling from the same per-sample noising, written out directly.
Tensor unconditional_reference(const diffusion::NoisePredictor& d, const Tensor& images, int tilde_t,
                               const diffusion::NoiseSchedule& sched, std::vector<Rng> rngs) {
  const std::size_t b = images.dim(0);
  std::vector<Tensor> rows;
  for (std::size_t i = 0; i < b; ++i) {
    const Tensor x = images.slice_rows(i, i + 1);
    rows.push_back(diffusion::add_noise(x, tilde_t, rngs[i].normal_tensor(x.shape()), sched));
  }
  for (int t = tilde_t; t >= 1; --t) {
    const Tensor eps = diffusion::unconditional_noise(d, stack_rows(rows), t);
    for (std::size_t i = 0; i < b; ++i) {
      rows[i] = diffusion::ddpm_step(rows[i], t, eps.slice_rows(i, i + 1), sched, rngs[i]);
    }
  }
  Tensor z = stack_rows(rows);
  for (auto& v : z.data()) v = std::clamp(v, real(0), real(1));
  return z;
}

std::vector<Rng> rngs_from(std::uint64_t seed, std::size_t n) {
  std::vector<Rng> r;
  for (std::size_t i = 0; i < n; ++i) r.emplace_back(mix_seed(seed, i));
  return r;
}

}  // namespace

TEST_CASE("masks on a hand-computed vector") {
  const Tensor a = vec({3, 1, 4, 1, 5, 9, 2, 6, 5, 3});
  CHECK(mask_count(10, 0.2) == 2);
  CHECK(ones(top_fraction_mask(a, 0.2)) == std::vector<std::size_t>{5, 7});
  CHECK(ones(bottom_fraction_mask(a, 0.2)) == std::vector<std::size_t>{1, 3});
  // 0.3 * 10 selects 3: the tie between the two 5s goes to the later index for the top mask.
  CHECK(ones(top_fraction_mask(a, 0.3)) == std::vector<std::size_t>{5, 7, 8});
  CHECK(ones(bottom_fraction_mask(a, 0.3)) == std::vector<std::size_t>{1, 3, 6});
}

TEST_CASE("mask counts round up") {
  CHECK(mask_count(10, 0.0) == 0);
  CHECK(mask_count(10, 0.21) == 3);
  CHECK(mask_count(30, 0.1) == 3);
  CHECK(mask_count(7, 0.5) == 4);
  CHECK(mask_count(768, 0.2) == 154);
}

TEST_CASE("top and bottom masks stay disjoint on ties") {
  const Tensor flat(Shape{10}, real(2));
  const auto top = ones(top_fraction_mask(flat, 0.5)), bottom = ones(bottom_fraction_mask(flat, 0.5));
  CHECK(top == std::vector<std::size_t>{5, 6, 7, 8, 9});
  CHECK(bottom == std::vector<std::size_t>{0, 1, 2, 3, 4});
  const Tensor some_ties = vec({1, 1, 1, 2, 2, 2});
  const auto t2 = ones(top_fraction_mask(some_ties, 0.5)), b2 = ones(bottom_fraction_mask(some_ties, 0.5));
  for (auto i : t2) CHECK(std::find(b2.begin(), b2.end(), i) == b2.end());
}

TEST_CASE("mask cardinality and ordering over a lambda grid") {
  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 5 + static_cast<std::size_t>(rng.uniform_int(0, 60));
    Tensor v = rng.normal_tensor({n});
    // Quantize so ties are common.
    for (auto& x : v.data()) x = std::round(x * 2) / 2;
    for (double lambda : {0.0, 0.05, 0.1, 0.2, 0.33, 0.5}) {
      const std::size_t k = mask_count(n, lambda);
      const auto top = ones(top_fraction_mask(v, lambda)), bottom = ones(bottom_fraction_mask(v, lambda));
      CHECK(top.size() == k);
      CHECK(bottom.size() == k);
      if (2 * k <= n) {
        for (auto i : top) CHECK(std::find(bottom.begin(), bottom.end(), i) == bottom.end());
      }
      // Every selected top value is >= every unselected value, and the mirror for bottom.
      for (std::size_t j = 0; j < n; ++j) {
        if (std::find(top.begin(), top.end(), j) == top.end()) {
          for (auto i : top) CHECK(v[i] >= v[j]);
        }
        if (std::find(bottom.begin(), bottom.end(), j) == bottom.end()) {
          for (auto i : bottom) CHECK(v[i] <= v[j]);
        }
      }
    }
  }
}

TEST_CASE("mask arguments are validated") {
  const Tensor a = vec({1, 2, 3, 4});
  CHECK_THROWS_AS(top_fraction_mask(a, -0.1), ArgumentError);
  CHECK_THROWS_AS(top_fraction_mask(a, 0.6), ArgumentError);
  CHECK_THROWS_AS(get_masks(a, vec({1, 2, 3}), 0.2), ArgumentError);
}

TEST_CASE("guidance terms act on their own regions only") {
  Rng rng(2);
  const Tensor psi_id = rng.normal_tensor({2, 4, 4}), psi_ood = rng.normal_tensor({2, 4, 4});
  const auto m = get_masks(psi_id, psi_ood, 0.2);
  const Tensor did = delta_id(m.semantic_id, psi_id);
  const Tensor dn = delta_n(m.nuisance_id, psi_id);
  const Tensor dood = delta_ood(m.semantic_ood, m.nuisance_id, psi_ood);
  CHECK(ones(m.semantic_id).size() == 7);
  for (std::size_t i = 0; i < psi_id.numel(); ++i) {
    CHECK_FALSE((m.semantic_id[i] == 1 && m.nuisance_id[i] == 1));
    if (m.semantic_id[i] == 0) CHECK(did[i] == 0);
    else CHECK(did[i] == -psi_id[i]);
    if (m.nuisance_id[i] == 0) CHECK(dn[i] == 0);
    else CHECK(dn[i] == psi_id[i]);
    if (m.nuisance_id[i] == 1 || m.semantic_ood[i] == 0) CHECK(dood[i] == 0);
    else CHECK(dood[i] == psi_ood[i]);
  }
}

TEST_CASE("composition equals the sum of its parts") {
  const auto d = toy_denoiser(3);
  Rng rng(4);
  const Tensor z = rng.normal_tensor({3, 2, 3, 3});
  const std::int32_t c_id[] = {0, 1, 2}, c_ood[] = {1, 2, 0};
  const SonaConfig cfg{10.0, 0.2, TildeTPolicy::uniform()};
  const auto terms = sona_terms(d, z, 7, c_id, c_ood, cfg.lambda);
  const Tensor direct = sona_noise(d, z, 7, c_id, c_ood, cfg);
  CHECK(direct == compose_sona(terms, cfg.scale));

  // Recompute each term by hand from psi and per-sample masks.
  const Tensor p_id = diffusion::psi(d, z, 7, c_id), p_ood = diffusion::psi(d, z, 7, c_ood);
  const Tensor u = diffusion::unconditional_noise(d, z, 7);
  CHECK(terms.uncond == u);
  for (std::size_t b = 0; b < 3; ++b) {
    const Tensor pi = p_id.slice_rows(b, b + 1).reshaped({2, 3, 3});
    const Tensor po = p_ood.slice_rows(b, b + 1).reshaped({2, 3, 3});
    Tensor ai = pi, ao = po;
    for (auto& v : ai.data()) v = std::abs(v);
    for (auto& v : ao.data()) v = std::abs(v);
    const auto m = get_masks(ai, ao, 0.2);
    for (std::size_t i = 0; i < 18; ++i) {
      const std::size_t k = b * 18 + i;
      const double want = -m.semantic_id[i] * pi[i] + m.nuisance_id[i] * pi[i] +
                          m.semantic_ood[i] * (1 - m.nuisance_id[i]) * po[i];
      CHECK(terms.delta_id[k] + terms.delta_n[k] + terms.delta_ood[k] == doctest::Approx(want).epsilon(1e-6));
      CHECK(direct[k] == doctest::Approx(u[k] + 10.0 * want).epsilon(1e-5));
    }
  }
}

TEST_CASE("lambda = 0 and s = 0 reduce to unconditional sampling") {
  const auto d = toy_denoiser(5);
  const auto sched = diffusion::make_schedule(12, 1e-3, 0.1);
  Rng rng(6);
  const Tensor images = rng.uniform_tensor({4, 2, 3, 3}, 0, 1);
  const std::int32_t c_id[] = {0, 1, 2, 0}, c_ood[] = {2, 0, 1, 1};
  const Tensor ref = unconditional_reference(d, images, 9, sched, rngs_from(7, 4));
  for (auto [scale, lambda] : {std::pair{10.0, 0.0}, std::pair{0.0, 0.2}}) {
    CAPTURE(scale);
    auto rngs = rngs_from(7, 4);
    const SonaConfig cfg{scale, lambda, TildeTPolicy::fixed_at(9)};
    const auto out = generate_outliers(d, images, c_id, c_ood, sched, GuidanceMode::kSona, cfg, rngs);
    CHECK(out.images == ref);
    CHECK(out.tilde_ts == std::vector<std::int32_t>(4, 9));
  }
  auto rngs = rngs_from(7, 4);
  const SonaConfig global{0.0, 0.2, TildeTPolicy::fixed_at(9)};
  CHECK(generate_outliers(d, images, c_id, c_ood, sched, GuidanceMode::kGlobal, global, rngs).images == ref);
}

TEST_CASE("tilde-t = 0 returns the input unchanged") {
  const auto d = toy_denoiser(8);
  const auto sched = diffusion::make_schedule(10, 1e-3, 0.1);
  Rng rng(9);
  const Tensor x = rng.uniform_tensor({2, 3, 3}, 0, 1);
  const SonaConfig cfg{10.0, 0.2, TildeTPolicy::fixed_at(0)};
  Rng g(10);
  const auto [out, rec] = generate_outlier(x, 0, 1, d, cfg, sched, g);
  CHECK(out == x);
  CHECK(rec.tilde_t == 0);
  CHECK(rec.c_ood == 1);
}

TEST_CASE("outlier generation is deterministic per seed and varies across seeds") {
  const auto d = toy_denoiser(11);
  const auto sched = diffusion::make_schedule(10, 1e-3, 0.1);
  Rng rng(12);
  const Tensor x = rng.uniform_tensor({2, 3, 3}, 0, 1);
  const SonaConfig cfg;
  Rng a(100), b(100), c(101);
  const auto ra = generate_outlier(x, 0, 2, d, cfg, sched, a);
  const auto rb = generate_outlier(x, 0, 2, d, cfg, sched, b);
  const auto rc = generate_outlier(x, 0, 2, d, cfg, sched, c);
  CHECK(ra.first == rb.first);
  CHECK(ra.second.tilde_t == rb.second.tilde_t);
  CHECK_FALSE(ra.first == rc.first);
  for (real v : ra.first.data()) {
    CHECK(v >= 0);
    CHECK(v <= 1);
  }
}

TEST_CASE("mixed tilde-t values in one batch match single-sample runs") {
  const auto d = toy_denoiser(13);
  const auto sched = diffusion::make_schedule(10, 1e-3, 0.1);
  Rng rng(14);
  const Tensor images = rng.uniform_tensor({3, 2, 3, 3}, 0, 1);
  const std::int32_t c_id[] = {0, 1, 2}, c_ood[] = {1, 2, 0};
  const SonaConfig cfg;
  auto rngs = rngs_from(15, 3);
  const auto batch = generate_outliers(d, images, c_id, c_ood, sched, GuidanceMode::kSona, cfg, rngs);
  for (std::size_t i = 0; i < 3; ++i) {
    Rng g(mix_seed(15, i));
    const auto [one, rec] = generate_outlier(images.slice_rows(i, i + 1).reshaped({2, 3, 3}), c_id[i], c_ood[i],
                                             d, cfg, sched, g);
    CHECK(rec.tilde_t == batch.tilde_ts[i]);
    CHECK(max_abs_diff(one, batch.images.slice_rows(i, i + 1).reshaped({2, 3, 3})) < 1e-5);
  }
}

TEST_CASE("identical ID and OOD labels are rejected") {
  const auto d = toy_denoiser(16);
  const auto sched = diffusion::make_schedule(10, 1e-3, 0.1);
  const Tensor x(Shape{2, 3, 3}, real(0.5f));
  Rng g(1);
  CHECK_THROWS_AS(generate_outlier(x, 1, 1, d, SonaConfig{}, sched, g), ArgumentError);
  CHECK_THROWS_AS(generate_outlier(x, 1, 3, d, SonaConfig{}, sched, g), ArgumentError);
}

TEST_CASE("configuration validation") {
  CHECK_THROWS_AS((SonaConfig{-1.0, 0.2, TildeTPolicy::uniform()}.validate(50)), ConfigError);
  CHECK_THROWS_AS((SonaConfig{10.0, 0.7, TildeTPolicy::uniform()}.validate(50)), ConfigError);
  CHECK_THROWS_AS((SonaConfig{10.0, 0.2, TildeTPolicy::fixed_at(51)}.validate(50)), ConfigError);
  CHECK_NOTHROW((SonaConfig{10.0, 0.5, TildeTPolicy::fixed_at(50)}.validate(50)));
}

TEST_CASE("tilde-t policy text form") {
  CHECK(TildeTPolicy::parse("uniform").kind == TildeTPolicy::Kind::kUniform);
  const auto f = TildeTPolicy::parse("fixed:40");
  CHECK(f.kind == TildeTPolicy::Kind::kFixed);
  CHECK(f.fixed == 40);
  CHECK(f.to_string() == "fixed:40");
  CHECK_THROWS_AS(TildeTPolicy::parse("fixed:"), ConfigError);
  CHECK_THROWS_AS(TildeTPolicy::parse("sometimes"), ConfigError);
  Rng rng(3);
  for (int i = 0; i < 500; ++i) {
    const int t = TildeTPolicy::uniform().draw(50, rng);
    CHECK(t >= 1);
    CHECK(t <= 50);
  }
}

TEST_CASE("guidance mode names") {
  for (auto m : {GuidanceMode::kSona, GuidanceMode::kGlobal, GuidanceMode::kGlobalContrast}) {
    CHECK(parse_guidance_mode(to_string(m)) == m);
  }
  CHECK_THROWS_AS(parse_guidance_mode("local"), ConfigError);
}
