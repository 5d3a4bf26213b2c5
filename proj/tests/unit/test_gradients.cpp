// Finite-difference checks of every differentiable block. Built against the 64-bit
// substrate so central differences at step 1e-4 resolve a 1e-3 relative tolerance.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "sona/nn/gradcheck.hpp"
#include "sona/nn/layers.hpp"

using namespace sona;
using namespace sona::nn;

namespace {

constexpr double kTol = 1e-3;

// Weighted sum with fixed random weights, so no output gradient is trivially uniform.
Var probe_loss(const Var& out, Rng& rng) {
  Tensor w = rng.normal_tensor(out->value.shape());
  return sum(mul(out, constant(std::move(w))));
}

// Inputs bounded away from zero so ReLU kinks are never straddled by the finite difference.
Tensor away_from_zero(Shape shape, Rng& rng) {
  Tensor t = rng.normal_tensor(shape);
  for (auto& v : t.data()) v = v >= 0 ? v + 0.05 : v - 0.05;
  return t;
}

void require_pass(const GradCheckReport& r) {
  for (const auto& p : r.params) {
    INFO(p.name << " max rel error " << p.max_rel_error);
    CHECK(p.max_rel_error < kTol);
  }
}

}  // namespace

TEST_CASE("real is 64-bit in this build") { static_assert(sizeof(real) == 8); }

TEST_CASE("three-layer perceptron on 8 random inputs") {
  Rng rng(1);
  ParamBlock block;
  Dense l1(block, "l1", 5, 16, rng), l2(block, "l2", 16, 12, rng), l3(block, "l3", 12, 3, rng);
  const Tensor x = rng.normal_tensor({8, 5});
  const std::vector<std::int32_t> y{0, 1, 2, 0, 1, 2, 0, 1};
  auto loss = [&] { return cross_entropy(l3(silu(l2(tanh(l1(constant(x)))))), y); };
  require_pass(gradient_check(block, loss, kTol));
}

TEST_CASE("dense") {
  Rng rng(2);
  ParamBlock block;
  Dense d(block, "d", 7, 4, rng);
  Var x = block.add("x", rng.normal_tensor({3, 7}));
  auto loss = [&] {
    Rng w(5);
    return probe_loss(d(x), w);
  };
  require_pass(gradient_check(block, loss, kTol));
}

TEST_CASE("conv2d, stride 1 and 2, with padding") {
  for (std::size_t stride : {1u, 2u}) {
    Rng rng(3 + stride);
    ParamBlock block;
    Conv2d c(block, "c", 3, 4, 3, stride, 1, rng);
    Var x = block.add("x", rng.normal_tensor({2, 3, 6, 6}));
    auto loss = [&] {
      Rng w(7);
      return probe_loss(c(x), w);
    };
    require_pass(gradient_check(block, loss, kTol, 1e-4, 48));
  }
}

TEST_CASE("group norm") {
  Rng rng(5);
  ParamBlock block;
  GroupNorm g(block, "g", 4, 2);
  block.get("g.gamma")->value = rng.normal_tensor({4});
  block.get("g.beta")->value = rng.normal_tensor({4});
  Var x = block.add("x", rng.normal_tensor({2, 4, 3, 3}));
  auto loss = [&] {
    Rng w(9);
    return probe_loss(g(x), w);
  };
  require_pass(gradient_check(block, loss, kTol));
}

TEST_CASE("nonlinearities") {
  Rng rng(6);
  ParamBlock block;
  Var a = block.add("a", away_from_zero({4, 5}, rng));
  Var b = block.add("b", rng.normal_tensor({4, 5}));
  Var c = block.add("c", rng.normal_tensor({4, 5}));
  auto loss = [&] {
    Rng w(11);
    return probe_loss(add(add(relu(a), silu(b)), tanh(c)), w);
  };
  require_pass(gradient_check(block, loss, kTol));
}

TEST_CASE("embedding lookup with repeated ids") {
  Rng rng(7);
  ParamBlock block;
  Embedding e(block, "e", 5, 3, rng);
  const std::vector<std::int32_t> ids{0, 3, 3, 4, 1, 0};
  auto loss = [&] {
    Rng w(13);
    return probe_loss(e(ids), w);
  };
  require_pass(gradient_check(block, loss, kTol));
}

TEST_CASE("shape and pooling ops") {
  Rng rng(8);
  ParamBlock block;
  Var x = block.add("x", rng.normal_tensor({2, 3, 4, 4}));
  Var bias = block.add("bias", rng.normal_tensor({2, 3}));
  Var y = block.add("y", rng.normal_tensor({2, 3, 4, 4}));
  auto loss = [&] {
    Rng w(17);
    Var up = upsample_nearest2x(add_channel_bias(x, bias));
    Var pooled = global_avg_pool(up);
    Var flat = reshape(y, {2, 48});
    Var joined = concat_rows(slice_rows(flat, 0, 1), slice_rows(flat, 1, 2));
    return add(add(probe_loss(pooled, w), probe_loss(joined, w)), mse(up, upsample_nearest2x(y)));
  };
  require_pass(gradient_check(block, loss, kTol));
}

TEST_CASE("row normalization") {
  Rng rng(13);
  ParamBlock block;
  Var x = block.add("x", rng.normal_tensor({4, 6}));
  auto loss = [&] {
    Rng w(23);
    return probe_loss(l2_normalize_rows(x), w);
  };
  require_pass(gradient_check(block, loss, kTol));
}

TEST_CASE("classification losses") {
  Rng rng(9);
  ParamBlock block;
  Var logits = block.add("logits", rng.normal_tensor({5, 4}));
  const std::vector<std::int32_t> y{3, 0, 1, 2, 2};
  auto loss = [&] {
    Rng w(19);
    return add(add(cross_entropy(logits, y), uniform_cross_entropy(logits)), probe_loss(log_softmax(logits), w));
  };
  require_pass(gradient_check(block, loss, kTol));
}

TEST_CASE("CLUB bound and Gaussian likelihood") {
  Rng rng(10);
  ParamBlock block;
  Var mu = block.add("mu", rng.normal_tensor({6, 3}));
  Var lv = block.add("logvar", rng.uniform_tensor({6, 3}, -0.8, 0.8));
  Var y = block.add("y", rng.normal_tensor({6, 3}));
  require_pass(gradient_check(block, [&] { return club_upper_bound(mu, lv, y); }, kTol));
  require_pass(gradient_check(block, [&] { return gaussian_nll(mu, lv, y); }, kTol));
}

TEST_CASE("parameter the loss ignores has zero analytic and numeric gradient") {
  Rng rng(11);
  ParamBlock block;
  Var used = block.add("used", rng.normal_tensor({3}));
  block.add("unused", rng.normal_tensor({3}));
  const auto report = gradient_check(block, [&] { return sum(mul(used, used)); }, kTol);
  REQUIRE(report.params.size() == 2);
  CHECK(report.params[1].max_rel_error == 0.0);
  CHECK(block.get("unused")->grad.empty() == false);
  for (real g : block.get("unused")->grad.data()) CHECK(g == 0.0);
  CHECK(report.passed());
}

TEST_CASE("corrupted gradient fails the check") {
  Rng rng(12);
  ParamBlock block;
  Dense d(block, "d", 4, 3, rng);
  const Tensor x = rng.normal_tensor({5, 4});
  auto loss = [&] { return mean(mul(d(constant(x)), d(constant(x)))); };
  forward_backward(block, loss);
  for (const auto& [name, p] : block.entries()) {
    for (auto& g : p->grad.data()) g *= 2;
  }
  const auto numeric = numeric_gradients(block, loss, 1e-4, 64);
  const auto report = compare_gradients(block, numeric, kTol);
  CHECK_FALSE(report.passed());
  CHECK(report.max_rel_error() == doctest::Approx(0.5).epsilon(1e-3));
}
