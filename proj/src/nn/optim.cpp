#include "sona/nn/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "sona/core/error.hpp"

namespace sona::nn {

OptimizerState OptimizerState::for_block(const ParamBlock& block, AdamHyper hyper) {
  OptimizerState s;
  s.hyper = hyper;
  for (const auto& [_, p] : block.entries()) {
    s.first_moment.push_back(Tensor::zeros_like(p->value));
    s.second_moment.push_back(Tensor::zeros_like(p->value));
  }
  return s;
}

void adam_step(ParamBlock& block, OptimizerState& state) {
  const auto& params = block.entries();
  if (state.first_moment.size() != params.size() || state.second_moment.size() != params.size()) {
    throw ConfigError("optimizer state tracks " + std::to_string(state.first_moment.size()) +
                      " tensors, block has " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& p = params[i].second;
    if (!state.first_moment[i].same_shape(p->value) || !state.second_moment[i].same_shape(p->value)) {
      throw ConfigError("optimizer state shape mismatch for '" + params[i].first + "'");
    }
  }
  state.step += 1;
  const auto& h = state.hyper;
  const double c1 = 1.0 - std::pow(h.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(h.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = *params[i].second;
    if (p.grad.empty()) continue;
    auto w = p.value.data();
    const auto g = p.grad.data();
    auto m = state.first_moment[i].data();
    auto v = state.second_moment[i].data();
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = g[j];
      const double mj = h.beta1 * m[j] + (1.0 - h.beta1) * gj;
      const double vj = h.beta2 * v[j] + (1.0 - h.beta2) * gj * gj;
      m[j] = static_cast<real>(mj);
      v[j] = static_cast<real>(vj);
      w[j] = static_cast<real>(w[j] - h.lr * (mj / c1) / (std::sqrt(vj / c2) + h.eps));
    }
  }
}

double cosine_lr(double base, std::int64_t step, std::int64_t total) {
  if (total <= 0) return base;
  const double frac = std::min(1.0, static_cast<double>(step) / static_cast<double>(total));
  return 0.5 * base * (1.0 + std::cos(std::numbers::pi * frac));
}

}  // namespace sona::nn
