#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sona/nn/param_block.hpp"

namespace sona::nn {

struct AdamHyper {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Moment accumulators for one ParamBlock, stored in the block's parameter order.
struct OptimizerState {
  AdamHyper hyper;
  std::int64_t step = 0;
  std::vector<Tensor> first_moment;
  std::vector<Tensor> second_moment;

  static OptimizerState for_block(const ParamBlock& block, AdamHyper hyper = {});
};

/// One bias-corrected Adam update from the gradients currently stored in `block`.
/// Throws ConfigError if the state does not match the block's parameter shapes.
void adam_step(ParamBlock& block, OptimizerState& state);

/// Cosine annealing from `base` to zero over `total` steps.
double cosine_lr(double base, std::int64_t step, std::int64_t total);

}  // namespace sona::nn
