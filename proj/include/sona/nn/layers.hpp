#pragma once

#include <cstdint>
#include <span>
#include <string>

#include "sona/core/rng.hpp"
#include "sona/nn/ops.hpp"
#include "sona/nn/param_block.hpp"

namespace sona::nn {

// Layers register their parameters into a ParamBlock under `prefix.` and keep handles.

struct Dense {
  Dense() = default;
  Dense(ParamBlock& block, const std::string& prefix, std::size_t in, std::size_t out, Rng& rng);
  Var operator()(const Var& x) const { return linear(x, weight, bias); }

  Var weight, bias;
};

struct Conv2d {
  Conv2d() = default;
  Conv2d(ParamBlock& block, const std::string& prefix, std::size_t in, std::size_t out, std::size_t kernel,
         std::size_t stride, std::size_t padding, Rng& rng);
  Var operator()(const Var& x) const { return conv2d(x, weight, bias, stride, padding); }

  Var weight, bias;
  std::size_t stride = 1, padding = 0;
};

struct GroupNorm {
  GroupNorm() = default;
  GroupNorm(ParamBlock& block, const std::string& prefix, std::size_t channels, std::size_t groups);
  Var operator()(const Var& x) const { return group_norm(x, gamma, beta, groups); }

  Var gamma, beta;
  std::size_t groups = 1;
};

struct Embedding {
  Embedding() = default;
  Embedding(ParamBlock& block, const std::string& prefix, std::size_t vocab, std::size_t width, Rng& rng);
  Var operator()(std::span<const std::int32_t> ids) const { return embedding(table, ids); }

  Var table;
};

/// Fixed sinusoidal features of integer timesteps: [B, width], width even.
Tensor sinusoidal_embedding(std::span<const std::int32_t> steps, std::size_t width);

}  // namespace sona::nn
