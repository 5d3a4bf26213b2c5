#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "sona/nn/graph.hpp"

namespace sona::nn {

// Elementwise. Operands must share a shape.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, real k);

// Nonlinearities.
Var relu(const Var& x);
Var silu(const Var& x);
Var tanh(const Var& x);

// Shape plumbing.
Var reshape(const Var& x, Shape shape);
Var slice_rows(const Var& x, std::size_t begin, std::size_t end);
Var concat_rows(const Var& a, const Var& b);

// Reductions to a one-element tensor, accumulated in 64 bits.
Var sum(const Var& x);
Var mean(const Var& x);

/// x: [B, in], weight: [out, in], bias: [out] -> [B, out].
Var linear(const Var& x, const Var& weight, const Var& bias);

/// x: [B, C, H, W], weight: [O, C, k, k], bias: [O]. Zero padding.
Var conv2d(const Var& x, const Var& weight, const Var& bias, std::size_t stride, std::size_t padding);

/// Per-sample normalization over channel groups, then per-channel affine.
Var group_norm(const Var& x, const Var& gamma, const Var& beta, std::size_t groups, real eps = real(1e-5));

/// Row lookup: table [V, D], ids of length B -> [B, D].
Var embedding(const Var& table, std::span<const std::int32_t> ids);

/// x: [B, C, H, W] plus bias [B, C] (or [C]) broadcast over space.
Var add_channel_bias(const Var& x, const Var& bias);

Var upsample_nearest2x(const Var& x);
/// [B, C, H, W] -> [B, C].
Var global_avg_pool(const Var& x);

/// Row-wise log-softmax of [B, C].
Var log_softmax(const Var& logits);

/// Each row of [B, d] divided by sqrt(||row||^2 + eps).
Var l2_normalize_rows(const Var& x, real eps = real(1e-6));

/// Mean squared error over all elements.
Var mse(const Var& a, const Var& b);

/// Mean over the batch of -log softmax(logits)[y].
Var cross_entropy(const Var& logits, std::span<const std::int32_t> labels);

/// Mean over the batch of -(1/C) * sum_c log softmax_c: cross-entropy to the uniform distribution.
Var uniform_cross_entropy(const Var& logits);

/// Mean over the batch of -(1/C) * sum_c softmax_c. Constant -1/C with zero gradient; kept
/// only to compare against the log form.
Var negative_mean_softmax(const Var& logits);

/// Contrastive log-ratio upper bound on I(x; y) with a diagonal Gaussian q(y | x).
/// mu, logvar: [N, d] (functions of x), y: [N, d], rows paired. Uses all N^2 cross pairs
/// for the negative term, so the log-variance normalizers cancel exactly.
Var club_upper_bound(const Var& mu, const Var& logvar, const Var& y);

/// Mean over rows of the Gaussian negative log-likelihood -log q(y_i | x_i).
Var gaussian_nll(const Var& mu, const Var& logvar, const Var& y);

}  // namespace sona::nn
