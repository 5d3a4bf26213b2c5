#include "sona/guidance/masks.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "sona/core/error.hpp"

namespace sona::guidance {

namespace {

void check_lambda(double lambda) {
  if (!(lambda >= 0.0 && lambda <= 0.5)) {
    throw ArgumentError("mask fraction must lie in [0, 0.5], got " + std::to_string(lambda));
  }
}

// Selects the k largest (top) or smallest elements under the total order (value, flat index).
// Using one order for both directions keeps top and bottom selections disjoint when 2k <= N.
Tensor select_mask(const Tensor& values, double lambda, bool top) {
  check_lambda(lambda);
  const std::size_t n = values.numel();
  const std::size_t k = mask_count(n, lambda);
  Tensor mask = Tensor::zeros_like(values);
  if (k == 0) return mask;
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  auto ascending = [&](std::size_t a, std::size_t b) {
    if (values[a] != values[b]) return values[a] < values[b];
    return a < b;
  };
  auto order = [&](std::size_t a, std::size_t b) { return top ? ascending(b, a) : ascending(a, b); };
  std::nth_element(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k - 1), idx.end(), order);
  for (std::size_t i = 0; i < k; ++i) mask[idx[i]] = real(1);
  return mask;
}

void check_shapes(const char* op, const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) {
    throw ArgumentError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

}  // namespace

std::size_t mask_count(std::size_t n, double lambda) {
  check_lambda(lambda);
  const double k = std::ceil(lambda * static_cast<double>(n) - 1e-9);
  return static_cast<std::size_t>(std::max(0.0, k));
}

Tensor top_fraction_mask(const Tensor& magnitudes, double lambda) {
  return select_mask(magnitudes, lambda, true);
}

Tensor bottom_fraction_mask(const Tensor& magnitudes, double lambda) {
  return select_mask(magnitudes, lambda, false);
}

GuidanceMasks get_masks(const Tensor& psi_id, const Tensor& psi_ood, double lambda) {
  check_shapes("get_masks", psi_id, psi_ood);
  const std::size_t n = psi_id.numel();
  if (2 * mask_count(n, lambda) > n) {
    throw ArgumentError("mask fraction " + std::to_string(lambda) + " selects overlapping regions for " +
                        std::to_string(n) + " elements");
  }
  Tensor abs_id = Tensor::zeros_like(psi_id);
  Tensor abs_ood = Tensor::zeros_like(psi_ood);
  for (std::size_t i = 0; i < n; ++i) {
    abs_id[i] = std::abs(psi_id[i]);
    abs_ood[i] = std::abs(psi_ood[i]);
  }
  return GuidanceMasks{top_fraction_mask(abs_id, lambda), bottom_fraction_mask(abs_id, lambda),
                       top_fraction_mask(abs_ood, lambda)};
}

Tensor delta_id(const Tensor& semantic_id, const Tensor& psi_id) {
  check_shapes("delta_id", semantic_id, psi_id);
  Tensor out = Tensor::zeros_like(psi_id);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = -semantic_id[i] * psi_id[i];
  return out;
}

Tensor delta_n(const Tensor& nuisance_id, const Tensor& psi_id) {
  check_shapes("delta_n", nuisance_id, psi_id);
  Tensor out = Tensor::zeros_like(psi_id);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = nuisance_id[i] * psi_id[i];
  return out;
}

Tensor delta_ood(const Tensor& semantic_ood, const Tensor& nuisance_id, const Tensor& psi_ood) {
  check_shapes("delta_ood", semantic_ood, psi_ood);
  check_shapes("delta_ood", nuisance_id, psi_ood);
  Tensor out = Tensor::zeros_like(psi_ood);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = semantic_ood[i] * (real(1) - nuisance_id[i]) * psi_ood[i];
  return out;
}

}  // namespace sona::guidance
