#pragma once

#include "sona/core/tensor.hpp"

namespace sona::guidance {

/// Number of selected elements, ceil(lambda * n). A 1e-9 slack keeps products such as
/// 0.1 * 30 from rounding up past the intended count.
std::size_t mask_count(std::size_t n, double lambda);

/// Binary mask with ones at the ceil(lambda * N) largest entries of `magnitudes`.
/// Ties are ordered by flat index (a later index ranks higher). lambda must lie in [0, 0.5].
Tensor top_fraction_mask(const Tensor& magnitudes, double lambda);

/// Binary mask with ones at the ceil(lambda * N) smallest entries under the same order, so
/// ties go to the lowest index and never collide with top_fraction_mask when 2k <= N.
Tensor bottom_fraction_mask(const Tensor& magnitudes, double lambda);

/// Region masks for one latent.
struct GuidanceMasks {
  Tensor semantic_id;   // largest |psi(c_id)|
  Tensor nuisance_id;   // smallest |psi(c_id)|
  Tensor semantic_ood;  // largest |psi(c_ood)|
};

/// Masks over all elements of one sample's psi tensors (channels and space jointly).
GuidanceMasks get_masks(const Tensor& psi_id, const Tensor& psi_ood, double lambda);

/// -m_s_id * psi_id: reverses the ID semantic direction on the semantic region.
Tensor delta_id(const Tensor& semantic_id, const Tensor& psi_id);

/// m_n_id * psi_id: keeps following the ID direction on the nuisance region.
Tensor delta_n(const Tensor& nuisance_id, const Tensor& psi_id);

/// m_s_ood * (1 - m_n_id) * psi_ood: OOD direction on its semantic region, minus ID nuisance.
Tensor delta_ood(const Tensor& semantic_ood, const Tensor& nuisance_id, const Tensor& psi_ood);

}  // namespace sona::guidance
