#pragma once

#include <string>
#include <vector>

#include "sona/nn/param_block.hpp"

namespace sona::nn {

struct ParamGradError {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

struct GradCheckReport {
  std::vector<ParamGradError> params;
  double tolerance = 0.0;

  double max_rel_error() const;
  bool passed() const { return max_rel_error() <= tolerance; }
};

/// Central differences of `loss` with respect to every parameter element
/// (or an evenly strided subset of at most `max_per_param` elements).
std::vector<std::pair<std::string, std::vector<std::pair<std::size_t, double>>>> numeric_gradients(
    ParamBlock& block, const LossFn& loss, double step, std::size_t max_per_param);

/// Compares the gradients stored in `block` against numeric estimates.
/// Relative error is |a - n| / max(|a|, |n|, floor).
GradCheckReport compare_gradients(
    const ParamBlock& block,
    const std::vector<std::pair<std::string, std::vector<std::pair<std::size_t, double>>>>& numeric,
    double tolerance, double floor = 1e-7);

/// Analytic vs. finite-difference gradient comparison. The loss must be deterministic.
GradCheckReport gradient_check(ParamBlock& block, const LossFn& loss, double tolerance, double step = 1e-4,
                               std::size_t max_per_param = 64);

}  // namespace sona::nn
