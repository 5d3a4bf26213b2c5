#include "sona/nn/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace sona::nn {

double GradCheckReport::max_rel_error() const {
  double m = 0.0;
  for (const auto& p : params) m = std::max(m, p.max_rel_error);
  return m;
}

std::vector<std::pair<std::string, std::vector<std::pair<std::size_t, double>>>> numeric_gradients(
    ParamBlock& block, const LossFn& loss, double step, std::size_t max_per_param) {
  NoGradGuard no_grad;
  std::vector<std::pair<std::string, std::vector<std::pair<std::size_t, double>>>> out;
  for (const auto& [name, p] : block.entries()) {
    const std::size_t n = p->value.numel();
    const std::size_t stride = std::max<std::size_t>(1, (n + max_per_param - 1) / max_per_param);
    std::vector<std::pair<std::size_t, double>> grads;
    for (std::size_t i = 0; i < n; i += stride) {
      const real saved = p->value[i];
      p->value[i] = static_cast<real>(saved + step);
      const double up = loss()->value[0];
      p->value[i] = static_cast<real>(saved - step);
      const double down = loss()->value[0];
      p->value[i] = saved;
      grads.emplace_back(i, (up - down) / (2.0 * step));
    }
    out.emplace_back(name, std::move(grads));
  }
  return out;
}

GradCheckReport compare_gradients(
    const ParamBlock& block,
    const std::vector<std::pair<std::string, std::vector<std::pair<std::size_t, double>>>>& numeric,
    double tolerance, double floor) {
  GradCheckReport report;
  report.tolerance = tolerance;
  for (const auto& [name, grads] : numeric) {
    const auto& p = block.get(name);
    ParamGradError e{name, 0.0, grads.size()};
    for (const auto& [i, num] : grads) {
      const double ana = p->grad.empty() ? 0.0 : static_cast<double>(p->grad[i]);
      const double denom = std::max({std::abs(ana), std::abs(num), floor});
      e.max_rel_error = std::max(e.max_rel_error, std::abs(ana - num) / denom);
    }
    report.params.push_back(std::move(e));
  }
  return report;
}

GradCheckReport gradient_check(ParamBlock& block, const LossFn& loss, double tolerance, double step,
                               std::size_t max_per_param) {
  forward_backward(block, loss);
  const auto numeric = numeric_gradients(block, loss, step, max_per_param);
  return compare_gradients(block, numeric, tolerance);
}

}  // namespace sona::nn
