#include "sona/nn/param_block.hpp"

#include <algorithm>

#include "sona/core/error.hpp"

namespace sona::nn {

Var ParamBlock::add(const std::string& name, Tensor init) {
  if (contains(name)) throw ConfigError("duplicate parameter name '" + name + "'");
  auto p = parameter(std::move(init));
  p->grad_buffer();
  params_.emplace_back(name, p);
  return p;
}

const Var& ParamBlock::get(const std::string& name) const {
  for (const auto& [n, v] : params_) {
    if (n == name) return v;
  }
  throw ArgumentError("no parameter named '" + name + "'");
}

bool ParamBlock::contains(const std::string& name) const {
  return std::any_of(params_.begin(), params_.end(), [&](const auto& e) { return e.first == name; });
}

std::size_t ParamBlock::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [_, v] : params_) n += v->value.numel();
  return n;
}

void ParamBlock::zero_grad() {
  for (auto& [_, v] : params_) {
    if (v->grad.empty()) {
      v->grad = Tensor::zeros_like(v->value);
    } else {
      v->grad.fill(real(0));
    }
  }
}

void ParamBlock::load_values(const std::vector<std::pair<std::string, Tensor>>& values) {
  if (values.size() != params_.size()) {
    throw FormatError("checkpoint has " + std::to_string(values.size()) + " parameters, model expects " +
                      std::to_string(params_.size()));
  }
  for (const auto& [name, t] : values) {
    const auto& p = get(name);
    if (!p->value.same_shape(t)) {
      throw FormatError("parameter '" + name + "' has shape " + shape_str(t.shape()) + ", model expects " +
                        shape_str(p->value.shape()));
    }
  }
  for (const auto& [name, t] : values) get(name)->value = t;
}

std::vector<std::pair<std::string, Tensor>> ParamBlock::snapshot() const {
  std::vector<std::pair<std::string, Tensor>> out;
  out.reserve(params_.size());
  for (const auto& [n, v] : params_) out.emplace_back(n, v->value);
  return out;
}

double forward_backward(ParamBlock& block, const LossFn& loss) {
  block.zero_grad();
  Var l = loss();
  if (l->value.numel() != 1) throw ArgumentError("loss must be scalar, got " + shape_str(l->value.shape()));
  backward(l);
  return static_cast<double>(l->value[0]);
}

}  // namespace sona::nn
