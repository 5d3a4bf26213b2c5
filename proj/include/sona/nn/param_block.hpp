#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "sona/nn/graph.hpp"

namespace sona::nn {

/// Named, ordered collection of trainable tensors. Each parameter node owns its gradient slot.
class ParamBlock {
 public:
  /// Registers a new parameter. Names must be unique.
  Var add(const std::string& name, Tensor init);

  const Var& get(const std::string& name) const;
  bool contains(const std::string& name) const;

  std::size_t size() const noexcept { return params_.size(); }
  const std::vector<std::pair<std::string, Var>>& entries() const noexcept { return params_; }
  std::size_t parameter_count() const;

  /// Resets every gradient to zeros of the parameter's shape.
  void zero_grad();

  /// Overwrites parameter values; names and shapes must match exactly.
  void load_values(const std::vector<std::pair<std::string, Tensor>>& values);
  std::vector<std::pair<std::string, Tensor>> snapshot() const;

 private:
  std::vector<std::pair<std::string, Var>> params_;
};

using LossFn = std::function<Var()>;

/// Zeroes gradients, evaluates the loss, back-propagates, and returns the loss value.
/// A non-finite loss or gradient raises NumericError naming the offending op.
double forward_backward(ParamBlock& block, const LossFn& loss);

}  // namespace sona::nn
