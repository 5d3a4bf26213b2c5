#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "sona/core/tensor.hpp"

namespace sona::nn {

/// One value in a reverse-mode computation graph.
///
/// Leaves are either constants or parameters (requires_grad). Interior nodes keep
/// their parents alive and carry a closure that pushes `grad` into the parents.
struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  /// Gradient buffer, allocated as zeros on first use.
  Tensor& grad_buffer();
};

using Var = std::shared_ptr<Node>;

Var constant(Tensor value);
Var parameter(Tensor value);
/// Same value, cut from the graph.
Var detach(const Var& v);

/// Propagates d(root)/d(node) into every reachable node with requires_grad.
/// Root must be a single-element tensor; its seed gradient is 1.
void backward(const Var& root);

bool grad_enabled() noexcept;

/// Disables graph construction in its scope (sampling, scoring).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

namespace detail {
/// Wraps a freshly computed value into a node. Throws NumericError if the value is not finite.
Var make_node(const char* op, Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward_fn);
}  // namespace detail

}  // namespace sona::nn
