#include "sona/nn/graph.hpp"

#include <malloc.h>

#include <unordered_set>

#include "sona/core/error.hpp"

namespace sona::nn {

namespace {
thread_local bool g_grad_enabled = true;

// Large activation buffers are allocated and freed every step. Keeping them on the heap
// instead of fresh mmaps avoids re-faulting pages on each allocation.
const bool g_malloc_tuned = [] {
  mallopt(M_MMAP_THRESHOLD, 512 * 1024 * 1024);
  mallopt(M_TRIM_THRESHOLD, 1024 * 1024 * 1024);
  return true;
}();
}

Tensor& Node::grad_buffer() {
  if (grad.empty()) grad = Tensor::zeros_like(value);
  return grad;
}

Var constant(Tensor value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->op = "constant";
  return n;
}

Var parameter(Tensor value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = true;
  n->op = "parameter";
  return n;
}

Var detach(const Var& v) { return constant(v->value); }

bool grad_enabled() noexcept { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

namespace detail {

Var make_node(const char* op, Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward_fn) {
  if (!value.all_finite()) {
    throw NumericError(op, "output of shape " + shape_str(value.shape()));
  }
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->op = op;
  bool needs = false;
  if (g_grad_enabled) {
    for (const auto& p : parents) needs = needs || p->requires_grad;
  }
  if (needs) {
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->backward_fn = std::move(backward_fn);
  }
  return n;
}

}  // namespace detail

void backward(const Var& root) {
  if (root->value.numel() != 1) {
    throw ArgumentError("backward root must be scalar, got " + shape_str(root->value.shape()));
  }
  if (!root->requires_grad) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.get(), 0}};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->grad_buffer()[0] += real(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && !n->grad.empty()) {
      n->backward_fn(*n);
      if (!n->grad.all_finite()) throw NumericError(n->op, "gradient");
    }
  }
  // Interior gradients are no longer needed; parameters keep theirs.
  for (Node* n : order) {
    if (n->backward_fn) n->grad = Tensor();
  }
}

}  // namespace sona::nn
