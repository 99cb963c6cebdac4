// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "dpf/tensor.hpp"

namespace dpf {

// Reverse-mode autodiff over Tensor. Forward calls build a dynamic graph of
// Nodes; backward() runs the tape in reverse topological order. Everything
// is double precision so analytic gradients can be validated against central
// finite differences at tight tolerances.

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
  Tensor value;
  Tensor grad;  // allocated lazily, same shape as value
  bool requires_grad = false;
  std::vector<NodePtr> inputs;
  // Pulls this node's grad into its inputs. Captures raw input pointers;
  // the `inputs` vector keeps them alive.
  std::function<void(Node&)> backward_fn;

  Tensor& ensure_grad() {
    if (!grad.defined()) grad = Tensor(value.shape());
    return grad;
  }
};

class Var {
 public:
  Var() = default;
  explicit Var(Tensor v, bool requires_grad = false);
  explicit Var(NodePtr n) : node(std::move(n)) {}

  bool defined() const { return node != nullptr; }
  Tensor& value() { return node->value; }
  const Tensor& value() const { return node->value; }
  Tensor& grad() { return node->ensure_grad(); }
  const Tensor& grad() const { return node->grad; }
  bool has_grad() const { return node && node->grad.defined(); }
  bool requires_grad() const { return node && node->requires_grad; }
  void zero_grad() {
    if (node && node->grad.defined()) node->grad.fill(0.0);
  }

  const std::vector<int64_t>& shape() const { return node->value.shape(); }

  NodePtr node;
};

// Global (thread-local) autograd switch. When disabled, ops produce detached
// leaf nodes: no inputs retained, no backward closures.
bool grad_enabled();

struct NoGradGuard {
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// Backpropagate from a scalar root (numel == 1). Accumulates into .grad of
// every reachable node with requires_grad. Graph stays valid afterwards, so
// intermediate activations can be inspected (Grad-CAM relies on this).
void backward(const Var& root);

namespace ops {

Var constant(Tensor v);  // detached leaf

Var add(const Var& a, const Var& b);  // same shape
Var sub(const Var& a, const Var& b);
// Element-wise product with broadcasting: same rank, each dim equal or 1.
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double k);
Var relu(const Var& x);
Var sigmoid(const Var& x);
Var softplus(const Var& x);
Var abs(const Var& x);
Var exp(const Var& x);
// log(max(x, eps)); gradient is 1/x where x > eps, 0 elsewhere.
Var log_floor(const Var& x, double eps);
Var mean_all(const Var& x);  // -> shape {1}
Var reshape(const Var& x, std::vector<int64_t> shape);
Var concat(const Var& a, const Var& b, int64_t axis);

// (N,C,H,W) -> (N,C,1,1) spatial mean
Var gap2d(const Var& x);
// (N,C,H,W) -> (N,1,H,W) channel mean
Var channel_mean(const Var& x);

// x: (N,Cin,H,W), w: (Cout,Cin,k,k), b: (Cout) or null. pad < 0 means k/2.
Var conv2d(const Var& x, const Var& w, const Var* b, int64_t stride, int64_t pad = -1);
// Non-overlapping transposed conv: kernel == stride == factor.
// x: (N,Cin,H,W), w: (Cin,Cout,f,f), b: (Cout) or null -> (N,Cout,H*f,W*f)
Var conv_transpose2d(const Var& x, const Var& w, const Var* b, int64_t factor);
Var maxpool2d(const Var& x, int64_t k, int64_t stride, int64_t pad);
// x: (N,Cin), w: (Cout,Cin), b: (Cout) or null
Var linear(const Var& x, const Var& w, const Var* b);

// Batch norm over (N,H,W) per channel. In training mode uses batch stats and
// updates the running buffers in place; in eval mode applies the running
// affine transform. gamma/beta shape (C).
Var batchnorm2d(const Var& x, const Var& gamma, const Var& beta, Tensor& running_mean,
                Tensor& running_var, bool training, double momentum, double eps);

}  // namespace ops

}  // namespace dpf
