#pragma once

#include <functional>
#include <memory>

#include "ksc/tensor.hpp"

namespace ksc {

// Dynamic-graph reverse-mode autodiff over the op set the surrogate and the
// agent need. Parameters are long-lived leaf nodes reused across graphs;
// their gradients accumulate until the optimizer consumes and clears them.
class Node {
 public:
  Tensor value;
  Tensor grad;  // allocated on first touch, same shape as value
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void()> backprop;

  Node(Tensor v, bool rg) : value(std::move(v)), requires_grad(rg) {}

  void ensure_grad() {
    if (grad.data.empty()) grad = Tensor(value.shape);
  }
  void zero_grad() {
    for (double& g : grad.data) g = 0.0;
  }
};

using Var = std::shared_ptr<Node>;

Var leaf(Tensor t, bool requires_grad = true);
Var constant(Tensor t);
// Leaf copy carrying no gradient path (teacher forcing, target networks).
Var detach(const Var& x);

// elementwise
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var silu(const Var& a);
Var tanh_op(const Var& a);
Var sigmoid_op(const Var& a);
Var exp_op(const Var& a);
Var log_op(const Var& a);
Var square(const Var& a);
Var clamp_op(const Var& a, double lo, double hi);
Var min_op(const Var& a, const Var& b);

// shape manipulation
Var reshape(const Var& a, Shape s);
Var concat_channels(const Var& a, const Var& b);   // (B,C1,W) + (B,C2,W)
Var slice_channels(const Var& a, int c0, int c1);  // -> (B,c1-c0,W)
Var concat_features(const Var& a, const Var& b);   // (B,F1) + (B,F2)

// reductions
Var sum_all(const Var& a);
Var mean_all(const Var& a);
Var sum_rows(const Var& a);  // (B,F) -> (B,1)
Var mse(const Var& a, const Var& b);

// parameterized ops (bias may be null)
Var dense(const Var& x, const Var& w, const Var& bias);
Var conv1d(const Var& x, const Var& w, const Var& bias, int stride);
Var deconv1d(const Var& x, const Var& w, const Var& bias, int factor);
// normalization over the channel axis at each spatial position
Var layer_norm_channels(const Var& x, const Var& gain, const Var& shift);
// w = g * v / ||v|| per output filter (dim 0 of v)
Var weight_norm(const Var& v, const Var& g);

// Populates grads of every reachable node that requires them. `loss` must be
// scalar. Gradients accumulate across calls until cleared.
void backward(const Var& loss);

}  // namespace ksc
