// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <string_view>
#include <vector>

#include "kurtq/tensor.hpp"

namespace kurtq::ad {

/// Handle to a node on a tape.
struct Var {
  std::size_t id = 0;
};

/// Reverse-mode tape. Nodes are appended in evaluation order, so inputs always
/// precede their consumers and backward() is a single reverse sweep.
/// A tape is single-owner state; build one per training step.
template <typename T>
class BasicTape {
 public:
  using TensorT = BasicTensor<T>;
  /// Receives the gradient of the node's output and pushes gradients to inputs
  /// through accumulate().
  using BackwardFn = std::function<void(const TensorT& out_grad, BasicTape& tape)>;

  /// Differentiable input (a parameter or a probed tensor).
  Var leaf(TensorT value);
  /// Input that never receives gradient.
  Var constant(TensorT value);
  /// Appends an operation node. `op` is a static string used for instrumentation.
  Var record(std::string_view op, TensorT value, const std::vector<Var>& inputs, BackwardFn fn);

  const TensorT& value(Var v) const { return nodes_.at(v.id).value; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }

  /// Gradient of the last backward() loss with respect to `v`. Nodes the loss
  /// does not depend on report zeros of the value's shape.
  const TensorT& grad(Var v);

  /// Adds `g` into the gradient slot of `v` (fan-out sums).
  void accumulate(Var v, const TensorT& g);

  /// Runs the reverse sweep from a single-element node. Throws ContractError
  /// when `loss` holds more than one element.
  void backward(Var loss);

  std::size_t size() const noexcept { return nodes_.size(); }
  /// Number of recorded nodes whose op name equals `op`.
  std::size_t count_ops(std::string_view op) const;

 private:
  struct Node {
    std::string_view op;
    TensorT value;
    TensorT grad;
    bool requires_grad = false;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
};

using Tape = BasicTape<float>;
using TapeD = BasicTape<double>;

template <typename T>
Var matmul(BasicTape<T>& tape, Var a, Var b);
/// Same shapes as tensor-core `add`, including bias broadcast.
template <typename T>
Var add(BasicTape<T>& tape, Var a, Var b);
template <typename T>
Var sub(BasicTape<T>& tape, Var a, Var b);
template <typename T>
Var mul(BasicTape<T>& tape, Var a, Var b);
template <typename T>
Var scale(BasicTape<T>& tape, Var a, T factor);
template <typename T>
Var relu(BasicTape<T>& tape, Var a);
template <typename T>
Var softmax_rows(BasicTape<T>& tape, Var a);
template <typename T>
Var layer_norm(BasicTape<T>& tape, Var x, Var gain, Var bias, T eps);
/// Sum of all elements, shape {1}.
template <typename T>
Var sum(BasicTape<T>& tape, Var a);

/// Rows of `table` selected by token ids.
template <typename T>
Var embedding(BasicTape<T>& tape, Var table, const std::vector<int>& tokens);
/// Mean over each consecutive block of rows: [groups*n, d] -> [groups, d].
template <typename T>
Var mean_pool(BasicTape<T>& tape, Var x, std::size_t groups);

/// [batch*seq, heads*dh] -> [(batch*heads)*seq, dh], grouped by (batch, head).
template <typename T>
Var split_heads(BasicTape<T>& tape, Var x, std::size_t batch, std::size_t seq, std::size_t heads);
/// Inverse of split_heads.
template <typename T>
Var merge_heads(BasicTape<T>& tape, Var x, std::size_t batch, std::size_t seq, std::size_t heads);
/// Per group g: a_g · b_gᵀ, with a = [groups*m, k], b = [groups*n, k].
template <typename T>
Var batched_matmul_nt(BasicTape<T>& tape, Var a, Var b, std::size_t groups);
/// Per group g: a_g · b_g, with a = [groups*m, k], b = [groups*k, n].
template <typename T>
Var batched_matmul(BasicTape<T>& tape, Var a, Var b, std::size_t groups);

/// Mean softmax cross-entropy of `logits` [batch, classes] against labels.
template <typename T>
Var cross_entropy(BasicTape<T>& tape, Var logits, const std::vector<int>& labels);

/// Finite-difference check of the tape gradient of `f` at `x`.
///
/// Returns max_i |analytic_i - central_i| / (|analytic_i| + |central_i| + 1e-8),
/// where central_i = (f(x + eps e_i) - f(x - eps e_i)) / (2 eps).
template <typename T>
double grad_check(const std::function<Var(BasicTape<T>&, Var)>& f, const BasicTensor<T>& x, T eps);

}  // namespace kurtq::ad
