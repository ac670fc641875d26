#pragma once

// Minimal reverse-mode automatic differentiation over dense double tensors.
//
// A Tape owns every node created during one evaluation. Nodes are appended in
// creation order and backward() walks them in reverse, so gradient
// accumulation order is fixed by the order in which the forward pass was
// written. Tapes are single-threaded; independent tapes may run concurrently
// over shared read-only parameter data because leaves copy their values.

#include <cstddef>
#include <deque>
#include <functional>
#include <map>
#include <span>
#include <vector>

#include "shaplora/tensor.hpp"

namespace shaplora {

enum class OpKind {
  leaf,
  matmul,
  add,
  elementwise_mul,
  scale,
  silu_activation,
  softmax_lastdim,
  rms_normalize,
  embedding_lookup,
  cross_entropy_mean,
  split_heads,
  merge_heads,
  transpose_last2,
  causal_mask,
};

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while its tape lives.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  OpKind kind() const;
  std::size_t id() const { return id_; }
  Tape* tape() const { return tape_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Gradients of one backward() call, keyed by leaf node.
class GradientMap {
 public:
  bool contains(const Var& v) const { return grads_.count(v.id()) != 0; }
  // Throws KeyError when `v` received no gradient.
  const Tensor& at(const Var& v) const;
  std::size_t size() const { return grads_.size(); }

 private:
  friend class Tape;
  std::map<std::size_t, Tensor> grads_;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  std::size_t size() const { return nodes_.size(); }

  /// Exact reverse-mode gradients of a scalar `loss` with respect to every
  /// requires_grad leaf reachable from it. Unreachable leaves are absent.
  GradientMap backward(const Var& loss) const;

  // Backward rule: given the output gradient, accumulate into the gradient
  // slots of the inputs (null when that input does not require grad).
  using BackwardFn = std::function<void(const Tensor& grad_out, std::span<Tensor* const> grad_in)>;

  Var record(OpKind kind, Tensor value, std::vector<Var> inputs, BackwardFn backward);

 private:
  friend class Var;

  struct Node {
    OpKind kind;
    Tensor value;
    bool requires_grad;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
  };

  const Node& node(std::size_t id) const { return nodes_[id]; }

  std::deque<Node> nodes_;
};

// ---- Operations ------------------------------------------------------------
//
// Shape rules:
//   matmul            [n,k]x[k,m] -> [n,m];  [b,n,k]x[b,k,m] -> [b,n,m]
//   add, elementwise_mul
//                     same shape, or rhs 1-D of size = lhs last dim (row broadcast)
//   scale             any shape, times a constant
//   silu_activation   x * sigmoid(x), elementwise
//   softmax_lastdim   normalizes over the last dimension (max-subtracted)
//   rms_normalize     x / sqrt(mean(x^2) + eps) over the last dimension, no gain
//   embedding_lookup  table [v,d], ids (n) -> [n,d]; ids must lie in [0,v)
//   cross_entropy_mean logits [n,v], targets (n) in [0,v) or -1 (ignored);
//                     mean over non-ignored rows
//   split_heads       [b*t, h*dh] -> [b*h, t, dh]
//   merge_heads       [b*h, t, dh] -> [b*t, h*dh]
//   transpose_last2   [b,n,m] -> [b,m,n]
//   causal_mask       [b,t,t]; entries with column > row are replaced by
//                     kMaskedLogit (gradient zero there)

inline constexpr double kMaskedLogit = -1e30;
inline constexpr double kRmsEpsilon = 1e-6;

Var matmul(const Var& a, const Var& b);
Var add(const Var& a, const Var& b);
Var elementwise_mul(const Var& a, const Var& b);
Var scale(const Var& a, double factor);
Var silu_activation(const Var& a);
Var softmax_lastdim(const Var& a);
Var rms_normalize(const Var& a, double eps = kRmsEpsilon);
Var embedding_lookup(const Var& table, std::span<const int> ids);
Var cross_entropy_mean(const Var& logits, std::span<const int> targets);
Var split_heads(const Var& x, std::size_t batch, std::size_t seq, std::size_t heads);
Var merge_heads(const Var& x, std::size_t batch, std::size_t seq, std::size_t heads);
Var transpose_last2(const Var& x);
Var causal_mask(const Var& scores);

/// Central finite differences (f(w+eps) - f(w-eps)) / (2 eps) for every
/// scalar of every parameter. `params` is perturbed in place and restored.
std::vector<Tensor> finite_difference_gradient(
    const std::function<double(const std::vector<Tensor>&)>& f, std::vector<Tensor>& params,
    double eps);

}  // namespace shaplora
