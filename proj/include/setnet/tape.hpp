#pragma once

#include <functional>
#include <span>
#include <unordered_map>
#include <vector>

#include "setnet/tensor.hpp"

namespace setnet::ad {

class Tape;

// Handle to a value recorded on a tape.
class Var {
 public:
  Var() = default;
  const Tensor& val() const;
  bool needs_grad() const;
  int id() const { return id_; }
  Tape* tape() const { return tape_; }

 private:
  friend class Tape;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  int id_ = -1;
};

// parameter id -> gradient, same shape as the parameter.
using GradMap = std::unordered_map<int, Tensor>;

// Reverse-mode vjp: reads input values from the tape and accumulates into
// the input gradient buffers. `gout` is the gradient of the loss w.r.t.
// this node's output.
using VjpFn = std::function<void(Tape&, const Tensor& gout, int node_id)>;

// Define-by-run record of one forward pass. Rebuilt per pass; never shared
// across threads.
class Tape {
 public:
  // Differentiable leaf; param_id >= 0 routes its gradient into the GradMap.
  Var leaf(const Tensor& value, int param_id = -1);
  // Non-differentiable input.
  Var constant(Tensor value);
  // Records an op result. needs_grad is inherited from the inputs.
  Var record(Tensor value, std::span<const Var> inputs, VjpFn vjp);

  // Reverse pass from a scalar loss node. Gradient buffers for interior
  // nodes are released as soon as they have been consumed.
  GradMap backward(Var loss);

  const Tensor& value(int id) const { return nodes_[static_cast<size_t>(id)].value; }
  bool node_needs_grad(int id) const {
    return nodes_[static_cast<size_t>(id)].needs_grad;
  }
  const std::vector<int>& inputs_of(int id) const {
    return nodes_[static_cast<size_t>(id)].inputs;
  }

  // Gradient accumulation buffer for a node, zero-initialized on first use.
  // Only valid while backward() is running.
  Tensor& grad_buf(int id);
  // True when some downstream op already deposited gradient for `id`.
  bool has_grad(int id) const {
    return grads_[static_cast<size_t>(id)].defined();
  }

  size_t nodes() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    std::vector<int> inputs;
    VjpFn vjp;
    int param_id = -1;
    bool needs_grad = false;
  };
  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
};

inline const Tensor& Var::val() const { return tape_->value(id_); }
inline bool Var::needs_grad() const { return tape_->node_needs_grad(id_); }

// ---- primitives ------------------------------------------------------
// Tensor arguments follow the row-major convention: set elements are rows,
// so an affine layer is x @ W with W of shape [in, out].

// Matrix product. Supports [m,k]@[k,n], [n,m,k]@[k,e] (shared weight, rows
// flattened) and [b,m,k]@[b,k,n] (per-set batched).
Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);  // elementwise
Var scale(Var a, double c);
Var relu(Var a);
// relu(x @ w + b) or x @ w + b, fused; bias optional.
Var affine(Var x, Var w, const Var* b, bool with_relu);
// Reductions over one axis of a rank-2/3 tensor.
Var sum(Var a, int axis);
Var mean(Var a, int axis);
Var max(Var a, int axis);
// Masked reductions over the element axis of an [n,m,d] batch -> [n,d].
// Invalid positions contribute nothing; max routes its gradient to the
// first arg-max among valid positions.
Var sum_elems(Var x, const Mask* mask);
Var mean_elems(Var x, const Mask* mask);
Var max_elems(Var x, const Mask* mask);
// Broadcasts: [d] or [n,d] or [m,d] -> [n,m,d].
Var broadcast_features(Var v, int64_t sets, int64_t elems);
Var broadcast_pooled(Var v, int64_t elems);
Var broadcast_sets(Var v, int64_t sets);
Var concat(std::span<const Var> parts, int axis);
// Swap the last two axes.
Var transpose(Var a);
Var reshape(Var a, std::vector<int64_t> shape);
// Zero out padded rows of an [n,m,d] tensor.
Var mask_rows(Var x, const Mask* mask);
// Row softmax over the last axis of logits/denom; masked keys get zero
// probability. Rows sum to one over the valid entries.
Var scaled_softmax(Var logits, double denom, const Mask* key_mask);

// Fused multihead scaled-dot-product attention core: per-head softmax
// (q_h k_h^T / denom) v_h with heads re-concatenated. q: [n,sq,d],
// k/v: [n,sk,d]. Masked keys are excluded; padded query rows yield zeros.
Var attention_core(Var q, Var k, Var v, int heads, double denom,
                   const Mask* key_mask, const Mask* query_mask);

// Losses (scalar outputs).
Var mse_loss(Var pred, const Tensor& target);
Var cross_entropy_loss(Var logits, const std::vector<uint32_t>& targets);

// Scalar convenience for tests.
Var sum_all(Var a);

// Throws numeric_error when t holds NaN or infinity.
void check_finite(const Tensor& t, const char* where);

}  // namespace setnet::ad
