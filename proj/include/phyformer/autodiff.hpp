#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <vector>

#include "phyformer/tensor.hpp"

// Reverse-mode automatic differentiation over 2-D (and vector) tensors.
//
// A Tape records primitive ops in execution order together with the
// activations their backward rules need. It is rebuilt for every forward
// pass; backward() walks it once in reverse.
namespace phyformer::ad {

enum class Op {
  Leaf,
  Constant,
  MatMul,
  Transpose,
  Add,
  Sub,
  Mul,
  Scale,
  AddBias,
  Relu,
  Square,
  Sum,
  Mean,
  Softmax,
  LayerNorm,
  Attention,
  SliceRows,
  SliceCols,
  ConcatCols,
  MseLoss,
  BceLoss,
  Custom,
};

const char* op_name(Op op);

class Tape;
class Gradients;

// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  const Tensor& value() const;
  std::size_t id() const { return id_; }
  Tape& tape() const { return *tape_; }
  const Shape& shape() const { return value().shape(); }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Accumulates (+=) into grad_in[i]; a null entry means input i needs no gradient.
using BackwardFn = std::function<void(const Tensor& grad_out, std::span<Tensor* const> grad_in)>;

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Differentiable leaf (a trainable parameter).
  Var param(const Tensor& value);
  Var constant(Tensor value);

  // Appends a node. Throws NumericError if `value` holds NaN/Inf.
  Var record(Op op, std::span<const Var> inputs, Tensor value, BackwardFn backward);

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  Op op(std::size_t id) const { return nodes_[id].op; }
  const std::vector<std::size_t>& inputs(std::size_t id) const { return nodes_[id].inputs; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

 private:
  friend class Gradients;
  friend Gradients backward(const Tape& tape, Var loss);

  struct Node {
    Op op;
    std::vector<std::size_t> inputs;
    Tensor value;
    BackwardFn backward;
    bool requires_grad;
  };
  // deque keeps node addresses stable, backward rules hold references into it
  std::deque<Node> nodes_;
};

// Gradients of a scalar loss with respect to every param leaf of a tape.
class Gradients {
 public:
  const Tensor& operator[](Var v) const;
  const Tensor& at(std::size_t id) const;

 private:
  friend Gradients backward(const Tape& tape, Var loss);
  std::vector<std::size_t> leaf_ids_;
  std::vector<Tensor> leaf_grads_;
};

// Throws ContractError unless `loss` is a single-element tensor.
Gradients backward(const Tape& tape, Var loss);

// ---- primitives -----------------------------------------------------------

Var matmul(Var a, Var b);
Var transpose(Var a);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
// x[r, c] + bias[c] broadcast over rows.
Var add_bias(Var x, Var bias);
Var relu(Var x);
Var square(Var x);
Var sum(Var x);
Var mean(Var x);
Var softmax_lastdim(Var x);
Var layer_norm(Var x, Var gain, Var bias, double eps);

// Multi-head scaled dot-product self-attention over `n_seq` independent
// sequences stacked along rows. q, k, v: [n_seq * n_tok, d_model]; head h
// uses columns [h*d_head, (h+1)*d_head). Scale is 1/sqrt(d_head).
Var attention(Var q, Var k, Var v, std::size_t n_seq, std::size_t n_heads);

Var slice_rows(Var x, std::size_t begin, std::size_t count);
Var slice_cols(Var x, std::size_t begin, std::size_t count);
Var concat_cols(std::span<const Var> parts);

// Mean of (pred - target)^2 over entries where mask != 0 (all entries if mask is null).
Var mse_loss(Var pred, const Tensor& target, const Tensor* mask = nullptr);
// Mean binary cross-entropy of sigmoid(logits) against 0/1 targets over masked entries.
Var bce_with_logits(Var logits, const Tensor& target, const Tensor* mask = nullptr);

}  // namespace phyformer::ad
