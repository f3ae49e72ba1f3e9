#include "phyformer/autodiff.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <memory>
#include <optional>
#include <string>

#include "phyformer/errors.hpp"

namespace phyformer::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

ConstMap as_mat(const Tensor& t) {
  return ConstMap(t.ptr(), static_cast<Eigen::Index>(t.rows()),
                  static_cast<Eigen::Index>(t.cols()));
}

MutMap as_mat(Tensor& t) {
  return MutMap(t.ptr(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

void require_rank2(const Tensor& t, const char* what) {
  if (t.rank() != 2) {
    throw ShapeError(std::string(what) + ": expected a 2-D tensor, got " + shape_str(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

void accumulate(Tensor* dst, const Tensor& src) {
  if (!dst) return;
  auto d = dst->data();
  auto s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

Tape& tape_of(Var v) { return v.tape(); }

}  // namespace

const char* op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::Constant: return "constant";
    case Op::MatMul: return "matmul";
    case Op::Transpose: return "transpose";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Scale: return "scale";
    case Op::AddBias: return "add_bias";
    case Op::Relu: return "relu";
    case Op::Square: return "square";
    case Op::Sum: return "sum";
    case Op::Mean: return "mean";
    case Op::Softmax: return "softmax";
    case Op::LayerNorm: return "layer_norm";
    case Op::Attention: return "attention";
    case Op::SliceRows: return "slice_rows";
    case Op::SliceCols: return "slice_cols";
    case Op::ConcatCols: return "concat_cols";
    case Op::MseLoss: return "mse_loss";
    case Op::BceLoss: return "bce_loss";
    case Op::Custom: return "custom";
  }
  return "?";
}

const Tensor& Var::value() const { return tape_->value(id_); }

Var Tape::param(const Tensor& value) {
  if (!value.all_finite()) throw NumericError("non-finite parameter value");
  nodes_.push_back(Node{Op::Leaf, {}, value, nullptr, true});
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Tensor value) {
  if (!value.all_finite()) throw NumericError("non-finite constant value");
  nodes_.push_back(Node{Op::Constant, {}, std::move(value), nullptr, false});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Op op, std::span<const Var> inputs, Tensor value, BackwardFn backward) {
  if (!value.all_finite()) {
    throw NumericError(std::string("non-finite output from ") + op_name(op));
  }
  Node node{op, {}, std::move(value), std::move(backward), false};
  node.inputs.reserve(inputs.size());
  for (const auto& in : inputs) {
    if (&in.tape() != this) throw ContractError("input Var belongs to a different tape");
    node.inputs.push_back(in.id());
    node.requires_grad = node.requires_grad || nodes_[in.id()].requires_grad;
  }
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

const Tensor& Gradients::operator[](Var v) const { return at(v.id()); }

const Tensor& Gradients::at(std::size_t id) const {
  auto it = std::lower_bound(leaf_ids_.begin(), leaf_ids_.end(), id);
  if (it == leaf_ids_.end() || *it != id) throw ContractError("no gradient for non-leaf node");
  return leaf_grads_[static_cast<std::size_t>(it - leaf_ids_.begin())];
}

Gradients backward(const Tape& tape, Var loss) {
  if (&loss.tape() != &tape) throw ContractError("loss Var belongs to a different tape");
  if (loss.value().size() != 1) {
    throw ContractError("backward requires a scalar loss, got " + shape_str(loss.shape()));
  }
  const std::size_t n = tape.size();
  std::vector<std::optional<Tensor>> grads(n);
  grads[loss.id()] = Tensor(loss.shape(), 1.0);

  std::vector<Tensor*> sinks;
  for (std::size_t id = loss.id() + 1; id-- > 0;) {
    const auto& node = tape.nodes_[id];
    if (!grads[id] || !node.backward || !node.requires_grad) continue;
    sinks.assign(node.inputs.size(), nullptr);
    for (std::size_t i = 0; i < node.inputs.size(); ++i) {
      const auto in = node.inputs[i];
      if (!tape.nodes_[in].requires_grad) continue;
      if (!grads[in]) grads[in] = Tensor(tape.nodes_[in].value.shape(), 0.0);
      sinks[i] = &*grads[in];
    }
    node.backward(*grads[id], sinks);
    // Activation gradients are dead once propagated.
    grads[id].reset();
  }

  Gradients out;
  for (std::size_t id = 0; id < n; ++id) {
    if (tape.nodes_[id].op != Op::Leaf) continue;
    out.leaf_ids_.push_back(id);
    // The loss itself may be a leaf; its gradient was consumed above only if it had a rule.
    if (grads[id]) {
      out.leaf_grads_.push_back(std::move(*grads[id]));
    } else if (id == loss.id()) {
      out.leaf_grads_.emplace_back(loss.shape(), 1.0);
    } else {
      out.leaf_grads_.emplace_back(tape.nodes_[id].value.shape(), 0.0);
    }
  }
  return out;
}

// ---- primitives -----------------------------------------------------------

Var matmul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_rank2(av, "matmul");
  require_rank2(bv, "matmul");
  if (av.dim(1) != bv.dim(0)) {
    throw ShapeError("matmul: inner dimensions disagree " + shape_str(av.shape()) + " x " +
                     shape_str(bv.shape()));
  }
  Tensor out({av.dim(0), bv.dim(1)});
  as_mat(out).noalias() = as_mat(av) * as_mat(bv);
  Var inputs[] = {a, b};
  return tape_of(a).record(Op::MatMul, inputs, std::move(out),
                           [&av, &bv](const Tensor& g, std::span<Tensor* const> d) {
                             if (d[0]) as_mat(*d[0]).noalias() += as_mat(g) * as_mat(bv).transpose();
                             if (d[1]) as_mat(*d[1]).noalias() += as_mat(av).transpose() * as_mat(g);
                           });
}

Var transpose(Var a) {
  const Tensor& av = a.value();
  require_rank2(av, "transpose");
  Tensor out({av.dim(1), av.dim(0)});
  as_mat(out) = as_mat(av).transpose();
  Var inputs[] = {a};
  return tape_of(a).record(Op::Transpose, inputs, std::move(out),
                           [](const Tensor& g, std::span<Tensor* const> d) {
                             if (d[0]) as_mat(*d[0]) += as_mat(g).transpose();
                           });
}

Var add(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_same_shape(av, bv, "add");
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  Var inputs[] = {a, b};
  return tape_of(a).record(Op::Add, inputs, std::move(out),
                           [](const Tensor& g, std::span<Tensor* const> d) {
                             accumulate(d[0], g);
                             accumulate(d[1], g);
                           });
}

Var sub(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_same_shape(av, bv, "sub");
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  Var inputs[] = {a, b};
  return tape_of(a).record(Op::Sub, inputs, std::move(out),
                           [](const Tensor& g, std::span<Tensor* const> d) {
                             accumulate(d[0], g);
                             if (d[1]) {
                               for (std::size_t i = 0; i < g.size(); ++i) (*d[1])[i] -= g[i];
                             }
                           });
}

Var mul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_same_shape(av, bv, "mul");
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  Var inputs[] = {a, b};
  return tape_of(a).record(Op::Mul, inputs, std::move(out),
                           [&av, &bv](const Tensor& g, std::span<Tensor* const> d) {
                             if (d[0]) {
                               for (std::size_t i = 0; i < g.size(); ++i) (*d[0])[i] += g[i] * bv[i];
                             }
                             if (d[1]) {
                               for (std::size_t i = 0; i < g.size(); ++i) (*d[1])[i] += g[i] * av[i];
                             }
                           });
}

Var scale(Var a, double s) {
  Tensor out = a.value();
  for (auto& v : out.data()) v *= s;
  Var inputs[] = {a};
  return tape_of(a).record(Op::Scale, inputs, std::move(out),
                           [s](const Tensor& g, std::span<Tensor* const> d) {
                             if (!d[0]) return;
                             for (std::size_t i = 0; i < g.size(); ++i) (*d[0])[i] += s * g[i];
                           });
}

Var add_bias(Var x, Var bias) {
  const Tensor& xv = x.value();
  const Tensor& bv = bias.value();
  const std::size_t c = xv.cols();
  if (bv.size() != c) {
    throw ShapeError("add_bias: bias " + shape_str(bv.shape()) + " does not match last dim of " +
                     shape_str(xv.shape()));
  }
  Tensor out = xv;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    for (std::size_t j = 0; j < c; ++j) out[r * c + j] += bv[j];
  }
  Var inputs[] = {x, bias};
  return tape_of(x).record(Op::AddBias, inputs, std::move(out),
                           [c](const Tensor& g, std::span<Tensor* const> d) {
                             accumulate(d[0], g);
                             if (d[1]) {
                               for (std::size_t r = 0; r < g.rows(); ++r) {
                                 for (std::size_t j = 0; j < c; ++j) (*d[1])[j] += g[r * c + j];
                               }
                             }
                           });
}

Var relu(Var x) {
  const Tensor& xv = x.value();
  Tensor out = xv;
  for (auto& v : out.data()) v = v > 0.0 ? v : 0.0;
  Var inputs[] = {x};
  return tape_of(x).record(Op::Relu, inputs, std::move(out),
                           [&xv](const Tensor& g, std::span<Tensor* const> d) {
                             if (!d[0]) return;
                             for (std::size_t i = 0; i < g.size(); ++i) {
                               if (xv[i] > 0.0) (*d[0])[i] += g[i];
                             }
                           });
}

Var square(Var x) {
  const Tensor& xv = x.value();
  Tensor out = xv;
  for (auto& v : out.data()) v *= v;
  Var inputs[] = {x};
  return tape_of(x).record(Op::Square, inputs, std::move(out),
                           [&xv](const Tensor& g, std::span<Tensor* const> d) {
                             if (!d[0]) return;
                             for (std::size_t i = 0; i < g.size(); ++i) (*d[0])[i] += 2.0 * xv[i] * g[i];
                           });
}

Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  Var inputs[] = {x};
  return tape_of(x).record(Op::Sum, inputs, Tensor::scalar(s),
                           [](const Tensor& g, std::span<Tensor* const> d) {
                             if (!d[0]) return;
                             for (auto& v : d[0]->data()) v += g[0];
                           });
}

Var mean(Var x) {
  const double n = static_cast<double>(x.value().size());
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  Var inputs[] = {x};
  return tape_of(x).record(Op::Mean, inputs, Tensor::scalar(s / n),
                           [n](const Tensor& g, std::span<Tensor* const> d) {
                             if (!d[0]) return;
                             for (auto& v : d[0]->data()) v += g[0] / n;
                           });
}

Var softmax_lastdim(Var x) {
  const Tensor& xv = x.value();
  const std::size_t c = xv.cols();
  Tensor out(xv.shape());
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    const double* in = xv.ptr() + r * c;
    double* o = out.ptr() + r * c;
    const double mx = *std::max_element(in, in + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += (o[j] = std::exp(in[j] - mx));
    for (std::size_t j = 0; j < c; ++j) o[j] /= z;
  }
  Var inputs[] = {x};
  Tape& tape = tape_of(x);
  const std::size_t self = tape.size();
  return tape.record(Op::Softmax, inputs, std::move(out),
                     [&tape, self, c](const Tensor& g, std::span<Tensor* const> d) {
                       if (!d[0]) return;
                       const Tensor& p = tape.value(self);
                       for (std::size_t r = 0; r < p.rows(); ++r) {
                         const double* pr = p.ptr() + r * c;
                         const double* gr = g.ptr() + r * c;
                         double dot = 0.0;
                         for (std::size_t j = 0; j < c; ++j) dot += gr[j] * pr[j];
                         double* dr = d[0]->ptr() + r * c;
                         for (std::size_t j = 0; j < c; ++j) dr[j] += pr[j] * (gr[j] - dot);
                       }
                     });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  const Tensor& xv = x.value();
  const std::size_t c = xv.cols();
  const std::size_t rows = xv.rows();
  if (gain.value().size() != c || bias.value().size() != c) {
    throw ShapeError("layer_norm: gain/bias must match last dim of " + shape_str(xv.shape()));
  }
  if (eps < 0.0) throw ContractError("layer_norm: eps must be non-negative");
  const Tensor& gv = gain.value();
  const Tensor& bv = bias.value();

  // xhat and 1/std are kept for the backward rule.
  auto xhat = std::make_shared<Tensor>(xv.shape());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  Tensor out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.ptr() + r * c;
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += in[j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= static_cast<double>(c);
    if (var + eps <= 0.0) {
      throw NumericError("layer_norm: zero variance with eps=0 (division guard)");
    }
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    double* xh = xhat->ptr() + r * c;
    double* o = out.ptr() + r * c;
    for (std::size_t j = 0; j < c; ++j) {
      xh[j] = (in[j] - mu) * is;
      o[j] = xh[j] * gv[j] + bv[j];
    }
  }
  Var inputs[] = {x, gain, bias};
  return tape_of(x).record(
      Op::LayerNorm, inputs, std::move(out),
      [xhat, inv_std, &gv, c](const Tensor& g, std::span<Tensor* const> d) {
        const double n = static_cast<double>(c);
        std::vector<double> dxh(c);
        for (std::size_t r = 0; r < g.rows(); ++r) {
          const double* gr = g.ptr() + r * c;
          const double* xh = xhat->ptr() + r * c;
          if (d[1]) {
            for (std::size_t j = 0; j < c; ++j) (*d[1])[j] += gr[j] * xh[j];
          }
          if (d[2]) {
            for (std::size_t j = 0; j < c; ++j) (*d[2])[j] += gr[j];
          }
          if (d[0]) {
            double m1 = 0.0, m2 = 0.0;
            for (std::size_t j = 0; j < c; ++j) {
              dxh[j] = gr[j] * gv[j];
              m1 += dxh[j];
              m2 += dxh[j] * xh[j];
            }
            m1 /= n;
            m2 /= n;
            double* dr = d[0]->ptr() + r * c;
            const double is = (*inv_std)[r];
            for (std::size_t j = 0; j < c; ++j) dr[j] += is * (dxh[j] - m1 - xh[j] * m2);
          }
        }
      });
}

Var attention(Var q, Var k, Var v, std::size_t n_seq, std::size_t n_heads) {
  const Tensor& qv = q.value();
  const Tensor& kv = k.value();
  const Tensor& vv = v.value();
  require_rank2(qv, "attention");
  require_same_shape(qv, kv, "attention");
  require_same_shape(qv, vv, "attention");
  const std::size_t d_model = qv.cols();
  if (n_seq == 0 || n_heads == 0 || qv.rows() % n_seq != 0 || d_model % n_heads != 0) {
    throw ShapeError("attention: " + shape_str(qv.shape()) + " cannot split into " +
                     std::to_string(n_seq) + " sequences x " + std::to_string(n_heads) +
                     " heads");
  }
  const auto n_tok = static_cast<Eigen::Index>(qv.rows() / n_seq);
  const auto d_head = static_cast<Eigen::Index>(d_model / n_heads);
  const double scale_factor = 1.0 / std::sqrt(static_cast<double>(d_head));

  // Attention weights for every (sequence, head), kept for backward.
  auto probs = std::make_shared<Storage>(n_seq * n_heads * n_tok * n_tok);
  Tensor out(qv.shape());
  auto Q = as_mat(qv);
  auto K = as_mat(kv);
  auto V = as_mat(vv);
  auto O = as_mat(out);
  for (std::size_t s = 0; s < n_seq; ++s) {
    const auto r0 = static_cast<Eigen::Index>(s) * n_tok;
    for (std::size_t h = 0; h < n_heads; ++h) {
      const auto c0 = static_cast<Eigen::Index>(h) * d_head;
      MutMap P(probs->data() + (s * n_heads + h) * n_tok * n_tok, n_tok, n_tok);
      P.noalias() = Q.block(r0, c0, n_tok, d_head) * K.block(r0, c0, n_tok, d_head).transpose();
      P *= scale_factor;
      for (Eigen::Index i = 0; i < n_tok; ++i) {
        auto row = P.row(i);
        row.array() = (row.array() - row.maxCoeff()).exp();
        row /= row.sum();
      }
      O.block(r0, c0, n_tok, d_head).noalias() = P * V.block(r0, c0, n_tok, d_head);
    }
  }

  Var inputs[] = {q, k, v};
  return tape_of(q).record(
      Op::Attention, inputs, std::move(out),
      [probs, &qv, &kv, &vv, n_seq, n_heads, n_tok, d_head, scale_factor](
          const Tensor& g, std::span<Tensor* const> d) {
        auto Q = as_mat(qv);
        auto K = as_mat(kv);
        auto V = as_mat(vv);
        auto G = as_mat(g);
        RowMat dP(n_tok, n_tok);
        for (std::size_t s = 0; s < n_seq; ++s) {
          const auto r0 = static_cast<Eigen::Index>(s) * n_tok;
          for (std::size_t h = 0; h < n_heads; ++h) {
            const auto c0 = static_cast<Eigen::Index>(h) * d_head;
            ConstMap P(probs->data() + (s * n_heads + h) * n_tok * n_tok, n_tok, n_tok);
            auto Gb = G.block(r0, c0, n_tok, d_head);
            if (d[2]) as_mat(*d[2]).block(r0, c0, n_tok, d_head).noalias() += P.transpose() * Gb;
            if (!d[0] && !d[1]) continue;
            dP.noalias() = Gb * V.block(r0, c0, n_tok, d_head).transpose();
            // dS = P * (dP - rowsum(dP * P)), folded with the score scale.
            for (Eigen::Index i = 0; i < n_tok; ++i) {
              const double dot = dP.row(i).dot(P.row(i));
              dP.row(i) = (P.row(i).array() * (dP.row(i).array() - dot) * scale_factor).matrix();
            }
            if (d[0]) as_mat(*d[0]).block(r0, c0, n_tok, d_head).noalias() += dP * K.block(r0, c0, n_tok, d_head);
            if (d[1]) as_mat(*d[1]).block(r0, c0, n_tok, d_head).noalias() += dP.transpose() * Q.block(r0, c0, n_tok, d_head);
          }
        }
      });
}

Var slice_rows(Var x, std::size_t begin, std::size_t count) {
  const Tensor& xv = x.value();
  require_rank2(xv, "slice_rows");
  if (count == 0 || begin + count > xv.dim(0)) throw ShapeError("slice_rows: range out of bounds");
  const std::size_t c = xv.cols();
  Tensor out({count, c}, Storage(xv.ptr() + begin * c, xv.ptr() + (begin + count) * c));
  Var inputs[] = {x};
  return tape_of(x).record(Op::SliceRows, inputs, std::move(out),
                           [begin, c](const Tensor& g, std::span<Tensor* const> d) {
                             if (!d[0]) return;
                             double* dst = d[0]->ptr() + begin * c;
                             for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
                           });
}

Var slice_cols(Var x, std::size_t begin, std::size_t count) {
  const Tensor& xv = x.value();
  require_rank2(xv, "slice_cols");
  if (count == 0 || begin + count > xv.dim(1)) throw ShapeError("slice_cols: range out of bounds");
  Tensor out({xv.dim(0), count});
  as_mat(out) = as_mat(xv).middleCols(static_cast<Eigen::Index>(begin), static_cast<Eigen::Index>(count));
  Var inputs[] = {x};
  return tape_of(x).record(Op::SliceCols, inputs, std::move(out),
                           [begin, count](const Tensor& g, std::span<Tensor* const> d) {
                             if (!d[0]) return;
                             as_mat(*d[0]).middleCols(static_cast<Eigen::Index>(begin),
                                                      static_cast<Eigen::Index>(count)) += as_mat(g);
                           });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t rows = parts[0].value().rows();
  std::size_t total = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    require_rank2(p.value(), "concat_cols");
    if (p.value().rows() != rows) throw ShapeError("concat_cols: row counts differ");
    offsets.push_back(total);
    total += p.value().cols();
  }
  Tensor out({rows, total});
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const Tensor& pv = parts[i].value();
    as_mat(out).middleCols(static_cast<Eigen::Index>(offsets[i]), static_cast<Eigen::Index>(pv.cols())) = as_mat(pv);
  }
  std::vector<std::size_t> widths;
  for (const auto& p : parts) widths.push_back(p.value().cols());
  return tape_of(parts[0]).record(
      Op::ConcatCols, parts, std::move(out),
      [offsets, widths](const Tensor& g, std::span<Tensor* const> d) {
        for (std::size_t i = 0; i < d.size(); ++i) {
          if (!d[i]) continue;
          as_mat(*d[i]) += as_mat(g).middleCols(static_cast<Eigen::Index>(offsets[i]),
                                                static_cast<Eigen::Index>(widths[i]));
        }
      });
}

namespace {

double mask_count(const Tensor* mask, std::size_t n) {
  if (!mask) return static_cast<double>(n);
  double count = 0.0;
  for (double m : mask->data()) count += (m != 0.0) ? 1.0 : 0.0;
  return count;
}

}  // namespace

Var mse_loss(Var pred, const Tensor& target, const Tensor* mask) {
  const Tensor& pv = pred.value();
  require_same_shape(pv, target, "mse_loss");
  if (mask) require_same_shape(pv, *mask, "mse_loss mask");
  const double n = mask_count(mask, pv.size());
  if (n == 0.0) throw ContractError("mse_loss: empty mask");
  double acc = 0.0;
  for (std::size_t i = 0; i < pv.size(); ++i) {
    if (mask && (*mask)[i] == 0.0) continue;
    const double e = pv[i] - target[i];
    acc += e * e;
  }
  auto saved_target = std::make_shared<Tensor>(target);
  auto saved_mask = mask ? std::make_shared<Tensor>(*mask) : nullptr;
  Var inputs[] = {pred};
  return tape_of(pred).record(
      Op::MseLoss, inputs, Tensor::scalar(acc / n),
      [&pv, saved_target, saved_mask, n](const Tensor& g, std::span<Tensor* const> d) {
        if (!d[0]) return;
        const double k = 2.0 * g[0] / n;
        for (std::size_t i = 0; i < pv.size(); ++i) {
          if (saved_mask && (*saved_mask)[i] == 0.0) continue;
          (*d[0])[i] += k * (pv[i] - (*saved_target)[i]);
        }
      });
}

Var bce_with_logits(Var logits, const Tensor& target, const Tensor* mask) {
  const Tensor& zv = logits.value();
  require_same_shape(zv, target, "bce_with_logits");
  if (mask) require_same_shape(zv, *mask, "bce_with_logits mask");
  const double n = mask_count(mask, zv.size());
  if (n == 0.0) throw ContractError("bce_with_logits: empty mask");
  double acc = 0.0;
  for (std::size_t i = 0; i < zv.size(); ++i) {
    if (mask && (*mask)[i] == 0.0) continue;
    const double z = zv[i];
    acc += std::max(z, 0.0) - z * target[i] + std::log1p(std::exp(-std::abs(z)));
  }
  auto saved_target = std::make_shared<Tensor>(target);
  auto saved_mask = mask ? std::make_shared<Tensor>(*mask) : nullptr;
  Var inputs[] = {logits};
  return tape_of(logits).record(
      Op::BceLoss, inputs, Tensor::scalar(acc / n),
      [&zv, saved_target, saved_mask, n](const Tensor& g, std::span<Tensor* const> d) {
        if (!d[0]) return;
        const double k = g[0] / n;
        for (std::size_t i = 0; i < zv.size(); ++i) {
          if (saved_mask && (*saved_mask)[i] == 0.0) continue;
          const double sig = 1.0 / (1.0 + std::exp(-zv[i]));
          (*d[0])[i] += k * (sig - (*saved_target)[i]);
        }
      });
}

}  // namespace phyformer::ad
