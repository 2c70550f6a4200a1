// Copyright (c) 2026 The depthlab Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//    http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
// ============================================================================
#include "depthlab/graph.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace depthlab {

const char* op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::Constant: return "constant";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Scale: return "scale";
    case Op::AddRow: return "add_row";
    case Op::MatMul: return "matmul";
    case Op::Sum: return "sum";
    case Op::Mean: return "mean";
    case Op::MeanRows: return "mean_rows";
    case Op::DotConst: return "dot_const";
    case Op::Embedding: return "embedding";
    case Op::GatherRows: return "gather_rows";
    case Op::ScatterRows: return "scatter_rows";
    case Op::ScaleRows: return "scale_rows";
    case Op::Column: return "column";
    case Op::StackRows: return "stack_rows";
    case Op::RmsNorm: return "rms_norm";
    case Op::Rope: return "rope";
    case Op::Attention: return "attention";
    case Op::SwiGlu: return "swiglu";
    case Op::SoftmaxRows: return "softmax_rows";
    case Op::TopKGates: return "topk_gates";
    case Op::LogSumExpRows: return "logsumexp_rows";
    case Op::CrossEntropy: return "cross_entropy";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Graph

template <typename S>
Var<S> Graph<S>::leaf(T value) {
  Node n;
  n.op = Op::Leaf;
  n.value = std::move(value);
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return {this, static_cast<NodeId>(nodes_.size() - 1)};
}

template <typename S>
Var<S> Graph<S>::constant(T value) {
  Node n;
  n.op = Op::Constant;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return {this, static_cast<NodeId>(nodes_.size() - 1)};
}

template <typename S>
Var<S> Graph<S>::record(Op op, std::vector<NodeId> inputs, T value, BackwardFn backward) {
  Node n;
  n.op = op;
  n.requires_grad = std::any_of(inputs.begin(), inputs.end(), [&](NodeId i) { return requires_grad(i); });
  n.inputs = std::move(inputs);
  n.value = std::move(value);
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return {this, static_cast<NodeId>(nodes_.size() - 1)};
}

template <typename S>
void Graph<S>::accumulate(NodeId id, const T& delta) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (!n.requires_grad) return;
  if (n.grad.size() == 0) {
    n.grad = delta;
  } else {
    n.grad += delta;
  }
}

template <typename S>
void Graph<S>::backward(Var<S> loss) {
  const T& v = value(loss.id);
  if (v.rows() != 1 || v.cols() != 1) {
    throw ContractError("backward: loss must be 1x1, got " + shape_string(v));
  }
  backward(loss, T::Ones(1, 1));
}

template <typename S>
void Graph<S>::backward(Var<S> output, const T& seed) {
  if (output.graph != this) throw ContractError("backward: variable belongs to another graph");
  const T& v = value(output.id);
  if (seed.rows() != v.rows() || seed.cols() != v.cols()) {
    throw DimensionError("backward: seed " + shape_string(seed) + " does not match output " + shape_string(v));
  }
  for (Node& n : nodes_) n.grad.resize(0, 0);
  accumulate(output.id, seed);
  for (NodeId i = output.id; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (!n.requires_grad || n.grad.size() == 0 || !n.backward) continue;
    const T g = n.grad;
    n.backward(*this, g);
  }
}

template <typename S>
typename Graph<S>::T Graph<S>::grad(Var<S> v) const {
  const Node& n = node(v.id);
  if (n.grad.size() == 0) return T::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

// ---------------------------------------------------------------------------
// Operations

namespace {

template <typename S>
void require_same_graph(Var<S> a, Var<S> b, const char* op) {
  if (a.graph != b.graph) throw ContractError(std::string(op) + ": operands belong to different graphs");
}

template <typename S>
void require_same_shape(const TensorT<S>& a, const TensorT<S>& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError(std::string(op) + ": shapes differ " + shape_string(a) + " vs " + shape_string(b));
  }
}

}  // namespace

template <typename S>
Var<S> add(Var<S> a, Var<S> b) {
  require_same_graph(a, b, "add");
  require_same_shape(a.value(), b.value(), "add");
  const NodeId ia = a.id, ib = b.id;
  return a.graph->record(Op::Add, {ia, ib}, a.value() + b.value(), [ia, ib](Graph<S>& g, const TensorT<S>& d) {
    g.accumulate(ia, d);
    g.accumulate(ib, d);
  });
}

template <typename S>
Var<S> sub(Var<S> a, Var<S> b) {
  require_same_graph(a, b, "sub");
  require_same_shape(a.value(), b.value(), "sub");
  const NodeId ia = a.id, ib = b.id;
  return a.graph->record(Op::Sub, {ia, ib}, a.value() - b.value(), [ia, ib](Graph<S>& g, const TensorT<S>& d) {
    g.accumulate(ia, d);
    g.accumulate(ib, -d);
  });
}

template <typename S>
Var<S> mul(Var<S> a, Var<S> b) {
  require_same_graph(a, b, "mul");
  require_same_shape(a.value(), b.value(), "mul");
  const NodeId ia = a.id, ib = b.id;
  TensorT<S> out = a.value().cwiseProduct(b.value());
  return a.graph->record(Op::Mul, {ia, ib}, std::move(out), [ia, ib](Graph<S>& g, const TensorT<S>& d) {
    g.accumulate(ia, d.cwiseProduct(g.value(ib)));
    g.accumulate(ib, d.cwiseProduct(g.value(ia)));
  });
}

template <typename S>
Var<S> scale(Var<S> a, S factor) {
  const NodeId ia = a.id;
  return a.graph->record(Op::Scale, {ia}, a.value() * factor,
                         [ia, factor](Graph<S>& g, const TensorT<S>& d) { g.accumulate(ia, d * factor); });
}

template <typename S>
Var<S> add_row(Var<S> a, Var<S> row) {
  require_same_graph(a, row, "add_row");
  if (row.value().rows() != 1 || row.value().cols() != a.value().cols()) {
    throw DimensionError("add_row: row " + shape_string(row.value()) + " does not broadcast over " +
                         shape_string(a.value()));
  }
  const NodeId ia = a.id, ir = row.id;
  TensorT<S> out = a.value();
  out.rowwise() += row.value().row(0);
  return a.graph->record(Op::AddRow, {ia, ir}, std::move(out), [ia, ir](Graph<S>& g, const TensorT<S>& d) {
    g.accumulate(ia, d);
    g.accumulate(ir, d.colwise().sum());
  });
}

template <typename S>
Var<S> matmul(Var<S> a, Var<S> b) {
  require_same_graph(a, b, "matmul");
  const NodeId ia = a.id, ib = b.id;
  TensorT<S> out = depthlab::matmul(a.value(), b.value());
  return a.graph->record(Op::MatMul, {ia, ib}, std::move(out), [ia, ib](Graph<S>& g, const TensorT<S>& d) {
    if (g.requires_grad(ia)) g.accumulate(ia, matmul_nt(d, g.value(ib)));
    if (g.requires_grad(ib)) g.accumulate(ib, matmul_tn(g.value(ia), d));
  });
}

template <typename S>
Var<S> sum(Var<S> a) {
  const NodeId ia = a.id;
  const Index r = a.value().rows(), c = a.value().cols();
  TensorT<S> out(1, 1);
  out(0, 0) = a.value().sum();
  return a.graph->record(Op::Sum, {ia}, std::move(out), [ia, r, c](Graph<S>& g, const TensorT<S>& d) {
    g.accumulate(ia, TensorT<S>::Constant(r, c, d(0, 0)));
  });
}

template <typename S>
Var<S> mean(Var<S> a) {
  const NodeId ia = a.id;
  const Index r = a.value().rows(), c = a.value().cols();
  if (r * c == 0) throw DimensionError("mean: empty operand");
  TensorT<S> out(1, 1);
  out(0, 0) = a.value().sum() / static_cast<S>(r * c);
  return a.graph->record(Op::Mean, {ia}, std::move(out), [ia, r, c](Graph<S>& g, const TensorT<S>& d) {
    g.accumulate(ia, TensorT<S>::Constant(r, c, d(0, 0) / static_cast<S>(r * c)));
  });
}

template <typename S>
Var<S> mean_rows(Var<S> a) {
  const NodeId ia = a.id;
  const Index r = a.value().rows();
  if (r == 0) throw DimensionError("mean_rows: no rows");
  TensorT<S> out = a.value().colwise().sum() / static_cast<S>(r);
  return a.graph->record(Op::MeanRows, {ia}, std::move(out), [ia, r](Graph<S>& g, const TensorT<S>& d) {
    TensorT<S> delta(r, d.cols());
    delta.rowwise() = d.row(0) / static_cast<S>(r);
    g.accumulate(ia, delta);
  });
}

template <typename S>
Var<S> dot_const(Var<S> a, const TensorT<S>& c) {
  require_same_shape(a.value(), c, "dot_const");
  const NodeId ia = a.id;
  TensorT<S> out(1, 1);
  out(0, 0) = a.value().cwiseProduct(c).sum();
  return a.graph->record(Op::DotConst, {ia}, std::move(out),
                         [ia, c](Graph<S>& g, const TensorT<S>& d) { g.accumulate(ia, c * d(0, 0)); });
}

template <typename S>
Var<S> embedding(Var<S> table, std::span<const int> ids) {
  const TensorT<S>& t = table.value();
  TensorT<S> out(static_cast<Index>(ids.size()), t.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= t.rows()) {
      throw InputError("embedding: id " + std::to_string(ids[i]) + " outside table of " + std::to_string(t.rows()));
    }
    out.row(static_cast<Index>(i)) = t.row(ids[i]);
  }
  const NodeId it = table.id;
  std::vector<int> saved(ids.begin(), ids.end());
  const Index rows = t.rows();
  return table.graph->record(Op::Embedding, {it}, std::move(out),
                             [it, saved = std::move(saved), rows](Graph<S>& g, const TensorT<S>& d) {
                               TensorT<S> delta = TensorT<S>::Zero(rows, d.cols());
                               for (std::size_t i = 0; i < saved.size(); ++i)
                                 delta.row(saved[i]) += d.row(static_cast<Index>(i));
                               g.accumulate(it, delta);
                             });
}

template <typename S>
Var<S> gather_rows(Var<S> a, std::span<const Index> rows) {
  const TensorT<S>& v = a.value();
  TensorT<S> out(static_cast<Index>(rows.size()), v.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= v.rows()) throw DimensionError("gather_rows: row index out of range");
    out.row(static_cast<Index>(i)) = v.row(rows[i]);
  }
  const NodeId ia = a.id;
  const Index n = v.rows();
  std::vector<Index> saved(rows.begin(), rows.end());
  return a.graph->record(Op::GatherRows, {ia}, std::move(out),
                         [ia, n, saved = std::move(saved)](Graph<S>& g, const TensorT<S>& d) {
                           TensorT<S> delta = TensorT<S>::Zero(n, d.cols());
                           for (std::size_t i = 0; i < saved.size(); ++i) delta.row(saved[i]) += d.row(static_cast<Index>(i));
                           g.accumulate(ia, delta);
                         });
}

template <typename S>
Var<S> scatter_rows(Var<S> a, std::span<const Index> rows, Index n_rows) {
  const TensorT<S>& v = a.value();
  if (static_cast<Index>(rows.size()) != v.rows()) throw DimensionError("scatter_rows: one index per row required");
  TensorT<S> out = TensorT<S>::Zero(n_rows, v.cols());
  std::vector<bool> seen(static_cast<std::size_t>(std::max<Index>(n_rows, 0)));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= n_rows) throw DimensionError("scatter_rows: row index out of range");
    if (seen[static_cast<std::size_t>(rows[i])]) throw ContractError("scatter_rows: duplicate row index");
    seen[static_cast<std::size_t>(rows[i])] = true;
    out.row(rows[i]) = v.row(static_cast<Index>(i));
  }
  const NodeId ia = a.id;
  std::vector<Index> saved(rows.begin(), rows.end());
  return a.graph->record(Op::ScatterRows, {ia}, std::move(out),
                         [ia, saved = std::move(saved)](Graph<S>& g, const TensorT<S>& d) {
                           TensorT<S> delta(static_cast<Index>(saved.size()), d.cols());
                           for (std::size_t i = 0; i < saved.size(); ++i) delta.row(static_cast<Index>(i)) = d.row(saved[i]);
                           g.accumulate(ia, delta);
                         });
}

template <typename S>
Var<S> scale_rows(Var<S> a, Var<S> w) {
  require_same_graph(a, w, "scale_rows");
  if (w.value().cols() != 1 || w.value().rows() != a.value().rows()) {
    throw DimensionError("scale_rows: weights " + shape_string(w.value()) + " for " + shape_string(a.value()));
  }
  TensorT<S> out = a.value();
  for (Index i = 0; i < out.rows(); ++i) out.row(i) *= w.value()(i, 0);
  const NodeId ia = a.id, iw = w.id;
  return a.graph->record(Op::ScaleRows, {ia, iw}, std::move(out), [ia, iw](Graph<S>& g, const TensorT<S>& d) {
    const TensorT<S>& av = g.value(ia);
    const TensorT<S>& wv = g.value(iw);
    if (g.requires_grad(ia)) {
      TensorT<S> da = d;
      for (Index i = 0; i < da.rows(); ++i) da.row(i) *= wv(i, 0);
      g.accumulate(ia, da);
    }
    if (g.requires_grad(iw)) {
      TensorT<S> dw(wv.rows(), 1);
      for (Index i = 0; i < dw.rows(); ++i) dw(i, 0) = d.row(i).dot(av.row(i));
      g.accumulate(iw, dw);
    }
  });
}

template <typename S>
Var<S> column(Var<S> a, Index j) {
  const TensorT<S>& v = a.value();
  if (j < 0 || j >= v.cols()) throw DimensionError("column: index out of range");
  TensorT<S> out = v.col(j);
  const NodeId ia = a.id;
  const Index r = v.rows(), c = v.cols();
  return a.graph->record(Op::Column, {ia}, std::move(out), [ia, j, r, c](Graph<S>& g, const TensorT<S>& d) {
    TensorT<S> delta = TensorT<S>::Zero(r, c);
    delta.col(j) = d.col(0);
    g.accumulate(ia, delta);
  });
}

template <typename S>
Var<S> stack_rows(Var<S> top, Var<S> bottom) {
  require_same_graph(top, bottom, "stack_rows");
  const TensorT<S>& a = top.value();
  const TensorT<S>& b = bottom.value();
  if (a.cols() != b.cols()) throw DimensionError("stack_rows: column counts differ");
  TensorT<S> out(a.rows() + b.rows(), a.cols());
  out.topRows(a.rows()) = a;
  out.bottomRows(b.rows()) = b;
  const NodeId it = top.id, ib = bottom.id;
  const Index ra = a.rows(), rb = b.rows();
  return top.graph->record(Op::StackRows, {it, ib}, std::move(out), [it, ib, ra, rb](Graph<S>& g, const TensorT<S>& d) {
    g.accumulate(it, d.topRows(ra));
    g.accumulate(ib, d.bottomRows(rb));
  });
}

template <typename S>
Var<S> rms_norm(Var<S> x, Var<S> gain, S eps) {
  require_same_graph(x, gain, "rms_norm");
  const TensorT<S>& xv = x.value();
  const TensorT<S>& gv = gain.value();
  if (gv.rows() != 1 || gv.cols() != xv.cols()) throw DimensionError("rms_norm: gain must be 1 x " + std::to_string(xv.cols()));
  const Index n = xv.rows(), d = xv.cols();
  TensorT<S> normalized(n, d);
  std::vector<S> denom(static_cast<std::size_t>(n));
  std::vector<bool> clamped(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    const S ms = xv.row(i).squaredNorm() / static_cast<S>(d);
    const S r = std::sqrt(ms);
    clamped[static_cast<std::size_t>(i)] = !(r > eps);
    const S den = r > eps ? r : eps;
    denom[static_cast<std::size_t>(i)] = den;
    normalized.row(i) = xv.row(i) / den;
  }
  TensorT<S> out = normalized;
  for (Index i = 0; i < n; ++i) out.row(i) = out.row(i).cwiseProduct(gv.row(0));
  const NodeId ix = x.id, ig = gain.id;
  return x.graph->record(
      Op::RmsNorm, {ix, ig}, std::move(out),
      [ix, ig, normalized = std::move(normalized), denom = std::move(denom), clamped = std::move(clamped)](
          Graph<S>& g, const TensorT<S>& dy) {
        const TensorT<S>& gv = g.value(ig);
        const Index n = dy.rows(), d = dy.cols();
        if (g.requires_grad(ig)) g.accumulate(ig, dy.cwiseProduct(normalized).colwise().sum());
        if (!g.requires_grad(ix)) return;
        TensorT<S> dx(n, d);
        for (Index i = 0; i < n; ++i) {
          const auto dxhat = dy.row(i).cwiseProduct(gv.row(0));
          const S den = denom[static_cast<std::size_t>(i)];
          if (clamped[static_cast<std::size_t>(i)]) {
            dx.row(i) = dxhat / den;
          } else {
            const S proj = dxhat.dot(normalized.row(i)) / static_cast<S>(d);
            dx.row(i) = (dxhat - normalized.row(i) * proj) / den;
          }
        }
        g.accumulate(ix, dx);
      });
}

template <typename S>
Var<S> rope(Var<S> x, Index head_dim, std::span<const Index> positions, S base) {
  const TensorT<S>& xv = x.value();
  if (head_dim <= 0 || head_dim % 2 != 0 || xv.cols() % head_dim != 0) {
    throw DimensionError("rope: head_dim must be even and divide the row width");
  }
  if (static_cast<Index>(positions.size()) != xv.rows()) throw DimensionError("rope: one position per row required");
  const Index half = head_dim / 2;
  const Index n_heads = xv.cols() / head_dim;
  // cos/sin tables, one row per input row.
  TensorT<S> cs(xv.rows(), half), sn(xv.rows(), half);
  for (Index r = 0; r < xv.rows(); ++r) {
    for (Index i = 0; i < half; ++i) {
      const S inv_freq = std::pow(base, -static_cast<S>(2 * i) / static_cast<S>(head_dim));
      const S angle = static_cast<S>(positions[static_cast<std::size_t>(r)]) * inv_freq;
      cs(r, i) = std::cos(angle);
      sn(r, i) = std::sin(angle);
    }
  }
  TensorT<S> out(xv.rows(), xv.cols());
  for (Index r = 0; r < xv.rows(); ++r) {
    for (Index h = 0; h < n_heads; ++h) {
      const Index o = h * head_dim;
      for (Index i = 0; i < half; ++i) {
        const S a = xv(r, o + i), b = xv(r, o + i + half);
        out(r, o + i) = a * cs(r, i) - b * sn(r, i);
        out(r, o + i + half) = a * sn(r, i) + b * cs(r, i);
      }
    }
  }
  const NodeId ix = x.id;
  return x.graph->record(Op::Rope, {ix}, std::move(out),
                         [ix, cs = std::move(cs), sn = std::move(sn), half, n_heads, head_dim](Graph<S>& g,
                                                                                               const TensorT<S>& dy) {
                           TensorT<S> dx(dy.rows(), dy.cols());
                           for (Index r = 0; r < dy.rows(); ++r) {
                             for (Index h = 0; h < n_heads; ++h) {
                               const Index o = h * head_dim;
                               for (Index i = 0; i < half; ++i) {
                                 const S a = dy(r, o + i), b = dy(r, o + i + half);
                                 dx(r, o + i) = a * cs(r, i) + b * sn(r, i);
                                 dx(r, o + i + half) = -a * sn(r, i) + b * cs(r, i);
                               }
                             }
                           }
                           g.accumulate(ix, dx);
                         });
}

template <typename S>
Var<S> attention(Var<S> q, Var<S> k, Var<S> v, const AttentionLayout& L, std::vector<TensorT<S>>* probs_out) {
  require_same_graph(q, k, "attention");
  require_same_graph(q, v, "attention");
  const TensorT<S>& qv = q.value();
  const TensorT<S>& kv = k.value();
  const TensorT<S>& vv = v.value();
  if (L.n_heads <= 0 || L.n_kv_heads <= 0 || L.n_heads % L.n_kv_heads != 0) {
    throw DimensionError("attention: n_kv_heads must divide n_heads");
  }
  if (qv.rows() != L.n_seqs * L.q_len || qv.cols() != L.n_heads * L.head_dim) {
    throw DimensionError("attention: q has shape " + shape_string(qv));
  }
  if (kv.rows() != L.n_seqs * L.kv_len || kv.cols() != L.n_kv_heads * L.head_dim || vv.rows() != kv.rows() ||
      vv.cols() != kv.cols()) {
    throw DimensionError("attention: k/v have shapes " + shape_string(kv) + ", " + shape_string(vv));
  }
  if (L.q_offset + L.q_len > L.kv_len) throw DimensionError("attention: queries extend past the keys");

  const Index group = L.n_heads / L.n_kv_heads;
  const Index dh = L.head_dim;
  const S inv_sqrt = S(1) / std::sqrt(static_cast<S>(dh));
  std::vector<TensorT<S>> probs(static_cast<std::size_t>(L.n_seqs * L.n_heads));
  TensorT<S> out = TensorT<S>::Zero(qv.rows(), qv.cols());

  for (Index b = 0; b < L.n_seqs; ++b) {
    for (Index h = 0; h < L.n_heads; ++h) {
      const Index kvh = h / group;
      TensorT<S>& p = probs[static_cast<std::size_t>(b * L.n_heads + h)];
      p = TensorT<S>::Zero(L.q_len, L.kv_len);
      for (Index i = 0; i < L.q_len; ++i) {
        const Index qi = b * L.q_len + i;
        const Index last = L.q_offset + i;  // inclusive
        S mx = -std::numeric_limits<S>::infinity();
        for (Index j = 0; j <= last; ++j) {
          const Index kj = b * L.kv_len + j;
          S s = 0;
          for (Index c = 0; c < dh; ++c) s += qv(qi, h * dh + c) * kv(kj, kvh * dh + c);
          s *= inv_sqrt;
          p(i, j) = s;
          mx = std::max(mx, s);
        }
        S total = 0;
        for (Index j = 0; j <= last; ++j) {
          const S e = std::exp(p(i, j) - mx);
          p(i, j) = e;
          total += e;
        }
        for (Index j = 0; j <= last; ++j) p(i, j) /= total;
        for (Index j = 0; j <= last; ++j) {
          const S w = p(i, j);
          const Index vj = b * L.kv_len + j;
          for (Index c = 0; c < dh; ++c) out(qi, h * dh + c) += w * vv(vj, kvh * dh + c);
        }
      }
    }
  }
  if (probs_out != nullptr) *probs_out = probs;

  const NodeId iq = q.id, ik = k.id, iv = v.id;
  return q.graph->record(
      Op::Attention, {iq, ik, iv}, std::move(out),
      [iq, ik, iv, L, group, dh, inv_sqrt, probs = std::move(probs)](Graph<S>& g, const TensorT<S>& dout) {
        const TensorT<S>& qv = g.value(iq);
        const TensorT<S>& kv = g.value(ik);
        const TensorT<S>& vv = g.value(iv);
        TensorT<S> dq = TensorT<S>::Zero(qv.rows(), qv.cols());
        TensorT<S> dk = TensorT<S>::Zero(kv.rows(), kv.cols());
        TensorT<S> dv = TensorT<S>::Zero(vv.rows(), vv.cols());
        std::vector<S> dp(static_cast<std::size_t>(L.kv_len));
        for (Index b = 0; b < L.n_seqs; ++b) {
          for (Index h = 0; h < L.n_heads; ++h) {
            const Index kvh = h / group;
            const TensorT<S>& p = probs[static_cast<std::size_t>(b * L.n_heads + h)];
            for (Index i = 0; i < L.q_len; ++i) {
              const Index qi = b * L.q_len + i;
              const Index last = L.q_offset + i;
              S weighted = 0;
              for (Index j = 0; j <= last; ++j) {
                const Index vj = b * L.kv_len + j;
                S s = 0;
                for (Index c = 0; c < dh; ++c) s += dout(qi, h * dh + c) * vv(vj, kvh * dh + c);
                dp[static_cast<std::size_t>(j)] = s;
                weighted += s * p(i, j);
              }
              for (Index j = 0; j <= last; ++j) {
                const Index kj = b * L.kv_len + j;
                const S pij = p(i, j);
                const S ds = pij * (dp[static_cast<std::size_t>(j)] - weighted) * inv_sqrt;
                for (Index c = 0; c < dh; ++c) {
                  dq(qi, h * dh + c) += ds * kv(kj, kvh * dh + c);
                  dk(kj, kvh * dh + c) += ds * qv(qi, h * dh + c);
                  dv(kj, kvh * dh + c) += pij * dout(qi, h * dh + c);
                }
              }
            }
          }
        }
        g.accumulate(iq, dq);
        g.accumulate(ik, dk);
        g.accumulate(iv, dv);
      });
}

template <typename S>
Var<S> swiglu(Var<S> a, Var<S> b) {
  require_same_graph(a, b, "swiglu");
  require_same_shape(a.value(), b.value(), "swiglu");
  const TensorT<S>& av = a.value();
  TensorT<S> sig(av.rows(), av.cols());
  for (Index i = 0; i < av.size(); ++i) sig.data()[i] = S(1) / (S(1) + std::exp(-av.data()[i]));
  TensorT<S> silu = av.cwiseProduct(sig);
  TensorT<S> out = silu.cwiseProduct(b.value());
  const NodeId ia = a.id, ib = b.id;
  return a.graph->record(Op::SwiGlu, {ia, ib}, std::move(out),
                         [ia, ib, sig = std::move(sig), silu = std::move(silu)](Graph<S>& g, const TensorT<S>& d) {
                           const TensorT<S>& av = g.value(ia);
                           const TensorT<S>& bv = g.value(ib);
                           if (g.requires_grad(ia)) {
                             TensorT<S> dsilu(av.rows(), av.cols());
                             for (Index i = 0; i < av.size(); ++i) {
                               const S s = sig.data()[i];
                               dsilu.data()[i] = s + av.data()[i] * s * (S(1) - s);
                             }
                             g.accumulate(ia, d.cwiseProduct(bv).cwiseProduct(dsilu));
                           }
                           if (g.requires_grad(ib)) g.accumulate(ib, d.cwiseProduct(silu));
                         });
}

template <typename S>
Var<S> softmax_rows(Var<S> a) {
  TensorT<S> y = depthlab::softmax_rows<S>(a.value());
  const NodeId ia = a.id;
  TensorT<S> saved = y;
  return a.graph->record(Op::SoftmaxRows, {ia}, std::move(y),
                         [ia, saved = std::move(saved)](Graph<S>& g, const TensorT<S>& d) {
                           TensorT<S> dx = saved.cwiseProduct(d);
                           for (Index i = 0; i < dx.rows(); ++i) {
                             const S dot = dx.row(i).sum();
                             dx.row(i) -= saved.row(i) * dot;
                           }
                           g.accumulate(ia, dx);
                         });
}

template <typename S>
Var<S> topk_gates(Var<S> probs, Index k, std::vector<std::vector<Index>>* selected_out) {
  const TensorT<S>& p = probs.value();
  if (k < 1 || k > p.cols()) throw DomainError("topk_gates: k must lie in [1, " + std::to_string(p.cols()) + "]");
  std::vector<std::vector<Index>> selected(static_cast<std::size_t>(p.rows()));
  std::vector<S> totals(static_cast<std::size_t>(p.rows()));
  TensorT<S> out = TensorT<S>::Zero(p.rows(), p.cols());
  std::vector<Index> order(static_cast<std::size_t>(p.cols()));
  for (Index i = 0; i < p.rows(); ++i) {
    std::iota(order.begin(), order.end(), Index{0});
    std::stable_sort(order.begin(), order.end(), [&](Index x, Index y) { return p(i, x) > p(i, y); });
    auto& sel = selected[static_cast<std::size_t>(i)];
    sel.assign(order.begin(), order.begin() + k);
    S total = 0;
    for (Index j : sel) total += p(i, j);
    totals[static_cast<std::size_t>(i)] = total;
    for (Index j : sel) out(i, j) = p(i, j) / total;
  }
  if (selected_out != nullptr) *selected_out = selected;
  const NodeId ip = probs.id;
  return probs.graph->record(
      Op::TopKGates, {ip}, std::move(out),
      [ip, selected = std::move(selected), totals = std::move(totals)](Graph<S>& g, const TensorT<S>& d) {
        const TensorT<S>& p = g.value(ip);
        TensorT<S> dp = TensorT<S>::Zero(p.rows(), p.cols());
        for (Index i = 0; i < p.rows(); ++i) {
          const auto& sel = selected[static_cast<std::size_t>(i)];
          const S total = totals[static_cast<std::size_t>(i)];
          S weighted = 0;
          for (Index j : sel) weighted += d(i, j) * p(i, j);
          for (Index j : sel) dp(i, j) = d(i, j) / total - weighted / (total * total);
        }
        g.accumulate(ip, dp);
      });
}

template <typename S>
Var<S> logsumexp_rows(Var<S> a) {
  const TensorT<S>& x = a.value();
  TensorT<S> out(x.rows(), 1);
  TensorT<S> soft(x.rows(), x.cols());
  for (Index i = 0; i < x.rows(); ++i) {
    const S mx = x.row(i).maxCoeff();
    S total = 0;
    for (Index j = 0; j < x.cols(); ++j) {
      soft(i, j) = std::exp(x(i, j) - mx);
      total += soft(i, j);
    }
    soft.row(i) /= total;
    out(i, 0) = mx + std::log(total);
  }
  const NodeId ia = a.id;
  return a.graph->record(Op::LogSumExpRows, {ia}, std::move(out),
                         [ia, soft = std::move(soft)](Graph<S>& g, const TensorT<S>& d) {
                           TensorT<S> dx = soft;
                           for (Index i = 0; i < dx.rows(); ++i) dx.row(i) *= d(i, 0);
                           g.accumulate(ia, dx);
                         });
}

template <typename S>
Var<S> cross_entropy(Var<S> logits, std::span<const int> targets) {
  const TensorT<S>& x = logits.value();
  if (static_cast<Index>(targets.size()) != x.rows()) throw DimensionError("cross_entropy: one target per row required");
  if (x.rows() == 0) throw ContractError("cross_entropy: no prediction targets");
  TensorT<S> soft(x.rows(), x.cols());
  S total_loss = 0;
  for (Index i = 0; i < x.rows(); ++i) {
    const int t = targets[static_cast<std::size_t>(i)];
    if (t < 0 || t >= x.cols()) throw InputError("cross_entropy: target " + std::to_string(t) + " out of range");
    const S mx = x.row(i).maxCoeff();
    S total = 0;
    for (Index j = 0; j < x.cols(); ++j) {
      soft(i, j) = std::exp(x(i, j) - mx);
      total += soft(i, j);
    }
    soft.row(i) /= total;
    total_loss += mx + std::log(total) - x(i, t);
  }
  const S n = static_cast<S>(x.rows());
  TensorT<S> out(1, 1);
  out(0, 0) = total_loss / n;
  const NodeId il = logits.id;
  std::vector<int> saved(targets.begin(), targets.end());
  return logits.graph->record(Op::CrossEntropy, {il}, std::move(out),
                              [il, soft = std::move(soft), saved = std::move(saved), n](Graph<S>& g, const TensorT<S>& d) {
                                TensorT<S> dx = soft;
                                for (std::size_t i = 0; i < saved.size(); ++i) dx(static_cast<Index>(i), saved[i]) -= S(1);
                                dx *= d(0, 0) / n;
                                g.accumulate(il, dx);
                              });
}

#define DEPTHLAB_INSTANTIATE_OPS(S)                                                                   \
  template class Graph<S>;                                                                            \
  template Var<S> add(Var<S>, Var<S>);                                                                \
  template Var<S> sub(Var<S>, Var<S>);                                                                \
  template Var<S> mul(Var<S>, Var<S>);                                                                \
  template Var<S> scale(Var<S>, S);                                                                   \
  template Var<S> add_row(Var<S>, Var<S>);                                                            \
  template Var<S> matmul(Var<S>, Var<S>);                                                             \
  template Var<S> sum(Var<S>);                                                                        \
  template Var<S> mean(Var<S>);                                                                       \
  template Var<S> mean_rows(Var<S>);                                                                  \
  template Var<S> dot_const(Var<S>, const TensorT<S>&);                                               \
  template Var<S> embedding(Var<S>, std::span<const int>);                                            \
  template Var<S> gather_rows(Var<S>, std::span<const Index>);                                        \
  template Var<S> scatter_rows(Var<S>, std::span<const Index>, Index);                                \
  template Var<S> scale_rows(Var<S>, Var<S>);                                                         \
  template Var<S> column(Var<S>, Index);                                                              \
  template Var<S> stack_rows(Var<S>, Var<S>);                                                         \
  template Var<S> rms_norm(Var<S>, Var<S>, S);                                                        \
  template Var<S> rope(Var<S>, Index, std::span<const Index>, S);                                     \
  template Var<S> attention(Var<S>, Var<S>, Var<S>, const AttentionLayout&, std::vector<TensorT<S>>*); \
  template Var<S> swiglu(Var<S>, Var<S>);                                                             \
  template Var<S> softmax_rows(Var<S>);                                                               \
  template Var<S> topk_gates(Var<S>, Index, std::vector<std::vector<Index>>*);                        \
  template Var<S> logsumexp_rows(Var<S>);                                                             \
  template Var<S> cross_entropy(Var<S>, std::span<const int>);

DEPTHLAB_INSTANTIATE_OPS(double)
DEPTHLAB_INSTANTIATE_OPS(long double)

#undef DEPTHLAB_INSTANTIATE_OPS

}  // namespace depthlab
