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
#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "depthlab/tensor.hpp"

namespace depthlab {

using NodeId = std::int32_t;

enum class Op : std::uint8_t {
  Leaf,
  Constant,
  Add,
  Sub,
  Mul,
  Scale,
  AddRow,
  MatMul,
  Sum,
  Mean,
  MeanRows,
  DotConst,
  Embedding,
  GatherRows,
  ScatterRows,
  ScaleRows,
  Column,
  StackRows,
  RmsNorm,
  Rope,
  Attention,
  SwiGlu,
  SoftmaxRows,
  TopKGates,
  LogSumExpRows,
  CrossEntropy,
};

const char* op_name(Op op);

template <typename Scalar>
class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while its graph lives.
template <typename Scalar>
struct Var {
  Graph<Scalar>* graph = nullptr;
  NodeId id = -1;

  const TensorT<Scalar>& value() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
};

/// Tape of operation records for reverse-mode differentiation. Nodes are
/// appended in evaluation order, so the tape is topologically sorted by
/// construction and backward() walks it once in reverse.
///
/// A node only keeps a backward closure when at least one input requires a
/// gradient; forward-only evaluation stores values and nothing else.
/// A Graph is confined to one thread.
template <typename Scalar>
class Graph {
 public:
  using T = TensorT<Scalar>;
  /// Receives the gradient flowing into the node and accumulates into its
  /// inputs through Graph::accumulate.
  using BackwardFn = std::function<void(Graph&, const T&)>;

  struct Node {
    Op op = Op::Constant;
    std::vector<NodeId> inputs;
    T value;
    T grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Differentiable leaf (a parameter or an input we want gradients for).
  Var<Scalar> leaf(T value);
  Var<Scalar> constant(T value);

  Var<Scalar> record(Op op, std::vector<NodeId> inputs, T value, BackwardFn backward);

  /// Reverse pass from a 1x1 node with seed 1.
  void backward(Var<Scalar> loss);
  /// Reverse pass from an arbitrary node with an explicit seed of its shape.
  void backward(Var<Scalar> output, const T& seed);

  /// Gradient of the last backward pass; zeros when nothing reached the node.
  T grad(Var<Scalar> v) const;
  const T& value(NodeId id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  const Node& node(NodeId id) const { return nodes_[static_cast<std::size_t>(id)]; }
  bool requires_grad(NodeId id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  void accumulate(NodeId id, const T& delta);

 private:
  std::vector<Node> nodes_;
};

template <typename Scalar>
const TensorT<Scalar>& Var<Scalar>::value() const {
  return graph->value(id);
}

/// Layout of a (grouped-query) causal attention call. Rows of q are
/// n_seqs blocks of q_len rows, rows of k and v are n_seqs blocks of kv_len
/// rows. Query i of a block sits at absolute position q_offset + i and sees
/// keys 0..q_offset+i. Query head h reads key/value head h / (n_heads /
/// n_kv_heads).
struct AttentionLayout {
  Index n_heads = 1;
  Index n_kv_heads = 1;
  Index head_dim = 1;
  Index n_seqs = 1;
  Index q_len = 1;
  Index kv_len = 1;
  Index q_offset = 0;
};

// Operations. Shapes are checked and DimensionError is thrown on mismatch.

template <typename S> Var<S> add(Var<S> a, Var<S> b);
template <typename S> Var<S> sub(Var<S> a, Var<S> b);
template <typename S> Var<S> mul(Var<S> a, Var<S> b);
template <typename S> Var<S> scale(Var<S> a, S factor);
/// a + 1 * row, row is 1 x a.cols().
template <typename S> Var<S> add_row(Var<S> a, Var<S> row);
template <typename S> Var<S> matmul(Var<S> a, Var<S> b);
template <typename S> Var<S> sum(Var<S> a);
template <typename S> Var<S> mean(Var<S> a);
/// Column means, 1 x cols.
template <typename S> Var<S> mean_rows(Var<S> a);
/// sum(a .* c) for a constant c.
template <typename S> Var<S> dot_const(Var<S> a, const TensorT<S>& c);
template <typename S> Var<S> embedding(Var<S> table, std::span<const int> ids);
template <typename S> Var<S> gather_rows(Var<S> a, std::span<const Index> rows);
/// n_rows x cols result with row i of a placed at row rows[i], zeros
/// elsewhere. Indices must be distinct.
template <typename S> Var<S> scatter_rows(Var<S> a, std::span<const Index> rows, Index n_rows);
/// Row i of a scaled by w(i, 0).
template <typename S> Var<S> scale_rows(Var<S> a, Var<S> w);
template <typename S> Var<S> column(Var<S> a, Index j);
template <typename S> Var<S> stack_rows(Var<S> top, Var<S> bottom);
/// x / max(rms(x), eps) * gain per row; gain is 1 x cols.
template <typename S> Var<S> rms_norm(Var<S> x, Var<S> gain, S eps);
/// Rotary embedding on each head_dim slice, rotating pairs (i, i + head_dim/2).
template <typename S> Var<S> rope(Var<S> x, Index head_dim, std::span<const Index> positions, S base);
/// Causal softmax attention. When probs is non-null it receives one
/// q_len x kv_len matrix per (sequence, head), indexed seq * n_heads + head.
template <typename S>
Var<S> attention(Var<S> q, Var<S> k, Var<S> v, const AttentionLayout& layout,
                 std::vector<TensorT<S>>* probs = nullptr);
/// silu(a) .* b
template <typename S> Var<S> swiglu(Var<S> a, Var<S> b);
template <typename S> Var<S> softmax_rows(Var<S> a);
/// Keeps the k largest entries of each row (ties resolved toward the lower
/// index) renormalized to sum to one, zeros elsewhere. `selected` receives
/// the chosen column indices per row in descending order of value.
template <typename S>
Var<S> topk_gates(Var<S> probs, Index k, std::vector<std::vector<Index>>* selected = nullptr);
/// n x 1 row-wise log-sum-exp.
template <typename S> Var<S> logsumexp_rows(Var<S> a);
/// Mean next-token cross-entropy, 1 x 1.
template <typename S> Var<S> cross_entropy(Var<S> logits, std::span<const int> targets);

}  // namespace depthlab
