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
#include <numeric>

#include "depthlab/model.hpp"

namespace depthlab {

namespace {

template <typename S>
struct FfnVars {
  Var<S> w_gate, w_up, w_down;
};

// Same member names as LayerParams / ParamsT so for_each_param walks both.
template <typename S>
struct LayerVars {
  Var<S> attn_norm, wq, wk, wv, wo, ffn_norm;
  FfnVars<S> ffn;
  Var<S> router;
  std::vector<FfnVars<S>> experts;
  std::vector<FfnVars<S>> shared;
};

template <typename S>
struct ParamVars {
  Var<S> embed;
  std::vector<LayerVars<S>> layers;
  Var<S> final_norm, unembed;
};

template <typename S>
using Binder = std::function<Var<S>(Graph<S>&, const std::string&, const TensorT<S>&)>;

template <typename S>
ParamVars<S> bind_params(Graph<S>& g, const ParamsT<S>& p, const Binder<S>& bind) {
  ParamVars<S> pv;
  pv.layers.resize(p.layers.size());
  for (std::size_t i = 0; i < p.layers.size(); ++i) {
    pv.layers[i].experts.resize(p.layers[i].experts.size());
    pv.layers[i].shared.resize(p.layers[i].shared.size());
  }
  std::vector<const TensorT<S>*> values;
  for_each_param(p, [&](const std::string&, const TensorT<S>& t) { values.push_back(&t); });
  std::size_t i = 0;
  for_each_param(pv, [&](const std::string& name, Var<S>& v) { v = bind(g, name, *values[i++]); });
  return pv;
}

template <typename S>
Binder<S> constant_binder() {
  return [](Graph<S>& g, const std::string&, const TensorT<S>& t) { return g.constant(t); };
}

std::vector<Index> positions(Index n_seqs, Index seq_len) {
  std::vector<Index> pos(static_cast<std::size_t>(n_seqs * seq_len));
  for (Index s = 0; s < n_seqs; ++s)
    for (Index t = 0; t < seq_len; ++t) pos[static_cast<std::size_t>(s * seq_len + t)] = t;
  return pos;
}

template <typename S>
Var<S> attention_branch(const LayerVars<S>& lv, const ModelConfig& c, Var<S> xn_q, Var<S> xn_kv,
                        const AttentionLayout& lay, const std::vector<Index>& pos_q, const std::vector<Index>& pos_kv,
                        std::vector<TensorT<S>>* maps) {
  const S base = static_cast<S>(c.rope_base);
  auto q = rope(matmul(xn_q, lv.wq), c.head_dim(), std::span<const Index>(pos_q), base);
  auto k = rope(matmul(xn_kv, lv.wk), c.head_dim(), std::span<const Index>(pos_kv), base);
  auto v = matmul(xn_kv, lv.wv);
  return matmul(attention(q, k, v, lay, maps), lv.wo);
}

template <typename S>
Var<S> ffn_apply(const FfnVars<S>& f, Var<S> x) {
  return matmul(swiglu(matmul(x, f.w_gate), matmul(x, f.w_up)), f.w_down);
}

template <typename S>
struct Aux {
  std::vector<Var<S>> lb;
  std::vector<Var<S>> z;
};

template <typename S>
Var<S> ffn_branch(const LayerVars<S>& lv, const ModelConfig& c, Var<S> xn, RoutingTrace<S>* routing, Aux<S>* aux) {
  if (!c.moe) return ffn_apply(lv.ffn, xn);
  const Index n = xn.rows();
  const Index E = c.moe->n_experts;
  const Index k = c.moe->top_k;
  auto logits = matmul(xn, lv.router);
  auto probs = softmax_rows(logits);
  std::vector<std::vector<Index>> selected;
  auto gates = topk_gates(probs, k, &selected);

  std::vector<std::vector<Index>> rows(static_cast<std::size_t>(E));
  for (Index t = 0; t < n; ++t)
    for (Index e : selected[static_cast<std::size_t>(t)]) rows[static_cast<std::size_t>(e)].push_back(t);

  std::optional<Var<S>> out;
  for (Index e = 0; e < E; ++e) {
    const auto& r = rows[static_cast<std::size_t>(e)];
    if (r.empty()) continue;
    const std::span<const Index> idx(r);
    auto y = ffn_apply(lv.experts[static_cast<std::size_t>(e)], gather_rows(xn, idx));
    auto w = gather_rows(column(gates, e), idx);
    auto contrib = scatter_rows(scale_rows(y, w), idx, n);
    out = out ? add(*out, contrib) : contrib;
  }
  for (const auto& sh : lv.shared) out = add(*out, ffn_apply(sh, xn));

  if (aux != nullptr) {
    // E * sum_e f_e P_e with f_e the routed fraction (constant) and P_e the
    // mean router probability.
    TensorT<S> f(1, E);
    for (Index e = 0; e < E; ++e) {
      f(0, e) = static_cast<S>(E) * static_cast<S>(rows[static_cast<std::size_t>(e)].size()) /
                static_cast<S>(n * k);
    }
    aux->lb.push_back(dot_const(mean_rows(probs), f));
    auto lse = logsumexp_rows(logits);
    aux->z.push_back(mean(mul(lse, lse)));
  }
  if (routing != nullptr) {
    routing->selected = std::move(selected);
    routing->gates = gates.value();
    routing->probs = probs.value();
  }
  return *out;
}

template <typename S>
Var<S> block(const LayerVars<S>& lv, const ModelConfig& c, Var<S> x, Index n_seqs, Index seq_len, LayerTrace<S>* tr,
             bool capture_attention, Aux<S>* aux) {
  Graph<S>& g = *x.graph;
  const S eps = static_cast<S>(c.norm_eps);
  const auto pos = positions(n_seqs, seq_len);
  const AttentionLayout lay{c.n_heads, c.n_kv_heads, c.head_dim(), n_seqs, seq_len, seq_len, 0};
  auto xn = rms_norm(x, lv.attn_norm, eps);
  std::vector<TensorT<S>>* maps = (tr != nullptr && capture_attention) ? &tr->attn_maps : nullptr;
  auto a = attention_branch(lv, c, xn, xn, lay, pos, pos, maps);
  auto mid = add(x, a);
  auto f = ffn_branch(lv, c, rms_norm(mid, lv.ffn_norm, eps), tr != nullptr ? &tr->routing : nullptr, aux);
  auto y = add(mid, f);
  if (tr != nullptr) {
    tr->x_in = x.value();
    tr->x_mid = mid.value();
    tr->x_out = y.value();
    tr->attn_out = a.value();
    tr->ffn_out = f.value();
  }
  (void)g;
  return y;
}

template <typename S>
struct GraphOut {
  Var<S> logits;
  std::optional<Var<S>> lb, z;
};

template <typename S>
GraphOut<S> forward_graph(Graph<S>& g, const ParamVars<S>& pv, const ModelConfig& c, const Batch& in,
                          const ForwardOptions& opt, ForwardTraceT<S>* trace, bool want_aux) {
  if (in.seq_len < 1 || in.n_seqs < 1) throw InputError("forward: empty batch");
  if (in.seq_len > c.max_seq_len) {
    throw InputError("forward: sequence length " + std::to_string(in.seq_len) + " exceeds max_seq_len " +
                     std::to_string(c.max_seq_len));
  }
  for (int t : in.tokens) {
    if (t < 0 || t >= c.vocab_size) {
      throw InputError("forward: token " + std::to_string(t) + " outside vocabulary of " + std::to_string(c.vocab_size));
    }
  }
  if (!opt.overrides.empty() && static_cast<Index>(opt.overrides.size()) != c.depth) {
    throw ContractError("forward: overrides must have one entry per layer");
  }
  if (trace != nullptr) {
    trace->n_seqs = in.n_seqs;
    trace->seq_len = in.seq_len;
    trace->layers.assign(static_cast<std::size_t>(c.depth), {});
  }
  Aux<S> aux;
  auto x = embedding(pv.embed, std::span<const int>(in.tokens));
  for (Index l = 0; l < c.depth; ++l) {
    const auto& lv = pv.layers[static_cast<std::size_t>(l)];
    LayerTrace<S>* tr = trace != nullptr ? &trace->layers[static_cast<std::size_t>(l)] : nullptr;
    const LayerOverride::Kind kind =
        opt.overrides.empty() ? LayerOverride::Kind::None : opt.overrides[static_cast<std::size_t>(l)].kind;
    if (kind == LayerOverride::Kind::None) {
      x = block(lv, c, x, in.n_seqs, in.seq_len, tr, opt.capture_attention, want_aux ? &aux : nullptr);
      continue;
    }
    Var<S> y = x;
    if (kind == LayerOverride::Kind::Affine) {
      const auto& o = opt.overrides[static_cast<std::size_t>(l)];
      const Index d = c.d_model;
      if (o.a.rows() != d || o.a.cols() != d || o.b.size() != d) {
        throw DimensionError("replace_layer: A must be d x d and b length d, got " + shape_string(o.a) + ", " +
                             shape_string(o.b));
      }
      const TensorT<S> at = o.a.transpose().template cast<S>();
      TensorT<S> b = o.b.template cast<S>();
      b.resize(1, d);
      y = add_row(matmul(x, g.constant(at)), g.constant(b));
    }
    if (tr != nullptr) {
      tr->x_in = x.value();
      tr->x_mid = kind == LayerOverride::Kind::Skip ? x.value() : y.value();
      tr->x_out = y.value();
      tr->attn_out = TensorT<S>::Zero(x.rows(), x.cols());
      tr->ffn_out = TensorT<S>::Zero(x.rows(), x.cols());
    }
    x = y;
  }
  GraphOut<S> out;
  out.logits = matmul(rms_norm(x, pv.final_norm, static_cast<S>(c.norm_eps)), pv.unembed);
  if (!aux.lb.empty()) {
    const S inv = S(1) / static_cast<S>(aux.lb.size());
    Var<S> lb = aux.lb[0], z = aux.z[0];
    for (std::size_t i = 1; i < aux.lb.size(); ++i) {
      lb = add(lb, aux.lb[i]);
      z = add(z, aux.z[i]);
    }
    out.lb = scale(lb, inv);
    out.z = scale(z, inv);
  }
  return out;
}

template <typename S>
struct LossVars {
  Var<S> total, ce;
  std::optional<Var<S>> lb, z;
};

template <typename S>
LossVars<S> loss_vars(Graph<S>& g, const ParamVars<S>& pv, const ModelConfig& c, const Batch& batch,
                      const ForwardOptions& opt) {
  if (batch.seq_len < 2) throw ContractError("loss: sequences of length >= 2 are required for next-token targets");
  const Batch inputs = batch.prefix(batch.seq_len - 1);
  const std::vector<int> targets = batch.shifted_targets();
  GraphOut<S> out = forward_graph(g, pv, c, inputs, opt, static_cast<ForwardTraceT<S>*>(nullptr), true);
  LossVars<S> lv;
  lv.ce = cross_entropy(out.logits, std::span<const int>(targets));
  lv.total = lv.ce;
  if (out.lb) {
    lv.lb = out.lb;
    lv.z = out.z;
    lv.total = add(lv.total, add(scale(*out.lb, static_cast<S>(c.moe->lb_coeff)), scale(*out.z, static_cast<S>(c.moe->z_coeff))));
  }
  return lv;
}

template <typename S>
LossPartsT<S> parts_of(const LossVars<S>& lv) {
  LossPartsT<S> p;
  p.total = lv.total.value()(0, 0);
  p.cross_entropy = lv.ce.value()(0, 0);
  if (lv.lb) {
    p.load_balance = lv.lb->value()(0, 0);
    p.router_z = lv.z->value()(0, 0);
  }
  return p;
}

}  // namespace

template <typename S>
ForwardResult<S> forward(const ModelT<S>& model, const Batch& batch, const ForwardOptions& options) {
  Graph<S> g;
  const auto pv = bind_params(g, model.params, constant_binder<S>());
  ForwardResult<S> r;
  GraphOut<S> out = forward_graph(g, pv, model.config, batch, options, &r.trace, false);
  r.logits = out.logits.value();
  return r;
}

LossParts loss(const Model& model, const Batch& batch, const ForwardOptions& options) {
  Graph<double> g;
  const auto pv = bind_params(g, model.params, constant_binder<double>());
  const auto p = parts_of(loss_vars(g, pv, model.config, batch, options));
  return {p.total, p.cross_entropy, p.load_balance, p.router_z};
}

template <typename S>
LossPartsT<S> loss_and_grad(const ModelT<S>& model, const Batch& batch, ParamsT<S>* grads) {
  Graph<S> g;
  const auto pv = bind_params<S>(g, model.params,
                                 [](Graph<S>& gr, const std::string&, const TensorT<S>& t) { return gr.leaf(t); });
  const auto lv = loss_vars(g, pv, model.config, batch, ForwardOptions{});
  g.backward(lv.total);
  if (grads != nullptr) {
    *grads = zero_params<S>(model.config);
    std::vector<Var<S>> vars;
    for_each_param(pv, [&](const std::string&, const Var<S>& v) { vars.push_back(v); });
    std::size_t i = 0;
    for_each_param(*grads, [&](const std::string&, TensorT<S>& t) { t = g.grad(vars[i++]); });
  }
  return parts_of(lv);
}

template <typename S>
Var<S> loss_graph(Graph<S>& g, const ModelT<S>& model, const Batch& batch,
                  const std::function<Var<S>(Graph<S>&, const std::string&, const TensorT<S>&)>& bind) {
  const auto pv = bind_params<S>(g, model.params, bind);
  return loss_vars(g, pv, model.config, batch, ForwardOptions{}).total;
}

ForwardTrace skip_layer_forward(const Model& model, const Batch& batch, Index s) {
  if (s < 0 || s >= model.config.depth) throw ContractError("skip_layer_forward: layer " + std::to_string(s) + " out of range");
  ForwardOptions opt;
  opt.overrides.assign(static_cast<std::size_t>(model.config.depth), LayerOverride{});
  opt.overrides[static_cast<std::size_t>(s)] = LayerOverride::skip();
  return forward(model, batch, opt).trace;
}

LossParts replace_layer_linear_forward(const Model& model, const Batch& batch, Index l, const Tensor& a, const Tensor& b) {
  if (l < 0 || l >= model.config.depth) throw ContractError("replace_layer: layer " + std::to_string(l) + " out of range");
  ForwardOptions opt;
  opt.overrides.assign(static_cast<std::size_t>(model.config.depth), LayerOverride{});
  opt.overrides[static_cast<std::size_t>(l)] = LayerOverride::affine(a, b);
  return loss(model, batch, opt);
}

Tensor block_forward(const Model& model, const Tensor& x, Index l, Index n_seqs) {
  const auto& c = model.config;
  if (l < 0 || l >= c.depth) throw ContractError("block_forward: layer " + std::to_string(l) + " out of range");
  if (n_seqs <= 0 || x.rows() % n_seqs != 0 || x.cols() != c.d_model) {
    throw DimensionError("block_forward: input " + shape_string(x) + " for " + std::to_string(n_seqs) + " sequences");
  }
  Graph<double> g;
  const auto pv = bind_params(g, model.params, constant_binder<double>());
  return block(pv.layers[static_cast<std::size_t>(l)], c, g.constant(x), n_seqs, x.rows() / n_seqs,
               static_cast<LayerTrace<double>*>(nullptr), false, static_cast<Aux<double>*>(nullptr))
      .value();
}

Tensor block_jacobian(const Model& model, const Batch& batch, Index l, Index position) {
  const auto& c = model.config;
  if (batch.n_seqs != 1) throw ContractError("block_jacobian: expects a single sequence");
  if (l < 0 || l >= c.depth) throw ContractError("block_jacobian: layer " + std::to_string(l) + " out of range");
  if (position < 0) position = batch.seq_len - 1;
  if (position >= batch.seq_len) throw ContractError("block_jacobian: position out of range");

  const Tensor x = forward(model, batch).trace.layers[static_cast<std::size_t>(l)].x_in;
  Graph<double> g;
  const auto pv = bind_params(g, model.params, constant_binder<double>());
  const auto& lv = pv.layers[static_cast<std::size_t>(l)];
  const double eps = c.norm_eps;

  // Keys/values of earlier tokens are constants; only the chosen token's
  // row is differentiable.
  auto row = g.leaf(x.row(position));
  auto xkv = position > 0 ? stack_rows(g.constant(x.topRows(position)), row) : row;
  std::vector<Index> pos_kv(static_cast<std::size_t>(position + 1));
  std::iota(pos_kv.begin(), pos_kv.end(), Index{0});
  const std::vector<Index> pos_q{position};
  const AttentionLayout lay{c.n_heads, c.n_kv_heads, c.head_dim(), 1, 1, position + 1, position};
  auto a = attention_branch(lv, c, rms_norm(row, lv.attn_norm, eps), rms_norm(xkv, lv.attn_norm, eps), lay, pos_q,
                            pos_kv, static_cast<std::vector<Tensor>*>(nullptr));
  auto mid = add(row, a);
  auto y = add(mid, ffn_branch(lv, c, rms_norm(mid, lv.ffn_norm, eps), static_cast<RoutingTrace<double>*>(nullptr),
                               static_cast<Aux<double>*>(nullptr)));

  const Index d = c.d_model;
  Tensor jac(d, d);
  for (Index i = 0; i < d; ++i) {
    Tensor seed = Tensor::Zero(1, d);
    seed(0, i) = 1.0;
    g.backward(y, seed);
    jac.row(i) = g.grad(row);
  }
  return jac;
}

template <typename S>
TensorT<S> row_jacobian(const std::function<Var<S>(Graph<S>&, Var<S>)>& map, const TensorT<S>& row) {
  if (row.rows() != 1) throw DimensionError("row_jacobian: input must be a single row");
  Graph<S> g;
  auto x = g.leaf(row);
  auto y = map(g, x);
  if (y.rows() != 1) throw DimensionError("row_jacobian: output must be a single row");
  TensorT<S> jac(y.cols(), row.cols());
  for (Index i = 0; i < y.cols(); ++i) {
    TensorT<S> seed = TensorT<S>::Zero(1, y.cols());
    seed(0, i) = S(1);
    g.backward(y, seed);
    jac.row(i) = g.grad(x);
  }
  return jac;
}

template ForwardResult<double> forward(const ModelT<double>&, const Batch&, const ForwardOptions&);
template ForwardResult<long double> forward(const ModelT<long double>&, const Batch&, const ForwardOptions&);
template LossPartsT<double> loss_and_grad(const ModelT<double>&, const Batch&, ParamsT<double>*);
template LossPartsT<long double> loss_and_grad(const ModelT<long double>&, const Batch&, ParamsT<long double>*);
template Var<double> loss_graph(Graph<double>&, const ModelT<double>&, const Batch&,
                                const std::function<Var<double>(Graph<double>&, const std::string&, const Tensor&)>&);
template Var<long double> loss_graph(
    Graph<long double>&, const ModelT<long double>&, const Batch&,
    const std::function<Var<long double>(Graph<long double>&, const std::string&, const TensorT<long double>&)>&);
template Tensor row_jacobian(const std::function<Var<double>(Graph<double>&, Var<double>)>&, const Tensor&);

}  // namespace depthlab
