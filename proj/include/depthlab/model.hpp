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

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "depthlab/graph.hpp"
#include "depthlab/rng.hpp"
#include "depthlab/tensor.hpp"

namespace depthlab {

struct MoeConfig {
  Index n_experts = 4;
  Index top_k = 2;
  Index n_shared = 0;
  double lb_coeff = 0.01;
  double z_coeff = 0.001;
  /// Hidden width of each routed/shared expert; 0 means mlp_hidden.
  Index expert_hidden = 0;
};

struct ModelConfig {
  Index depth = 2;
  Index d_model = 64;
  Index n_heads = 4;
  Index n_kv_heads = 4;
  Index mlp_hidden = 256;
  Index vocab_size = 257;
  Index max_seq_len = 256;
  std::optional<MoeConfig> moe;
  double init_std = 0.02;
  double rope_base = 10000.0;
  double norm_eps = 1e-5;

  Index head_dim() const { return d_model / n_heads; }
  Index group_size() const { return n_heads / n_kv_heads; }
  Index expert_hidden() const { return moe && moe->expert_hidden > 0 ? moe->expert_hidden : mlp_hidden; }
  /// Throws ConfigError naming the offending field ("model.n_kv_heads", ...).
  void validate() const;
};

bool operator==(const MoeConfig& a, const MoeConfig& b);
bool operator==(const ModelConfig& a, const ModelConfig& b);

template <typename S>
struct FfnParams {
  TensorT<S> w_gate;  // d x hidden
  TensorT<S> w_up;    // d x hidden
  TensorT<S> w_down;  // hidden x d
};

template <typename S>
struct LayerParams {
  TensorT<S> attn_norm;  // 1 x d
  TensorT<S> wq;         // d x H*dh
  TensorT<S> wk;         // d x KV*dh
  TensorT<S> wv;         // d x KV*dh
  TensorT<S> wo;         // H*dh x d
  TensorT<S> ffn_norm;   // 1 x d
  FfnParams<S> ffn;      // dense layers only
  TensorT<S> router;     // d x E, MoE layers only
  std::vector<FfnParams<S>> experts;
  std::vector<FfnParams<S>> shared;
};

template <typename S>
struct ParamsT {
  TensorT<S> embed;  // V x d
  std::vector<LayerParams<S>> layers;
  TensorT<S> final_norm;  // 1 x d
  TensorT<S> unembed;     // d x V
};

/// Calls f(name, tensor) for every parameter in a fixed canonical order.
template <typename P, typename F>
void for_each_param(P& params, F&& f) {
  f(std::string("embed"), params.embed);
  for (std::size_t i = 0; i < params.layers.size(); ++i) {
    auto& l = params.layers[i];
    const std::string p = "layers." + std::to_string(i) + ".";
    auto ffn = [&](const std::string& prefix, auto& w) {
      f(prefix + "w_gate", w.w_gate);
      f(prefix + "w_up", w.w_up);
      f(prefix + "w_down", w.w_down);
    };
    f(p + "attn_norm", l.attn_norm);
    f(p + "wq", l.wq);
    f(p + "wk", l.wk);
    f(p + "wv", l.wv);
    f(p + "wo", l.wo);
    f(p + "ffn_norm", l.ffn_norm);
    if (l.experts.empty()) {
      ffn(p + "ffn.", l.ffn);
    } else {
      f(p + "router", l.router);
      for (std::size_t e = 0; e < l.experts.size(); ++e) ffn(p + "experts." + std::to_string(e) + ".", l.experts[e]);
    }
    for (std::size_t e = 0; e < l.shared.size(); ++e) ffn(p + "shared." + std::to_string(e) + ".", l.shared[e]);
  }
  f(std::string("final_norm"), params.final_norm);
  f(std::string("unembed"), params.unembed);
}

/// True for parameters exempt from weight decay (norm gains).
bool is_norm_gain(const std::string& name);

template <typename S>
struct ModelT {
  ModelConfig config;
  ParamsT<S> params;

  Index parameter_count() const;
  template <typename U>
  ModelT<U> cast() const;
};

using Model = ModelT<double>;
using Params = ParamsT<double>;

/// Zero-initialized parameters with the shapes implied by `config`.
template <typename S>
ParamsT<S> zero_params(const ModelConfig& config);

/// Throws ConfigError naming the first parameter whose shape disagrees.
template <typename S>
void check_shapes(const ModelConfig& config, const ParamsT<S>& params);

Model build_model(const ModelConfig& config, const Rng& rng);

/// Sets every branch output projection (attention W_O and FFN/expert W_down)
/// to zero, so every block is the identity.
void zero_block_outputs(Model& model);

bool params_equal(const Params& a, const Params& b);

/// n_seqs sequences of seq_len tokens each, concatenated.
struct Batch {
  Index n_seqs = 0;
  Index seq_len = 0;
  std::vector<int> tokens;

  Batch() = default;
  Batch(Index n, Index t, std::vector<int> ids);
  Index n_tokens() const { return n_seqs * seq_len; }
  /// Sequence i alone.
  Batch sequence(Index i) const;
  /// First `len` tokens of every sequence.
  Batch prefix(Index len) const;
  /// Tokens 1.. of every sequence (next-token targets).
  std::vector<int> shifted_targets() const;
};

template <typename S>
struct RoutingTrace {
  std::vector<std::vector<Index>> selected;  // per token, descending gate
  TensorT<S> gates;                          // n x E, zero off the selected set
  TensorT<S> probs;                          // n x E router softmax
};

template <typename S>
struct LayerTrace {
  TensorT<S> x_in;      // x_l
  TensorT<S> x_mid;     // x_l + Attn(LN(x_l))
  TensorT<S> x_out;     // y_l = x_{l+1}
  TensorT<S> attn_out;  // attention branch
  TensorT<S> ffn_out;   // FFN branch
  /// T x T per (sequence, head), index seq * H + head. Empty unless captured.
  std::vector<TensorT<S>> attn_maps;
  RoutingTrace<S> routing;  // empty for dense layers
};

template <typename S>
struct ForwardTraceT {
  Index n_seqs = 0;
  Index seq_len = 0;
  std::vector<LayerTrace<S>> layers;
  const TensorT<S>& final_hidden() const { return layers.back().x_out; }
};

using ForwardTrace = ForwardTraceT<double>;

struct LayerOverride {
  enum class Kind { None, Skip, Affine };
  Kind kind = Kind::None;
  Tensor a;  // d x d, applied as x -> A x + b per token
  Tensor b;  // 1 x d

  static LayerOverride skip() { return {Kind::Skip, {}, {}}; }
  static LayerOverride affine(Tensor a, Tensor b) { return {Kind::Affine, std::move(a), std::move(b)}; }
};

struct ForwardOptions {
  bool capture_attention = false;
  /// Empty, or one entry per layer.
  std::vector<LayerOverride> overrides;
};

template <typename S>
struct ForwardResult {
  TensorT<S> logits;
  ForwardTraceT<S> trace;
};

template <typename S>
ForwardResult<S> forward(const ModelT<S>& model, const Batch& batch, const ForwardOptions& options = {});

struct LossParts {
  double total = 0.0;
  double cross_entropy = 0.0;
  double load_balance = 0.0;
  double router_z = 0.0;
};

template <typename S>
struct LossPartsT {
  S total = 0, cross_entropy = 0, load_balance = 0, router_z = 0;
};

/// Next-token loss: each sequence of the batch (length >= 2) is split into
/// inputs tokens[0..T-2] and targets tokens[1..T-1].
LossParts loss(const Model& model, const Batch& batch, const ForwardOptions& options = {});

/// Loss and its gradient with respect to every parameter.
template <typename S>
LossPartsT<S> loss_and_grad(const ModelT<S>& model, const Batch& batch, ParamsT<S>* grads);

/// Builds the total loss on `g` with params bound to caller-supplied nodes;
/// used by gradient checks that perturb a single tensor.
template <typename S>
Var<S> loss_graph(Graph<S>& g, const ModelT<S>& model, const Batch& batch,
                  const std::function<Var<S>(Graph<S>&, const std::string&, const TensorT<S>&)>& bind);

Model swap_layers(const Model& model, Index l1, Index l2);

ForwardTrace skip_layer_forward(const Model& model, const Batch& batch, Index s);

/// Loss with block l replaced by x -> A x + b.
LossParts replace_layer_linear_forward(const Model& model, const Batch& batch, Index l, const Tensor& a,
                                       const Tensor& b);

/// Runs block l alone on residual-stream input x (n_seqs * seq_len rows).
Tensor block_forward(const Model& model, const Tensor& x, Index l, Index n_seqs);

/// d x d Jacobian of block l's output at token `position` of the (single)
/// sequence in `batch` with respect to that token's block input, other
/// tokens' inputs held fixed. Row i holds d y_i / d x. position < 0 selects
/// the last token.
Tensor block_jacobian(const Model& model, const Batch& batch, Index l, Index position = -1);

/// Jacobian of a row map R^{1 x d} -> R^{1 x m}; row i holds d y_i / d x.
template <typename S>
TensorT<S> row_jacobian(const std::function<Var<S>(Graph<S>&, Var<S>)>& map, const TensorT<S>& row);

// Checkpoint archive: magic, version, config text, named tensors with shapes
// and little-endian double payloads.
void save_checkpoint(const Model& model, const std::string& path);
Model load_checkpoint(const std::string& path);

std::string model_config_to_text(const ModelConfig& config);
/// Sets `model.<field>` from its text value; unknown fields throw ConfigError.
void set_model_field(ModelConfig& config, const std::string& field, const std::string& value);
/// Parses "model.key = value" lines (other sections are ignored).
ModelConfig model_config_from_text(const std::string& text);

}  // namespace depthlab
