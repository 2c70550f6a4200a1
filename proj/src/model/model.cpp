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
#include "depthlab/model.hpp"

#include <algorithm>

#include "depthlab/kvtext.hpp"

namespace depthlab {

void ModelConfig::validate() const {
  auto positive = [](Index v, const char* field) {
    if (v <= 0) throw ConfigError(std::string("model.") + field, "must be positive, got " + std::to_string(v));
  };
  positive(depth, "depth");
  positive(d_model, "d_model");
  positive(n_heads, "n_heads");
  positive(n_kv_heads, "n_kv_heads");
  positive(mlp_hidden, "mlp_hidden");
  positive(vocab_size, "vocab_size");
  positive(max_seq_len, "max_seq_len");
  if (n_heads % n_kv_heads != 0) throw ConfigError("model.n_kv_heads", "must divide n_heads");
  if (d_model % n_heads != 0) throw ConfigError("model.n_heads", "must divide d_model");
  if (head_dim() % 2 != 0) throw ConfigError("model.n_heads", "head dimension d_model / n_heads must be even");
  if (!(init_std >= 0.0)) throw ConfigError("model.init_std", "must be >= 0");
  if (!(rope_base > 0.0)) throw ConfigError("model.rope_base", "must be positive");
  if (!(norm_eps > 0.0)) throw ConfigError("model.norm_eps", "must be positive");
  if (moe) {
    positive(moe->n_experts, "moe.n_experts");
    if (moe->top_k < 1 || moe->top_k > moe->n_experts) throw ConfigError("model.moe.top_k", "must lie in [1, n_experts]");
    if (moe->n_shared < 0) throw ConfigError("model.moe.n_shared", "must be >= 0");
    if (moe->expert_hidden < 0) throw ConfigError("model.moe.expert_hidden", "must be >= 0");
    if (!(moe->lb_coeff >= 0.0)) throw ConfigError("model.moe.lb_coeff", "must be >= 0");
    if (!(moe->z_coeff >= 0.0)) throw ConfigError("model.moe.z_coeff", "must be >= 0");
  }
}

bool operator==(const MoeConfig& a, const MoeConfig& b) {
  return a.n_experts == b.n_experts && a.top_k == b.top_k && a.n_shared == b.n_shared && a.lb_coeff == b.lb_coeff &&
         a.z_coeff == b.z_coeff && a.expert_hidden == b.expert_hidden;
}

bool operator==(const ModelConfig& a, const ModelConfig& b) {
  return a.depth == b.depth && a.d_model == b.d_model && a.n_heads == b.n_heads && a.n_kv_heads == b.n_kv_heads &&
         a.mlp_hidden == b.mlp_hidden && a.vocab_size == b.vocab_size && a.max_seq_len == b.max_seq_len &&
         a.moe == b.moe && a.init_std == b.init_std && a.rope_base == b.rope_base && a.norm_eps == b.norm_eps;
}

bool is_norm_gain(const std::string& name) {
  return name.size() >= 4 && name.compare(name.size() - 4, 4, "norm") == 0;
}

template <typename S>
Index ModelT<S>::parameter_count() const {
  Index n = 0;
  for_each_param(params, [&](const std::string&, const TensorT<S>& t) { n += t.size(); });
  return n;
}

template <typename S>
template <typename U>
ModelT<U> ModelT<S>::cast() const {
  ModelT<U> out;
  out.config = config;
  out.params = zero_params<U>(config);
  std::vector<const TensorT<S>*> src;
  for_each_param(params, [&](const std::string&, const TensorT<S>& t) { src.push_back(&t); });
  std::size_t i = 0;
  for_each_param(out.params, [&](const std::string&, TensorT<U>& t) { t = src[i++]->template cast<U>(); });
  return out;
}

template <typename S>
ParamsT<S> zero_params(const ModelConfig& c) {
  c.validate();
  const Index d = c.d_model, dh = c.head_dim();
  auto z = [](Index r, Index k) { return TensorT<S>::Zero(r, k); };
  auto ffn = [&](Index hidden) { return FfnParams<S>{z(d, hidden), z(d, hidden), z(hidden, d)}; };
  ParamsT<S> p;
  p.embed = z(c.vocab_size, d);
  p.layers.resize(static_cast<std::size_t>(c.depth));
  for (auto& l : p.layers) {
    l.attn_norm = TensorT<S>::Ones(1, d);
    l.wq = z(d, c.n_heads * dh);
    l.wk = z(d, c.n_kv_heads * dh);
    l.wv = z(d, c.n_kv_heads * dh);
    l.wo = z(c.n_heads * dh, d);
    l.ffn_norm = TensorT<S>::Ones(1, d);
    if (c.moe) {
      l.router = z(d, c.moe->n_experts);
      for (Index e = 0; e < c.moe->n_experts; ++e) l.experts.push_back(ffn(c.expert_hidden()));
      for (Index e = 0; e < c.moe->n_shared; ++e) l.shared.push_back(ffn(c.expert_hidden()));
    } else {
      l.ffn = ffn(c.mlp_hidden);
    }
  }
  p.final_norm = TensorT<S>::Ones(1, d);
  p.unembed = z(d, c.vocab_size);
  return p;
}

template <typename S>
void check_shapes(const ModelConfig& config, const ParamsT<S>& params) {
  if (static_cast<Index>(params.layers.size()) != config.depth) {
    throw ConfigError("model.depth", "parameter set has " + std::to_string(params.layers.size()) + " layers");
  }
  const ParamsT<S> ref = zero_params<S>(config);
  std::vector<std::pair<std::string, std::pair<Index, Index>>> want;
  for_each_param(ref, [&](const std::string& n, const TensorT<S>& t) { want.push_back({n, {t.rows(), t.cols()}}); });
  std::size_t i = 0;
  for_each_param(params, [&](const std::string& n, const TensorT<S>& t) {
    if (i >= want.size() || want[i].first != n) throw ConfigError(n, "unexpected parameter");
    if (want[i].second != std::make_pair(t.rows(), t.cols())) {
      throw ConfigError(n, "shape " + shape_string(t) + " but config implies " +
                               shape_string(want[i].second.first, want[i].second.second));
    }
    ++i;
  });
  if (i != want.size()) throw ConfigError(want[i].first, "missing parameter");
}

Model build_model(const ModelConfig& config, const Rng& rng) {
  Model m;
  m.config = config;
  m.params = zero_params<double>(config);
  std::uint64_t index = 0;
  for_each_param(m.params, [&](const std::string& name, Tensor& t) {
    const std::uint64_t key = index++;
    if (is_norm_gain(name)) return;
    Rng sub = rng.derive({0x1417, key});
    t = gaussian(sub, t.rows(), t.cols(), 0.0, config.init_std);
  });
  return m;
}

void zero_block_outputs(Model& model) {
  for (auto& l : model.params.layers) {
    l.wo.setZero();
    l.ffn.w_down.setZero();
    for (auto& e : l.experts) e.w_down.setZero();
    for (auto& e : l.shared) e.w_down.setZero();
  }
}

bool params_equal(const Params& a, const Params& b) {
  std::vector<std::pair<std::string, const Tensor*>> la, lb;
  for_each_param(a, [&](const std::string& n, const Tensor& t) { la.push_back({n, &t}); });
  for_each_param(b, [&](const std::string& n, const Tensor& t) { lb.push_back({n, &t}); });
  if (la.size() != lb.size()) return false;
  for (std::size_t i = 0; i < la.size(); ++i) {
    if (la[i].first != lb[i].first || !bitwise_equal(*la[i].second, *lb[i].second)) return false;
  }
  return true;
}

Batch::Batch(Index n, Index t, std::vector<int> ids) : n_seqs(n), seq_len(t), tokens(std::move(ids)) {
  if (n < 0 || t < 0 || static_cast<Index>(tokens.size()) != n * t) {
    throw DimensionError("Batch: " + std::to_string(tokens.size()) + " tokens for " + std::to_string(n) + " x " +
                         std::to_string(t));
  }
}

Batch Batch::sequence(Index i) const {
  if (i < 0 || i >= n_seqs) throw ContractError("Batch::sequence: index out of range");
  const auto b = tokens.begin() + i * seq_len;
  return Batch(1, seq_len, std::vector<int>(b, b + seq_len));
}

Batch Batch::prefix(Index len) const {
  if (len < 0 || len > seq_len) throw ContractError("Batch::prefix: length out of range");
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(n_seqs * len));
  for (Index s = 0; s < n_seqs; ++s) {
    const auto b = tokens.begin() + s * seq_len;
    out.insert(out.end(), b, b + len);
  }
  return Batch(n_seqs, len, std::move(out));
}

std::vector<int> Batch::shifted_targets() const {
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(n_seqs * std::max<Index>(seq_len - 1, 0)));
  for (Index s = 0; s < n_seqs; ++s) {
    const auto b = tokens.begin() + s * seq_len;
    out.insert(out.end(), b + 1, b + seq_len);
  }
  return out;
}

Model swap_layers(const Model& model, Index l1, Index l2) {
  const Index L = model.config.depth;
  if (l1 < 0 || l1 >= L || l2 < 0 || l2 >= L) {
    throw ContractError("swap_layers: indices (" + std::to_string(l1) + ", " + std::to_string(l2) +
                        ") outside [0, " + std::to_string(L) + ")");
  }
  Model out = model;
  std::swap(out.params.layers[static_cast<std::size_t>(l1)], out.params.layers[static_cast<std::size_t>(l2)]);
  return out;
}

std::string model_config_to_text(const ModelConfig& c) {
  std::string s;
  auto put = [&](const std::string& k, const std::string& v) { s += "model." + k + " = " + v + "\n"; };
  put("depth", std::to_string(c.depth));
  put("d_model", std::to_string(c.d_model));
  put("n_heads", std::to_string(c.n_heads));
  put("n_kv_heads", std::to_string(c.n_kv_heads));
  put("mlp_hidden", std::to_string(c.mlp_hidden));
  put("vocab_size", std::to_string(c.vocab_size));
  put("max_seq_len", std::to_string(c.max_seq_len));
  put("init_std", format_real(c.init_std));
  put("rope_base", format_real(c.rope_base));
  put("norm_eps", format_real(c.norm_eps));
  put("moe.enabled", c.moe ? "true" : "false");
  if (c.moe) {
    put("moe.n_experts", std::to_string(c.moe->n_experts));
    put("moe.top_k", std::to_string(c.moe->top_k));
    put("moe.n_shared", std::to_string(c.moe->n_shared));
    put("moe.lb_coeff", format_real(c.moe->lb_coeff));
    put("moe.z_coeff", format_real(c.moe->z_coeff));
    put("moe.expert_hidden", std::to_string(c.moe->expert_hidden));
  }
  return s;
}

void set_model_field(ModelConfig& c, const std::string& f, const std::string& v) {
  const std::string path = "model." + f;
  auto integer = [&] { return static_cast<Index>(parse_int(path, v)); };
  auto real = [&] { return parse_real(path, v); };
  auto moe = [&]() -> MoeConfig& {
    if (!c.moe) c.moe = MoeConfig{};
    return *c.moe;
  };
  if (f == "depth") c.depth = integer();
  else if (f == "d_model") c.d_model = integer();
  else if (f == "n_heads") c.n_heads = integer();
  else if (f == "n_kv_heads") c.n_kv_heads = integer();
  else if (f == "mlp_hidden") c.mlp_hidden = integer();
  else if (f == "vocab_size") c.vocab_size = integer();
  else if (f == "max_seq_len") c.max_seq_len = integer();
  else if (f == "init_std") c.init_std = real();
  else if (f == "rope_base") c.rope_base = real();
  else if (f == "norm_eps") c.norm_eps = real();
  else if (f == "moe.enabled") {
    if (parse_bool(path, v)) moe();
    else c.moe.reset();
  } else if (f == "moe.n_experts") moe().n_experts = integer();
  else if (f == "moe.top_k") moe().top_k = integer();
  else if (f == "moe.n_shared") moe().n_shared = integer();
  else if (f == "moe.lb_coeff") moe().lb_coeff = real();
  else if (f == "moe.z_coeff") moe().z_coeff = real();
  else if (f == "moe.expert_hidden") moe().expert_hidden = integer();
  else throw ConfigError(path, "unknown field");
}

ModelConfig model_config_from_text(const std::string& text) {
  ModelConfig c;
  // Apply moe.enabled last so "false" wins over field order.
  std::optional<std::string> enabled;
  for (const auto& e : parse_kv_text(text)) {
    if (e.key.rfind("model.", 0) != 0) continue;
    const std::string f = e.key.substr(6);
    if (f == "moe.enabled") {
      enabled = e.value;
      continue;
    }
    set_model_field(c, f, e.value);
  }
  if (enabled) set_model_field(c, "moe.enabled", *enabled);
  c.validate();
  return c;
}

template struct ModelT<double>;
template struct ModelT<long double>;
template ModelT<long double> ModelT<double>::cast<long double>() const;
template ModelT<double> ModelT<long double>::cast<double>() const;
template ParamsT<double> zero_params<double>(const ModelConfig&);
template ParamsT<long double> zero_params<long double>(const ModelConfig&);
template void check_shapes<double>(const ModelConfig&, const ParamsT<double>&);
template void check_shapes<long double>(const ModelConfig&, const ParamsT<long double>&);

}  // namespace depthlab
