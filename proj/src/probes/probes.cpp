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
#include "depthlab/probes.hpp"

#include <fmt/format.h>

#include <cmath>
#include <filesystem>
#include <fstream>

namespace depthlab::probes {

double hidden_variance(const Tensor& h) {
  if (h.cols() < 2) throw DomainError("hidden_variance: needs at least two dimensions");
  if (h.rows() < 1) throw DomainError("hidden_variance: needs at least one token");
  double total = 0.0;
  for (Index i = 0; i < h.rows(); ++i) {
    const double mean = h.row(i).mean();
    total += (h.row(i).array() - mean).square().sum();
  }
  return total / static_cast<double>(h.rows() * h.cols());
}

double weight_sparsity(const Params& params, double eps) {
  if (!(eps > 0.0)) throw DomainError("weight_sparsity: threshold must be positive");
  Index small = 0, total = 0;
  for_each_param(params, [&](const std::string&, const Tensor& t) {
    small += (t.array().abs() < eps).count();
    total += t.size();
  });
  return total == 0 ? 0.0 : static_cast<double>(small) / static_cast<double>(total);
}

const char* mode_name(SparsityMode mode) { return mode == SparsityMode::Literal ? "literal" : "causal_support"; }

double attention_map_sparsity(const Tensor& a, double eps, SparsityMode mode) {
  if (!(eps > 0.0)) throw DomainError("attention_sparsity: threshold must be positive");
  if (a.rows() != a.cols() || a.rows() == 0) throw DimensionError("attention_sparsity: map must be square");
  const Index t = a.rows();
  Index count = 0;
  for (Index i = 0; i < t; ++i) {
    const Index limit = mode == SparsityMode::Literal ? t : i + 1;
    for (Index j = 0; j < limit; ++j) count += a(i, j) < eps ? 1 : 0;
  }
  const double denom = mode == SparsityMode::Literal ? static_cast<double>(t * t) : static_cast<double>(t * (t + 1) / 2);
  return static_cast<double>(count) / denom;
}

namespace {

template <typename F>
HeadGrid per_head_mean(const ForwardTrace& trace, Index n_heads, F&& value) {
  HeadGrid g;
  double sum = 0.0;
  Index cells = 0;
  for (const auto& layer : trace.layers) {
    if (layer.attn_maps.empty()) throw ContractError("attention probes need a trace with captured attention");
    std::vector<double> heads(static_cast<std::size_t>(n_heads), 0.0);
    for (Index s = 0; s < trace.n_seqs; ++s)
      for (Index h = 0; h < n_heads; ++h) heads[static_cast<std::size_t>(h)] += value(layer.attn_maps[static_cast<std::size_t>(s * n_heads + h)]);
    for (auto& v : heads) {
      v /= static_cast<double>(trace.n_seqs);
      sum += v;
      ++cells;
    }
    g.per_head.push_back(std::move(heads));
  }
  g.global = cells == 0 ? 0.0 : sum / static_cast<double>(cells);
  return g;
}

}  // namespace

HeadGrid attention_sparsity(const ForwardTrace& trace, Index n_heads, double eps, SparsityMode mode) {
  return per_head_mean(trace, n_heads, [&](const Tensor& a) { return attention_map_sparsity(a, eps, mode); });
}

std::vector<double> query_entropy(const Tensor& a) {
  std::vector<double> out(static_cast<std::size_t>(a.rows()), 0.0);
  for (Index i = 0; i < a.rows(); ++i) {
    double h = 0.0;
    for (Index j = 0; j < a.cols(); ++j) {
      const double p = a(i, j);
      if (p > 0.0) h -= p * std::log(p);
    }
    out[static_cast<std::size_t>(i)] = h;
  }
  return out;
}

double head_entropy(const Tensor& a) {
  const auto q = query_entropy(a);
  double s = 0.0;
  for (double v : q) s += v;
  return q.empty() ? 0.0 : s / static_cast<double>(q.size());
}

HeadGrid attention_entropy(const ForwardTrace& trace, Index n_heads) {
  return per_head_mean(trace, n_heads, [](const Tensor& a) { return head_entropy(a); });
}

KurtosisResult kurtosis(const Tensor& h) {
  if (h.rows() < 2) throw DomainError("kurtosis: needs at least two tokens");
  KurtosisResult r;
  double sum = 0.0;
  Index used = 0;
  for (Index j = 0; j < h.cols(); ++j) {
    const double mean = h.col(j).mean();
    const auto c = (h.col(j).array() - mean);
    const double m2 = c.square().mean();
    const double m4 = c.square().square().mean();
    const bool degenerate = m2 < 1e-12;
    r.degenerate.push_back(degenerate);
    r.per_dim.push_back(degenerate ? 0.0 : m4 / (m2 * m2));
    if (!degenerate) {
      sum += r.per_dim.back();
      ++used;
    }
  }
  if (used == 0) throw DomainError("kurtosis: every dimension is degenerate");
  r.layer = sum / static_cast<double>(used);
  return r;
}

double jacobian_deviation(const Model& model, const Batch& batch, Index l, Index position) {
  if (batch.n_seqs < 1) throw ContractError("jacobian_deviation: empty batch");
  const Index d = model.config.d_model;
  double total = 0.0;
  for (Index s = 0; s < batch.n_seqs; ++s) {
    const Tensor j = block_jacobian(model, batch.sequence(s), l, position);
    total += (j - Tensor::Identity(d, d)).norm();
  }
  return total / static_cast<double>(batch.n_seqs);
}

ProbeReport run_probes(const Model& model, const Batch& batch, const ProbeOptions& options) {
  ForwardOptions fo;
  fo.capture_attention = true;
  const ForwardTrace trace = forward(model, batch, fo).trace;
  const Index H = model.config.n_heads;
  ProbeReport r;
  for (const auto& layer : trace.layers) {
    r.per_layer_var.push_back(hidden_variance(layer.x_out));
    r.attn_block_var.push_back(hidden_variance(layer.attn_out));
    r.mlp_block_var.push_back(hidden_variance(layer.ffn_out));
    r.kurtosis.push_back(kurtosis(layer.x_out));
  }
  r.last_layer_var = r.per_layer_var.back();
  for (double eps : options.weight_thresholds) r.weight_sparsity[eps] = weight_sparsity(model.params, eps);
  for (double eps : options.attn_thresholds) {
    r.attn_sparsity_literal[eps] = attention_sparsity(trace, H, eps, SparsityMode::Literal);
    r.attn_sparsity_causal[eps] = attention_sparsity(trace, H, eps, SparsityMode::CausalSupport);
  }
  r.attn_entropy = attention_entropy(trace, H);
  if (options.jacobian) {
    for (Index l = 0; l < model.config.depth; ++l) {
      r.jacobian_dev.push_back(jacobian_deviation(model, batch, l, options.jacobian_position));
    }
  }
  return r;
}

namespace {

nlohmann::json grid_json(const HeadGrid& g) { return {{"per_head", g.per_head}, {"global", g.global}}; }

std::string key(double eps) { return fmt::format("{:g}", eps); }

}  // namespace

nlohmann::json to_json(const ProbeReport& r) {
  nlohmann::json j;
  j["last_layer_var"] = r.last_layer_var;
  j["per_layer_var"] = r.per_layer_var;
  j["attn_block_var"] = r.attn_block_var;
  j["mlp_block_var"] = r.mlp_block_var;
  for (const auto& [eps, v] : r.weight_sparsity) j["weight_sparsity"][key(eps)] = v;
  for (const auto& [eps, g] : r.attn_sparsity_literal) j["attn_sparsity"]["literal"][key(eps)] = grid_json(g);
  for (const auto& [eps, g] : r.attn_sparsity_causal) j["attn_sparsity"]["causal_support"][key(eps)] = grid_json(g);
  j["attn_entropy"] = grid_json(r.attn_entropy);
  nlohmann::json k = nlohmann::json::array();
  for (const auto& kr : r.kurtosis) {
    std::vector<Index> flagged;
    for (std::size_t i = 0; i < kr.degenerate.size(); ++i)
      if (kr.degenerate[i]) flagged.push_back(static_cast<Index>(i));
    k.push_back({{"layer", kr.layer}, {"per_dim", kr.per_dim}, {"degenerate_dims", flagged}});
  }
  j["kurtosis"] = k;
  j["jacobian_dev"] = r.jacobian_dev;
  return j;
}

void write_attention_csv(const ForwardTrace& trace, Index n_heads, const std::string& dir) {
  std::filesystem::create_directories(dir);
  for (std::size_t l = 0; l < trace.layers.size(); ++l) {
    const auto& maps = trace.layers[l].attn_maps;
    if (maps.empty()) throw ContractError("write_attention_csv: trace has no captured attention");
    for (Index s = 0; s < trace.n_seqs; ++s) {
      for (Index h = 0; h < n_heads; ++h) {
        const Tensor& a = maps[static_cast<std::size_t>(s * n_heads + h)];
        std::ofstream f(fmt::format("{}/attn_l{}_s{}_h{}.csv", dir, l, s, h));
        for (Index j = 0; j < a.cols(); ++j) f << (j ? "," : "") << "k" << j;
        f << '\n';
        for (Index i = 0; i < a.rows(); ++i) {
          for (Index j = 0; j < a.cols(); ++j) f << (j ? "," : "") << fmt::format("{:.17g}", a(i, j));
          f << '\n';
        }
      }
    }
  }
}

}  // namespace depthlab::probes
