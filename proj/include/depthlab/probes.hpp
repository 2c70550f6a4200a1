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

#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "depthlab/model.hpp"

namespace depthlab::probes {

/// Population variance across dimensions per token, averaged over tokens.
double hidden_variance(const Tensor& h);

/// Fraction of parameters with |w| < eps (strict), embeddings included.
double weight_sparsity(const Params& params, double eps);

enum class SparsityMode {
  Literal,        // count over all T x T entries (masked zeros included)
  CausalSupport,  // count over j <= i, normalized by T(T+1)/2
};

const char* mode_name(SparsityMode mode);

/// Near-zero fraction of one attention map.
double attention_map_sparsity(const Tensor& a, double eps, SparsityMode mode);

struct HeadGrid {
  std::vector<std::vector<double>> per_head;  // [layer][head]
  double global = 0.0;                        // mean over layers and heads
};

/// Per-(layer, head) sparsity averaged over the captured sequences.
HeadGrid attention_sparsity(const ForwardTrace& trace, Index n_heads, double eps, SparsityMode mode);

/// -sum_j A_ij ln A_ij per query row, with 0 ln 0 = 0.
std::vector<double> query_entropy(const Tensor& a);
/// Mean over queries of query_entropy.
double head_entropy(const Tensor& a);
HeadGrid attention_entropy(const ForwardTrace& trace, Index n_heads);

struct KurtosisResult {
  std::vector<double> per_dim;  // m4 / m2^2 per dimension (0 where degenerate)
  std::vector<bool> degenerate;  // m2 < 1e-12, excluded from `layer`
  double layer = 0.0;
};

/// Fourth standardized moment of each column over rows (tokens).
KurtosisResult kurtosis(const Tensor& h);

/// Mean over sequences of ||J - I||_F for block l.
double jacobian_deviation(const Model& model, const Batch& batch, Index l, Index position = -1);

struct ProbeOptions {
  std::vector<double> weight_thresholds{1e-1, 1e-2, 1e-4};
  std::vector<double> attn_thresholds{1e-3, 1e-4, 1e-6};
  bool jacobian = true;
  Index jacobian_position = -1;
};

struct ProbeReport {
  double last_layer_var = 0.0;
  std::vector<double> per_layer_var;
  std::vector<double> attn_block_var;
  std::vector<double> mlp_block_var;
  std::map<double, double> weight_sparsity;
  std::map<double, HeadGrid> attn_sparsity_literal;
  std::map<double, HeadGrid> attn_sparsity_causal;
  HeadGrid attn_entropy;
  std::vector<KurtosisResult> kurtosis;  // per layer output
  std::vector<double> jacobian_dev;      // empty unless requested
};

/// The full battery on one snapshot and probe batch.
ProbeReport run_probes(const Model& model, const Batch& batch, const ProbeOptions& options = {});

nlohmann::json to_json(const ProbeReport& report);

/// One CSV grid per (layer, sequence, head): attn_l{L}_s{S}_h{H}.csv.
void write_attention_csv(const ForwardTrace& trace, Index n_heads, const std::string& dir);

}  // namespace depthlab::probes
