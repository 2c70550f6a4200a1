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
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "depthlab/rng.hpp"
#include "depthlab/tensor.hpp"

namespace depthlab::theory {

enum class CheckKind {
  Equality,   // |empirical - target| <= max(tol * |target|, 4 SE)
  Bound,      // empirical <= target + 2 SE
  Condition,  // deterministic property; pass decided by the check itself
};

const char* kind_name(CheckKind kind);

struct Check {
  std::string name;
  CheckKind kind = CheckKind::Equality;
  double empirical = 0.0;
  double target = 0.0;  // analytic value or upper bound
  double se = 0.0;
  double tolerance = 0.0;
  bool pass = false;
};

/// How verdicts are decided. The corrupted policy (self-test) zeroes the
/// tolerance, drops the standard-error allowance and halves every bound, so
/// a correct engine must fail under it.
struct Policy {
  double tolerance_scale = 1.0;
  bool se_allowance = true;
  double bound_scale = 1.0;

  static Policy corrupted() { return {0.0, false, 0.5}; }
};

struct McOptions {
  Index trials = 1000;
  std::uint64_t seed = 0;
  Index grid_index = 0;
  Policy policy{};
};

struct TheoremCheckReport {
  std::string theorem;
  std::vector<std::pair<std::string, std::string>> point;
  Index trials = 0;
  std::uint64_t seed = 0;
  Index grid_index = 0;
  std::vector<Check> checks;
  /// Auxiliary measured quantities (gains, slack, per-group variants).
  std::vector<std::pair<std::string, double>> stats;

  bool pass() const;
  const Check& check(const std::string& name) const;
  double stat(const std::string& name) const;
};

Check equality_check(std::string name, double empirical, double target, double se, double tol, const Policy& policy);
Check bound_check(std::string name, double empirical, double bound, double se, const Policy& policy);

/// Mean and standard error of independent samples.
std::pair<double, double> mean_se(const std::vector<double>& x);

/// Unbiased variance pooled over independent columns (one series each) and
/// its standard error.
std::pair<double, double> pooled_variance(const Eigen::MatrixXd& samples);

double spectral_norm(const Eigen::MatrixXd& m);

// --- Sparse residual recursion r <- r + W (D r) -------------------------

enum class ResidualSampler {
  Dense,      // explicit d x d Gaussian W per layer
  Projected,  // W (D r) drawn directly as N(0, (alpha/d) |D r|^2 I)
};

struct ResidualParams {
  Index d = 64;
  Index depth = 16;
  double alpha = 1.0;
  double p = 0.5;
  ResidualSampler sampler = ResidualSampler::Projected;
};

/// One trajectory; returns r_0 in row 0 and r_L in row 1. The weight and
/// mask draws come from separate substreams of `stream`, and with
/// masked = false every mask is all-ones without consuming draws.
Eigen::MatrixXd simulate_residual(const ResidualParams& params, const Rng& stream, bool masked = true);

TheoremCheckReport check_residual_sparsity_bound(const ResidualParams& params, const McOptions& options,
                                                 double tol = 0.10);

// --- No-normalization transformer stack with a common feature mask -------

struct TransformerParams {
  Index d = 32;
  Index depth = 8;
  Index n_heads = 4;
  Index n_tokens = 16;
  Index ffn_hidden = 64;
  double p = 0.5;
  double gain = 1.0;  // weights ~ N(0, gain^2 / fan_in)
  /// Rescale so every value head has unit spectral norm, |W_O| = 1/sqrt(H)
  /// and the FFN weights have unit spectral norm.
  bool normalize = false;
  Index inner_samples = 32;  // (R_0, masks) draws per sampled stack
};

/// Each trial samples one weight stack; the verdict requires the bound to
/// hold for every trial.
TheoremCheckReport check_transformer_bound(const TransformerParams& params, const McOptions& options);

// --- Weight-decay recursion W <- (1 - eta lambda) W - eta G --------------

struct WeightDecayParams {
  double eta = 0.1;
  double lambda = 1.0;
  double sigma_g = 1.0;
  std::vector<Index> checkpoints{10, 100, 1000};
  /// Lambdas for the monotonicity check at the last checkpoint.
  std::vector<double> lambda_grid{0.01, 0.1, 1.0};
  Index rows = 4, cols = 4;
  double w0_mean = 0.5, w0_var = 1.0;
};

/// Closed-form per-entry Var(W_t).
double weight_decay_variance(double eta, double lambda, double sigma_g2, double var0, Index t);

TheoremCheckReport check_weight_decay_contraction(const WeightDecayParams& params, const McOptions& options,
                                                  double tol = 0.05);

// --- Averaging results ---------------------------------------------------

TheoremCheckReport check_sequence_length_variance(const std::vector<Index>& lengths, double sigma2,
                                                  const McOptions& options, double tol = 0.05);

TheoremCheckReport check_gqa_variance(const std::vector<Index>& groups, Index n, double sigma_v2, Index value_dim,
                                      const McOptions& options, double tol = 0.05);

struct MoeParams {
  std::vector<Index> ks{1, 2, 4, 8};
  double sigma2 = 1.0;
  Index dim = 8;
  double jacobian_var = 0.04;
  Index jacobian_k = 4;
};

TheoremCheckReport check_moe_variance(const MoeParams& params, const McOptions& options, double tol = 0.05);

struct MoeGradientParams {
  Index d = 16;
  Index hidden = 32;
  Index n_experts = 8;
  Index k = 2;
};

/// One-layer pre-norm top-k block with uniform gates on random instances:
/// the chain-rule identity for the block Jacobian and the spectral-norm
/// inequality |dy/dx| <= 1 + (1/k) |sum_i J_i| |J_norm|.
TheoremCheckReport check_moe_gradient_bound(const MoeGradientParams& params, const McOptions& options);

// --- Reporting -------------------------------------------------------------

nlohmann::json to_json(const TheoremCheckReport& report);
std::string summary_header();
/// One row per check: theorem,grid_index,check,kind,empirical,target,se,tolerance,verdict.
std::string summary_csv(const std::vector<TheoremCheckReport>& reports);

}  // namespace depthlab::theory
