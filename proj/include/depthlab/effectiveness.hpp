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

#include <string>
#include <vector>

#include <json.hpp>

#include "depthlab/model.hpp"

namespace depthlab::effectiveness {

// All scores read the eval batch as next-token data: each sequence's
// leading seq_len - 1 tokens are the inputs, losses are cross-entropy.

struct CausalScore {
  /// L x L; cell (s, l) is defined for l > s, NaN elsewhere and where
  /// every sequence had a zero denominator.
  Tensor matrix;
  double global = 0.0;
  /// (sequence, s, l) evaluations excluded for a zero denominator.
  Index undefined = 0;
};

struct PermutationScore {
  /// L x L, symmetric, NaN on the diagonal.
  Tensor matrix;
  double global = 0.0;
  double base_loss = 0.0;
};

struct UsefulnessOptions {
  double alpha = 0.1;
  Index fit_size = 4096;  // token vectors used for each fit
  double ridge = 1e-6;    // relative to trace(X^T X) / d
  int refine_sweeps = 3;
};

struct UsefulnessScore {
  double base_loss = 0.0;
  std::vector<double> linear_loss;
  std::vector<double> ratio;
  std::vector<bool> useful;
  /// Squared fit residual on the fit set for the fitted map and for A = I, b = 0.
  std::vector<double> fit_residual;
  std::vector<double> identity_residual;
  double global = 0.0;
  Index effective = 0;
  Index wasted = 0;
};

struct EffectivenessReport {
  CausalScore causal;
  PermutationScore permutation;
  UsefulnessScore usefulness;
};

struct AffineFit {
  Tensor a;  // d_out x d_in, y = A x + b
  Tensor b;  // 1 x d_out
};

/// Ridge-damped affine least squares over rows of x and y, centred, with
/// damping ridge * trace(Xc^T Xc) / d followed by `sweeps - 1` iterated
/// refinement passes toward the undamped solution. ridge = 0 throws
/// DomainError when the normal equations are singular.
AffineFit fit_affine(const Tensor& x, const Tensor& y, double ridge, int sweeps = 3);

CausalScore causal_score(const Model& model, const Batch& eval);
PermutationScore permutation_score(const Model& model, const Batch& eval);
UsefulnessScore usefulness_score(const Model& model, const Batch& fit, const Batch& eval,
                                 const UsefulnessOptions& options = {});

EffectivenessReport evaluate(const Model& model, const Batch& fit, const Batch& eval,
                             const UsefulnessOptions& options = {});

nlohmann::json to_json(const EffectivenessReport& report);

/// Square grid with a leading index column; NaN cells are written as "nan".
void write_matrix_csv(const Tensor& m, const std::string& path);

}  // namespace depthlab::effectiveness
