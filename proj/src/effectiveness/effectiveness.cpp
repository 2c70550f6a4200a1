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
#include "depthlab/effectiveness.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>

#include <fmt/format.h>

#include "depthlab/errors.hpp"

namespace depthlab::effectiveness {
namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

Batch inputs_of(const Batch& b) {
  if (b.seq_len < 2) throw ContractError("effectiveness: sequences need at least 2 tokens");
  return b.prefix(b.seq_len - 1);
}

void require_depth(const Model& m, const char* what) {
  if (m.config.depth < 2) throw ContractError(fmt::format("{}: needs at least 2 layers", what));
}

nlohmann::json matrix_json(const Tensor& m) {
  auto rows = nlohmann::json::array();
  for (Index i = 0; i < m.rows(); ++i) {
    auto row = nlohmann::json::array();
    for (Index j = 0; j < m.cols(); ++j) {
      if (std::isnan(m(i, j))) {
        row.push_back(nullptr);
      } else {
        row.push_back(m(i, j));
      }
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace

AffineFit fit_affine(const Tensor& x, const Tensor& y, double ridge, int sweeps) {
  const Index n = x.rows(), d = x.cols();
  if (y.rows() != n) throw DimensionError("fit_affine: " + shape_string(x) + " vs " + shape_string(y));
  if (n < 2) throw ContractError("fit_affine: need at least 2 samples");
  if (!(ridge >= 0.0)) throw DomainError("fit_affine: ridge must be >= 0");
  if (sweeps < 1) throw DomainError("fit_affine: sweeps must be >= 1");

  const Eigen::RowVectorXd mx = x.colwise().mean();
  const Eigen::RowVectorXd my = y.colwise().mean();
  const Eigen::MatrixXd xc = x.rowwise() - mx;
  const Eigen::MatrixXd yc = y.rowwise() - my;
  const Eigen::MatrixXd gram = xc.transpose() * xc;
  const Eigen::MatrixXd rhs = xc.transpose() * yc;

  double scale = gram.trace() / static_cast<double>(d);
  if (scale == 0.0) scale = 1.0;
  Eigen::MatrixXd damped = gram;
  damped.diagonal().array() += ridge * scale;
  const Eigen::LDLT<Eigen::MatrixXd> solver(damped);
  const auto diag = solver.vectorD().cwiseAbs();
  if (solver.info() != Eigen::Success || diag.minCoeff() <= 1e-13 * diag.maxCoeff()) {
    throw DomainError("fit_affine: normal equations are singular; use a positive ridge");
  }

  // Iterated Tikhonov: each pass solves for the remaining residual, so the
  // damping bias shrinks geometrically while rank-deficient directions stay 0.
  Eigen::MatrixXd coef = Eigen::MatrixXd::Zero(d, y.cols());
  for (int k = 0; k < sweeps; ++k) coef += solver.solve(rhs - gram * coef);

  AffineFit out;
  out.a = coef.transpose();
  out.b = my - mx * coef;
  return out;
}

CausalScore causal_score(const Model& model, const Batch& eval) {
  require_depth(model, "causal_score");
  const Batch in = inputs_of(eval);
  const Index n = model.config.depth, t = in.seq_len;
  const ForwardTrace base = forward(model, in).trace;

  CausalScore out;
  out.matrix = Tensor::Constant(n, n, kNaN);
  double total = 0.0;
  for (Index s = 0; s < n; ++s) {
    const ForwardTrace skip = skip_layer_forward(model, in, s);
    double row_sum = 0.0;
    Index row_cells = 0;
    for (Index l = s + 1; l < n; ++l) {
      const auto& h = base.layers[static_cast<std::size_t>(l)];
      const auto& hb = skip.layers[static_cast<std::size_t>(l)];
      const Tensor delta = h.x_out - h.x_in;
      const Tensor diff = delta - (hb.x_out - hb.x_in);
      double sum = 0.0;
      Index defined = 0;
      for (Index i = 0; i < in.n_seqs; ++i) {
        const double num = diff.middleRows(i * t, t).norm();
        const double den = delta.middleRows(i * t, t).norm();
        if (num == 0.0) {
          ++defined;
        } else if (den == 0.0) {
          ++out.undefined;
        } else {
          sum += num / den;
          ++defined;
        }
      }
      if (defined == 0) continue;
      out.matrix(s, l) = sum / static_cast<double>(defined);
      row_sum += out.matrix(s, l);
      ++row_cells;
    }
    if (row_cells > 0) total += row_sum / static_cast<double>(row_cells);
  }
  const double nn = static_cast<double>(n);
  out.global = total / (std::sqrt(nn) * nn);
  return out;
}

PermutationScore permutation_score(const Model& model, const Batch& eval) {
  require_depth(model, "permutation_score");
  const Index n = model.config.depth;
  PermutationScore out;
  out.base_loss = loss(model, eval).cross_entropy;
  if (out.base_loss == 0.0) throw ContractError("permutation_score: baseline loss is zero");
  out.matrix = Tensor::Constant(n, n, kNaN);
  double total = 0.0;
  for (Index a = 0; a < n; ++a) {
    for (Index b = a + 1; b < n; ++b) {
      const double swapped = loss(swap_layers(model, a, b), eval).cross_entropy;
      const double p = std::abs(out.base_loss - swapped) / std::abs(out.base_loss);
      out.matrix(a, b) = out.matrix(b, a) = p;
      total += p;
    }
  }
  out.global = 2.0 * total / static_cast<double>(n * (n - 1));
  return out;
}

UsefulnessScore usefulness_score(const Model& model, const Batch& fit, const Batch& eval,
                                 const UsefulnessOptions& options) {
  if (!(options.alpha >= 0.0)) throw DomainError("usefulness_score: alpha must be >= 0");
  const Index n = model.config.depth, d = model.config.d_model;
  const ForwardTrace trace = forward(model, inputs_of(fit)).trace;
  const Index rows = std::min(options.fit_size, trace.layers.front().x_in.rows());
  if (rows < d + 1) {
    throw ContractError(fmt::format("usefulness_score: {} fit vectors, need at least d + 1 = {}", rows, d + 1));
  }

  UsefulnessScore out;
  out.base_loss = loss(model, eval).cross_entropy;
  if (out.base_loss == 0.0) throw ContractError("usefulness_score: baseline loss is zero");
  for (Index l = 0; l < n; ++l) {
    const auto& lt = trace.layers[static_cast<std::size_t>(l)];
    const Tensor x = lt.x_in.topRows(rows);
    const Tensor y = lt.x_out.topRows(rows);
    const AffineFit f = fit_affine(x, y, options.ridge, options.refine_sweeps);
    const Tensor pred = (x * f.a.transpose()).rowwise() + f.b.row(0);
    out.fit_residual.push_back((pred - y).squaredNorm());
    out.identity_residual.push_back((x - y).squaredNorm());
    const double lin = replace_layer_linear_forward(model, eval, l, f.a, f.b).cross_entropy;
    out.linear_loss.push_back(lin);
    out.ratio.push_back(lin / out.base_loss);
    out.useful.push_back(out.ratio.back() > 1.0 + options.alpha);
    if (out.useful.back()) ++out.effective;
  }
  out.wasted = n - out.effective;
  out.global = static_cast<double>(out.effective) / static_cast<double>(n);
  return out;
}

EffectivenessReport evaluate(const Model& model, const Batch& fit, const Batch& eval,
                             const UsefulnessOptions& options) {
  return {causal_score(model, eval), permutation_score(model, eval), usefulness_score(model, fit, eval, options)};
}

nlohmann::json to_json(const EffectivenessReport& r) {
  nlohmann::json j;
  j["causal"] = {{"matrix", matrix_json(r.causal.matrix)},
                 {"global", r.causal.global},
                 {"undefined", r.causal.undefined}};
  j["permutation"] = {{"matrix", matrix_json(r.permutation.matrix)},
                      {"global", r.permutation.global},
                      {"base_loss", r.permutation.base_loss}};
  const auto& u = r.usefulness;
  j["usefulness"] = {{"base_loss", u.base_loss},
                     {"linear_loss", u.linear_loss},
                     {"ratio", u.ratio},
                     {"useful", u.useful},
                     {"fit_residual", u.fit_residual},
                     {"identity_residual", u.identity_residual},
                     {"global", u.global},
                     {"effective", u.effective},
                     {"wasted", u.wasted}};
  return j;
}

void write_matrix_csv(const Tensor& m, const std::string& path) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path);
  f << "row";
  for (Index j = 0; j < m.cols(); ++j) f << ',' << j;
  f << '\n';
  for (Index i = 0; i < m.rows(); ++i) {
    f << i;
    for (Index j = 0; j < m.cols(); ++j) f << ',' << (std::isnan(m(i, j)) ? "nan" : fmt::format("{:.17g}", m(i, j)));
    f << '\n';
  }
}

}  // namespace depthlab::effectiveness
