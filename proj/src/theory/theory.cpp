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
#include "depthlab/theory.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include <fmt/format.h>

#include "depthlab/errors.hpp"
#include "depthlab/graph.hpp"
#include "depthlab/model.hpp"

namespace depthlab::theory {
namespace {

// Substream keys: (seed) -> (theorem, grid index, ..., trial).
enum : std::uint64_t {
  kResidual = 0x7301,
  kTransformer = 0x7302,
  kWeightDecay = 0x7304,
  kSeqLen = 0x7305,
  kGqa = 0x7306,
  kMoe = 0x7307,
  kMoeGrad = 0x7308,
};

Eigen::MatrixXd normals(Rng& rng, Index rows, Index cols, double std = 1.0) {
  Eigen::MatrixXd m(rows, cols);
  for (Index i = 0; i < rows; ++i)
    for (Index j = 0; j < cols; ++j) m(i, j) = std * rng.normal();
  return m;
}

std::string num(double v) { return fmt::format("{}", v); }

template <typename T>
std::string list(const std::vector<T>& v) {
  return fmt::format("{}", fmt::join(v, ";"));
}

void require_trials(const McOptions& o, Index min = 2) {
  if (o.trials < min) throw DomainError(fmt::format("theory: trials must be >= {}", min));
}

Eigen::MatrixXd softmax(const Eigen::MatrixXd& s) {
  Eigen::MatrixXd p = s;
  for (Index i = 0; i < p.rows(); ++i) {
    p.row(i).array() -= p.row(i).maxCoeff();
    p.row(i) = p.row(i).array().exp().matrix();
    p.row(i) /= p.row(i).sum();
  }
  return p;
}

}  // namespace

const char* kind_name(CheckKind kind) {
  switch (kind) {
    case CheckKind::Equality: return "equality";
    case CheckKind::Bound: return "bound";
    case CheckKind::Condition: return "condition";
  }
  return "?";
}

bool TheoremCheckReport::pass() const {
  return std::all_of(checks.begin(), checks.end(), [](const Check& c) { return c.pass; });
}

const Check& TheoremCheckReport::check(const std::string& name) const {
  for (const auto& c : checks)
    if (c.name == name) return c;
  throw std::out_of_range("no check named " + name);
}

double TheoremCheckReport::stat(const std::string& name) const {
  for (const auto& [k, v] : stats)
    if (k == name) return v;
  throw std::out_of_range("no stat named " + name);
}

Check equality_check(std::string name, double empirical, double target, double se, double tol, const Policy& policy) {
  Check c{std::move(name), CheckKind::Equality, empirical, target, se, tol * policy.tolerance_scale, false};
  const double allowance = std::max(c.tolerance * std::abs(target), policy.se_allowance ? 4.0 * se : 0.0);
  c.pass = std::abs(empirical - target) <= allowance;
  return c;
}

Check bound_check(std::string name, double empirical, double bound, double se, const Policy& policy) {
  Check c{std::move(name), CheckKind::Bound, empirical, bound * policy.bound_scale, se, 0.0, false};
  c.pass = empirical <= c.target + (policy.se_allowance ? 2.0 * se : 0.0);
  return c;
}

std::pair<double, double> mean_se(const std::vector<double>& x) {
  const double n = static_cast<double>(x.size());
  if (x.size() < 2) throw DomainError("mean_se: need at least 2 samples");
  const double m = std::accumulate(x.begin(), x.end(), 0.0) / n;
  double ss = 0.0;
  for (double v : x) ss += (v - m) * (v - m);
  return {m, std::sqrt(ss / (n - 1.0) / n)};
}

std::pair<double, double> pooled_variance(const Eigen::MatrixXd& samples) {
  const Index n = samples.rows(), c = samples.cols();
  if (n < 3 || c < 1) throw DomainError("pooled_variance: need >= 3 samples per series");
  const double nd = static_cast<double>(n);
  double var = 0.0, se2 = 0.0;
  for (Index j = 0; j < c; ++j) {
    const Eigen::ArrayXd dev2 = (samples.col(j).array() - samples.col(j).mean()).square();
    const double v = dev2.sum() / (nd - 1.0);
    // Standard error of the variance estimate from the spread of squared deviations.
    const double s = std::sqrt((dev2 - dev2.mean()).square().sum() / (nd - 1.0) / nd) * nd / (nd - 1.0);
    var += v;
    se2 += s * s;
  }
  return {var / static_cast<double>(c), std::sqrt(se2) / static_cast<double>(c)};
}

double spectral_norm(const Eigen::MatrixXd& m) {
  if (m.size() == 0) return 0.0;
  return Eigen::JacobiSVD<Eigen::MatrixXd>(m).singularValues()(0);
}

// --- residual ----------------------------------------------------------------

Eigen::MatrixXd simulate_residual(const ResidualParams& prm, const Rng& stream, bool masked) {
  if (!(prm.p >= 0.0 && prm.p <= 1.0)) throw DomainError(fmt::format("residual: p = {} outside [0, 1]", prm.p));
  if (!(prm.alpha > 0.0)) throw DomainError("residual: alpha must be > 0");
  if (prm.d < 8) throw DomainError("residual: d must be >= 8");
  if (prm.depth < 0) throw DomainError("residual: depth must be >= 0");
  const Index d = prm.d;
  Rng init = stream.derive({0});
  Rng weights = stream.derive({1});
  Rng masks = stream.derive({2});
  const double std = std::sqrt(prm.alpha / static_cast<double>(d));
  Eigen::VectorXd r = normals(init, d, 1);
  Eigen::MatrixXd out(2, d);
  out.row(0) = r.transpose();
  for (Index l = 0; l < prm.depth; ++l) {
    Eigen::VectorXd m = r;
    if (masked) {
      for (Index i = 0; i < d; ++i)
        if (!(masks.uniform() < prm.p)) m(i) = 0.0;
    }
    if (prm.sampler == ResidualSampler::Dense) {
      r += normals(weights, d, d, std) * m;
    } else {
      // W m with fresh Gaussian W is exactly N(0, (alpha/d) |m|^2 I).
      r += (std * m.norm()) * normals(weights, d, 1);
    }
  }
  out.row(1) = r.transpose();
  return out;
}

TheoremCheckReport check_residual_sparsity_bound(const ResidualParams& prm, const McOptions& o, double tol) {
  require_trials(o);
  TheoremCheckReport rep;
  rep.theorem = "residual_sparsity";
  rep.point = {{"d", num(prm.d)}, {"L", num(prm.depth)}, {"alpha", num(prm.alpha)}, {"p", num(prm.p)},
               {"sampler", prm.sampler == ResidualSampler::Dense ? "dense" : "projected"}};
  rep.trials = o.trials;
  rep.seed = o.seed;
  rep.grid_index = o.grid_index;
  const Rng base(o.seed);
  std::vector<double> ratio(static_cast<std::size_t>(o.trials));
  for (Index t = 0; t < o.trials; ++t) {
    const auto r = simulate_residual(prm, base.derive({kResidual, static_cast<std::uint64_t>(o.grid_index),
                                                       static_cast<std::uint64_t>(t)}));
    ratio[static_cast<std::size_t>(t)] = r.row(1).squaredNorm() / r.row(0).squaredNorm();
  }
  const auto [m, se] = mean_se(ratio);
  const double l = static_cast<double>(prm.depth);
  const double exact = std::pow(1.0 + prm.alpha * prm.p, l);
  const double bound = std::pow(1.0 + std::sqrt(prm.alpha * prm.p), 2.0 * l);
  rep.checks.push_back(equality_check("energy_ratio", m, exact, se, tol, o.policy));
  rep.checks.push_back(bound_check("energy_ratio_bound", m, bound, se, o.policy));
  rep.stats = {{"exact_growth", exact}, {"bound", bound}, {"bound_slack", bound / m}};
  return rep;
}

// --- transformer ---------------------------------------------------------------

namespace {

struct StackLayer {
  std::vector<Eigen::MatrixXd> wq, wk, wv;  // d x head_dim each
  Eigen::MatrixXd wo, w1, w2;
};

StackLayer sample_layer(const TransformerParams& prm, Rng& rng) {
  const Index d = prm.d, hd = d / prm.n_heads;
  const double g = prm.gain;
  StackLayer s;
  for (Index h = 0; h < prm.n_heads; ++h) {
    s.wq.push_back(normals(rng, d, hd, g / std::sqrt(static_cast<double>(d))));
    s.wk.push_back(normals(rng, d, hd, g / std::sqrt(static_cast<double>(d))));
    s.wv.push_back(normals(rng, d, hd, g / std::sqrt(static_cast<double>(d))));
  }
  s.wo = normals(rng, d, d, g / std::sqrt(static_cast<double>(d)));
  s.w1 = normals(rng, d, prm.ffn_hidden, g / std::sqrt(static_cast<double>(d)));
  s.w2 = normals(rng, prm.ffn_hidden, d, g / std::sqrt(static_cast<double>(prm.ffn_hidden)));
  if (prm.normalize) {
    for (auto& v : s.wv) v /= spectral_norm(v);
    s.wo /= spectral_norm(s.wo) * std::sqrt(static_cast<double>(prm.n_heads));
    s.w1 /= spectral_norm(s.w1);
    s.w2 /= spectral_norm(s.w2);
  }
  return s;
}

}  // namespace

TheoremCheckReport check_transformer_bound(const TransformerParams& prm, const McOptions& o) {
  if (!(prm.p >= 0.0 && prm.p <= 1.0)) throw DomainError(fmt::format("transformer: p = {} outside [0, 1]", prm.p));
  if (prm.n_heads < 1 || prm.d % prm.n_heads != 0) throw DomainError("transformer: n_heads must divide d");
  if (prm.depth < 1 || prm.n_tokens < 1 || prm.ffn_hidden < 1) throw DomainError("transformer: sizes must be >= 1");
  if (!(prm.gain > 0.0)) throw DomainError("transformer: gain must be > 0");
  if (prm.inner_samples < 2) throw DomainError("transformer: inner_samples must be >= 2");
  require_trials(o, 1);
  TheoremCheckReport rep;
  rep.theorem = "transformer_sparsity";
  rep.point = {{"d", num(prm.d)}, {"L", num(prm.depth)}, {"H", num(prm.n_heads)}, {"n", num(prm.n_tokens)},
               {"p", num(prm.p)}, {"gain", num(prm.gain)}, {"normalize", prm.normalize ? "true" : "false"}};
  rep.trials = o.trials;
  rep.seed = o.seed;
  rep.grid_index = o.grid_index;

  const Index d = prm.d, hd = d / prm.n_heads, n = prm.n_tokens;
  const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));
  const Rng base(o.seed);
  Index holds = 0;
  double worst = 0.0, mean_attn = 0.0, mean_ffn = 0.0, max_identity_dev = 0.0;
  double min_slack = std::numeric_limits<double>::infinity();
  for (Index t = 0; t < o.trials; ++t) {
    const Rng trial = base.derive({kTransformer, static_cast<std::uint64_t>(o.grid_index), static_cast<std::uint64_t>(t)});
    Rng wr = trial.derive({0});
    std::vector<StackLayer> stack;
    for (Index l = 0; l < prm.depth; ++l) stack.push_back(sample_layer(prm, wr));
    // kappa is the largest softmax spectral norm met at any input this trial.
    std::vector<std::vector<double>> kappa(static_cast<std::size_t>(prm.depth),
                                           std::vector<double>(static_cast<std::size_t>(prm.n_heads), 0.0));
    std::vector<double> ratio;
    for (Index s = 0; s < prm.inner_samples; ++s) {
      Rng ir = trial.derive({1, static_cast<std::uint64_t>(s)});
      Eigen::MatrixXd r = normals(ir, n, d);
      const double e0 = r.squaredNorm();
      for (Index l = 0; l < prm.depth; ++l) {
        const auto& w = stack[static_cast<std::size_t>(l)];
        Eigen::VectorXd mask(d);
        for (Index i = 0; i < d; ++i) mask(i) = ir.uniform() < prm.p ? 1.0 : 0.0;
        const Eigen::MatrixXd x = r * mask.asDiagonal();
        Eigen::MatrixXd heads(n, d);
        for (Index h = 0; h < prm.n_heads; ++h) {
          const auto hh = static_cast<std::size_t>(h);
          const Eigen::MatrixXd q = x * w.wq[hh], k = x * w.wk[hh];
          const Eigen::MatrixXd pm = softmax(q * k.transpose() * inv_sqrt_hd);
          double& kap = kappa[static_cast<std::size_t>(l)][hh];
          kap = std::max(kap, spectral_norm(pm));
          heads.middleCols(h * hd, hd) = pm * (x * w.wv[hh]);
        }
        const Eigen::MatrixXd z = r + heads * w.wo;
        const Eigen::MatrixXd y = z * mask.asDiagonal();
        r = z + (y * w.w1).cwiseMax(0.0) * w.w2;
      }
      ratio.push_back(r.squaredNorm() / e0);
    }
    const auto [m, se] = mean_se(ratio);
    double bound = 1.0;
    for (Index l = 0; l < prm.depth; ++l) {
      const auto& w = stack[static_cast<std::size_t>(l)];
      double sum = 0.0;
      for (Index h = 0; h < prm.n_heads; ++h) {
        const double nu = spectral_norm(w.wv[static_cast<std::size_t>(h)]);
        const double kap = kappa[static_cast<std::size_t>(l)][static_cast<std::size_t>(h)];
        sum += kap * kap * nu * nu;
      }
      const double omega = spectral_norm(w.wo);
      const double a_attn = omega * omega * sum;
      const double lip = spectral_norm(w.w1) * spectral_norm(w.w2);
      const double a_ffn = lip * lip;
      mean_attn += a_attn;
      mean_ffn += a_ffn;
      bound *= std::pow(1.0 + std::sqrt(a_attn * prm.p), 2.0) * std::pow(1.0 + std::sqrt(a_ffn * prm.p), 2.0);
    }
    const double limit = bound * o.policy.bound_scale + (o.policy.se_allowance ? 2.0 * se : 0.0);
    if (m <= limit) ++holds;
    worst = std::max(worst, m / bound);
    min_slack = std::min(min_slack, bound / m);
    for (double q : ratio) max_identity_dev = std::max(max_identity_dev, std::abs(q - 1.0));
  }
  const double frac = static_cast<double>(holds) / static_cast<double>(o.trials);
  rep.checks.push_back({"bound_holds_fraction", CheckKind::Condition, frac, 1.0, 0.0, 0.0, holds == o.trials});
  if (prm.p == 0.0) {
    rep.checks.push_back(
        {"identity_at_p0", CheckKind::Condition, max_identity_dev, 0.0, 0.0, 0.0, max_identity_dev == 0.0});
  }
  const double nl = static_cast<double>(o.trials * prm.depth);
  rep.stats = {{"worst_ratio_over_bound", worst},
               {"min_slack", min_slack},
               {"mean_alpha_attn", mean_attn / nl},
               {"mean_alpha_ffn", mean_ffn / nl}};
  return rep;
}

// --- weight decay ----------------------------------------------------------------

double weight_decay_variance(double eta, double lambda, double sigma_g2, double var0, Index t) {
  const double rho = (1.0 - eta * lambda) * (1.0 - eta * lambda);
  const double tt = static_cast<double>(t);
  const double noise = eta * eta * sigma_g2;
  if (rho == 1.0) return var0 + noise * tt;
  const double rt = std::pow(rho, tt);
  return rt * var0 + noise * (1.0 - rt) / (1.0 - rho);
}

TheoremCheckReport check_weight_decay_contraction(const WeightDecayParams& prm, const McOptions& o, double tol) {
  if (!(prm.eta > 0.0) || !(prm.lambda >= 0.0)) throw DomainError("weight_decay: need eta > 0 and lambda >= 0");
  if (!(prm.eta * prm.lambda < 2.0)) {
    throw DomainError(fmt::format("weight_decay: eta * lambda = {} >= 2 is unstable", prm.eta * prm.lambda));
  }
  if (!(prm.sigma_g >= 0.0) || !(prm.w0_var >= 0.0)) throw DomainError("weight_decay: variances must be >= 0");
  if (prm.checkpoints.empty() || !std::is_sorted(prm.checkpoints.begin(), prm.checkpoints.end()) ||
      prm.checkpoints.front() < 1) {
    throw DomainError("weight_decay: checkpoints must be increasing and >= 1");
  }
  for (double l : prm.lambda_grid) {
    if (!(prm.eta * l > 0.0 && prm.eta * l <= 1.0)) {
      throw DomainError(fmt::format("weight_decay: lambda grid value {} outside 0 < eta lambda <= 1", l));
    }
  }
  require_trials(o, 3);
  TheoremCheckReport rep;
  rep.theorem = "weight_decay";
  rep.point = {{"eta", num(prm.eta)},          {"lambda", num(prm.lambda)},
               {"sigma_g", num(prm.sigma_g)},  {"t", list(prm.checkpoints)},
               {"lambda_grid", list(prm.lambda_grid)}, {"shape", fmt::format("{}x{}", prm.rows, prm.cols)}};
  rep.trials = o.trials;
  rep.seed = o.seed;
  rep.grid_index = o.grid_index;

  const Index entries = prm.rows * prm.cols;
  const Index t_max = prm.checkpoints.back();
  const double decay = 1.0 - prm.eta * prm.lambda;
  const Rng base(o.seed);
  Rng sr = base.derive({kWeightDecay, static_cast<std::uint64_t>(o.grid_index), 0xC0DE});
  const Eigen::MatrixXd bm = normals(sr, prm.cols, prm.cols);
  const Eigen::MatrixXd sigma_x =
      bm * bm.transpose() / static_cast<double>(prm.cols) + 0.25 * Eigen::MatrixXd::Identity(prm.cols, prm.cols);
  const Eigen::MatrixXd chol = sigma_x.llt().matrixL();

  std::vector<Eigen::MatrixXd> at(prm.checkpoints.size(), Eigen::MatrixXd(o.trials, entries));
  Eigen::MatrixXd outputs(o.trials, prm.rows);
  for (Index t = 0; t < o.trials; ++t) {
    Rng r = base.derive({kWeightDecay, static_cast<std::uint64_t>(o.grid_index), static_cast<std::uint64_t>(t)});
    Eigen::MatrixXd w = normals(r, prm.rows, prm.cols, std::sqrt(prm.w0_var)).array() + prm.w0_mean;
    std::size_t next = 0;
    for (Index s = 1; s <= t_max; ++s) {
      w = decay * w - prm.eta * normals(r, prm.rows, prm.cols, prm.sigma_g);
      if (s == prm.checkpoints[next]) {
        at[next].row(t) = w.reshaped<Eigen::RowMajor>().transpose();
        ++next;
      }
    }
    outputs.row(t) = (w * (chol * normals(r, prm.cols, 1))).transpose();
  }
  const double sg2 = prm.sigma_g * prm.sigma_g;
  for (std::size_t i = 0; i < prm.checkpoints.size(); ++i) {
    const auto [v, se] = pooled_variance(at[i]);
    const double target = weight_decay_variance(prm.eta, prm.lambda, sg2, prm.w0_var, prm.checkpoints[i]);
    rep.checks.push_back(
        equality_check(fmt::format("var_w[t={}]", prm.checkpoints[i]), v, target, se, tol, o.policy));
  }

  // Closed form at t_max must fall strictly as lambda grows.
  std::vector<double> grid = prm.lambda_grid;
  std::sort(grid.begin(), grid.end());
  bool decreasing = true;
  double worst_step = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 1; i < grid.size(); ++i) {
    const double step = weight_decay_variance(prm.eta, grid[i], sg2, prm.w0_var, t_max) -
                        weight_decay_variance(prm.eta, grid[i - 1], sg2, prm.w0_var, t_max);
    worst_step = std::max(worst_step, step);
    decreasing = decreasing && step < 0.0;
  }
  if (grid.size() > 1) {
    rep.checks.push_back({"closed_form_decreasing_in_lambda", CheckKind::Condition, worst_step, 0.0, 0.0, 0.0,
                          decreasing});
  }

  // Output bound Var(W x) <= |Sigma_x|_2 (total Var(W) + |E W|_F^2).
  const auto [uv, use] = pooled_variance(outputs);
  const double mean_w = prm.w0_mean * std::pow(decay, static_cast<double>(t_max));
  const double var_w = weight_decay_variance(prm.eta, prm.lambda, sg2, prm.w0_var, t_max);
  const double out_bound =
      spectral_norm(sigma_x) * (static_cast<double>(entries) * var_w + static_cast<double>(entries) * mean_w * mean_w);
  const double rows = static_cast<double>(prm.rows);
  rep.checks.push_back(bound_check("output_var_bound", uv * rows, out_bound, use * rows, o.policy));
  const double rho = decay * decay;
  rep.stats = {{"rho", rho}, {"closed_form_t_max", var_w}};
  if (rho < 1.0) rep.stats.emplace_back("steady_state", prm.eta * prm.eta * sg2 / (1.0 - rho));
  return rep;
}

// --- averaging results -------------------------------------------------------------

TheoremCheckReport check_sequence_length_variance(const std::vector<Index>& lengths, double sigma2,
                                                  const McOptions& o, double tol) {
  if (!(sigma2 > 0.0)) throw DomainError("sequence_length: sigma2 must be > 0");
  for (Index t : lengths)
    if (t < 1) throw DomainError("sequence_length: T must be >= 1");
  require_trials(o, 3);
  TheoremCheckReport rep;
  rep.theorem = "sequence_length";
  rep.point = {{"T", list(lengths)}, {"sigma2", num(sigma2)}};
  rep.trials = o.trials;
  rep.seed = o.seed;
  rep.grid_index = o.grid_index;
  const Rng base(o.seed);
  const double sigma = std::sqrt(sigma2);
  std::vector<double> scaled;
  for (std::size_t j = 0; j < lengths.size(); ++j) {
    const Index t_len = lengths[j];
    Eigen::MatrixXd x(o.trials, 1);
    for (Index t = 0; t < o.trials; ++t) {
      Rng r = base.derive({kSeqLen, static_cast<std::uint64_t>(o.grid_index), j, static_cast<std::uint64_t>(t)});
      double s = 0.0;
      for (Index i = 0; i < t_len; ++i) s += sigma * r.normal();
      x(t, 0) = s / static_cast<double>(t_len);
    }
    const auto [v, se] = pooled_variance(x);
    const double tt = static_cast<double>(t_len);
    rep.checks.push_back(equality_check(fmt::format("var[T={}]", t_len), v, sigma2 / tt, se, tol, o.policy));
    rep.stats.emplace_back(fmt::format("var_times_T[T={}]", t_len), v * tt);
    scaled.push_back(v * tt);
  }
  if (scaled.size() > 1) {
    const auto [lo, hi] = std::minmax_element(scaled.begin(), scaled.end());
    const double mean = std::accumulate(scaled.begin(), scaled.end(), 0.0) / static_cast<double>(scaled.size());
    const double spread = (*hi - *lo) / mean;
    const double limit = tol * o.policy.tolerance_scale;
    rep.checks.push_back({"var_times_T_spread", CheckKind::Condition, spread, 0.0, 0.0, limit, spread <= limit});
  }
  return rep;
}

namespace {

std::pair<double, double> gqa_variance(Index g, Index n, double sigma_v, Index dv, const McOptions& o,
                                       std::uint64_t key) {
  const Index ng = n / g;
  Eigen::MatrixXd out(o.trials, g * dv);
  const Rng base(o.seed);
  for (Index t = 0; t < o.trials; ++t) {
    Rng r = base.derive({kGqa, static_cast<std::uint64_t>(o.grid_index), key, static_cast<std::uint64_t>(t)});
    const Eigen::MatrixXd v = normals(r, n, dv, sigma_v);
    for (Index grp = 0; grp < g; ++grp) {
      out.row(t).segment(grp * dv, dv) =
          v.middleRows(grp * ng, ng).colwise().sum() / static_cast<double>(g * ng);
    }
  }
  return pooled_variance(out);
}

}  // namespace

TheoremCheckReport check_gqa_variance(const std::vector<Index>& groups, Index n, double sigma_v2, Index value_dim,
                                      const McOptions& o, double tol) {
  if (n < 1 || value_dim < 1 || !(sigma_v2 > 0.0)) throw DomainError("gqa: need n >= 1, value_dim >= 1, sigma > 0");
  for (Index g : groups) {
    if (g < 1 || n % g != 0) throw DomainError(fmt::format("gqa: G = {} does not divide n = {}", g, n));
  }
  require_trials(o, 3);
  TheoremCheckReport rep;
  rep.theorem = "gqa_variance";
  rep.point = {{"G", list(groups)}, {"n", num(n)}, {"sigma_v2", num(sigma_v2)}, {"value_dim", num(value_dim)}};
  rep.trials = o.trials;
  rep.seed = o.seed;
  rep.grid_index = o.grid_index;
  const double sv = std::sqrt(sigma_v2), nd = static_cast<double>(n);
  // The G = 1 baseline gets its own key so it does not depend on the list.
  const auto [v1, se1] = gqa_variance(1, n, sv, value_dim, o, 0);
  for (std::size_t j = 0; j < groups.size(); ++j) {
    const Index g = groups[j];
    const double gd = static_cast<double>(g);
    const auto [v, se] = g == 1 ? std::pair{v1, se1} : gqa_variance(g, n, sv, value_dim, o, j + 1);
    rep.checks.push_back(equality_check(fmt::format("var[G={}]", g), v, sigma_v2 / (gd * nd), se, tol, o.policy));
    if (g != 1) {
      const double ratio = v / v1;
      const double rse = ratio * std::hypot(se / v, se1 / v1);
      rep.checks.push_back(equality_check(fmt::format("ratio[G={}]", g), ratio, 1.0 / gd, rse, tol, o.policy));
    }
    const double ng = nd / gd;
    rep.stats.emplace_back(fmt::format("per_group_form[G={}]", g), sigma_v2 / (gd * gd * ng));
    rep.stats.emplace_back(fmt::format("product_form[G={}]", g), sigma_v2 / (gd * nd));
  }
  rep.stats.emplace_back("baseline_var", v1);
  return rep;
}

TheoremCheckReport check_moe_variance(const MoeParams& prm, const McOptions& o, double tol) {
  if (!(prm.sigma2 > 0.0) || !(prm.jacobian_var > 0.0) || prm.dim < 1) {
    throw DomainError("moe: variances must be > 0 and dim >= 1");
  }
  for (Index k : prm.ks)
    if (k < 1) throw DomainError("moe: k must be >= 1");
  if (prm.jacobian_k < 1) throw DomainError("moe: jacobian k must be >= 1");
  require_trials(o, 3);
  TheoremCheckReport rep;
  rep.theorem = "moe_variance";
  rep.point = {{"k", list(prm.ks)},
               {"sigma2", num(prm.sigma2)},
               {"dim", num(prm.dim)},
               {"jacobian_var", num(prm.jacobian_var)},
               {"jacobian_k", num(prm.jacobian_k)}};
  rep.trials = o.trials;
  rep.seed = o.seed;
  rep.grid_index = o.grid_index;
  const Rng base(o.seed);
  const auto gi = static_cast<std::uint64_t>(o.grid_index);
  for (std::size_t j = 0; j < prm.ks.size(); ++j) {
    const Index k = prm.ks[j];
    Eigen::MatrixXd out(o.trials, prm.dim);
    for (Index t = 0; t < o.trials; ++t) {
      Rng r = base.derive({kMoe, gi, 0, j, static_cast<std::uint64_t>(t)});
      // Fixed selected set: k independent expert outputs, uniform gates.
      out.row(t) = normals(r, k, prm.dim, std::sqrt(prm.sigma2)).colwise().sum() / static_cast<double>(k);
    }
    const auto [v, se] = pooled_variance(out);
    rep.checks.push_back(
        equality_check(fmt::format("var[k={}]", k), v, prm.sigma2 / static_cast<double>(k), se, tol, o.policy));
  }
  const Index dd = prm.dim * prm.dim;
  Eigen::MatrixXd jac(o.trials, dd);
  for (Index t = 0; t < o.trials; ++t) {
    Rng r = base.derive({kMoe, gi, 1, static_cast<std::uint64_t>(t)});
    Eigen::RowVectorXd acc = Eigen::RowVectorXd::Zero(dd);
    for (Index e = 0; e < prm.jacobian_k; ++e) acc += normals(r, 1, dd, std::sqrt(prm.jacobian_var));
    jac.row(t) = acc / static_cast<double>(prm.jacobian_k);
  }
  const auto [jv, jse] = pooled_variance(jac);
  rep.checks.push_back(equality_check(fmt::format("jacobian_var[k={}]", prm.jacobian_k), jv,
                                      prm.jacobian_var / static_cast<double>(prm.jacobian_k), jse, tol, o.policy));
  return rep;
}

TheoremCheckReport check_moe_gradient_bound(const MoeGradientParams& prm, const McOptions& o) {
  if (prm.d < 1 || prm.hidden < 1 || prm.n_experts < 1 || prm.k < 1 || prm.k > prm.n_experts) {
    throw DomainError("moe_gradient: need 1 <= k <= n_experts and positive sizes");
  }
  require_trials(o, 1);
  TheoremCheckReport rep;
  rep.theorem = "moe_gradient_bound";
  rep.point = {{"d", num(prm.d)}, {"hidden", num(prm.hidden)}, {"E", num(prm.n_experts)}, {"k", num(prm.k)}};
  rep.trials = o.trials;
  rep.seed = o.seed;
  rep.grid_index = o.grid_index;
  const Rng base(o.seed);
  const Index d = prm.d, h = prm.hidden;
  const double inv_k = 1.0 / static_cast<double>(prm.k);
  double worst_ratio = 0.0, worst_chain = 0.0;
  for (Index t = 0; t < o.trials; ++t) {
    Rng r = base.derive({kMoeGrad, static_cast<std::uint64_t>(o.grid_index), static_cast<std::uint64_t>(t)});
    const Tensor x = 3.0 * normals(r, 1, d);
    const Tensor gain = normals(r, 1, d, 0.1).array() + 1.0;
    struct Expert {
      Tensor gate, up, down;
    };
    std::vector<Expert> experts;
    for (Index e = 0; e < prm.n_experts; ++e) {
      experts.push_back({normals(r, d, h, 1.0 / std::sqrt(static_cast<double>(d))),
                         normals(r, d, h, 1.0 / std::sqrt(static_cast<double>(d))),
                         normals(r, h, d, 1.0 / std::sqrt(static_cast<double>(h)))});
    }
    const Tensor router = normals(r, d, prm.n_experts, 1.0 / std::sqrt(static_cast<double>(d)));
    const double eps = 1e-5;
    auto norm_map = [&](Graph<double>& g, Var<double> v) { return rms_norm(v, g.constant(gain), eps); };
    Graph<double> g0;
    const Tensor z0 = norm_map(g0, g0.constant(x)).value();
    // Routing set held fixed at this point (locally constant).
    const Eigen::RowVectorXd logits = z0 * router;
    std::vector<Index> order(static_cast<std::size_t>(prm.n_experts));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) { return logits(a) > logits(b); });
    order.resize(static_cast<std::size_t>(prm.k));
    auto experts_map = [&](Graph<double>& g, Var<double> z) {
      Var<double> acc;
      bool first = true;
      for (Index e : order) {
        const auto& ex = experts[static_cast<std::size_t>(e)];
        auto y = matmul(swiglu(matmul(z, g.constant(ex.gate)), matmul(z, g.constant(ex.up))), g.constant(ex.down));
        acc = first ? y : add(acc, y);
        first = false;
      }
      return acc;
    };
    auto block_map = [&](Graph<double>& g, Var<double> v) {
      return add(v, scale(experts_map(g, norm_map(g, v)), inv_k));
    };
    const Tensor j_y = row_jacobian<double>(block_map, x);
    const Tensor j_n = row_jacobian<double>(norm_map, x);
    const Tensor j_f = row_jacobian<double>(experts_map, z0);
    const Tensor chain = Tensor::Identity(d, d) + inv_k * (j_f * j_n);
    worst_chain = std::max(worst_chain, (j_y - chain).cwiseAbs().maxCoeff());
    const double lhs = spectral_norm(j_y);
    const double rhs = 1.0 + inv_k * spectral_norm(j_f) * spectral_norm(j_n);
    worst_ratio = std::max(worst_ratio, lhs / rhs);
  }
  rep.checks.push_back({"chain_rule", CheckKind::Condition, worst_chain, 0.0, 0.0, 1e-10, worst_chain <= 1e-10});
  // A deterministic inequality: no standard-error allowance.
  Policy strict = o.policy;
  strict.se_allowance = false;
  rep.checks.push_back(bound_check("norm_ratio", worst_ratio, 1.0 + 1e-12, 0.0, strict));
  return rep;
}

// --- reporting ------------------------------------------------------------------

nlohmann::json to_json(const TheoremCheckReport& r) {
  nlohmann::json j;
  j["theorem"] = r.theorem;
  j["grid_index"] = r.grid_index;
  j["trials"] = r.trials;
  j["seed"] = r.seed;
  j["pass"] = r.pass();
  auto point = nlohmann::json::object();
  for (const auto& [k, v] : r.point) point[k] = v;
  j["point"] = point;
  auto checks = nlohmann::json::array();
  for (const auto& c : r.checks) {
    checks.push_back({{"name", c.name},
                      {"kind", kind_name(c.kind)},
                      {"empirical", c.empirical},
                      {"target", c.target},
                      {"se", c.se},
                      {"tolerance", c.tolerance},
                      {"pass", c.pass}});
  }
  j["checks"] = checks;
  auto stats = nlohmann::json::object();
  for (const auto& [k, v] : r.stats) stats[k] = v;
  j["stats"] = stats;
  return j;
}

std::string summary_header() { return "theorem,grid_index,check,kind,empirical,target,se,tolerance,verdict"; }

std::string summary_csv(const std::vector<TheoremCheckReport>& reports) {
  std::string out = summary_header() + "\n";
  for (const auto& r : reports) {
    for (const auto& c : r.checks) {
      out += fmt::format("{},{},{},{},{:.17g},{:.17g},{:.17g},{:.17g},{}\n", r.theorem, r.grid_index, c.name,
                         kind_name(c.kind), c.empirical, c.target, c.se, c.tolerance, c.pass ? "pass" : "fail");
    }
  }
  return out;
}

}  // namespace depthlab::theory
