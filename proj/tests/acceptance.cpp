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
// Acceptance suite. Each criterion prints one PASS/FAIL line with the
// numbers behind the verdict and its wall time; runtime limits are part of
// the verdict. With no arguments every criterion runs in order.
#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include <fmt/format.h>
#include <json.hpp>

#include "depthlab/effectiveness.hpp"
#include "depthlab/experiment.hpp"
#include "depthlab/probes.hpp"
#include "depthlab/theory.hpp"
#include "test_util.hpp"

namespace {

using namespace depthlab;
namespace fs = std::filesystem;
using testing::random_batch;
using testing::toy_config;

struct Outcome {
  bool pass = true;
  std::string detail;
  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail += (detail.empty() ? "" : "; ") + std::string("FAILED ") + what;
    }
  }
  void note(const std::string& s) { detail += (detail.empty() ? "" : "; ") + s; }
};

struct Criterion {
  int id;
  const char* title;
  double limit_s;
  std::function<Outcome()> run;
};

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / "depthlab_acceptance" / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream s;
  s << f.rdbuf();
  return s.str();
}

// ---------------------------------------------------------------------------
// Theory suites. Besides the policy verdict, equalities are held to the
// literal relative tolerance and bounds to the literal inequality.

void literal(const theory::TheoremCheckReport& r, double tol, Outcome& out, double& worst) {
  for (const auto& c : r.checks) {
    const std::string where = fmt::format("{}[{}] {}", r.theorem, r.grid_index, c.name);
    out.require(c.pass, where + " verdict");
    if (c.kind == theory::CheckKind::Equality) {
      const double rel = std::abs(c.empirical - c.target) / std::abs(c.target);
      worst = std::max(worst, rel);
      out.require(rel <= tol, fmt::format("{} rel err {:.4f} > {}", where, rel, tol));
    } else if (c.kind == theory::CheckKind::Bound) {
      out.require(c.empirical <= c.target, fmt::format("{} {:.6g} > bound {:.6g}", where, c.empirical, c.target));
    }
  }
}

TheorySection only(const std::string& check) {
  TheorySection g;
  g.checks = {check};
  return g;
}

Outcome residual_suite() {
  Outcome out;
  TheorySection g = only("residual");
  g.residual_trials = 20000;
  const auto reports = verify_theory(g, {}, "");
  double worst = 0.0, slack = std::numeric_limits<double>::infinity();
  for (const auto& r : reports) {
    literal(r, 0.10, out, worst);
    slack = std::min(slack, r.check("energy_ratio_bound").target / r.check("energy_ratio_bound").empirical);
  }
  out.require(reports.size() == 18, "grid has 18 points");
  out.note(fmt::format("{} points x {} trials, worst rel err {:.4f} (<= 0.10), min bound/empirical {:.3g}",
                       reports.size(), g.residual_trials, worst, slack));
  return out;
}

Outcome transformer_suite() {
  Outcome out;
  TheorySection g = only("transformer");
  g.transformer_depth = {8};
  g.transformer_trials = 200;
  auto normalized = verify_theory(g, {}, "");
  g.transformer_normalize = false;
  g.transformer_p = {0.5};
  auto raw = verify_theory(g, {}, "");
  double worst = 0.0, ratio = 0.0;
  for (const auto* set : {&normalized, &raw}) {
    for (const auto& r : *set) {
      const auto& f = r.check("bound_holds_fraction");
      out.require(f.empirical == 1.0, fmt::format("grid {} holds in {:.3f} of trials", r.grid_index, f.empirical));
      literal(r, 0.0, out, worst);
      ratio = std::max(ratio, r.stat("worst_ratio_over_bound"));
    }
  }
  out.note(fmt::format("{} normalized + {} raw stacks at L=8, 200 trials each; bound held in every trial; "
                       "worst observed/bound {:.3g}",
                       normalized.size(), raw.size(), ratio));
  return out;
}

Outcome weight_decay_suite() {
  Outcome out;
  TheorySection g = only("weight_decay");
  g.wd_eta = {0.1, 0.5};
  g.wd_lambda = {0.0, 0.01, 0.1, 1.0};
  g.wd_steps = {10, 100, 1000};
  const auto reports = verify_theory(g, {}, "");
  double worst = 0.0, worst_z = 0.0;
  for (const auto& r : reports) {
    const bool undecayed = r.stat("rho") == 1.0;
    for (const auto& c : r.checks) {
      out.require(c.pass, fmt::format("grid {} {}", r.grid_index, c.name));
      if (c.kind != theory::CheckKind::Equality) continue;
      if (undecayed) {
        const double z = std::abs(c.empirical - c.target) / c.se;
        worst_z = std::max(worst_z, z);
        out.require(z <= 4.0, fmt::format("lambda=0 {} off by {:.2f} SE", c.name, z));
      } else {
        const double rel = std::abs(c.empirical - c.target) / c.target;
        worst = std::max(worst, rel);
        out.require(rel <= 0.05, fmt::format("grid {} {} rel err {:.4f}", r.grid_index, c.name, rel));
      }
    }
    const auto* mono = &r.checks.back();
    for (const auto& c : r.checks)
      if (c.name == "closed_form_decreasing_in_lambda") mono = &c;
    out.require(mono->name == "closed_form_decreasing_in_lambda" && mono->pass, "closed form decreasing in lambda");
  }
  out.note(fmt::format("{} (eta, lambda) points, t in 10/100/1000: worst rel err {:.4f} (<= 0.05); "
                       "lambda=0 worst |z| {:.2f} (<= 4); closed form strictly decreasing",
                       reports.size(), worst, worst_z));
  return out;
}

Outcome averaging_suite(const std::string& check, const std::string& what) {
  Outcome out;
  const auto reports = verify_theory(only(check), {}, "");
  double worst = 0.0;
  std::size_t n = 0;
  for (const auto& r : reports) {
    literal(r, 0.05, out, worst);
    n += r.checks.size();
  }
  out.note(fmt::format("{}: {} checks, worst rel err {:.4f} (<= 0.05)", what, n, worst));
  return out;
}

// ---------------------------------------------------------------------------

Outcome gradients() {
  Outcome out;
  Rng r(2024);
  long double worst = 0;
  std::vector<std::string> shapes;
  for (int i = 0; i < 5; ++i) {
    Rng c = r.derive({static_cast<std::uint64_t>(i)});
    const Index depth = 1 + static_cast<Index>(c.next_u64() % 2);
    const Index d = std::array<Index, 3>{8, 16, 32}[c.next_u64() % 3];
    const Index heads = std::array<Index, 2>{2, 4}[c.next_u64() % 2];
    const Index kv = c.next_u64() % 2 ? heads : 1;
    ModelConfig cfg = toy_config(depth, d, heads, kv);
    if (i % 2 == 1) cfg.moe = MoeConfig{4, 2, i == 3 ? 1 : 0, 0.01, 0.001, 0};
    const Model m = build_model(cfg, c.derive({1}));
    const long double e = testing::model_gradient_check(m, random_batch(c.derive({2}), 2, 6, cfg.vocab_size));
    worst = std::max(worst, e);
    shapes.push_back(fmt::format("L{}d{}H{}kv{}{}", depth, d, heads, kv, cfg.moe ? "+moe" : ""));
  }
  out.require(worst < 1e-5L, fmt::format("max rel err {:.3g}", static_cast<double>(worst)));
  out.note(fmt::format("models {}: max rel err {:.3g} (< 1e-5)", fmt::join(shapes, ", "), static_cast<double>(worst)));
  return out;
}

Outcome fixtures() {
  Outcome out;
  {
    Model m = build_model(toy_config(4), Rng(1));
    zero_block_outputs(m);
    const auto r = effectiveness::evaluate(m, random_batch(Rng(2), 4, 17, 32), random_batch(Rng(3), 2, 9, 32));
    out.require(std::abs(r.causal.global) <= 1e-9, "zero model S_causal");
    out.require(std::abs(r.permutation.global) <= 1e-9, "zero model S_perm");
    out.require(std::abs(r.usefulness.global) <= 1e-9, "zero model S_useful");
    out.note(fmt::format("F=0: S_causal {:g} S_perm {:g} S_useful {:g}", r.causal.global, r.permutation.global,
                         r.usefulness.global));
  }
  {
    Model m = build_model(toy_config(3), Rng(4));
    m.params.layers[1].wo.setZero();
    m.params.layers[1].ffn.w_down.setZero();
    const auto u = effectiveness::usefulness_score(m, random_batch(Rng(5), 4, 17, 32), random_batch(Rng(6), 2, 9, 32));
    out.require(std::abs(u.ratio[1] - 1.0) <= 1e-9, "affine block ratio");
    out.note(fmt::format("affine block ratio - 1 = {:.2g}", u.ratio[1] - 1.0));
  }
  const double sp = probes::attention_map_sparsity(Tensor::Identity(4, 4), 1e-6, probes::SparsityMode::Literal);
  out.require(sp == 0.75, "identity attention sparsity");
  Tensor uniform = Tensor::Zero(6, 6);
  for (Index i = 0; i < 6; ++i) uniform.row(i).head(i + 1).setConstant(1.0 / static_cast<double>(i + 1));
  const auto q = probes::query_entropy(uniform);
  double ent_err = 0.0;
  for (Index i = 0; i < 6; ++i) ent_err = std::max(ent_err, std::abs(q[static_cast<std::size_t>(i)] - std::log(i + 1.0)));
  const double onehot = probes::head_entropy(Tensor::Identity(5, 5));
  out.require(onehot == 0.0 && ent_err <= 1e-10, "entropy fixtures");
  Tensor h(8, 1);
  for (Index i = 0; i < 8; ++i) h(i, 0) = i % 2 == 0 ? 1.0 : -1.0;
  const double k = probes::kurtosis(h).layer;
  out.require(std::abs(k - 1.0) <= 1e-9, "Rademacher kurtosis");
  out.note(fmt::format("identity sparsity {}, one-hot entropy {}, uniform entropy err {:.2g}, Rademacher kurtosis {}",
                       sp, onehot, ent_err, k));
  return out;
}

Outcome degeneracies() {
  Outcome out;
  const Batch b = random_batch(Rng(7), 3, 12, 32);
  {
    // G=1: one KV head per query head, against the same weights laid out as
    // a grouped model with G=2 whose duplicated KV heads coincide.
    ModelConfig mha = toy_config(2, 32, 4, 4);
    Model m = build_model(mha, Rng(8));
    ModelConfig g2 = mha;
    g2.n_kv_heads = 2;
    Model g = build_model(g2, Rng(8));
    const Index dh = mha.head_dim();
    for (std::size_t i = 0; i < m.params.layers.size(); ++i) {
      auto& t = m.params.layers[i];
      const auto& s = g.params.layers[i];
      t.wq = s.wq;
      t.wo = s.wo;
      t.ffn = s.ffn;
      t.attn_norm = s.attn_norm;
      t.ffn_norm = s.ffn_norm;
      for (Index head = 0; head < 4; ++head) {
        t.wk.middleCols(head * dh, dh) = s.wk.middleCols((head / 2) * dh, dh);
        t.wv.middleCols(head * dh, dh) = s.wv.middleCols((head / 2) * dh, dh);
      }
    }
    m.params.embed = g.params.embed;
    m.params.unembed = g.params.unembed;
    m.params.final_norm = g.params.final_norm;
    out.require(m.config.group_size() == 1, "kv = H gives G = 1");
    out.require(bitwise_equal(forward(m, b).logits, forward(g, b).logits), "GQA(G=1) vs MHA logits");
  }
  {
    ModelConfig dense = toy_config(2, 32, 4, 2);
    ModelConfig moe = dense;
    moe.moe = MoeConfig{1, 1, 0, 0.01, 0.001, 0};
    const Model d = build_model(dense, Rng(9));
    Model e = build_model(moe, Rng(9));
    e.params.embed = d.params.embed;
    e.params.unembed = d.params.unembed;
    e.params.final_norm = d.params.final_norm;
    for (std::size_t i = 0; i < d.params.layers.size(); ++i) {
      auto& t = e.params.layers[i];
      const auto& s = d.params.layers[i];
      t.wq = s.wq;
      t.wk = s.wk;
      t.wv = s.wv;
      t.wo = s.wo;
      t.attn_norm = s.attn_norm;
      t.ffn_norm = s.ffn_norm;
      t.experts.at(0) = s.ffn;
    }
    out.require(bitwise_equal(forward(d, b).logits, forward(e, b).logits), "MoE(E=1,k=1) vs dense logits");
  }
  if (out.pass) out.note("GQA with one query head per KV head and MoE(E=1,k=1) reproduce MHA / dense logits bitwise");
  return out;
}

// ---------------------------------------------------------------------------
// Desk-scale training trends.

ExperimentConfig desk(const std::string& name, Index depth, std::uint64_t seed) {
  ExperimentConfig c = default_config();
  c.name = name;
  c.model.depth = depth;
  c.train.seed = seed;
  c.train.corpus_path = DEPTHLAB_CORPUS;
  c.probes.options.weight_thresholds = {1e-2};
  c.probes.options.attn_thresholds = {1e-3};
  return c;
}

nlohmann::json report_of(const fs::path& dir) { return nlohmann::json::parse(slurp(dir / "report.json")); }

std::string majority(const char* what, const std::vector<bool>& v, Outcome& out) {
  const auto n = std::count(v.begin(), v.end(), true);
  out.require(2 * n > static_cast<long>(v.size()), fmt::format("{} holds for {}/{} seeds", what, n, v.size()));
  return fmt::format("{} {}/{}", what, n, v.size());
}

Outcome depth_trend() {
  Outcome out;
  const fs::path root = scratch("depth");
  std::vector<bool> var_up, jac_down, useful_down;
  std::vector<std::string> rows;
  for (std::uint64_t seed : {0, 1, 2}) {
    double var[3], jac[3], useful[3];
    int i = 0;
    for (Index depth : {2, 4, 8}) {
      ExperimentConfig c = desk(fmt::format("L{}-s{}", depth, seed), depth, seed);
      const RunSummary s = run_experiment(c, (root / c.name).string());
      const auto j = report_of(root / c.name)["probes"]["jacobian_dev"].get<std::vector<double>>();
      const Index quarter = std::max<Index>(1, depth / 4);
      double sum = 0.0;
      for (Index l = depth - quarter; l < depth; ++l) sum += j[static_cast<std::size_t>(l)];
      var[i] = s.last_layer_var;
      jac[i] = sum / static_cast<double>(quarter);
      useful[i] = *s.s_useful;
      ++i;
    }
    var_up.push_back(var[0] < var[1] && var[1] < var[2]);
    jac_down.push_back(jac[2] < jac[1]);
    useful_down.push_back(useful[0] >= useful[1] && useful[1] >= useful[2]);
    rows.push_back(fmt::format("s{}: var {:.3f}/{:.3f}/{:.3f} J-I {:.2f}->{:.2f} useful {:.3f}/{:.3f}/{:.3f}", seed,
                               var[0], var[1], var[2], jac[1], jac[2], useful[0], useful[1], useful[2]));
  }
  const std::string a = majority("(a) var up", var_up, out);
  const std::string b = majority("(b) J-I down", jac_down, out);
  const std::string c = majority("(c) useful non-increasing", useful_down, out);
  out.note(fmt::format("{}, {}, {} | {}", a, b, c, fmt::join(rows, " | ")));
  return out;
}

Outcome damping_trends() {
  Outcome out;
  const fs::path root = scratch("damping");
  auto final_var = [&](ExperimentConfig c) {
    c.effectiveness.enabled = false;
    c.probes.options.jacobian = false;
    return run_experiment(c, (root / c.name).string()).last_layer_var;
  };
  std::vector<bool> wd, len, gqa, moe;
  std::vector<std::string> rows;
  for (std::uint64_t seed : {0, 1, 2}) {
    const std::string s = fmt::format("-s{}", seed);
    ExperimentConfig base = desk("base" + s, 4, seed);
    const double v_base = final_var(base);

    ExperimentConfig no_wd = base;
    no_wd.name = "wd0" + s;
    no_wd.train.weight_decay = 0.0;
    const double v_nowd = final_var(no_wd);

    ExperimentConfig sweep = base;
    sweep.sweep = SweepSection{SweepAxis::SeqLen, {"128"}, {}};
    ExperimentConfig long_t = sweep_child(sweep, "128", seed);
    long_t.name = "T128" + s;
    const double v_long = final_var(long_t);

    ExperimentConfig heads = base;
    heads.model.n_heads = 16;
    heads.sweep = SweepSection{SweepAxis::GqaGroups, {"1", "16"}, {seed}};
    ExperimentConfig g1 = sweep_child(heads, "1", seed), g16 = sweep_child(heads, "16", seed);
    g1.name = "G1" + s;
    g16.name = "G16" + s;
    const double v_g1 = final_var(g1), v_g16 = final_var(g16);

    ExperimentConfig experts = base;
    experts.name = "moe" + s;
    experts.model.moe = MoeConfig{4, 2, 0, 0.01, 0.001, base.model.mlp_hidden / 2};
    const double v_moe = final_var(experts);

    wd.push_back(v_base < v_nowd);
    len.push_back(v_long < v_base);
    gqa.push_back(v_g16 < v_g1);
    moe.push_back(v_moe < v_base);
    rows.push_back(fmt::format("s{}: wd {:.3f}->{:.3f} T {:.3f}->{:.3f} G {:.3f}->{:.3f} moe {:.3f}->{:.3f}", seed,
                               v_nowd, v_base, v_base, v_long, v_g1, v_g16, v_base, v_moe));
  }
  const std::string a = majority("weight decay", wd, out);
  const std::string b = majority("longer T", len, out);
  const std::string c = majority("G=16", gqa, out);
  const std::string d = majority("MoE", moe, out);
  out.note(fmt::format("{}, {}, {}, {} | {}", a, b, c, d, fmt::join(rows, " | ")));
  return out;
}

Outcome determinism() {
  Outcome out;
  const fs::path root = scratch("determinism");
  ExperimentConfig dense = desk("dense", 4, 7);
  dense.model.d_model = 64;
  dense.model.mlp_hidden = 176;
  dense.train.steps = 60;
  dense.train.warmup_steps = 6;
  ExperimentConfig sparse = dense;
  sparse.name = "sparse";
  sparse.model.n_kv_heads = 1;
  sparse.model.moe = MoeConfig{4, 2, 1, 0.01, 0.001, 88};
  for (const auto* c : {&dense, &sparse}) {
    run_experiment(*c, (root / c->name / "a").string());
    run_experiment(*c, (root / c->name / "b").string());
    for (const char* f : {"timeline.csv", "checkpoint.bin", "manifest.sha256"}) {
      const std::string x = slurp(root / c->name / "a" / f), y = slurp(root / c->name / "b" / f);
      out.require(!x.empty() && x == y, fmt::format("{} {} identical", c->name, f));
    }
  }
  if (out.pass) out.note("dense and GQA+MoE runs repeated: timeline, checkpoint and every artifact hash identical");
  return out;
}

const std::vector<Criterion>& criteria() {
  static const std::vector<Criterion> c{
      {1, "gradient correctness", 120, gradients},
      {2, "residual sparsity bound", 300, residual_suite},
      {3, "transformer stack bound", 300, transformer_suite},
      {4, "weight-decay contraction", 120, weight_decay_suite},
      {5, "sequence-length averaging", 60, [] { return averaging_suite("seq_len", "Var*T over T=1..256"); }},
      {6, "grouped-query averaging", 60, [] { return averaging_suite("gqa", "G in 1/4/16, n=64"); }},
      {7, "expert averaging", 60, [] { return averaging_suite("moe", "k in 1/2/4/8 and Jacobian at k=4"); }},
      {8, "metric fixtures", 60, fixtures},
      {9, "degenerate configurations", 60, degeneracies},
      {10, "depth trend", 3600, depth_trend},
      {11, "damping trends", 5400, damping_trends},
      {12, "determinism", 600, determinism},
  };
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::vector<int> ids;
  app.add_option("criteria", ids, "Criterion numbers (default: all)")->check(CLI::Range(1, 12));
  CLI11_PARSE(app, argc, argv);
  int failed = 0;
  for (const auto& c : criteria()) {
    if (!ids.empty() && std::find(ids.begin(), ids.end(), c.id) == ids.end()) continue;
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o.pass = false;
      o.note(fmt::format("exception: {}", e.what()));
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    o.require(secs < c.limit_s, fmt::format("runtime {:.0f}s over {:.0f}s limit", secs, c.limit_s));
    fmt::print("criterion {:2d} {}: {} -- {} [{:.1f}s]\n", c.id, o.pass ? "PASS" : "FAIL", c.title, o.detail, secs);
    std::fflush(stdout);
    failed += o.pass ? 0 : 1;
  }
  return failed == 0 ? 0 : 1;
}
