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
#include "depthlab/train.hpp"

#include <fmt/format.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numbers>

#include "depthlab/probes.hpp"

namespace depthlab {

namespace {

constexpr std::uint64_t kInitStream = 0x1A17;
constexpr std::uint64_t kBatchStream = 0xBA7C;

}  // namespace

void TrainConfig::validate() const {
  if (steps < 0) throw ConfigError("train.steps", "must be >= 0");
  if (batch_size <= 0) throw ConfigError("train.batch_size", "must be positive");
  if (seq_len <= 0) throw ConfigError("train.seq_len", "must be positive");
  if (!(lr_peak > 0.0)) throw ConfigError("train.lr_peak", "must be positive");
  if (!(weight_decay >= 0.0)) throw ConfigError("train.weight_decay", "must be >= 0");
  if (warmup_steps < 0 || warmup_steps > steps) throw ConfigError("train.warmup_steps", "must lie in [0, steps]");
  if (!(lr_min_ratio >= 0.0 && lr_min_ratio <= 1.0)) throw ConfigError("train.lr_min_ratio", "must lie in [0, 1]");
  if (grad_clip && !(*grad_clip > 0.0)) throw ConfigError("train.grad_clip", "must be positive");
  if (probe_every <= 0) throw ConfigError("train.probe_every", "must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("train.beta1", "must lie in [0, 1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("train.beta2", "must lie in [0, 1)");
  if (!(adam_eps > 0.0)) throw ConfigError("train.adam_eps", "must be positive");
  if (probe_seqs <= 0) throw ConfigError("train.probe_seqs", "must be positive");
  if (!(holdout_fraction > 0.0 && holdout_fraction < 1.0)) throw ConfigError("train.holdout_fraction", "must lie in (0, 1)");
}

Corpus Corpus::load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read corpus " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return Corpus(std::move(bytes));
}

Index Corpus::holdout_begin(double fraction) const {
  const auto tail = static_cast<Index>(std::ceil(static_cast<double>(size()) * fraction));
  return size() - tail;
}

Index Corpus::train_window_count(Index seq_len, double fraction) const {
  const Index end = holdout_begin(fraction);
  if (end < seq_len + 1) return 0;
  return (end - seq_len - 1) / seq_len + 1;
}

std::vector<int> Corpus::train_window(Index i, Index seq_len) const {
  const auto b = bytes_.begin() + i * seq_len;
  return std::vector<int>(b, b + seq_len + 1);
}

Index Corpus::heldout_window_count(Index seq_len, double fraction) const {
  return (size() - holdout_begin(fraction)) / (seq_len + 1);
}

Batch Corpus::heldout_batch(Index seq_len, double fraction, Index first, Index count) const {
  if (first < 0 || count <= 0 || first + count > heldout_window_count(seq_len, fraction)) {
    throw ConfigError("train.corpus_path", fmt::format("held-out region holds {} windows of {} tokens; {} requested",
                                                       heldout_window_count(seq_len, fraction), seq_len + 1,
                                                       first + count));
  }
  const Index w = seq_len + 1;
  const auto b = bytes_.begin() + holdout_begin(fraction) + first * w;
  return Batch(count, w, std::vector<int>(b, b + count * w));
}

Batch sample_train_batch(const Corpus& corpus, const TrainConfig& cfg, Index step) {
  const Index n = corpus.train_window_count(cfg.seq_len, cfg.holdout_fraction);
  if (n <= 0) throw ConfigError("train.corpus_path", "corpus too small for one training window");
  Rng rng = Rng(cfg.seed).derive({kBatchStream, static_cast<std::uint64_t>(step)});
  std::vector<int> tokens;
  tokens.reserve(static_cast<std::size_t>(cfg.batch_size * (cfg.seq_len + 1)));
  for (Index i = 0; i < cfg.batch_size; ++i) {
    const auto w = corpus.train_window(static_cast<Index>(rng.next_u64() % static_cast<std::uint64_t>(n)), cfg.seq_len);
    tokens.insert(tokens.end(), w.begin(), w.end());
  }
  return Batch(cfg.batch_size, cfg.seq_len + 1, std::move(tokens));
}

Batch probe_batch(const Corpus& corpus, const TrainConfig& cfg) {
  return corpus.heldout_batch(cfg.seq_len, cfg.holdout_fraction, 0, cfg.probe_seqs);
}

OptimizerState init_optimizer(const Model& model, const TrainConfig& cfg) {
  OptimizerState s;
  s.m = zero_params<double>(model.config);
  s.v = zero_params<double>(model.config);
  for_each_param(s.m, [](const std::string&, Tensor& t) { t.setZero(); });
  for_each_param(s.v, [](const std::string&, Tensor& t) { t.setZero(); });
  s.beta1 = cfg.beta1;
  s.beta2 = cfg.beta2;
  s.eps = cfg.adam_eps;
  return s;
}

void adamw_step(Params& params, const Params& grads, OptimizerState& state, double lr, double lambda) {
  if (!(lr >= 0.0)) throw DomainError("adamw_step: learning rate must be >= 0");
  std::vector<std::pair<std::string, const Tensor*>> g;
  for_each_param(grads, [&](const std::string& n, const Tensor& t) {
    if (!t.allFinite()) throw NonFiniteGradientError("adamw_step: non-finite gradient in " + n);
    g.push_back({n, &t});
  });
  std::vector<Tensor*> m, v;
  for_each_param(state.m, [&](const std::string&, Tensor& t) { m.push_back(&t); });
  for_each_param(state.v, [&](const std::string&, Tensor& t) { v.push_back(&t); });
  std::size_t i = 0;
  for_each_param(params, [&](const std::string& name, Tensor& w) {
    if (i >= g.size() || g[i].first != name || g[i].second->rows() != w.rows() || g[i].second->cols() != w.cols()) {
      throw DimensionError("adamw_step: gradient does not match parameter " + name);
    }
    ++i;
  });

  state.t += 1;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
  const double decay = 1.0 - lr * lambda;
  i = 0;
  for_each_param(params, [&](const std::string& name, Tensor& w) {
    const Tensor& gr = *g[i].second;
    Tensor& mi = *m[i];
    Tensor& vi = *v[i];
    ++i;
    if (!is_norm_gain(name)) w *= decay;
    for (Index k = 0; k < w.size(); ++k) {
      const double gk = gr.data()[k];
      double& mk = mi.data()[k];
      double& vk = vi.data()[k];
      mk = state.beta1 * mk + (1.0 - state.beta1) * gk;
      vk = state.beta2 * vk + (1.0 - state.beta2) * gk * gk;
      const double mhat = mk / c1;
      const double vhat = vk / c2;
      w.data()[k] -= lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  });
}

double global_grad_norm(const Params& grads) {
  double ss = 0.0;
  for_each_param(grads, [&](const std::string&, const Tensor& t) { ss += t.squaredNorm(); });
  return std::sqrt(ss);
}

double clip_grad_norm(Params& grads, double max_norm) {
  const double norm = global_grad_norm(grads);
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for_each_param(grads, [&](const std::string&, Tensor& t) { t *= s; });
  }
  return norm;
}

double lr_at(Index step, const TrainConfig& cfg) {
  if (step < cfg.warmup_steps) {
    return cfg.lr_peak * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
  }
  const Index span = cfg.steps - cfg.warmup_steps;
  if (span <= 0) return cfg.lr_peak;
  const double progress = std::min(1.0, static_cast<double>(step - cfg.warmup_steps) / static_cast<double>(span));
  // Written as 1 - (1-r)(1-cos)/2 so the junction value is exactly lr_peak.
  return cfg.lr_peak * (1.0 - (1.0 - cfg.lr_min_ratio) * (1.0 - std::cos(std::numbers::pi * progress)) / 2.0);
}

namespace {

TimelineRow probe_row(const Model& model, const Batch& probe, Index step, double lr) {
  TimelineRow row;
  row.step = step;
  row.lr = lr;
  Params grads;
  const auto parts = loss_and_grad(model, probe, &grads);
  row.loss = {parts.total, parts.cross_entropy, parts.load_balance, parts.router_z};
  row.grad_norm = global_grad_norm(grads);
  const auto trace = forward(model, probe.prefix(probe.seq_len - 1)).trace;
  for (const auto& l : trace.layers) row.layer_var.push_back(probes::hidden_variance(l.x_out));
  row.last_layer_var = row.layer_var.back();
  return row;
}

}  // namespace

TrainResult train_run(const ModelConfig& model_cfg, const TrainConfig& cfg, const Corpus& corpus,
                      const std::string& out_dir) {
  model_cfg.validate();
  cfg.validate();
  if (corpus.size() == 0) throw ConfigError("train.corpus_path", "corpus is empty");
  if (model_cfg.vocab_size < kVocabSize) throw ConfigError("model.vocab_size", "byte corpus needs at least 257 tokens");
  if (model_cfg.max_seq_len < cfg.seq_len) throw ConfigError("train.seq_len", "exceeds model.max_seq_len");
  if (corpus.train_window_count(cfg.seq_len, cfg.holdout_fraction) <= 0) {
    throw ConfigError("train.corpus_path", "corpus too small for one training window");
  }
  const Batch probe = probe_batch(corpus, cfg);

  TrainResult r;
  r.model = build_model(model_cfg, Rng(cfg.seed).derive({kInitStream}));
  OptimizerState opt = init_optimizer(r.model, cfg);
  r.timeline.push_back(probe_row(r.model, probe, 0, lr_at(0, cfg)));
  for (Index s = 1; s <= cfg.steps; ++s) {
    Params grads;
    loss_and_grad(r.model, sample_train_batch(corpus, cfg, s - 1), &grads);
    if (cfg.grad_clip) clip_grad_norm(grads, *cfg.grad_clip);
    adamw_step(r.model.params, grads, opt, lr_at(s, cfg), cfg.weight_decay);
    if (s % cfg.probe_every == 0 || s == cfg.steps) r.timeline.push_back(probe_row(r.model, probe, s, lr_at(s, cfg)));
  }
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    std::ofstream(out_dir + "/timeline.csv", std::ios::binary) << timeline_csv(r.timeline, model_cfg.depth);
    save_checkpoint(r.model, out_dir + "/checkpoint.bin");
  }
  return r;
}

std::string timeline_header(Index depth) {
  std::string h = "step,lr,loss,ce,lb,z,last_layer_var";
  for (Index l = 0; l < depth; ++l) h += ",var_" + std::to_string(l);
  return h + ",grad_norm";
}

std::string timeline_csv(const std::vector<TimelineRow>& rows, Index depth) {
  std::string out = timeline_header(depth) + "\n";
  for (const auto& r : rows) {
    out += fmt::format("{},{:.17g},{:.17g},{:.17g},{:.17g},{:.17g},{:.17g}", r.step, r.lr, r.loss.total,
                       r.loss.cross_entropy, r.loss.load_balance, r.loss.router_z, r.last_layer_var);
    for (double v : r.layer_var) out += fmt::format(",{:.17g}", v);
    out += fmt::format(",{:.17g}\n", r.grad_norm);
  }
  return out;
}

}  // namespace depthlab
