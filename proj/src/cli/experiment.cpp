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
#include "depthlab/experiment.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <regex>
#include <set>
#include <sstream>
#include <thread>

#include <fmt/format.h>
#include <json.hpp>

#include "depthlab/errors.hpp"
#include "depthlab/kvtext.hpp"

namespace depthlab {
namespace fs = std::filesystem;
namespace {

constexpr const char* kManifest = "manifest.sha256";

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read " + path);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

void write_file(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f || !(f << text)) throw IoError("cannot write " + path);
}

std::uint64_t parse_u64(const std::string& path, const std::string& v) {
  const long long x = parse_int(path, v);
  if (x < 0) throw ConfigError(path, "must be >= 0");
  return static_cast<std::uint64_t>(x);
}

template <typename T, typename F>
std::vector<T> parse_items(const std::string& path, const std::string& v, F one) {
  std::vector<T> out;
  if (v.empty()) return out;
  for (const auto& item : parse_list(path, v)) out.push_back(static_cast<T>(one(path, item)));
  return out;
}

template <typename T>
std::string join(const std::vector<T>& v) {
  std::vector<std::string> s;
  for (const auto& x : v) {
    if constexpr (std::is_floating_point_v<T>) {
      s.push_back(format_real(x));
    } else if constexpr (std::is_same_v<T, std::string>) {
      s.push_back(x);
    } else {
      s.push_back(std::to_string(x));
    }
  }
  return fmt::format("{}", fmt::join(s, ", "));
}

// One schema entry per key: how to read it and how to write it back.
struct Field {
  std::string key;
  std::function<void(ExperimentConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

#define DL_INT(k, m)                                                                                          \
  Field {                                                                                                     \
    k, [](ExperimentConfig& c, const std::string& p, const std::string& v) {                                  \
      c.m = static_cast<std::remove_reference_t<decltype(c.m)>>(parse_int(p, v));                             \
    },                                                                                                        \
        [](const ExperimentConfig& c) { return std::to_string(c.m); }                                         \
  }
#define DL_U64(k, m)                                                                                          \
  Field {                                                                                                     \
    k, [](ExperimentConfig& c, const std::string& p, const std::string& v) { c.m = parse_u64(p, v); },        \
        [](const ExperimentConfig& c) { return std::to_string(c.m); }                                         \
  }
#define DL_REAL(k, m)                                                                                         \
  Field {                                                                                                     \
    k, [](ExperimentConfig& c, const std::string& p, const std::string& v) { c.m = parse_real(p, v); },       \
        [](const ExperimentConfig& c) { return format_real(c.m); }                                            \
  }
#define DL_BOOL(k, m)                                                                                         \
  Field {                                                                                                     \
    k, [](ExperimentConfig& c, const std::string& p, const std::string& v) { c.m = parse_bool(p, v); },       \
        [](const ExperimentConfig& c) { return std::string(c.m ? "true" : "false"); }                         \
  }
#define DL_STR(k, m)                                                                                          \
  Field {                                                                                                     \
    k, [](ExperimentConfig& c, const std::string&, const std::string& v) { c.m = v; },                        \
        [](const ExperimentConfig& c) { return c.m; }                                                         \
  }
#define DL_REALS(k, m)                                                                                        \
  Field {                                                                                                     \
    k, [](ExperimentConfig& c, const std::string& p, const std::string& v) {                                  \
      c.m = parse_items<double>(p, v, parse_real);                                                            \
    },                                                                                                        \
        [](const ExperimentConfig& c) { return join(c.m); }                                                   \
  }
#define DL_INTS(k, m)                                                                                         \
  Field {                                                                                                     \
    k, [](ExperimentConfig& c, const std::string& p, const std::string& v) {                                  \
      c.m = parse_items<Index>(p, v, parse_int);                                                              \
    },                                                                                                        \
        [](const ExperimentConfig& c) { return join(c.m); }                                                   \
  }
#define DL_STRS(k, m)                                                                                         \
  Field {                                                                                                     \
    k, [](ExperimentConfig& c, const std::string& p, const std::string& v) {                                  \
      c.m = v.empty() ? std::vector<std::string>{} : parse_list(p, v);                                        \
    },                                                                                                        \
        [](const ExperimentConfig& c) { return join(c.m); }                                                   \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> f{
      DL_STR("name", name),
      DL_STR("output_dir", output_dir),
      DL_INT("train.steps", train.steps),
      DL_INT("train.batch_size", train.batch_size),
      DL_INT("train.seq_len", train.seq_len),
      DL_REAL("train.lr_peak", train.lr_peak),
      DL_REAL("train.weight_decay", train.weight_decay),
      DL_INT("train.warmup_steps", train.warmup_steps),
      DL_REAL("train.lr_min_ratio", train.lr_min_ratio),
      Field{"train.grad_clip",
            [](ExperimentConfig& c, const std::string& p, const std::string& v) {
              if (v == "none") {
                c.train.grad_clip.reset();
              } else {
                c.train.grad_clip = parse_real(p, v);
              }
            },
            [](const ExperimentConfig& c) {
              return c.train.grad_clip ? format_real(*c.train.grad_clip) : std::string("none");
            }},
      DL_U64("train.seed", train.seed),
      DL_INT("train.probe_every", train.probe_every),
      DL_STR("train.corpus_path", train.corpus_path),
      DL_REAL("train.beta1", train.beta1),
      DL_REAL("train.beta2", train.beta2),
      DL_REAL("train.adam_eps", train.adam_eps),
      DL_INT("train.probe_seqs", train.probe_seqs),
      DL_REAL("train.holdout_fraction", train.holdout_fraction),
      DL_REALS("probes.weight_thresholds", probes.options.weight_thresholds),
      DL_REALS("probes.attn_thresholds", probes.options.attn_thresholds),
      DL_BOOL("probes.jacobian", probes.options.jacobian),
      DL_INT("probes.jacobian_position", probes.options.jacobian_position),
      DL_BOOL("probes.capture_attention", probes.capture_attention),
      DL_BOOL("effectiveness.enabled", effectiveness.enabled),
      DL_REAL("effectiveness.alpha", effectiveness.usefulness.alpha),
      DL_INT("effectiveness.fit_size", effectiveness.usefulness.fit_size),
      DL_REAL("effectiveness.ridge", effectiveness.usefulness.ridge),
      DL_INT("effectiveness.refine_sweeps", effectiveness.usefulness.refine_sweeps),
      DL_U64("theory.seed", theory.seed),
      DL_STRS("theory.checks", theory.checks),
      DL_REAL("theory.tolerance", theory.tolerance),
      DL_REALS("theory.residual.alpha", theory.residual_alpha),
      DL_REALS("theory.residual.p", theory.residual_p),
      DL_INTS("theory.residual.depth", theory.residual_depth),
      DL_INT("theory.residual.d", theory.residual_d),
      DL_INT("theory.residual.trials", theory.residual_trials),
      DL_REAL("theory.residual.tolerance", theory.residual_tol),
      DL_REALS("theory.transformer.p", theory.transformer_p),
      DL_INTS("theory.transformer.depth", theory.transformer_depth),
      DL_INT("theory.transformer.d", theory.transformer_d),
      DL_INT("theory.transformer.heads", theory.transformer_heads),
      DL_INT("theory.transformer.tokens", theory.transformer_tokens),
      DL_BOOL("theory.transformer.normalize", theory.transformer_normalize),
      DL_INT("theory.transformer.trials", theory.transformer_trials),
      DL_REALS("theory.weight_decay.eta", theory.wd_eta),
      DL_REALS("theory.weight_decay.lambda", theory.wd_lambda),
      DL_INTS("theory.weight_decay.steps", theory.wd_steps),
      DL_REAL("theory.weight_decay.sigma_g", theory.wd_sigma_g),
      DL_INT("theory.weight_decay.trials", theory.wd_trials),
      DL_INTS("theory.seq_len.T", theory.seq_len_T),
      DL_REAL("theory.seq_len.sigma2", theory.seq_len_sigma2),
      DL_INT("theory.seq_len.trials", theory.seq_len_trials),
      DL_INTS("theory.gqa.G", theory.gqa_G),
      DL_INT("theory.gqa.n", theory.gqa_n),
      DL_REAL("theory.gqa.sigma_v2", theory.gqa_sigma_v2),
      DL_INT("theory.gqa.value_dim", theory.gqa_value_dim),
      DL_INT("theory.gqa.trials", theory.gqa_trials),
      DL_INTS("theory.moe.k", theory.moe_k),
      DL_REAL("theory.moe.sigma2", theory.moe_sigma2),
      DL_REAL("theory.moe.jacobian_var", theory.moe_jacobian_var),
      DL_INT("theory.moe.jacobian_k", theory.moe_jacobian_k),
      DL_INT("theory.moe.trials", theory.moe_trials),
      DL_INT("theory.moe_grad.instances", theory.moe_grad_instances),
  };
  return f;
}

#undef DL_INT
#undef DL_U64
#undef DL_REAL
#undef DL_BOOL
#undef DL_STR
#undef DL_REALS
#undef DL_INTS
#undef DL_STRS

SweepAxis parse_axis(const std::string& v) {
  for (auto a : {SweepAxis::Depth, SweepAxis::WeightDecay, SweepAxis::SeqLen, SweepAxis::GqaGroups, SweepAxis::Moe}) {
    if (v == axis_name(a)) return a;
  }
  throw ConfigError("sweep.axis", "expected one of depth, weight_decay, seq_len, gqa_groups, moe; got '" + v + "'");
}

const std::set<std::string>& theory_check_names() {
  static const std::set<std::string> s{"residual", "transformer", "weight_decay", "seq_len", "gqa", "moe", "moe_grad"};
  return s;
}

}  // namespace

const char* axis_name(SweepAxis axis) {
  switch (axis) {
    case SweepAxis::Depth: return "depth";
    case SweepAxis::WeightDecay: return "weight_decay";
    case SweepAxis::SeqLen: return "seq_len";
    case SweepAxis::GqaGroups: return "gqa_groups";
    case SweepAxis::Moe: return "moe";
  }
  return "?";
}

// --- config --------------------------------------------------------------------

ExperimentConfig default_config() {
  ExperimentConfig c;
  c.model.depth = 4;
  c.model.d_model = 128;
  c.model.n_heads = 4;
  c.model.n_kv_heads = 4;
  c.model.mlp_hidden = 352;
  c.model.vocab_size = kVocabSize;
  c.model.max_seq_len = 512;
  return c;
}

void ExperimentConfig::validate() const {
  static const std::regex kName("[A-Za-z0-9_.-]+");
  if (!std::regex_match(name, kName)) throw ConfigError("name", "use letters, digits, '_', '-', '.'");
  if (output_dir.empty()) throw ConfigError("output_dir", "must not be empty");
  model.validate();
  train.validate();
  if (model.vocab_size != kVocabSize) throw ConfigError("model.vocab_size", "byte corpus needs 257");
  if (train.seq_len > model.max_seq_len) throw ConfigError("train.seq_len", "exceeds model.max_seq_len");
  for (double t : probes.options.weight_thresholds)
    if (!(t > 0.0)) throw ConfigError("probes.weight_thresholds", "must be > 0");
  for (double t : probes.options.attn_thresholds)
    if (!(t > 0.0)) throw ConfigError("probes.attn_thresholds", "must be > 0");
  const auto& u = effectiveness.usefulness;
  if (!(u.alpha >= 0.0)) throw ConfigError("effectiveness.alpha", "must be >= 0");
  if (u.fit_size < 1) throw ConfigError("effectiveness.fit_size", "must be >= 1");
  if (!(u.ridge >= 0.0)) throw ConfigError("effectiveness.ridge", "must be >= 0");
  if (u.refine_sweeps < 1) throw ConfigError("effectiveness.refine_sweeps", "must be >= 1");
  for (const auto& c : theory.checks)
    if (!theory_check_names().count(c)) throw ConfigError("theory.checks", "unknown check '" + c + "'");
  if (sweep) {
    if (sweep->values.empty()) throw ConfigError("sweep.values", "must not be empty");
    std::set<std::string> seen;
    for (const auto& v : sweep->values) {
      if (!seen.insert(v).second) throw ConfigError("sweep.values", "duplicate value '" + v + "'");
      for (std::uint64_t s : sweep->seeds.empty() ? std::vector<std::uint64_t>{train.seed} : sweep->seeds) {
        try {
          sweep_child(*this, v, s).validate();
        } catch (const ConfigError& e) {
          throw ConfigError("sweep.values", fmt::format("value '{}': {}", v, e.what()));
        }
      }
    }
  }
}

ExperimentConfig parse_config(const std::string& text, const ExperimentConfig& base) {
  ExperimentConfig c = base;
  std::map<std::string, const Field*> index;
  for (const auto& f : fields()) index[f.key] = &f;
  std::optional<std::string> moe_enabled;
  std::optional<std::string> axis, values, seeds;
  for (const auto& e : parse_kv_text(text)) {
    if (e.key.rfind("model.", 0) == 0) {
      const std::string f = e.key.substr(6);
      if (f == "moe.enabled") {
        moe_enabled = e.value;
      } else {
        set_model_field(c.model, f, e.value);
      }
    } else if (e.key == "sweep.axis") {
      axis = e.value;
    } else if (e.key == "sweep.values") {
      values = e.value;
    } else if (e.key == "sweep.seeds") {
      seeds = e.value;
    } else if (auto it = index.find(e.key); it != index.end()) {
      it->second->set(c, e.key, e.value);
    } else {
      throw ConfigError(e.key, fmt::format("unknown key (line {})", e.line));
    }
  }
  if (moe_enabled) set_model_field(c.model, "moe.enabled", *moe_enabled);
  if (axis || values || seeds) {
    SweepSection s = c.sweep.value_or(SweepSection{});
    if (axis) s.axis = parse_axis(*axis);
    if (values) s.values = values->empty() ? std::vector<std::string>{} : parse_list("sweep.values", *values);
    if (seeds) s.seeds = parse_items<std::uint64_t>("sweep.seeds", *seeds, parse_u64);
    if (!axis && !c.sweep) throw ConfigError("sweep.axis", "required when sweep.values or sweep.seeds is set");
    c.sweep = s;
  }
  return c;
}

ExperimentConfig load_config(const std::string& path, const ExperimentConfig& base) {
  return parse_config(read_file(path), base);
}

std::string config_to_text(const ExperimentConfig& c) {
  std::string out = model_config_to_text(c.model);
  for (const auto& f : fields()) out += f.key + " = " + f.get(c) + "\n";
  if (c.sweep) {
    out += fmt::format("sweep.axis = {}\n", axis_name(c.sweep->axis));
    out += "sweep.values = " + join(c.sweep->values) + "\n";
    out += "sweep.seeds = " + join(c.sweep->seeds) + "\n";
  }
  return out;
}

// --- presets -------------------------------------------------------------------

namespace {

const std::map<std::string, std::string>& presets() {
  // Desk-scale values: widths 64-128, depths up to 12, a few hundred steps.
  static const std::string kDesk =
      "model.d_model = 128\nmodel.mlp_hidden = 352\n"
      "train.steps = 300\ntrain.batch_size = 4\ntrain.seq_len = 32\ntrain.warmup_steps = 30\n"
      "train.probe_every = 50\n";
  static const std::string kHeads = "model.n_heads = 4\nmodel.n_kv_heads = 4\n";
  static const std::map<std::string, std::string> p{
      {"smoke",
       "name = smoke\nmodel.depth = 2\nmodel.d_model = 32\nmodel.n_heads = 4\nmodel.n_kv_heads = 2\n"
       "model.mlp_hidden = 64\ntrain.steps = 20\ntrain.batch_size = 2\ntrain.seq_len = 16\n"
       "train.warmup_steps = 2\ntrain.probe_every = 10\neffectiveness.fit_size = 256\n"},
      {"depth", "name = depth\n" + kDesk + kHeads + "sweep.axis = depth\nsweep.values = 2, 4, 8\nsweep.seeds = 0, 1, 2\n"},
      {"weight-decay", "name = weight-decay\nmodel.depth = 4\n" + kDesk + kHeads +
                           "sweep.axis = weight_decay\nsweep.values = 0, 0.1\nsweep.seeds = 0, 1, 2\n"},
      {"seq-len", "name = seq-len\nmodel.depth = 4\n" + kDesk + kHeads +
                      "sweep.axis = seq_len\nsweep.values = 32, 128\nsweep.seeds = 0, 1, 2\n"},
      {"gqa", "name = gqa\nmodel.depth = 4\n" + kDesk +
                  "model.n_heads = 16\nmodel.n_kv_heads = 16\n"
                  "sweep.axis = gqa_groups\nsweep.values = 1, 4, 16\nsweep.seeds = 0, 1, 2\n"},
      // Two experts of half width are active per token: active FFN width
      // matches the dense arm.
      {"moe", "name = moe\nmodel.depth = 4\n" + kDesk + kHeads +
                  "model.moe.enabled = true\nmodel.moe.n_experts = 4\nmodel.moe.top_k = 2\n"
                  "model.moe.expert_hidden = 176\nsweep.axis = moe\nsweep.values = off, on\nsweep.seeds = 0, 1, 2\n"},
      // Longer context, moderate decay, grouped heads and a top-1 MoE whose
      // four quarter-width experts hold the same FFN parameter count as the
      // dense baseline below.
      {"stacked",
       "name = stacked\nmodel.depth = 8\nmodel.d_model = 128\nmodel.n_heads = 4\nmodel.n_kv_heads = 1\n"
       "model.mlp_hidden = 352\nmodel.moe.enabled = true\nmodel.moe.n_experts = 4\nmodel.moe.top_k = 1\n"
       "model.moe.expert_hidden = 88\ntrain.steps = 75\ntrain.batch_size = 4\ntrain.seq_len = 128\n"
       "train.warmup_steps = 7\ntrain.probe_every = 25\ntrain.weight_decay = 0.1\n"},
      {"baseline-deep", "name = baseline-deep\nmodel.depth = 8\n" + kDesk + kHeads + "train.weight_decay = 0\n"},
      {"theory", "name = theory\n"},
  };
  return p;
}

}  // namespace

std::vector<std::string> preset_names() {
  std::vector<std::string> n;
  for (const auto& [k, v] : presets()) n.push_back(k);
  return n;
}

std::string preset_text(const std::string& name) {
  const auto it = presets().find(name);
  if (it == presets().end()) {
    throw ConfigError("preset", fmt::format("unknown preset '{}' (have {})", name, fmt::join(preset_names(), ", ")));
  }
  return it->second;
}

// --- manifests -----------------------------------------------------------------

std::string sha256_hex(const std::string& bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("sha256 failed");
  }
  std::string out;
  for (unsigned int i = 0; i < len; ++i) out += fmt::format("{:02x}", md[i]);
  return out;
}

namespace {

std::vector<std::string> listed_files(const std::string& dir) {
  std::vector<std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const std::string rel = fs::relative(e.path(), dir).generic_string();
    if (rel != kManifest) files.push_back(rel);
  }
  std::sort(files.begin(), files.end());
  return files;
}

}  // namespace

void write_manifest(const std::string& dir) {
  std::string text;
  for (const auto& f : listed_files(dir)) text += sha256_hex(read_file((fs::path(dir) / f).string())) + "  " + f + "\n";
  write_file((fs::path(dir) / kManifest).string(), text);
}

void verify_manifest(const std::string& dir) {
  const fs::path mpath = fs::path(dir) / kManifest;
  if (!fs::exists(mpath)) throw IntegrityError(mpath.string() + ": manifest missing");
  std::istringstream in(read_file(mpath.string()));
  std::set<std::string> listed;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line.size() < 67 || line.substr(64, 2) != "  ") throw IntegrityError(mpath.string() + ": malformed line");
    const std::string hash = line.substr(0, 64), rel = line.substr(66);
    const fs::path p = fs::path(dir) / rel;
    if (!fs::exists(p)) throw IntegrityError(p.string() + ": listed in manifest but missing");
    if (sha256_hex(read_file(p.string())) != hash) throw IntegrityError(p.string() + ": content hash mismatch");
    listed.insert(rel);
  }
  for (const auto& f : listed_files(dir)) {
    if (!listed.count(f)) throw IntegrityError((fs::path(dir) / f).string() + ": not in manifest");
  }
}

// --- run -------------------------------------------------------------------------

RunSummary run_experiment(const ExperimentConfig& config, const std::string& dir) {
  ExperimentConfig cfg = config;
  cfg.sweep.reset();  // the snapshot describes this run alone
  cfg.validate();
  const Corpus corpus = Corpus::load(cfg.train.corpus_path);
  fs::create_directories(dir);
  write_file((fs::path(dir) / "config.txt").string(), config_to_text(cfg));

  const TrainResult tr = train_run(cfg.model, cfg.train, corpus, dir);
  const Index t = cfg.train.seq_len;
  const Batch eval = probe_batch(corpus, cfg.train);
  const Batch inputs = eval.prefix(t);
  const probes::ProbeReport pr = probes::run_probes(tr.model, inputs, cfg.probes.options);
  if (cfg.probes.capture_attention) {
    ForwardOptions fo;
    fo.capture_attention = true;
    probes::write_attention_csv(forward(tr.model, inputs, fo).trace, cfg.model.n_heads,
                                (fs::path(dir) / "attention").string());
  }

  RunSummary s;
  s.name = cfg.name;
  s.dir = dir;
  const TimelineRow& last = tr.timeline.back();
  s.steps = last.step;
  s.final_loss = last.loss.cross_entropy;
  s.last_layer_var = pr.last_layer_var;

  nlohmann::json report;
  report["name"] = cfg.name;
  report["final"] = {{"step", last.step},
                     {"loss", last.loss.total},
                     {"ce", last.loss.cross_entropy},
                     {"last_layer_var", pr.last_layer_var}};
  report["probes"] = probes::to_json(pr);
  report["effectiveness"] = nullptr;
  if (cfg.effectiveness.enabled && cfg.model.depth >= 2) {
    const auto& uo = cfg.effectiveness.usefulness;
    const Index fit_seqs = (uo.fit_size + t - 1) / t;
    const Batch fit = corpus.heldout_batch(t, cfg.train.holdout_fraction, cfg.train.probe_seqs, fit_seqs);
    const auto er = effectiveness::evaluate(tr.model, fit, eval, uo);
    report["effectiveness"] = effectiveness::to_json(er);
    effectiveness::write_matrix_csv(er.causal.matrix, (fs::path(dir) / "causal.csv").string());
    effectiveness::write_matrix_csv(er.permutation.matrix, (fs::path(dir) / "permutation.csv").string());
    std::string u = "layer,linear_loss,ratio,useful\n";
    for (std::size_t l = 0; l < er.usefulness.ratio.size(); ++l) {
      u += fmt::format("{},{:.17g},{:.17g},{}\n", l, er.usefulness.linear_loss[l], er.usefulness.ratio[l],
                       er.usefulness.useful[l] ? 1 : 0);
    }
    write_file((fs::path(dir) / "usefulness.csv").string(), u);
    s.s_causal = er.causal.global;
    s.s_perm = er.permutation.global;
    s.s_useful = er.usefulness.global;
    s.effective = er.usefulness.effective;
    s.wasted = er.usefulness.wasted;
  }
  write_file((fs::path(dir) / "report.json").string(), report.dump(2) + "\n");
  write_manifest(dir);
  return s;
}

// --- sweep -----------------------------------------------------------------------

ExperimentConfig sweep_child(const ExperimentConfig& config, const std::string& value, std::uint64_t seed) {
  if (!config.sweep) throw ConfigError("sweep.axis", "config has no sweep section");
  const SweepSection& sw = *config.sweep;
  ExperimentConfig c = config;
  c.sweep.reset();
  c.train.seed = seed;
  const std::string path = "sweep.values";
  switch (sw.axis) {
    case SweepAxis::Depth:
      c.model.depth = static_cast<Index>(parse_int(path, value));
      break;
    case SweepAxis::WeightDecay:
      c.train.weight_decay = parse_real(path, value);
      break;
    case SweepAxis::SeqLen: {
      const auto t = static_cast<Index>(parse_int(path, value));
      if (t < 1) throw ConfigError(path, "sequence length must be >= 1");
      // Equal compute: tokens per run stay fixed, rounding steps down.
      c.train.steps = config.train.steps * config.train.seq_len / t;
      c.train.warmup_steps = config.train.warmup_steps * config.train.seq_len / t;
      c.train.seq_len = t;
      c.model.max_seq_len = std::max(c.model.max_seq_len, t);
      break;
    }
    case SweepAxis::GqaGroups: {
      const auto g = static_cast<Index>(parse_int(path, value));
      if (g < 1 || c.model.n_heads % g != 0) {
        throw ConfigError(path, fmt::format("group size {} must divide model.n_heads = {}", g, c.model.n_heads));
      }
      c.model.n_kv_heads = c.model.n_heads / g;
      break;
    }
    case SweepAxis::Moe:
      if (parse_bool(path, value)) {
        c.model.moe = config.model.moe.value_or(MoeConfig{});
      } else {
        c.model.moe.reset();
      }
      break;
  }
  const std::size_t runs = sw.values.size() * std::max<std::size_t>(1, sw.seeds.size());
  if (runs > 1) c.name = fmt::format("{}-{}{}-s{}", config.name, axis_name(sw.axis), value, seed);
  return c;
}

std::string comparison_header() {
  return "run,axis,value,seed,steps,final_loss,last_layer_var,s_causal,s_perm,s_useful,effective,wasted";
}

namespace {

template <typename T>
std::string opt(const std::optional<T>& v) {
  if (!v) return "";
  if constexpr (std::is_floating_point_v<T>) {
    return fmt::format("{:.17g}", *v);
  } else {
    return std::to_string(*v);
  }
}

}  // namespace

std::vector<RunSummary> run_sweep(const ExperimentConfig& config, const std::string& dir, int jobs) {
  config.validate();
  if (!config.sweep) throw ConfigError("sweep.axis", "config has no sweep section");
  const SweepSection& sw = *config.sweep;
  const std::vector<std::uint64_t> seeds = sw.seeds.empty() ? std::vector<std::uint64_t>{config.train.seed} : sw.seeds;
  struct Job {
    std::string value;
    std::uint64_t seed;
    ExperimentConfig cfg;
  };
  std::vector<Job> work;
  for (const auto& v : sw.values)
    for (auto s : seeds) work.push_back({v, s, sweep_child(config, v, s)});

  fs::create_directories(dir);
  std::vector<std::optional<RunSummary>> done(work.size());
  std::mutex mu;
  std::exception_ptr failure;
  std::atomic<std::size_t> next{0};

  auto write_table = [&] {
    std::string text = comparison_header() + "\n";
    for (std::size_t i = 0; i < work.size(); ++i) {
      if (!done[i]) continue;
      const RunSummary& r = *done[i];
      text += fmt::format("{},{},{},{},{},{:.17g},{:.17g},{},{},{},{},{}\n", r.name, axis_name(sw.axis), work[i].value,
                          work[i].seed, r.steps, r.final_loss, r.last_layer_var, opt(r.s_causal), opt(r.s_perm),
                          opt(r.s_useful), opt(r.effective), opt(r.wasted));
    }
    write_file((fs::path(dir) / "comparison.csv").string(), text);
  };
  auto worker = [&] {
    for (;;) {
      {
        std::lock_guard<std::mutex> lock(mu);
        if (failure) return;
      }
      const std::size_t i = next.fetch_add(1);
      if (i >= work.size()) return;
      try {
        RunSummary r = run_experiment(work[i].cfg, (fs::path(dir) / work[i].cfg.name).string());
        std::lock_guard<std::mutex> lock(mu);
        done[i] = std::move(r);
        write_table();
      } catch (...) {
        std::lock_guard<std::mutex> lock(mu);
        if (!failure) failure = std::current_exception();
        write_table();
        return;
      }
    }
  };
  const int n = std::max(1, std::min<int>(jobs, static_cast<int>(work.size())));
  if (n == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int i = 0; i < n; ++i) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  if (failure) std::rethrow_exception(failure);
  std::vector<RunSummary> out;
  for (auto& d : done) out.push_back(std::move(*d));
  return out;
}

// --- theory ------------------------------------------------------------------------

std::vector<theory::TheoremCheckReport> verify_theory(const TheorySection& g, const theory::Policy& policy,
                                                      const std::string& dir) {
  using namespace theory;
  std::vector<TheoremCheckReport> out;
  Index grid = 0;
  auto options = [&](Index trials) {
    McOptions o;
    o.trials = trials;
    o.seed = g.seed;
    o.grid_index = grid++;
    o.policy = policy;
    return o;
  };
  auto guarded = [&](const std::string& what, auto&& fn) {
    try {
      out.push_back(fn());
    } catch (const DomainError& e) {
      throw DomainError(fmt::format("theory.{} (grid point {}): {}", what, grid - 1, e.what()));
    }
  };
  const std::set<std::string> want(g.checks.begin(), g.checks.end());
  for (const auto& c : want)
    if (!theory_check_names().count(c)) throw ConfigError("theory.checks", "unknown check '" + c + "'");

  if (want.count("residual")) {
    for (double a : g.residual_alpha)
      for (double p : g.residual_p)
        for (Index l : g.residual_depth) {
          ResidualParams rp;
          rp.d = g.residual_d;
          rp.depth = l;
          rp.alpha = a;
          rp.p = p;
          guarded(fmt::format("residual[alpha={},p={},L={}]", a, p, l),
                  [&] { return check_residual_sparsity_bound(rp, options(g.residual_trials), g.residual_tol); });
        }
  }
  if (want.count("transformer")) {
    for (Index l : g.transformer_depth)
      for (double p : g.transformer_p) {
        TransformerParams tp;
        tp.d = g.transformer_d;
        tp.n_heads = g.transformer_heads;
        tp.n_tokens = g.transformer_tokens;
        tp.ffn_hidden = 2 * g.transformer_d;
        tp.depth = l;
        tp.p = p;
        tp.normalize = g.transformer_normalize;
        guarded(fmt::format("transformer[L={},p={}]", l, p),
                [&] { return check_transformer_bound(tp, options(g.transformer_trials)); });
      }
  }
  if (want.count("weight_decay") && !g.wd_steps.empty()) {
    for (double eta : g.wd_eta)
      for (double lam : g.wd_lambda) {
        WeightDecayParams wp;
        wp.eta = eta;
        wp.lambda = lam;
        wp.sigma_g = g.wd_sigma_g;
        wp.checkpoints = g.wd_steps;
        wp.lambda_grid.clear();
        for (double l2 : g.wd_lambda)
          if (eta * l2 > 0.0 && eta * l2 <= 1.0) wp.lambda_grid.push_back(l2);
        guarded(fmt::format("weight_decay[eta={},lambda={}]", eta, lam),
                [&] { return check_weight_decay_contraction(wp, options(g.wd_trials), g.tolerance); });
      }
  }
  if (want.count("seq_len") && !g.seq_len_T.empty()) {
    guarded("seq_len", [&] {
      return check_sequence_length_variance(g.seq_len_T, g.seq_len_sigma2, options(g.seq_len_trials), g.tolerance);
    });
  }
  if (want.count("gqa") && !g.gqa_G.empty()) {
    guarded("gqa", [&] {
      return check_gqa_variance(g.gqa_G, g.gqa_n, g.gqa_sigma_v2, g.gqa_value_dim, options(g.gqa_trials), g.tolerance);
    });
  }
  if (want.count("moe") && !g.moe_k.empty()) {
    MoeParams mp;
    mp.ks = g.moe_k;
    mp.sigma2 = g.moe_sigma2;
    mp.jacobian_var = g.moe_jacobian_var;
    mp.jacobian_k = g.moe_jacobian_k;
    guarded("moe", [&] { return check_moe_variance(mp, options(g.moe_trials), g.tolerance); });
  }
  if (want.count("moe_grad") && g.moe_grad_instances > 0) {
    guarded("moe_grad", [&] { return check_moe_gradient_bound(MoeGradientParams{}, options(g.moe_grad_instances)); });
  }

  if (!dir.empty()) {
    fs::create_directories(dir);
    auto arr = nlohmann::json::array();
    for (const auto& r : out) arr.push_back(to_json(r));
    write_file((fs::path(dir) / "theory.json").string(), arr.dump(2) + "\n");
    write_file((fs::path(dir) / "theory_summary.csv").string(), summary_csv(out));
    write_manifest(dir);
  }
  return out;
}

// --- report ------------------------------------------------------------------------

void merge_reports(const std::vector<std::string>& run_dirs, const std::string& out_csv) {
  std::string out = "run,step,metric,value\n";
  std::set<std::string> names;
  for (const auto& dir : run_dirs) {
    verify_manifest(dir);
    const std::string run = fs::path(dir).lexically_normal().filename().string().empty()
                                ? fs::path(dir).lexically_normal().parent_path().filename().string()
                                : fs::path(dir).lexically_normal().filename().string();
    if (!names.insert(run).second) throw ConfigError("report", "duplicate run name '" + run + "'");
    std::istringstream tl(read_file((fs::path(dir) / "timeline.csv").string()));
    std::string header, line;
    std::getline(tl, header);
    std::vector<std::string> cols;
    {
      std::istringstream h(header);
      std::string c;
      while (std::getline(h, c, ',')) cols.push_back(c);
    }
    while (std::getline(tl, line)) {
      if (line.empty()) continue;
      std::istringstream row(line);
      std::vector<std::string> cells;
      std::string c;
      while (std::getline(row, c, ',')) cells.push_back(c);
      if (cells.size() != cols.size()) throw IntegrityError(dir + "/timeline.csv: ragged row");
      for (std::size_t i = 1; i < cols.size(); ++i) out += fmt::format("{},{},{},{}\n", run, cells[0], cols[i], cells[i]);
    }
    const auto report = nlohmann::json::parse(read_file((fs::path(dir) / "report.json").string()));
    const auto step = report["final"]["step"].get<long long>();
    const auto& eff = report["effectiveness"];
    if (!eff.is_null()) {
      auto put = [&](const char* metric, const nlohmann::json& v) {
        out += fmt::format("{},{},{},{}\n", run, step, metric, v.dump());
      };
      put("s_causal", eff["causal"]["global"]);
      put("s_perm", eff["permutation"]["global"]);
      put("s_useful", eff["usefulness"]["global"]);
      put("effective", eff["usefulness"]["effective"]);
      put("wasted", eff["usefulness"]["wasted"]);
    }
  }
  const auto parent = fs::path(out_csv).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
  write_file(out_csv, out);
}

}  // namespace depthlab
