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
#include <optional>
#include <string>
#include <vector>

#include "depthlab/effectiveness.hpp"
#include "depthlab/model.hpp"
#include "depthlab/probes.hpp"
#include "depthlab/theory.hpp"
#include "depthlab/train.hpp"

namespace depthlab {

struct ProbesSection {
  probes::ProbeOptions options;
  bool capture_attention = false;  // also export attention grids as CSV
};

struct EffectivenessSection {
  bool enabled = true;
  effectiveness::UsefulnessOptions usefulness;
};

enum class SweepAxis { Depth, WeightDecay, SeqLen, GqaGroups, Moe };

const char* axis_name(SweepAxis axis);

struct SweepSection {
  SweepAxis axis = SweepAxis::Depth;
  std::vector<std::string> values;
  std::vector<std::uint64_t> seeds;  // empty: train.seed only
};

/// Grids for verify-theory. An empty list drops the corresponding points.
struct TheorySection {
  std::uint64_t seed = 0;
  std::vector<std::string> checks{"residual", "transformer", "weight_decay", "seq_len", "gqa", "moe", "moe_grad"};

  std::vector<double> residual_alpha{0.25, 1.0, 4.0};
  std::vector<double> residual_p{0.1, 0.5, 1.0};
  std::vector<Index> residual_depth{8, 32};
  Index residual_d = 64;
  Index residual_trials = 20000;
  double residual_tol = 0.10;

  std::vector<double> transformer_p{0.0, 0.1, 0.5, 1.0};
  std::vector<Index> transformer_depth{8};
  Index transformer_d = 32;
  Index transformer_heads = 4;
  Index transformer_tokens = 16;
  bool transformer_normalize = true;
  Index transformer_trials = 200;

  std::vector<double> wd_eta{0.1};
  std::vector<double> wd_lambda{0.0, 0.01, 0.1, 1.0};
  std::vector<Index> wd_steps{10, 100, 1000};
  double wd_sigma_g = 1.0;
  Index wd_trials = 4000;

  std::vector<Index> seq_len_T{1, 4, 16, 64, 256};
  double seq_len_sigma2 = 4.0;
  Index seq_len_trials = 40000;

  std::vector<Index> gqa_G{1, 4, 16};
  Index gqa_n = 64;
  double gqa_sigma_v2 = 1.0;
  Index gqa_value_dim = 8;
  Index gqa_trials = 8000;

  std::vector<Index> moe_k{1, 2, 4, 8};
  double moe_sigma2 = 1.0;
  double moe_jacobian_var = 0.04;
  Index moe_jacobian_k = 4;
  Index moe_trials = 8000;

  Index moe_grad_instances = 20;

  double tolerance = 0.05;
};

struct ExperimentConfig {
  std::string name = "run";
  ModelConfig model;
  TrainConfig train;
  ProbesSection probes;
  EffectivenessSection effectiveness;
  std::optional<SweepSection> sweep;
  TheorySection theory;
  std::string output_dir = "runs";

  /// Throws ConfigError naming the offending key.
  void validate() const;
};

/// Baseline every config starts from: a byte-level model at desk width.
ExperimentConfig default_config();

/// Applies flat `section.key = value` text on top of `base`. Unknown keys,
/// malformed values and duplicates throw ConfigError with the key path.
ExperimentConfig parse_config(const std::string& text, const ExperimentConfig& base = default_config());
ExperimentConfig load_config(const std::string& path, const ExperimentConfig& base = default_config());
/// Resolved snapshot; parse_config(config_to_text(c)) reproduces c.
std::string config_to_text(const ExperimentConfig& config);

std::vector<std::string> preset_names();
/// Preset text in the config format; unknown names throw ConfigError("preset").
std::string preset_text(const std::string& name);

struct RunSummary {
  std::string name;
  std::string dir;
  Index steps = 0;
  double final_loss = 0.0;
  double last_layer_var = 0.0;
  std::optional<double> s_causal, s_perm, s_useful;
  std::optional<Index> effective, wasted;
};

/// Trains, probes, scores and writes every artifact plus manifest.sha256
/// into `dir`.
RunSummary run_experiment(const ExperimentConfig& config, const std::string& dir);

/// Config of one sweep child: the axis value applied (with steps scaled as
/// base_steps * base_T / T for the seq_len axis) and the given seed.
ExperimentConfig sweep_child(const ExperimentConfig& config, const std::string& value, std::uint64_t seed);

/// One run per (value, seed) under `dir`, plus comparison.csv. A failing
/// child aborts the sweep; finished children keep their artifacts.
std::vector<RunSummary> run_sweep(const ExperimentConfig& config, const std::string& dir, int jobs = 1);

std::string comparison_header();

/// Runs every requested theorem check; domain errors are rethrown with the
/// grid point. Writes theory.json, theory_summary.csv and a manifest when
/// dir is non-empty.
std::vector<theory::TheoremCheckReport> verify_theory(const TheorySection& grid, const theory::Policy& policy,
                                                      const std::string& dir = "");

/// "<hex sha256>  <relative path>" per file, sorted, excluding the manifest.
void write_manifest(const std::string& dir);
/// Throws IntegrityError naming the first missing, altered or unlisted file.
void verify_manifest(const std::string& dir);
std::string sha256_hex(const std::string& bytes);

/// Verifies each run's manifest and writes long-format rows
/// run,step,metric,value (timelines plus final scores) to `out_csv`.
void merge_reports(const std::vector<std::string>& run_dirs, const std::string& out_csv);

}  // namespace depthlab
