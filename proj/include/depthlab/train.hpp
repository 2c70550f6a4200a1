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

#include "depthlab/model.hpp"

namespace depthlab {

constexpr int kByteVocab = 256;
constexpr int kPadToken = 256;
constexpr Index kVocabSize = 257;

struct TrainConfig {
  Index steps = 300;
  Index batch_size = 4;
  Index seq_len = 32;
  double lr_peak = 1e-3;
  double weight_decay = 0.1;
  Index warmup_steps = 30;
  double lr_min_ratio = 0.1;
  std::optional<double> grad_clip = 1.0;
  std::uint64_t seed = 0;
  Index probe_every = 50;
  std::string corpus_path = "data/corpus.txt";
  double beta1 = 0.9;
  double beta2 = 0.95;
  double adam_eps = 1e-8;
  Index probe_seqs = 8;
  double holdout_fraction = 0.01;

  /// Throws ConfigError naming the offending "train.*" field.
  void validate() const;
};

/// Raw bytes; token id = byte value. Windows of T+1 tokens with stride T tile
/// the training region; the held-out tail (holdout_fraction of the bytes) is
/// tiled by non-overlapping windows and never used for training.
class Corpus {
 public:
  explicit Corpus(std::vector<std::uint8_t> bytes) : bytes_(std::move(bytes)) {}
  static Corpus load(const std::string& path);

  Index size() const { return static_cast<Index>(bytes_.size()); }
  const std::vector<std::uint8_t>& bytes() const { return bytes_; }

  /// Start of the held-out tail.
  Index holdout_begin(double holdout_fraction) const;
  Index train_window_count(Index seq_len, double holdout_fraction) const;
  /// Training window i: bytes [i*T, i*T + T + 1).
  std::vector<int> train_window(Index i, Index seq_len) const;
  Index heldout_window_count(Index seq_len, double holdout_fraction) const;
  /// `count` consecutive held-out windows starting at window `first`.
  Batch heldout_batch(Index seq_len, double holdout_fraction, Index first, Index count) const;

 private:
  std::vector<std::uint8_t> bytes_;
};

/// batch_size training windows drawn uniformly from the substream of `step`.
Batch sample_train_batch(const Corpus& corpus, const TrainConfig& cfg, Index step);

struct OptimizerState {
  Params m;
  Params v;
  Index t = 0;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
};

OptimizerState init_optimizer(const Model& model, const TrainConfig& cfg);

/// Decoupled decay W <- (1 - lr*lambda) W, then a bias-corrected Adam step.
/// Norm gains are not decayed. A non-finite gradient throws
/// NonFiniteGradientError before anything changes.
void adamw_step(Params& params, const Params& grads, OptimizerState& state, double lr, double lambda);

double global_grad_norm(const Params& grads);
/// Scales grads to norm `max_norm` when they exceed it; returns the norm
/// before clipping.
double clip_grad_norm(Params& grads, double max_norm);

/// Linear warmup 0 -> lr_peak, then cosine decay to lr_peak * lr_min_ratio
/// at the final step.
double lr_at(Index step, const TrainConfig& cfg);

struct TimelineRow {
  Index step = 0;
  double lr = 0.0;
  LossParts loss;
  double last_layer_var = 0.0;
  std::vector<double> layer_var;
  double grad_norm = 0.0;
};

struct TrainResult {
  Model model;
  std::vector<TimelineRow> timeline;
};

/// Trains from a fresh model seeded by cfg.seed. Probes run on the fixed
/// held-out probe batch at step 0, every probe_every steps and at the end.
/// When out_dir is non-empty, timeline.csv and checkpoint.bin are written.
TrainResult train_run(const ModelConfig& model_cfg, const TrainConfig& cfg, const Corpus& corpus,
                      const std::string& out_dir = "");

Batch probe_batch(const Corpus& corpus, const TrainConfig& cfg);

std::string timeline_header(Index depth);
std::string timeline_csv(const std::vector<TimelineRow>& rows, Index depth);

}  // namespace depthlab
