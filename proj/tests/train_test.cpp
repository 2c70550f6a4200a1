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
#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numbers>

#include "depthlab/train.hpp"
#include "test_util.hpp"

namespace depthlab {
namespace {

Corpus test_corpus() {
  // Structured bytes: a repeating phrase with a drifting counter.
  std::string s;
  for (int i = 0; s.size() < 200000; ++i) s += "the quick brown fox " + std::to_string(i % 97) + " jumps.\n";
  return Corpus(std::vector<std::uint8_t>(s.begin(), s.end()));
}

ModelConfig small_model(Index depth = 2) {
  ModelConfig c;
  c.depth = depth;
  c.d_model = 32;
  c.n_heads = 4;
  c.n_kv_heads = 2;
  c.mlp_hidden = 64;
  c.vocab_size = kVocabSize;
  c.max_seq_len = 64;
  return c;
}

TrainConfig small_train(Index steps) {
  TrainConfig t;
  t.steps = steps;
  t.batch_size = 2;
  t.seq_len = 16;
  t.warmup_steps = steps / 10;
  t.probe_every = 10;
  t.lr_peak = 3e-3;
  return t;
}

Params random_like(const Model& m, std::uint64_t seed) {
  Params p = zero_params<double>(m.config);
  Rng r(seed);
  for_each_param(p, [&](const std::string&, Tensor& t) { t = gaussian(r, t.rows(), t.cols(), 0.0, 1.0); });
  return p;
}

Params zeros_like(const Model& m) {
  Params p = zero_params<double>(m.config);
  for_each_param(p, [](const std::string&, Tensor& t) { t.setZero(); });
  return p;
}

TEST(AdamW, ZeroGradientNoDecayIsNoop) {
  Model m = build_model(small_model(), Rng(1));
  const Params before = m.params;
  TrainConfig cfg;
  auto st = init_optimizer(m, cfg);
  adamw_step(m.params, zeros_like(m), st, 1e-3, 0.0);
  EXPECT_TRUE(params_equal(m.params, before));
}

TEST(AdamW, ZeroGradientScalesDecayedParametersExactly) {
  Model m = build_model(small_model(), Rng(2));
  for (auto& l : m.params.layers) l.attn_norm.setConstant(1.7);
  const Params before = m.params;
  TrainConfig cfg;
  auto st = init_optimizer(m, cfg);
  const double lr = 0.01, lambda = 0.1;
  adamw_step(m.params, zeros_like(m), st, lr, lambda);
  std::vector<Tensor> prev;
  for_each_param(before, [&](const std::string&, const Tensor& t) { prev.push_back(t); });
  std::size_t i = 0;
  for_each_param(m.params, [&](const std::string& name, const Tensor& t) {
    const Tensor expect = is_norm_gain(name) ? prev[i] : Tensor(prev[i] * (1.0 - lr * lambda));
    EXPECT_TRUE(bitwise_equal(t, expect)) << name;
    ++i;
  });
}

TEST(AdamW, RepeatedZeroGradientStepsFollowProductOfFactors) {
  Model m = build_model(small_model(), Rng(3));
  const Tensor w0 = m.params.layers[0].wq;
  TrainConfig cfg = small_train(20);
  auto st = init_optimizer(m, cfg);
  Tensor expect = w0;
  for (Index s = 1; s <= 20; ++s) {
    const double lr = lr_at(s, cfg);
    adamw_step(m.params, zeros_like(m), st, lr, 0.3);
    expect *= 1.0 - lr * 0.3;
  }
  EXPECT_TRUE(bitwise_equal(m.params.layers[0].wq, expect));
}

TEST(AdamW, OneStepMatchesScalarReference) {
  Model m = build_model(small_model(), Rng(4));
  const Params before = m.params;
  const Params g = random_like(m, 5);
  TrainConfig cfg;
  auto st = init_optimizer(m, cfg);
  const double lr = 2e-3, lambda = 0.05;
  adamw_step(m.params, g, st, lr, lambda);
  // Reference: scalar textbook AdamW from zero moments at t = 1.
  const double b1 = 0.9, b2 = 0.95, eps = 1e-8;
  std::vector<std::pair<std::string, Tensor>> w0, gg;
  for_each_param(before, [&](const std::string& n, const Tensor& t) { w0.push_back({n, t}); });
  for_each_param(g, [&](const std::string& n, const Tensor& t) { gg.push_back({n, t}); });
  std::size_t i = 0;
  for_each_param(m.params, [&](const std::string& name, const Tensor& t) {
    for (Index k = 0; k < t.size(); ++k) {
      double w = w0[i].second.data()[k];
      const double gk = gg[i].second.data()[k];
      if (!is_norm_gain(name)) w = w - lr * lambda * w;
      const double mhat = ((1 - b1) * gk) / (1 - b1);
      const double vhat = ((1 - b2) * gk * gk) / (1 - b2);
      w -= lr * mhat / (std::sqrt(vhat) + eps);
      ASSERT_NEAR(t.data()[k], w, 1e-12) << name;
    }
    ++i;
  });
  EXPECT_EQ(st.t, 1);
}

TEST(AdamW, NonFiniteGradientRejected) {
  Model m = build_model(small_model(), Rng(6));
  const Params before = m.params;
  Params g = zeros_like(m);
  g.layers[1].wv(0, 0) = std::nan("");
  TrainConfig cfg;
  auto st = init_optimizer(m, cfg);
  EXPECT_THROW(adamw_step(m.params, g, st, 1e-3, 0.1), NonFiniteGradientError);
  EXPECT_TRUE(params_equal(m.params, before));
  EXPECT_EQ(st.t, 0);
}

TEST(Schedule, WarmupCosine) {
  TrainConfig cfg;
  cfg.steps = 1000;
  cfg.warmup_steps = 100;
  cfg.lr_peak = 3e-3;
  cfg.lr_min_ratio = 0.1;
  EXPECT_EQ(lr_at(0, cfg), 0.0);
  EXPECT_EQ(lr_at(100, cfg), 3e-3);
  const double mid = 3e-3 * (0.1 + 0.9 * (1.0 + std::cos(std::numbers::pi / 2.0)) / 2.0);
  EXPECT_NEAR(lr_at(550, cfg), mid, 1e-15);
  EXPECT_NEAR(lr_at(1000, cfg), 3e-4, 1e-15);
  EXPECT_NEAR(lr_at(99, cfg), lr_at(100, cfg), 3e-3 / 100 + 1e-15);
  for (Index s = 100; s < 1000; ++s) EXPECT_LE(lr_at(s + 1, cfg), lr_at(s, cfg));
}

TEST(Corpus, WindowsTileTrainingRegionAndHoldoutIsDisjoint) {
  Corpus c = test_corpus();
  const Index t = 16;
  const Index n = c.train_window_count(t, 0.01);
  ASSERT_GT(n, 0);
  const Index hb = c.holdout_begin(0.01);
  EXPECT_LE((n - 1) * t + t + 1, hb);
  EXPECT_GT(n * t + t + 1, hb);  // no further window fits
  for (Index i : {Index{0}, n / 2, n - 1}) {
    auto w = c.train_window(i, t);
    EXPECT_EQ(static_cast<Index>(w.size()), t + 1);
    for (int tok : w) EXPECT_LT(tok, kByteVocab);
  }
  Batch probe = c.heldout_batch(t, 0.01, 0, 8);
  EXPECT_EQ(probe.seq_len, t + 1);
  EXPECT_THROW(c.heldout_batch(t, 0.01, 0, c.heldout_window_count(t, 0.01) + 1), ConfigError);
}

TEST(Corpus, BatchSamplingIsDeterministicPerStep) {
  Corpus c = test_corpus();
  TrainConfig cfg = small_train(10);
  EXPECT_EQ(sample_train_batch(c, cfg, 3).tokens, sample_train_batch(c, cfg, 3).tokens);
  EXPECT_NE(sample_train_batch(c, cfg, 3).tokens, sample_train_batch(c, cfg, 4).tokens);
}

TEST(TrainRun, ZeroStepsProbesInitialModelOnly) {
  Corpus c = test_corpus();
  auto r = train_run(small_model(), small_train(0), c);
  ASSERT_EQ(r.timeline.size(), 1u);
  EXPECT_EQ(r.timeline[0].step, 0);
  EXPECT_NEAR(r.timeline[0].loss.cross_entropy, std::log(257.0), 0.5);
}

TEST(TrainRun, RepeatedRunsAreByteIdentical) {
  Corpus c = test_corpus();
  const auto base = std::filesystem::temp_directory_path() / "depthlab_train_det";
  std::filesystem::remove_all(base);
  train_run(small_model(), small_train(15), c, (base / "a").string());
  train_run(small_model(), small_train(15), c, (base / "b").string());
  auto slurp = [](const std::filesystem::path& p) {
    std::ifstream f(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  };
  for (const char* name : {"timeline.csv", "checkpoint.bin"}) {
    const auto a = slurp(base / "a" / name);
    EXPECT_FALSE(a.empty());
    EXPECT_EQ(a, slurp(base / "b" / name)) << name;
  }
  std::filesystem::remove_all(base);
}

TEST(TrainRun, TimelineScheduleAndColumns) {
  Corpus c = test_corpus();
  auto r = train_run(small_model(3), small_train(25), c);
  std::vector<Index> steps;
  for (const auto& row : r.timeline) steps.push_back(row.step);
  EXPECT_EQ(steps, (std::vector<Index>{0, 10, 20, 25}));
  EXPECT_LT(r.timeline.back().loss.cross_entropy, r.timeline.front().loss.cross_entropy);
  EXPECT_EQ(timeline_header(3), "step,lr,loss,ce,lb,z,last_layer_var,var_0,var_1,var_2,grad_norm");
  const std::string csv = timeline_csv(r.timeline, 3);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 5);
}

TEST(TrainRun, TooSmallCorpusIsConfigError) {
  Corpus c(std::vector<std::uint8_t>(10, 'a'));
  EXPECT_THROW(train_run(small_model(), small_train(1), c), ConfigError);
  TrainConfig bad = small_train(10);
  bad.warmup_steps = 11;
  EXPECT_THROW(bad.validate(), ConfigError);
}

}  // namespace
}  // namespace depthlab
