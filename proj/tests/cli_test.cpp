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

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "depthlab/errors.hpp"
#include "depthlab/experiment.hpp"

namespace {

using namespace depthlab;
namespace fs = std::filesystem;

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / "depthlab_cli_test" / name;
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

ExperimentConfig smoke(const std::string& name = "smoke") {
  ExperimentConfig c = parse_config(preset_text("smoke"));
  c.name = name;
  c.train.corpus_path = DEPTHLAB_CORPUS;
  return c;
}

int cli(const std::string& args) {
  const int status = std::system((std::string(DEPTHLAB_CLI) + " " + args + " >/dev/null 2>&1").c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

TEST(Config, TextRoundTrip) {
  for (const auto& p : preset_names()) {
    const ExperimentConfig c = parse_config(preset_text(p));
    const std::string text = config_to_text(c);
    EXPECT_EQ(config_to_text(parse_config(text)), text) << p;
  }
  ExperimentConfig c = default_config();
  c.train.grad_clip.reset();
  c.theory.checks = {};
  EXPECT_EQ(config_to_text(parse_config(config_to_text(c))), config_to_text(c));
}

TEST(Config, UnknownKeyNamesTheKey) {
  try {
    parse_config("train.stepz = 3\n");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.path, "train.stepz");
  }
}

TEST(Config, ValidationRejectsBadValues) {
  EXPECT_THROW(parse_config("name = a/b\n").validate(), ConfigError);
  EXPECT_THROW(parse_config("model.vocab_size = 300\n").validate(), ConfigError);
  EXPECT_THROW(parse_config("train.seq_len = 1024\n").validate(), ConfigError);
  EXPECT_THROW(parse_config("effectiveness.fit_size = 0\n").validate(), ConfigError);
  EXPECT_THROW(parse_config("theory.checks = residual, nope\n").validate(), ConfigError);
  EXPECT_THROW(parse_config("sweep.axis = gqa_groups\nsweep.values = 3\n").validate(), ConfigError);
  EXPECT_THROW(parse_config("sweep.values = 1\n"), ConfigError);
  EXPECT_THROW(parse_config("sweep.axis = width\n"), ConfigError);
  EXPECT_THROW(preset_text("nope"), ConfigError);
  EXPECT_NO_THROW(parse_config("sweep.axis = depth\nsweep.values = 2, 4\n").validate());
}

TEST(Config, ModelMoeKeysApplyInAnyOrder) {
  const auto a = parse_config("model.moe.enabled = false\nmodel.moe.top_k = 1\n");
  EXPECT_FALSE(a.model.moe.has_value());
  const auto b = parse_config("model.moe.top_k = 1\n");
  ASSERT_TRUE(b.model.moe.has_value());
  EXPECT_EQ(b.model.moe->top_k, 1);
}

TEST(Sweep, ChildConfigs) {
  ExperimentConfig c = default_config();
  c.name = "x";
  c.train.steps = 300;
  c.train.warmup_steps = 30;
  c.train.seq_len = 32;
  c.sweep = SweepSection{SweepAxis::SeqLen, {"32", "128"}, {0, 1}};
  const auto t = sweep_child(c, "128", 1);
  EXPECT_EQ(t.name, "x-seq_len128-s1");
  EXPECT_EQ(t.train.steps, 75);
  EXPECT_EQ(t.train.warmup_steps, 7);
  EXPECT_EQ(t.train.seed, 1u);
  EXPECT_FALSE(t.sweep.has_value());

  c.model.n_heads = 16;
  c.sweep = SweepSection{SweepAxis::GqaGroups, {"4"}, {}};
  const auto g = sweep_child(c, "4", 0);
  EXPECT_EQ(g.name, "x");
  EXPECT_EQ(g.model.n_kv_heads, 4);
  EXPECT_THROW(sweep_child(c, "5", 0), ConfigError);
}

TEST(Run, ZeroStepsWritesArtifacts) {
  const fs::path dir = scratch("zero") / "run";
  ExperimentConfig c = smoke("zero");
  c.train.steps = 0;
  c.train.warmup_steps = 0;
  const RunSummary s = run_experiment(c, dir.string());
  EXPECT_EQ(s.steps, 0);
  for (const char* f : {"config.txt", "timeline.csv", "checkpoint.bin", "report.json", "causal.csv",
                        "permutation.csv", "usefulness.csv", "manifest.sha256"}) {
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  }
  EXPECT_NO_THROW(verify_manifest(dir.string()));
  // The snapshot reloads to the same configuration.
  EXPECT_EQ(config_to_text(load_config((dir / "config.txt").string())), slurp(dir / "config.txt"));
}

TEST(Run, RerunIsByteIdentical) {
  const fs::path root = scratch("rerun");
  run_experiment(smoke(), (root / "a").string());
  run_experiment(smoke(), (root / "b").string());
  EXPECT_EQ(slurp(root / "a" / "manifest.sha256"), slurp(root / "b" / "manifest.sha256"));
}

TEST(Run, TamperingIsDetected) {
  const fs::path dir = scratch("tamper") / "run";
  run_experiment(smoke(), dir.string());
  {
    std::ofstream f(dir / "timeline.csv", std::ios::app);
    f << "999,0,0,0\n";
  }
  EXPECT_THROW(verify_manifest(dir.string()), IntegrityError);
  run_experiment(smoke(), dir.string());
  fs::remove(dir / "causal.csv");
  EXPECT_THROW(verify_manifest(dir.string()), IntegrityError);
  run_experiment(smoke(), dir.string());
  std::ofstream(dir / "extra.txt") << "x";
  EXPECT_THROW(verify_manifest(dir.string()), IntegrityError);
}

TEST(Run, EffectivenessSkippedForOneLayer) {
  ExperimentConfig c = smoke("one");
  c.model.depth = 1;
  const fs::path dir = scratch("one") / "run";
  const RunSummary s = run_experiment(c, dir.string());
  EXPECT_FALSE(s.s_causal.has_value());
  EXPECT_FALSE(fs::exists(dir / "causal.csv"));
}

TEST(Sweep, SingleValueUsesBaseNameAndWritesTable) {
  ExperimentConfig c = smoke("solo");
  c.sweep = SweepSection{SweepAxis::WeightDecay, {"0.1"}, {}};
  const fs::path dir = scratch("solo");
  const auto runs = run_sweep(c, dir.string(), 1);
  ASSERT_EQ(runs.size(), 1u);
  EXPECT_EQ(runs[0].name, "solo");
  EXPECT_TRUE(fs::exists(dir / "solo" / "manifest.sha256"));
  const std::string table = slurp(dir / "comparison.csv");
  EXPECT_EQ(table.substr(0, table.find('\n')), comparison_header());
  EXPECT_NE(table.find("solo,weight_decay,0.1,"), std::string::npos);
}

TEST(Sweep, ParallelMatchesSerial) {
  ExperimentConfig c = smoke("par");
  c.train.steps = 4;
  c.sweep = SweepSection{SweepAxis::Depth, {"1", "2"}, {0, 1}};
  const fs::path a = scratch("par1"), b = scratch("par2");
  run_sweep(c, a.string(), 1);
  run_sweep(c, b.string(), 3);
  EXPECT_EQ(slurp(a / "comparison.csv"), slurp(b / "comparison.csv"));
  for (const char* r : {"par-depth1-s0", "par-depth2-s1"}) {
    EXPECT_EQ(slurp(a / r / "manifest.sha256"), slurp(b / r / "manifest.sha256"));
  }
}

TEST(Report, PassthroughAndUnion) {
  const fs::path root = scratch("report");
  run_experiment(smoke("r1"), (root / "r1").string());
  ExperimentConfig c2 = smoke("r2");
  c2.train.seed = 5;
  run_experiment(c2, (root / "r2").string());

  merge_reports({(root / "r1").string()}, (root / "one.csv").string());
  const std::string one = slurp(root / "one.csv");
  // Every timeline cell appears as one long row.
  std::istringstream tl(slurp(root / "r1" / "timeline.csv"));
  std::string header, line;
  std::getline(tl, header);
  std::size_t cells = 0;
  while (std::getline(tl, line)) cells += static_cast<std::size_t>(std::count(line.begin(), line.end(), ','));
  EXPECT_EQ(static_cast<std::size_t>(std::count(one.begin(), one.end(), '\n')), 1 + cells + 5);
  EXPECT_NE(one.find("r1,0,lr,"), std::string::npos);
  EXPECT_NE(one.find("r1,20,s_causal,"), std::string::npos);

  merge_reports({(root / "r1").string(), (root / "r2").string()}, (root / "two.csv").string());
  merge_reports({(root / "r2").string()}, (root / "r2.csv").string());
  const std::string two = slurp(root / "two.csv"), r2 = slurp(root / "r2.csv");
  EXPECT_EQ(two, one + r2.substr(r2.find('\n') + 1));

  std::ofstream(root / "r2" / "report.json", std::ios::app) << " ";
  EXPECT_THROW(merge_reports({(root / "r2").string()}, (root / "bad.csv").string()), IntegrityError);
}

TEST(Theory, EmptyGridProducesNothing) {
  TheorySection g;
  g.checks = {};
  EXPECT_TRUE(verify_theory(g, {}, "").empty());
}

TEST(Theory, GridIndexIsGlobalAndOutputsAreWritten) {
  TheorySection g;
  g.checks = {"seq_len", "gqa", "moe_grad"};
  g.seq_len_trials = 2000;
  g.gqa_trials = 500;
  g.moe_grad_instances = 3;
  const fs::path dir = scratch("theory");
  const auto r = verify_theory(g, {}, dir.string());
  ASSERT_EQ(r.size(), 3u);
  for (std::size_t i = 0; i < r.size(); ++i) EXPECT_EQ(r[i].grid_index, static_cast<Index>(i));
  EXPECT_TRUE(fs::exists(dir / "theory.json"));
  EXPECT_TRUE(fs::exists(dir / "theory_summary.csv"));
  EXPECT_NO_THROW(verify_manifest(dir.string()));
}

TEST(Cli, ExitCodes) {
  const fs::path root = scratch("cli");
  const std::string cfg = (root / "smoke.txt").string();
  std::ofstream(cfg) << "train.corpus_path = " << DEPTHLAB_CORPUS << "\n";
  EXPECT_EQ(cli("run --preset smoke --config " + cfg + " --out " + (root / "runs").string()), 0);
  EXPECT_EQ(cli("report " + (root / "runs" / "smoke").string() + " --out " + (root / "r.csv").string()), 0);
  std::ofstream(root / "runs" / "smoke" / "config.txt", std::ios::app) << "#\n";
  EXPECT_EQ(cli("report " + (root / "runs" / "smoke").string() + " --out " + (root / "r.csv").string()), 3);

  std::ofstream(root / "bad.txt") << "train.stepz = 1\n";
  EXPECT_EQ(cli("run --config " + (root / "bad.txt").string()), 2);
  EXPECT_EQ(cli("run --preset nope"), 2);

  const std::string small = (root / "theory.txt").string();
  std::ofstream(small) << "theory.checks = seq_len, moe\ntheory.seq_len.trials = 4000\ntheory.moe.trials = 2000\n";
  const std::string out = " --out " + (root / "theory").string();
  EXPECT_EQ(cli("verify-theory --config " + small + out), 0);
  EXPECT_NE(cli("verify-theory --self-test --config " + small + out), 0);
  std::ofstream(root / "empty.txt") << "theory.checks =\n";
  EXPECT_EQ(cli("verify-theory --config " + (root / "empty.txt").string() + out), 0);
}

}  // namespace
