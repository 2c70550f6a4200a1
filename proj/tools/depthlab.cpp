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
// Command-line driver: train single runs, run sweeps, check the analytical
// results by Monte Carlo and merge run reports.
//
// Exit codes: 0 success, 1 a theory check failed, 2 bad configuration or I/O,
// 3 an artifact failed its integrity check.
#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "depthlab/errors.hpp"
#include "depthlab/experiment.hpp"

namespace {

using namespace depthlab;
namespace fs = std::filesystem;

struct Common {
  std::string preset;
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--preset", c.preset, "Start from a named preset")
      ->check(CLI::IsMember(preset_names()));
  app->add_option("--config", c.config, "key = value config file, applied over the preset");
  app->add_option("--out", c.out, "Output root (overrides output_dir)");
  app->add_option("--seed", c.seed, "Seed override for training and theory");
}

ExperimentConfig resolve(const Common& c, const std::string& default_preset = {}) {
  ExperimentConfig cfg = default_config();
  const std::string preset = c.preset.empty() ? default_preset : c.preset;
  if (!preset.empty()) cfg = parse_config(preset_text(preset), cfg);
  if (!c.config.empty()) cfg = load_config(c.config, cfg);
  if (!c.out.empty()) cfg.output_dir = c.out;
  if (c.seed) {
    cfg.train.seed = *c.seed;
    cfg.theory.seed = *c.seed;
    if (cfg.sweep) cfg.sweep->seeds = {*c.seed};
  }
  cfg.validate();
  return cfg;
}

std::string opt(const std::optional<double>& v) { return v ? fmt::format("{:.4f}", *v) : "-"; }

void print_summary(const RunSummary& r) {
  fmt::print("{}: steps {} loss {:.4f} last-layer var {:.4f} S_causal {} S_perm {} S_useful {}\n  -> {}\n", r.name,
             r.steps, r.final_loss, r.last_layer_var, opt(r.s_causal), opt(r.s_perm), opt(r.s_useful), r.dir);
}

int run(const Common& c) {
  const ExperimentConfig cfg = resolve(c, "smoke");
  if (cfg.sweep) throw ConfigError("sweep.axis", "config describes a sweep; use the sweep command");
  print_summary(run_experiment(cfg, (fs::path(cfg.output_dir) / cfg.name).string()));
  return 0;
}

int sweep(const Common& c, int jobs) {
  const ExperimentConfig cfg = resolve(c);
  if (!cfg.sweep) throw ConfigError("sweep.axis", "config has no sweep section");
  const std::string dir = (fs::path(cfg.output_dir) / cfg.name).string();
  for (const auto& r : run_sweep(cfg, dir, jobs)) print_summary(r);
  fmt::print("comparison table: {}\n", (fs::path(dir) / "comparison.csv").string());
  return 0;
}

int verify(const Common& c, bool self_test) {
  const ExperimentConfig cfg = resolve(c, "theory");
  const theory::Policy policy = self_test ? theory::Policy::corrupted() : theory::Policy{};
  const std::string dir = (fs::path(cfg.output_dir) / cfg.name).string();
  const auto reports = verify_theory(cfg.theory, policy, dir);
  if (reports.empty()) {
    std::fprintf(stderr, "warning: theory grid is empty; nothing was checked\n");
    return 0;
  }
  std::size_t failed = 0, checks = 0;
  for (const auto& r : reports) {
    for (const auto& ch : r.checks) {
      ++checks;
      if (ch.pass) continue;
      ++failed;
      fmt::print("FAIL {} [grid {}] {}: empirical {:.6g} target {:.6g} se {:.3g}\n", r.theorem, r.grid_index,
                 ch.name, ch.empirical, ch.target, ch.se);
    }
  }
  fmt::print("{}/{} checks passed over {} grid points{}\n  -> {}\n", checks - failed, checks, reports.size(),
             self_test ? " (self-test policy)" : "", dir);
  return failed == 0 ? 0 : 1;
}

int report(const std::vector<std::string>& dirs, const std::string& out) {
  merge_reports(dirs, out);
  fmt::print("wrote {}\n", out);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Depth-utilization experiments for small byte-level transformers"};
  app.require_subcommand(1);

  Common run_opts, sweep_opts, theory_opts;
  int jobs = 1;
  bool self_test = false;
  std::vector<std::string> report_dirs;
  std::string report_out = "report.csv";

  auto* run_cmd = app.add_subcommand("run", "Train one model, probe it and score its layers");
  add_common(run_cmd, run_opts);
  auto* sweep_cmd = app.add_subcommand("sweep", "Run every value and seed of the config's sweep axis");
  add_common(sweep_cmd, sweep_opts);
  sweep_cmd->add_option("--jobs", jobs, "Runs to train in parallel")->check(CLI::PositiveNumber);
  auto* theory_cmd = app.add_subcommand("verify-theory", "Monte Carlo checks of the analytical results");
  add_common(theory_cmd, theory_opts);
  theory_cmd->add_flag("--self-test", self_test, "Use a deliberately broken verdict policy; must fail");
  auto* report_cmd = app.add_subcommand("report", "Verify run directories and merge them into one long table");
  report_cmd->add_option("runs", report_dirs, "Run directories")->required()->check(CLI::ExistingDirectory);
  report_cmd->add_option("--out", report_out, "Output CSV");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  try {
    if (*run_cmd) return run(run_opts);
    if (*sweep_cmd) return sweep(sweep_opts, jobs);
    if (*theory_cmd) return verify(theory_opts, self_test);
    if (*report_cmd) return report(report_dirs, report_out);
  } catch (const IntegrityError& e) {
    std::fprintf(stderr, "integrity error: %s\n", e.what());
    return 3;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const IoError& e) {
    std::fprintf(stderr, "i/o error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
