#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "atvc/env.hpp"
#include "atvc/model.hpp"
#include "atvc/trainer.hpp"

namespace atvc {

struct ExperimentConfig {
  int iterations = 300;
  int episodes_per_iteration = 50;
  int eval_episodes = 1000;
  int heatmap_samples = 1000;
  int checkpoint_every = 100;
  std::vector<double> delta_t_sweep{1.0, 2.0, 3.0, 4.0};
  std::vector<int> agents_sweep{3, 6, 9, 12};
  std::string outdir = "runs";
  std::uint64_t seed = 0;
  bool seed_set = false;  // seed has no sane default; runs must state one
};

// One experiment definition: environment, optimization, network shape, and
// protocol. Flat INI text with exactly the sections [env], [ppo], [model],
// and [experiment]; unknown sections or keys are rejected. The model's
// access width and buffer capacity always follow the environment.
struct RunConfig {
  EnvConfig env;
  PPOConfig ppo;
  ModelConfig model;
  ExperimentConfig experiment;
};

RunConfig parse_run_config_text(const std::string& text);
RunConfig parse_run_config_file(const std::string& path);

// Applies one "section.key=value" assignment through the same key table as
// the file parser, so overrides obey identical validation and later writes
// win in the serialized snapshot.
void apply_override(RunConfig& cfg, const std::string& assignment);

// Syncs the model shape to the environment and validates every section.
// Call after all overrides are applied and before using the config.
void finalize_run_config(RunConfig& cfg);

// Canonical INI text holding every key at its current value; parsing it
// back reproduces the config exactly.
std::string serialize_run_config(const RunConfig& cfg);

}  // namespace atvc
