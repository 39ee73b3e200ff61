#pragma once

#include <string>
#include <vector>

#include "atvc/baselines.hpp"
#include "atvc/config.hpp"
#include "atvc/trainer.hpp"

namespace atvc {

// Creates outdir/<UTC timestamp>-<command>/ (with a numeric suffix on
// collision) and returns the path.
std::string make_run_dir(const std::string& outdir, const std::string& command);

// Writes the finalized config as config.cfg so the run directory alone
// reproduces the run.
void write_config_snapshot(const std::string& run_dir, const RunConfig& cfg);

// All five evaluation policies, in reporting order.
const std::vector<PolicyKind>& all_policies();

// Environment for one cell of the scalability sweep: `agents` schedulers and
// servers on the ring map, arrival rate set so that system utilization
// M*eta/(S*beta) stays at 90%.
EnvConfig agents_sweep_env(const EnvConfig& base, int agents);

// Fraction of an epoch batch sent to the second accessible queue when the
// scheduler truly observes lengths (b1, b2) and fuses only its own message,
// averaged over `samples` action draws per cell. Grid is indexed [b1][b2].
std::vector<std::vector<double>> heatmap_grid(ParamStore& store, const ModelConfig& cfg,
                                              int samples, std::uint64_t seed);

// Subcommand bodies. Each writes its artifacts (CSVs and SVGs rendered from
// them) into run_dir and prints a short summary to stdout. checkpoint may be
// empty where parameters can be freshly initialized from the seed.
void cmd_train(const RunConfig& cfg, const std::string& run_dir, const std::string& resume);
EvalMetrics cmd_eval(const RunConfig& cfg, const std::string& run_dir,
                     const std::string& checkpoint, PolicyKind policy, int episodes_override,
                     bool decoder_accuracy);
void cmd_sweep_delta_t(const RunConfig& cfg, const std::string& run_dir,
                       const std::string& checkpoint);
void cmd_sweep_agents(const RunConfig& cfg, const std::string& run_dir,
                      const std::string& checkpoint);
void cmd_heatmap(const RunConfig& cfg, const std::string& run_dir,
                 const std::string& checkpoint);
void cmd_oracle(const RunConfig& cfg, const std::string& run_dir);

// Full command-line entry: parses arguments, loads and finalizes the config,
// dispatches the subcommand. Returns 0 on success, 2 on usage or
// configuration errors, 3 when training aborts on a non-finite loss, 1 on
// any other failure.
int cli_main(int argc, const char* const* argv);

}  // namespace atvc
