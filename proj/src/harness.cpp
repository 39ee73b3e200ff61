#include "atvc/harness.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "atvc/metrics.hpp"
#include "atvc/oracle.hpp"

namespace atvc {

namespace {

std::string cell_str(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

ChartSeries csv_series(const CsvTable& t, const std::string& name, const std::string& x_col,
                       const std::string& y_col) {
  ChartSeries s;
  s.name = name;
  const int xc = t.column(x_col), yc = t.column(y_col);
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    s.x.push_back(t.number(r, xc));
    s.y.push_back(t.number(r, yc));
  }
  return s;
}

ChartSeries filtered_series(const CsvTable& t, const std::string& key_col, const std::string& key,
                            const std::string& x_col, const std::string& y_col) {
  ChartSeries s;
  s.name = key;
  const int kc = t.column(key_col), xc = t.column(x_col), yc = t.column(y_col);
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    if (t.rows[r][kc] != key) continue;
    s.x.push_back(t.number(r, xc));
    s.y.push_back(t.number(r, yc));
  }
  return s;
}

struct ModelBundle {
  ParamStore store;
  ModelConfig model;
};

// Checkpointed parameters when a path is given, otherwise a fresh seeded
// initialization of the configured shape. The checkpoint's stored shape wins
// because the parameters were created for it.
ModelBundle load_or_init(const RunConfig& cfg, const std::string& checkpoint) {
  if (!checkpoint.empty()) {
    LoadedCheckpoint loaded = load_training_checkpoint(checkpoint);
    return {std::move(loaded.params), loaded.model};
  }
  ModelConfig mc = cfg.model;
  return {init_params(mc, derive_seed(cfg.experiment.seed, Stream::ParamInit, 0, 0)), mc};
}

EvalConfig eval_config(const RunConfig& cfg, PolicyKind policy, int episodes) {
  EvalConfig ec;
  ec.episodes = episodes;
  ec.gamma = cfg.model.gamma;
  ec.policy = policy;
  ec.seed = cfg.experiment.seed;
  return ec;
}

EvalMetrics run_policy_eval(ModelBundle& bundle, const EnvConfig& env, const EvalConfig& ec) {
  if (policy_needs_model(ec.policy)) return evaluate(&bundle.store, &bundle.model, env, ec);
  return evaluate(nullptr, nullptr, env, ec);
}

// policy-major sweep over one numeric axis shared by both sweep commands.
void run_sweep(const RunConfig& cfg, const std::string& run_dir, const std::string& checkpoint,
               const std::string& axis_name, const std::vector<double>& axis,
               const std::function<EnvConfig(double)>& env_for, const std::string& csv_name,
               const std::string& svg_title) {
  ModelBundle bundle = load_or_init(cfg, checkpoint);
  const auto& policies = all_policies();
  struct Cell {
    PolicyKind policy;
    double value = 0.0;
    double drop = 0.0;
  };
  std::vector<Cell> cells;
  for (PolicyKind p : policies) {
    for (double v : axis) cells.push_back({p, v, 0.0});
  }

  std::exception_ptr failure = nullptr;
#pragma omp parallel for schedule(dynamic)
  for (std::size_t i = 0; i < cells.size(); ++i) {
    try {
      const EnvConfig env = env_for(cells[i].value);
      const EvalConfig ec = eval_config(cfg, cells[i].policy, cfg.experiment.eval_episodes);
      cells[i].drop = run_policy_eval(bundle, env, ec).drop_rate;
    } catch (...) {
#pragma omp critical
      if (!failure) failure = std::current_exception();
    }
  }
  if (failure) std::rethrow_exception(failure);

  std::vector<std::vector<std::string>> rows;
  for (const Cell& c : cells) {
    rows.push_back({policy_kind_name(c.policy), cell_str(c.value), cell_str(c.drop)});
  }
  const std::string csv_path = run_dir + "/" + csv_name + ".csv";
  write_csv(csv_path, {"policy", axis_name, "drop_rate"}, rows);

  const CsvTable table = read_csv(csv_path);
  std::vector<ChartSeries> series;
  for (PolicyKind p : policies) {
    series.push_back(
        filtered_series(table, "policy", policy_kind_name(p), axis_name, "drop_rate"));
  }
  write_line_chart_svg(run_dir + "/" + csv_name + ".svg", svg_title, axis_name, "drop rate",
                       series);

  for (const Cell& c : cells) {
    std::cout << csv_name << "  " << policy_kind_name(c.policy) << "  " << axis_name << "="
              << c.value << "  drop_rate=" << c.drop << "\n";
  }
}

}  // namespace

std::string make_run_dir(const std::string& outdir, const std::string& command) {
  std::filesystem::create_directories(outdir);
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char stamp[32];
  std::strftime(stamp, sizeof stamp, "%Y%m%d-%H%M%S", &tm);
  const std::string base = outdir + "/" + stamp + "-" + command;
  std::string dir = base;
  int suffix = 2;
  while (std::filesystem::exists(dir)) dir = base + "-" + std::to_string(suffix++);
  std::filesystem::create_directories(dir);
  return dir;
}

void write_config_snapshot(const std::string& run_dir, const RunConfig& cfg) {
  std::ofstream out(run_dir + "/config.cfg", std::ios::trunc);
  if (!out) throw ConfigError("cannot write " + run_dir + "/config.cfg");
  out << serialize_run_config(cfg);
}

const std::vector<PolicyKind>& all_policies() {
  static const std::vector<PolicyKind> kinds{PolicyKind::ATVC, PolicyKind::ATVCFullComm,
                                            PolicyKind::ATVCNoComm, PolicyKind::JSQ,
                                            PolicyKind::Random};
  return kinds;
}

EnvConfig agents_sweep_env(const EnvConfig& base, int agents) {
  if (agents < 1) throw ConfigError("agents_sweep entries must be >= 1");
  EnvConfig env = base;
  env.schedulers = agents;
  env.servers = agents;
  env.access_map.clear();  // ring topology at every size
  env.arrival_rate = 0.9 * base.service_rate * env.servers / env.schedulers;
  return env;
}

std::vector<std::vector<double>> heatmap_grid(ParamStore& store, const ModelConfig& cfg,
                                              int samples, std::uint64_t seed) {
  if (cfg.access != 2) {
    throw ConfigError("the allocation heatmap is unsupported for access != 2");
  }
  if (samples < 1) throw ConfigError("heatmap needs at least one sample per cell");
  const int side = cfg.buffer_cap + 1;
  std::vector<std::vector<double>> grid(side, std::vector<double>(side, 0.0));

  std::exception_ptr failure = nullptr;
#pragma omp parallel for schedule(dynamic) collapse(2)
  for (int b1 = 0; b1 < side; ++b1) {
    for (int b2 = 0; b2 < side; ++b2) {
      try {
        Rng rng(derive_seed(seed, Stream::Heatmap, b1, b2));
        const GaussianMessage msg = encode(store, cfg, {b1, b2}, 0);
        const FusedBelief fused = no_comm_fuse(msg);
        std::vector<double> z(cfg.latent_dim);
        double acc = 0.0;
        for (int s = 0; s < samples; ++s) {
          for (int c = 0; c < cfg.latent_dim; ++c) {
            z[c] = fused.mu[c] + std::sqrt(fused.sigma[c]) * rng.normal();
          }
          acc += act(store, cfg, z, rng).fractions[1];
        }
        grid[b1][b2] = acc / samples;
      } catch (...) {
#pragma omp critical
        if (!failure) failure = std::current_exception();
      }
    }
  }
  if (failure) std::rethrow_exception(failure);
  return grid;
}

void cmd_train(const RunConfig& cfg, const std::string& run_dir, const std::string& resume) {
  ParamStore store;
  ModelConfig mc = cfg.model;
  std::optional<TrainerState> state;
  if (!resume.empty()) {
    LoadedCheckpoint loaded = load_training_checkpoint(resume);
    store = std::move(loaded.params);
    mc = loaded.model;
    state = loaded.state;
    std::cout << "resuming from " << resume << " at iteration " << loaded.state.iteration
              << "\n";
  } else {
    store = init_params(mc, derive_seed(cfg.experiment.seed, Stream::ParamInit, 0, 0));
  }

  TrainLoopConfig loop;
  loop.iterations = cfg.experiment.iterations;
  loop.episodes_per_iteration = cfg.experiment.episodes_per_iteration;
  loop.seed = cfg.experiment.seed;
  loop.run_dir = run_dir;
  loop.checkpoint_every = cfg.experiment.checkpoint_every;

  train(store, mc, cfg.env, cfg.ppo, loop, state, [&](const IterationMetrics& m) {
    std::cout << "iteration " << m.iteration + 1 << "/" << loop.iterations << "  reward "
              << m.mean_reward << "  drop " << m.drop_rate << "  comm " << m.comm_ratio
              << "  kl " << m.kl << "\n";
    std::cout.flush();
  });

  const CsvTable t = read_csv(run_dir + "/metrics.csv");
  write_line_chart_svg(run_dir + "/reward.svg", "Mean episode reward", "iteration",
                       "mean reward", {csv_series(t, "mean_reward", "iteration", "mean_reward")});
  write_line_chart_svg(run_dir + "/comm_ratio.svg", "Communication ratio", "iteration",
                       "selected fraction",
                       {csv_series(t, "comm_ratio", "iteration", "comm_ratio")});
  write_line_chart_svg(run_dir + "/losses.svg", "Training losses", "iteration", "loss",
                       {csv_series(t, "policy_loss", "iteration", "policy_loss"),
                        csv_series(t, "value_loss", "iteration", "value_loss"),
                        csv_series(t, "vae_loss", "iteration", "vae_loss")});
}

EvalMetrics cmd_eval(const RunConfig& cfg, const std::string& run_dir,
                     const std::string& checkpoint, PolicyKind policy, int episodes_override,
                     bool decoder_accuracy) {
  const int episodes =
      episodes_override > 0 ? episodes_override : cfg.experiment.eval_episodes;
  EvalConfig ec = eval_config(cfg, policy, episodes);
  ec.decoder_accuracy = decoder_accuracy;

  EvalMetrics m;
  if (policy_needs_model(policy)) {
    ModelBundle bundle = load_or_init(cfg, checkpoint);
    m = evaluate(&bundle.store, &bundle.model, cfg.env, ec);
  } else {
    m = evaluate(nullptr, nullptr, cfg.env, ec);
  }

  write_csv(run_dir + "/eval.csv",
            {"policy", "episodes", "mean_reward", "drop_rate", "comm_ratio",
             "decoder_accuracy"},
            {{policy_kind_name(policy), std::to_string(m.episodes), cell_str(m.mean_reward),
              cell_str(m.drop_rate), cell_str(m.comm_ratio), cell_str(m.decoder_accuracy)}});
  std::cout << policy_kind_name(policy) << " over " << m.episodes << " episodes:  mean reward "
            << m.mean_reward << "  drop rate " << m.drop_rate << "  comm ratio " << m.comm_ratio;
  if (decoder_accuracy) std::cout << "  decoder accuracy " << m.decoder_accuracy;
  std::cout << "\n";
  return m;
}

void cmd_sweep_delta_t(const RunConfig& cfg, const std::string& run_dir,
                       const std::string& checkpoint) {
  run_sweep(cfg, run_dir, checkpoint, "delta_t", cfg.experiment.delta_t_sweep,
            [&cfg](double dt) {
              EnvConfig env = cfg.env;
              env.sync_interval = dt;
              return env;
            },
            "sweep_delta_t", "Drop rate vs synchronization interval");
}

void cmd_sweep_agents(const RunConfig& cfg, const std::string& run_dir,
                      const std::string& checkpoint) {
  std::vector<double> axis;
  for (int m : cfg.experiment.agents_sweep) axis.push_back(m);
  run_sweep(cfg, run_dir, checkpoint, "agents", axis,
            [&cfg](double m) { return agents_sweep_env(cfg.env, static_cast<int>(m)); },
            "sweep_agents", "Drop rate vs schedulers at 90% utilization");
}

void cmd_heatmap(const RunConfig& cfg, const std::string& run_dir,
                 const std::string& checkpoint) {
  ModelBundle bundle = load_or_init(cfg, checkpoint);
  const int samples = std::max(cfg.experiment.heatmap_samples, 1000);
  const auto grid = heatmap_grid(bundle.store, bundle.model, samples, cfg.experiment.seed);

  std::vector<std::vector<std::string>> rows;
  for (std::size_t b1 = 0; b1 < grid.size(); ++b1) {
    for (std::size_t b2 = 0; b2 < grid[b1].size(); ++b2) {
      rows.push_back({std::to_string(b1), std::to_string(b2), cell_str(grid[b1][b2])});
    }
  }
  const std::string csv_path = run_dir + "/heatmap.csv";
  write_csv(csv_path, {"b1", "b2", "p"}, rows);

  const CsvTable t = read_csv(csv_path);
  const int side = bundle.model.buffer_cap + 1;
  std::vector<std::vector<double>> replot(side, std::vector<double>(side, 0.0));
  const int c1 = t.column("b1"), c2 = t.column("b2"), cp = t.column("p");
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    replot[static_cast<int>(t.number(r, c1))][static_cast<int>(t.number(r, c2))] =
        t.number(r, cp);
  }
  write_heatmap_svg(run_dir + "/heatmap.svg", "P(send to queue 2) given true lengths", "b2",
                    "b1", replot);
  std::cout << "heatmap over " << side * side << " cells, " << samples
            << " action samples each\n";
}

void cmd_oracle(const RunConfig& cfg, const std::string& run_dir) {
  const auto access_map = cfg.env.access_map.empty()
                              ? default_access_map(cfg.env.schedulers, cfg.env.servers,
                                                   cfg.env.access)
                              : cfg.env.access_map;
  std::vector<int> feeders(cfg.env.servers, 0);
  for (const auto& row : access_map) {
    for (int q : row) ++feeders[q];
  }

  std::vector<std::vector<std::string>> rows;
  double total_arrivals = 0.0, total_drops = 0.0;
  for (int q = 0; q < cfg.env.servers; ++q) {
    ChainSpec spec;
    spec.buffer_cap = cfg.env.buffer_cap;
    spec.arrival_rate =
        feeders[q] * cfg.env.arrival_rate * cfg.env.sync_interval / cfg.env.access;
    spec.service_rate = cfg.env.service_rate * cfg.env.sync_interval;
    const double drops = spec.arrival_rate > 0.0 ? stationary_drop_rate(spec) : 0.0;
    const double fraction = spec.arrival_rate > 0.0 ? drops / spec.arrival_rate : 0.0;
    total_arrivals += spec.arrival_rate;
    total_drops += drops;
    rows.push_back({std::to_string(q), cell_str(spec.arrival_rate),
                    cell_str(spec.service_rate), cell_str(drops), cell_str(fraction)});
  }
  write_csv(run_dir + "/oracle.csv",
            {"queue", "arrivals_per_epoch", "service_per_epoch", "expected_drops_per_epoch",
             "drop_fraction"},
            rows);
  const double aggregate = total_arrivals > 0.0 ? total_drops / total_arrivals : 0.0;
  std::cout << "uniform-split stationary analysis: expected drop fraction " << aggregate
            << " (" << total_drops << " drops per epoch over " << total_arrivals
            << " arrivals)\n";
}

int cli_main(int argc, const char* const* argv) {
  CLI::App app{"attention-gated variational communication for decentralized load balancing"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;
  std::string checkpoint, resume, policy_name = "atvc";
  int episodes_override = -1;
  bool decoder_accuracy = false;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "run configuration file")->required();
    sub->add_option("--set", overrides, "override section.key=value (repeatable)");
  };

  CLI::App* train_cmd = app.add_subcommand("train", "run the training loop");
  add_common(train_cmd);
  train_cmd->add_option("--resume", resume, "checkpoint to continue from");

  CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate one policy");
  add_common(eval_cmd);
  eval_cmd->add_option("--checkpoint", checkpoint, "trained parameters");
  eval_cmd->add_option("--policy", policy_name,
                       "atvc | atvc-full | atvc-nocomm | jsq | random");
  eval_cmd->add_option("--episodes", episodes_override, "episode count override");
  eval_cmd->add_flag("--decoder-accuracy", decoder_accuracy,
                     "also score queue-length reconstruction");

  CLI::App* sweep_dt_cmd =
      app.add_subcommand("sweep-delta-t", "drop rate across synchronization intervals");
  add_common(sweep_dt_cmd);
  sweep_dt_cmd->add_option("--checkpoint", checkpoint, "trained parameters");

  CLI::App* sweep_m_cmd =
      app.add_subcommand("sweep-agents", "drop rate across system sizes at fixed utilization");
  add_common(sweep_m_cmd);
  sweep_m_cmd->add_option("--checkpoint", checkpoint, "trained parameters");

  CLI::App* heatmap_cmd = app.add_subcommand("heatmap", "allocation probability grid");
  add_common(heatmap_cmd);
  heatmap_cmd->add_option("--checkpoint", checkpoint, "trained parameters");

  CLI::App* oracle_cmd =
      app.add_subcommand("oracle", "stationary drop analysis for the uniform split");
  add_common(oracle_cmd);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    RunConfig cfg = parse_run_config_file(config_path);
    for (const std::string& assignment : overrides) apply_override(cfg, assignment);
    finalize_run_config(cfg);

    CLI::App* active = app.get_subcommands().front();
    const std::string run_dir = make_run_dir(cfg.experiment.outdir, active->get_name());
    write_config_snapshot(run_dir, cfg);

    if (active == train_cmd) {
      cmd_train(cfg, run_dir, resume);
    } else if (active == eval_cmd) {
      cmd_eval(cfg, run_dir, checkpoint, policy_kind_from_string(policy_name),
               episodes_override, decoder_accuracy);
    } else if (active == sweep_dt_cmd) {
      cmd_sweep_delta_t(cfg, run_dir, checkpoint);
    } else if (active == sweep_m_cmd) {
      cmd_sweep_agents(cfg, run_dir, checkpoint);
    } else if (active == heatmap_cmd) {
      cmd_heatmap(cfg, run_dir, checkpoint);
    } else {
      cmd_oracle(cfg, run_dir);
    }
    std::cout << "artifacts in " << run_dir << "\n";
    return 0;
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace atvc
