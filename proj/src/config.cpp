#include "atvc/config.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

namespace atvc {

namespace {

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

double parse_double(const std::string& key, const std::string& value) {
  std::size_t used = 0;
  double out = 0.0;
  try {
    out = std::stod(value, &used);
  } catch (const std::exception&) {
    throw ConfigError(key + ": cannot parse number from '" + value + "'");
  }
  if (used != value.size()) throw ConfigError(key + ": trailing junk in '" + value + "'");
  return out;
}

long long parse_integer(const std::string& key, const std::string& value) {
  std::size_t used = 0;
  long long out = 0;
  try {
    out = std::stoll(value, &used);
  } catch (const std::exception&) {
    throw ConfigError(key + ": cannot parse integer from '" + value + "'");
  }
  if (used != value.size()) throw ConfigError(key + ": trailing junk in '" + value + "'");
  return out;
}

int parse_int(const std::string& key, const std::string& value) {
  return static_cast<int>(parse_integer(key, value));
}

std::vector<std::string> split_list(const std::string& value) {
  std::vector<std::string> parts;
  std::string item;
  std::istringstream in(value);
  while (std::getline(in, item, ',')) parts.push_back(trim(item));
  return parts;
}

std::vector<double> parse_double_list(const std::string& key, const std::string& value) {
  std::vector<double> out;
  for (const std::string& part : split_list(value)) out.push_back(parse_double(key, part));
  if (out.empty()) throw ConfigError(key + ": empty list");
  return out;
}

std::vector<int> parse_int_list(const std::string& key, const std::string& value) {
  std::vector<int> out;
  for (const std::string& part : split_list(value)) out.push_back(parse_int(key, part));
  if (out.empty()) throw ConfigError(key + ": empty list");
  return out;
}

void set_key(RunConfig& cfg, const std::string& section, const std::string& key,
             const std::string& value) {
  const std::string full = section + "." + key;
  if (section == "env") {
    if (key == "schedulers") cfg.env.schedulers = parse_int(full, value);
    else if (key == "servers") cfg.env.servers = parse_int(full, value);
    else if (key == "access") cfg.env.access = parse_int(full, value);
    else if (key == "arrival_rate") cfg.env.arrival_rate = parse_double(full, value);
    else if (key == "service_rate") cfg.env.service_rate = parse_double(full, value);
    else if (key == "buffer_cap") cfg.env.buffer_cap = parse_int(full, value);
    else if (key == "delta_t") cfg.env.sync_interval = parse_double(full, value);
    else if (key == "episode_len") cfg.env.episode_len = parse_int(full, value);
    else if (key == "p_stale") cfg.env.p_stale = parse_double(full, value);
    else throw ConfigError("unknown key " + full);
  } else if (section == "ppo") {
    if (key == "lambda_gae") cfg.ppo.lambda_gae = parse_double(full, value);
    else if (key == "kl_init_coeff") cfg.ppo.kl_init_coeff = parse_double(full, value);
    else if (key == "train_batch") cfg.ppo.train_batch = parse_int(full, value);
    else if (key == "minibatch") cfg.ppo.minibatch = parse_int(full, value);
    else if (key == "lr") cfg.ppo.lr = parse_double(full, value);
    else if (key == "clip") cfg.ppo.clip = parse_double(full, value);
    else if (key == "value_clip") cfg.ppo.value_clip = parse_double(full, value);
    else if (key == "value_coeff") cfg.ppo.value_coeff = parse_double(full, value);
    else if (key == "kappa") cfg.ppo.kappa = parse_double(full, value);
    else if (key == "beta_kl") cfg.ppo.beta_kl = parse_double(full, value);
    else if (key == "discount") cfg.ppo.discount = parse_double(full, value);
    else if (key == "epochs_per_batch") cfg.ppo.epochs_per_batch = parse_int(full, value);
    else if (key == "kl_target") cfg.ppo.kl_target = parse_double(full, value);
    else throw ConfigError("unknown key " + full);
  } else if (section == "model") {
    if (key == "latent_dim") cfg.model.latent_dim = parse_int(full, value);
    else if (key == "encoder_hidden") cfg.model.encoder_hidden = parse_int(full, value);
    else if (key == "head_hidden") cfg.model.head_hidden = parse_int(full, value);
    else if (key == "attention_dim") cfg.model.attention_dim = parse_int(full, value);
    else if (key == "gamma") cfg.model.gamma = parse_double(full, value);
    else throw ConfigError("unknown key " + full);
  } else if (section == "experiment") {
    if (key == "iterations") cfg.experiment.iterations = parse_int(full, value);
    else if (key == "episodes_per_iteration")
      cfg.experiment.episodes_per_iteration = parse_int(full, value);
    else if (key == "eval_episodes") cfg.experiment.eval_episodes = parse_int(full, value);
    else if (key == "heatmap_samples") cfg.experiment.heatmap_samples = parse_int(full, value);
    else if (key == "checkpoint_every") cfg.experiment.checkpoint_every = parse_int(full, value);
    else if (key == "delta_t_sweep")
      cfg.experiment.delta_t_sweep = parse_double_list(full, value);
    else if (key == "agents_sweep") cfg.experiment.agents_sweep = parse_int_list(full, value);
    else if (key == "outdir") cfg.experiment.outdir = value;
    else if (key == "seed") {
      const long long raw = parse_integer(full, value);
      if (raw < 0) throw ConfigError(full + ": must be nonnegative");
      cfg.experiment.seed = static_cast<std::uint64_t>(raw);
      cfg.experiment.seed_set = true;
    } else {
      throw ConfigError("unknown key " + full);
    }
  } else {
    throw ConfigError("unknown section [" + section + "]");
  }
}

}  // namespace

RunConfig parse_run_config_text(const std::string& text) {
  RunConfig cfg;
  std::string section;
  bool saw_env = false, saw_ppo = false, saw_model = false, saw_experiment = false;
  std::istringstream in(text);
  std::string raw;
  int lineno = 0;
  while (std::getline(in, raw)) {
    ++lineno;
    std::string line = trim(raw);
    if (line.empty() || line[0] == '#' || line[0] == ';') continue;
    try {
      if (line.front() == '[') {
        if (line.back() != ']') throw ConfigError("unterminated section header");
        section = trim(line.substr(1, line.size() - 2));
        if (section == "env") saw_env = true;
        else if (section == "ppo") saw_ppo = true;
        else if (section == "model") saw_model = true;
        else if (section == "experiment") saw_experiment = true;
        else throw ConfigError("unknown section [" + section + "]");
        continue;
      }
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw ConfigError("expected key=value, got '" + line + "'");
      if (section.empty()) throw ConfigError("key before any [section] header");
      set_key(cfg, section, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError("config line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (!saw_env || !saw_ppo || !saw_model || !saw_experiment) {
    throw ConfigError("config must contain the sections [env], [ppo], [model], [experiment]");
  }
  return cfg;
}

RunConfig parse_run_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_run_config_text(buf.str());
}

void apply_override(RunConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) {
    throw ConfigError("override must look like section.key=value, got '" + assignment + "'");
  }
  const std::string target = trim(assignment.substr(0, eq));
  const auto dot = target.find('.');
  if (dot == std::string::npos || dot == 0 || dot + 1 == target.size()) {
    throw ConfigError("override must look like section.key=value, got '" + assignment + "'");
  }
  set_key(cfg, target.substr(0, dot), target.substr(dot + 1), trim(assignment.substr(eq + 1)));
}

void finalize_run_config(RunConfig& cfg) {
  if (!cfg.experiment.seed_set) throw ConfigError("experiment.seed is mandatory");
  cfg.model.access = cfg.env.access;
  cfg.model.buffer_cap = cfg.env.buffer_cap;
  cfg.model.validate();
  cfg.ppo.validate();
  {
    // The environment constructor holds the field checks; a throwaway
    // instance surfaces bad values at load time instead of mid-run.
    EnvConfig probe = cfg.env;
    probe.seed = 0;
    Env check(probe);
  }
  const ExperimentConfig& ex = cfg.experiment;
  if (ex.iterations < 0) throw ConfigError("experiment.iterations must be nonnegative");
  if (ex.episodes_per_iteration < 1)
    throw ConfigError("experiment.episodes_per_iteration must be >= 1");
  if (ex.eval_episodes < 1) throw ConfigError("experiment.eval_episodes must be >= 1");
  if (ex.heatmap_samples < 1) throw ConfigError("experiment.heatmap_samples must be >= 1");
  if (ex.checkpoint_every < 0) throw ConfigError("experiment.checkpoint_every must be >= 0");
  for (double dt : ex.delta_t_sweep) {
    if (!(dt > 0.0)) throw ConfigError("experiment.delta_t_sweep entries must be positive");
  }
  for (int m : ex.agents_sweep) {
    if (m < 1) throw ConfigError("experiment.agents_sweep entries must be >= 1");
  }
  if (ex.outdir.empty()) throw ConfigError("experiment.outdir must not be empty");
}

namespace {

std::string num(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

std::string serialize_run_config(const RunConfig& cfg) {
  std::ostringstream os;
  os << "[env]\n";
  os << "schedulers = " << cfg.env.schedulers << "\n";
  os << "servers = " << cfg.env.servers << "\n";
  os << "access = " << cfg.env.access << "\n";
  os << "arrival_rate = " << num(cfg.env.arrival_rate) << "\n";
  os << "service_rate = " << num(cfg.env.service_rate) << "\n";
  os << "buffer_cap = " << cfg.env.buffer_cap << "\n";
  os << "delta_t = " << num(cfg.env.sync_interval) << "\n";
  os << "episode_len = " << cfg.env.episode_len << "\n";
  os << "p_stale = " << num(cfg.env.p_stale) << "\n";
  os << "\n[ppo]\n";
  os << "lambda_gae = " << num(cfg.ppo.lambda_gae) << "\n";
  os << "kl_init_coeff = " << num(cfg.ppo.kl_init_coeff) << "\n";
  os << "train_batch = " << cfg.ppo.train_batch << "\n";
  os << "minibatch = " << cfg.ppo.minibatch << "\n";
  os << "lr = " << num(cfg.ppo.lr) << "\n";
  os << "clip = " << num(cfg.ppo.clip) << "\n";
  os << "value_clip = " << num(cfg.ppo.value_clip) << "\n";
  os << "value_coeff = " << num(cfg.ppo.value_coeff) << "\n";
  os << "kappa = " << num(cfg.ppo.kappa) << "\n";
  os << "beta_kl = " << num(cfg.ppo.beta_kl) << "\n";
  os << "discount = " << num(cfg.ppo.discount) << "\n";
  os << "epochs_per_batch = " << cfg.ppo.epochs_per_batch << "\n";
  os << "kl_target = " << num(cfg.ppo.kl_target) << "\n";
  os << "\n[model]\n";
  os << "latent_dim = " << cfg.model.latent_dim << "\n";
  os << "encoder_hidden = " << cfg.model.encoder_hidden << "\n";
  os << "head_hidden = " << cfg.model.head_hidden << "\n";
  os << "attention_dim = " << cfg.model.attention_dim << "\n";
  os << "gamma = " << num(cfg.model.gamma) << "\n";
  os << "\n[experiment]\n";
  os << "iterations = " << cfg.experiment.iterations << "\n";
  os << "episodes_per_iteration = " << cfg.experiment.episodes_per_iteration << "\n";
  os << "eval_episodes = " << cfg.experiment.eval_episodes << "\n";
  os << "heatmap_samples = " << cfg.experiment.heatmap_samples << "\n";
  os << "checkpoint_every = " << cfg.experiment.checkpoint_every << "\n";
  os << "delta_t_sweep = ";
  for (std::size_t i = 0; i < cfg.experiment.delta_t_sweep.size(); ++i) {
    os << (i ? "," : "") << num(cfg.experiment.delta_t_sweep[i]);
  }
  os << "\n";
  os << "agents_sweep = ";
  for (std::size_t i = 0; i < cfg.experiment.agents_sweep.size(); ++i) {
    os << (i ? "," : "") << cfg.experiment.agents_sweep[i];
  }
  os << "\n";
  os << "outdir = " << cfg.experiment.outdir << "\n";
  os << "seed = " << cfg.experiment.seed << "\n";
  return os.str();
}

}  // namespace atvc
