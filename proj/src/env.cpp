#include "atvc/env.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace atvc {

std::vector<std::vector<int>> default_access_map(int schedulers, int servers, int access) {
  if (access > servers) {
    throw ConfigError("access (accessible queues) must not exceed servers");
  }
  std::vector<std::vector<int>> map(static_cast<std::size_t>(schedulers));
  for (int i = 0; i < schedulers; ++i) {
    map[i].resize(static_cast<std::size_t>(access));
    for (int k = 0; k < access; ++k) {
      map[i][k] = (i + k) % servers;
    }
  }
  return map;
}

AllocationAction AllocationAction::from_logits(int scheduler, std::vector<double> logits) {
  AllocationAction a;
  a.scheduler = scheduler;
  a.raw_logits = std::move(logits);
  a.fractions.resize(a.raw_logits.size());
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : a.raw_logits) mx = std::max(mx, v);
  double sum = 0.0;
  for (std::size_t i = 0; i < a.raw_logits.size(); ++i) {
    a.fractions[i] = std::exp(a.raw_logits[i] - mx);
    sum += a.fractions[i];
  }
  for (double& f : a.fractions) f /= sum;
  return a;
}

int apply_arrivals(std::vector<int>& lengths, const std::vector<int>& incoming,
                   int cap, std::vector<int>& drops) {
  drops.assign(lengths.size(), 0);
  int total = 0;
  for (std::size_t j = 0; j < lengths.size(); ++j) {
    int after = lengths[j] + incoming[j];
    drops[j] = std::max(0, after - cap);
    lengths[j] = std::min(cap, after);
    total += drops[j];
  }
  return total;
}

void apply_departures(std::vector<int>& lengths, const std::vector<int>& service_draws,
                      std::vector<int>& departures) {
  departures.assign(lengths.size(), 0);
  for (std::size_t j = 0; j < lengths.size(); ++j) {
    departures[j] = std::min(lengths[j], service_draws[j]);
    lengths[j] -= departures[j];
  }
}

namespace {

void validate(const EnvConfig& c) {
  if (c.schedulers < 1) throw ConfigError("schedulers must be >= 1");
  if (c.servers < 1) throw ConfigError("servers must be >= 1");
  if (c.access < 1 || c.access > c.servers) {
    throw ConfigError("access must satisfy 1 <= access <= servers");
  }
  if (c.buffer_cap < 1) throw ConfigError("buffer_cap must be >= 1");
  if (!(c.arrival_rate >= 0.0) || !std::isfinite(c.arrival_rate)) {
    throw ConfigError("arrival_rate must be finite and >= 0");
  }
  if (!(c.service_rate >= 0.0) || !std::isfinite(c.service_rate)) {
    throw ConfigError("service_rate must be finite and >= 0");
  }
  if (!(c.sync_interval > 0.0) || !std::isfinite(c.sync_interval)) {
    throw ConfigError("sync_interval must be finite and > 0");
  }
  if (c.episode_len < 1) throw ConfigError("episode_len must be >= 1");
  if (!(c.p_stale >= 0.0 && c.p_stale <= 1.0)) {
    throw ConfigError("p_stale must lie in [0, 1]");
  }
  if (c.access_map.size() != static_cast<std::size_t>(c.schedulers)) {
    throw ConfigError("access_map must have one row per scheduler");
  }
  for (const auto& row : c.access_map) {
    if (row.size() != static_cast<std::size_t>(c.access)) {
      throw ConfigError("access_map row must list exactly `access` queues");
    }
    std::vector<int> sorted = row;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t k = 0; k < sorted.size(); ++k) {
      if (sorted[k] < 0 || sorted[k] >= c.servers) {
        throw ConfigError("access_map entry out of range [0, servers)");
      }
      if (k > 0 && sorted[k] == sorted[k - 1]) {
        throw ConfigError("access_map row has duplicate queue indices");
      }
    }
  }
}

}  // namespace

Env::Env(EnvConfig cfg) : cfg_(std::move(cfg)), rng_(0) {
  if (cfg_.access_map.empty()) {
    if (cfg_.access > cfg_.servers) {
      throw ConfigError("access must satisfy 1 <= access <= servers");
    }
    cfg_.access_map = default_access_map(cfg_.schedulers, cfg_.servers, cfg_.access);
  }
  validate(cfg_);
  state_.lengths.assign(static_cast<std::size_t>(cfg_.servers), 0);
  state_.prev_lengths.assign(static_cast<std::size_t>(cfg_.servers), 0);
  state_.epoch = 0;
  rng_ = Rng(derive_seed(cfg_.seed, Stream::EnvArrivals));
  observe_seed_ = derive_seed(cfg_.seed, Stream::EnvObserve);
  pending_ = sample_arrivals();
}

std::vector<int> Env::sample_arrivals() {
  std::vector<int> a(static_cast<std::size_t>(cfg_.schedulers), 0);
  const double mean = cfg_.arrival_rate * cfg_.sync_interval;
  for (int i = 0; i < cfg_.schedulers; ++i) a[i] = rng_.poisson(mean);
  return a;
}

Observation Env::observe(int scheduler) const {
  if (scheduler < 0 || scheduler >= cfg_.schedulers) {
    throw ContractError("observe: scheduler id out of range");
  }
  Observation obs;
  obs.scheduler = scheduler;
  obs.arrival_count = pending_[scheduler];
  const auto& row = cfg_.access_map[scheduler];
  obs.entries.resize(row.size());
  for (std::size_t k = 0; k < row.size(); ++k) {
    const int q = row[k];
    const double u = u64_to_unit(derive_seed(observe_seed_,
                                             static_cast<std::uint64_t>(state_.epoch),
                                             static_cast<std::uint64_t>(scheduler),
                                             static_cast<std::uint64_t>(k)));
    const bool stale = u < cfg_.p_stale;
    obs.entries[k].queue = q;
    obs.entries[k].length = stale ? state_.prev_lengths[q] : state_.lengths[q];
  }
  return obs;
}

StepOutcome Env::step(const std::vector<AllocationAction>& actions) {
  if (actions.size() != static_cast<std::size_t>(cfg_.schedulers)) {
    throw ContractError("step: need exactly one action per scheduler");
  }
  for (int i = 0; i < cfg_.schedulers; ++i) {
    const auto& a = actions[i];
    if (a.scheduler != i) throw ContractError("step: action scheduler id mismatch");
    if (a.fractions.size() != static_cast<std::size_t>(cfg_.access)) {
      throw ContractError("step: action fractions size must equal access");
    }
    double sum = 0.0;
    for (double f : a.fractions) {
      if (!(f >= 0.0) || !std::isfinite(f)) {
        throw ContractError("step: action fractions must be nonnegative and finite");
      }
      sum += f;
    }
    if (std::abs(sum - 1.0) > 1e-9) {
      throw ContractError("step: action fractions must sum to 1");
    }
  }

  const std::vector<int> before = state_.lengths;

  // Dispatch: each pending job independently picks one accessible queue.
  std::vector<int> incoming(static_cast<std::size_t>(cfg_.servers), 0);
  for (int i = 0; i < cfg_.schedulers; ++i) {
    const auto& row = cfg_.access_map[i];
    for (int n = 0; n < pending_[i]; ++n) {
      incoming[row[rng_.categorical(actions[i].fractions)]] += 1;
    }
  }

  StepOutcome out;
  const int total_drops = apply_arrivals(state_.lengths, incoming, cfg_.buffer_cap,
                                         out.drops_per_queue);

  std::vector<int> service(static_cast<std::size_t>(cfg_.servers), 0);
  const double mu = cfg_.service_rate * cfg_.sync_interval;
  for (int j = 0; j < cfg_.servers; ++j) service[j] = rng_.poisson(mu);
  apply_departures(state_.lengths, service, out.departures_per_queue);

  out.reward = -static_cast<double>(total_drops);
  state_.prev_lengths = before;
  state_.epoch += 1;
  pending_ = sample_arrivals();
  return out;
}

}  // namespace atvc
