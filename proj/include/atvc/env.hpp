#pragma once

#include <cstdint>
#include <vector>

#include "atvc/common.hpp"

namespace atvc {

// Discrete-time queueing network: `schedulers` dispatchers batch their
// Poisson arrivals every sync_interval into `access` of the `servers`
// finite queues. Queue readings can be one epoch stale.
struct EnvConfig {
  int schedulers = 3;         // M
  int servers = 3;            // S
  int access = 2;             // d accessible queues per scheduler
  double arrival_rate = 0.9;  // jobs per scheduler per unit time
  double service_rate = 1.0;  // jobs per server per unit time
  int buffer_cap = 5;         // B
  double sync_interval = 1.0; // epoch length in time units
  int episode_len = 100;      // decision epochs per episode
  double p_stale = 0.5;       // chance a reading is one epoch old
  // One row per scheduler, `access` distinct queue indices each.
  // Empty -> ring assignment (default_access_map).
  std::vector<std::vector<int>> access_map;
  std::uint64_t seed = 0;
};

// Scheduler i gets queues {(i + k) mod servers : k = 0..access-1}.
std::vector<std::vector<int>> default_access_map(int schedulers, int servers, int access);

struct QueueNetworkState {
  std::vector<int> lengths;
  std::vector<int> prev_lengths;
  int epoch = 0;
};

struct ObservedQueue {
  int queue = 0;
  int length = 0;
};

struct Observation {
  int scheduler = 0;
  std::vector<ObservedQueue> entries;  // in access_map order
  int arrival_count = 0;               // jobs accumulated this epoch
};

struct AllocationAction {
  int scheduler = 0;
  std::vector<double> raw_logits;
  std::vector<double> fractions;  // softmax(raw_logits)

  static AllocationAction from_logits(int scheduler, std::vector<double> logits);
};

struct StepOutcome {
  std::vector<int> drops_per_queue;
  std::vector<int> departures_per_queue;
  double reward = 0.0;  // -(total drops)
};

// Pools `incoming` into `lengths`, dropping overflow above `cap`.
// Returns total drops; per-queue drops written to `drops`.
int apply_arrivals(std::vector<int>& lengths, const std::vector<int>& incoming,
                   int cap, std::vector<int>& drops);

// departures[j] = min(lengths[j], service_draws[j]); lengths reduced in place.
void apply_departures(std::vector<int>& lengths, const std::vector<int>& service_draws,
                      std::vector<int>& departures);

class Env {
 public:
  // Validates the config; throws ConfigError naming the offending field.
  explicit Env(EnvConfig cfg);

  const EnvConfig& config() const { return cfg_; }
  const std::vector<int>& lengths() const { return state_.lengths; }
  const std::vector<int>& prev_lengths() const { return state_.prev_lengths; }
  int epoch() const { return state_.epoch; }
  const QueueNetworkState& state() const { return state_; }
  // Arrivals accumulated for the current epoch, dispatched by the next step().
  const std::vector<int>& pending_arrivals() const { return pending_; }

  // Draws one Poisson(arrival_rate * sync_interval) count per scheduler,
  // consuming the env RNG stream.
  std::vector<int> sample_arrivals();

  // Per accessible queue, reports the previous-epoch length with probability
  // p_stale, else the current one. No staleness indicator is exposed.
  // Idempotent within an epoch (draws are keyed on (epoch, scheduler, slot)).
  Observation observe(int scheduler) const;

  // One decision epoch: dispatch pending arrivals per the actions' fractions
  // (per-packet multinomial), pool, drop overflow, serve, advance history.
  StepOutcome step(const std::vector<AllocationAction>& actions);

 private:
  EnvConfig cfg_;
  QueueNetworkState state_;
  std::vector<int> pending_;
  Rng rng_;
  std::uint64_t observe_seed_ = 0;
};

}  // namespace atvc
