#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numeric>

#include "atvc/env.hpp"
#include "atvc/oracle.hpp"

using namespace atvc;

namespace {

EnvConfig base_config() {
  EnvConfig c;
  c.schedulers = 3;
  c.servers = 3;
  c.access = 2;
  c.arrival_rate = 0.9;
  c.service_rate = 1.0;
  c.buffer_cap = 5;
  c.sync_interval = 1.0;
  c.episode_len = 100;
  c.p_stale = 0.5;
  c.seed = 7;
  return c;
}

AllocationAction uniform_action(int scheduler, int d) {
  return AllocationAction::from_logits(scheduler, std::vector<double>(d, 0.0));
}

std::vector<AllocationAction> uniform_actions(const EnvConfig& c) {
  std::vector<AllocationAction> acts;
  for (int i = 0; i < c.schedulers; ++i) acts.push_back(uniform_action(i, c.access));
  return acts;
}

}  // namespace

TEST_CASE("create_env accepts the reference configuration") {
  Env env(base_config());
  CHECK(env.lengths() == std::vector<int>{0, 0, 0});
  CHECK(env.epoch() == 0);
  CHECK(env.config().access_map == std::vector<std::vector<int>>{{0, 1}, {1, 2}, {2, 0}});
}

TEST_CASE("create_env rejects invalid configs naming the field") {
  auto c = base_config();
  c.access = 4;
  CHECK_THROWS_WITH_AS(Env{c}, doctest::Contains("access"), ConfigError);

  c = base_config();
  c.buffer_cap = 0;
  CHECK_THROWS_WITH_AS(Env{c}, doctest::Contains("buffer_cap"), ConfigError);

  c = base_config();
  c.access_map = {{0, 0}, {1, 2}, {2, 0}};
  CHECK_THROWS_WITH_AS(Env{c}, doctest::Contains("access_map"), ConfigError);

  c = base_config();
  c.arrival_rate = -1.0;
  CHECK_THROWS_WITH_AS(Env{c}, doctest::Contains("arrival_rate"), ConfigError);
}

TEST_CASE("default_access_map follows the ring rule") {
  CHECK(default_access_map(3, 3, 2) == std::vector<std::vector<int>>{{0, 1}, {1, 2}, {2, 0}});
  CHECK(default_access_map(1, 1, 1) == std::vector<std::vector<int>>{{0}});
  CHECK(default_access_map(2, 4, 2) == std::vector<std::vector<int>>{{0, 1}, {1, 2}});
}

TEST_CASE("same seed and actions give identical trajectories") {
  auto c = base_config();
  Env a(c), b(c);
  const auto acts = uniform_actions(c);
  for (int t = 0; t < 50; ++t) {
    const auto oa = a.step(acts);
    const auto ob = b.step(acts);
    CHECK(oa.drops_per_queue == ob.drops_per_queue);
    CHECK(oa.departures_per_queue == ob.departures_per_queue);
    CHECK(oa.reward == ob.reward);
    CHECK(a.lengths() == b.lengths());
    for (int i = 0; i < c.schedulers; ++i) {
      const auto va = a.observe(i), vb = b.observe(i);
      for (int k = 0; k < c.access; ++k) CHECK(va.entries[k].length == vb.entries[k].length);
    }
  }
}

TEST_CASE("sample_arrivals matches Poisson mean and variance") {
  auto c = base_config();
  c.schedulers = 1;
  c.access = 1;
  Env env(c);
  const int n = 1000000;
  double sum = 0.0, sumsq = 0.0;
  for (int i = 0; i < n; ++i) {
    const double x = env.sample_arrivals()[0];
    sum += x;
    sumsq += x * x;
  }
  const double mean = sum / n;
  const double var = sumsq / n - mean * mean;
  const double lam = 0.9;
  const double se_mean = std::sqrt(lam / n);
  CHECK(std::abs(mean - lam) < 3 * se_mean);
  // Poisson: variance equals mean; generous band for the 4th-moment noise.
  CHECK(std::abs(var - lam) < 6 * se_mean);
}

TEST_CASE("sample_arrivals degenerates at tiny rates") {
  auto c = base_config();
  c.arrival_rate = 1e-12;
  Env env(c);
  for (int i = 0; i < 1000; ++i) {
    for (int x : env.sample_arrivals()) CHECK(x == 0);
  }
}

TEST_CASE("observe staleness edge probabilities") {
  auto c = base_config();
  c.p_stale = 0.0;
  Env fresh(c);
  const auto acts = uniform_actions(c);
  for (int t = 0; t < 20; ++t) {
    fresh.step(acts);
    for (int i = 0; i < c.schedulers; ++i) {
      const auto obs = fresh.observe(i);
      for (const auto& e : obs.entries) CHECK(e.length == fresh.lengths()[e.queue]);
    }
  }

  c.p_stale = 1.0;
  c.seed = 11;
  Env stale(c);
  for (int t = 0; t < 20; ++t) {
    stale.step(acts);
    for (int i = 0; i < c.schedulers; ++i) {
      const auto obs = stale.observe(i);
      for (const auto& e : obs.entries) CHECK(e.length == stale.prev_lengths()[e.queue]);
    }
  }
}

TEST_CASE("observe at epoch zero sees zeros regardless of staleness") {
  auto c = base_config();
  c.p_stale = 0.5;
  Env env(c);
  for (int i = 0; i < c.schedulers; ++i) {
    for (const auto& e : env.observe(i).entries) CHECK(e.length == 0);
  }
}

TEST_CASE("observe rejects bad scheduler ids") {
  Env env(base_config());
  CHECK_THROWS_AS(env.observe(3), ContractError);
  CHECK_THROWS_AS(env.observe(-1), ContractError);
}

TEST_CASE("arrival pooling drops the overflow") {
  std::vector<int> lengths{4};
  std::vector<int> drops;
  const int total = apply_arrivals(lengths, {3}, 5, drops);
  CHECK(total == 2);
  CHECK(lengths == std::vector<int>{5});
  CHECK(drops == std::vector<int>{2});
}

TEST_CASE("departures never take a queue below zero") {
  std::vector<int> lengths{0, 2};
  std::vector<int> deps;
  apply_departures(lengths, {4, 1}, deps);
  CHECK(lengths == std::vector<int>{0, 1});
  CHECK(deps == std::vector<int>{0, 1});
}

TEST_CASE("step keeps lengths in range and rewards exactly minus drops") {
  auto c = base_config();
  c.arrival_rate = 2.5;  // push the system hard so drops actually occur
  Env env(c);
  Rng rng(123);
  for (int t = 0; t < 500; ++t) {
    std::vector<AllocationAction> acts;
    for (int i = 0; i < c.schedulers; ++i) {
      std::vector<double> logits(c.access);
      for (double& v : logits) v = 2.0 * rng.normal();
      acts.push_back(AllocationAction::from_logits(i, std::move(logits)));
    }
    const auto before = env.lengths();
    const auto pending = env.pending_arrivals();
    const auto out = env.step(acts);
    int drops = 0;
    for (int j = 0; j < c.servers; ++j) {
      CHECK(env.lengths()[j] >= 0);
      CHECK(env.lengths()[j] <= c.buffer_cap);
      CHECK(out.drops_per_queue[j] >= 0);
      CHECK(out.departures_per_queue[j] >= 0);
      drops += out.drops_per_queue[j];
    }
    CHECK(out.reward == -static_cast<double>(drops));
    // Conservation: sent jobs = pending arrivals, and per-queue bookkeeping
    // closes (length_after = length_before + incoming - drops - departures).
    int sent = 0, before_sum = 0, after_sum = 0, deps = 0;
    for (int x : pending) sent += x;
    for (int j = 0; j < c.servers; ++j) {
      before_sum += before[j];
      after_sum += env.lengths()[j];
      deps += out.departures_per_queue[j];
    }
    CHECK(after_sum == before_sum + sent - drops - deps);
    CHECK(env.prev_lengths() == before);
  }
}

TEST_CASE("zero arrival rate makes lengths non-increasing") {
  auto c = base_config();
  c.arrival_rate = 0.0;
  Env env(c);
  const auto acts = uniform_actions(c);
  for (int t = 0; t < 50; ++t) {
    const auto before = env.lengths();
    env.step(acts);
    for (int j = 0; j < c.servers; ++j) CHECK(env.lengths()[j] <= before[j]);
  }
}

TEST_CASE("step validates the action vector") {
  Env env(base_config());
  CHECK_THROWS_AS(env.step({}), ContractError);

  auto acts = uniform_actions(base_config());
  acts[1].fractions = {0.5, 0.6};
  CHECK_THROWS_AS(env.step(acts), ContractError);

  acts = uniform_actions(base_config());
  acts[2].fractions = {1.0, 0.0, 0.0};
  CHECK_THROWS_AS(env.step(acts), ContractError);
}

TEST_CASE("long-run drop rate matches the stationary oracle") {
  // Single queue, all three schedulers forced onto it: the queue sees a
  // Poisson stream with rate 3 * 0.3 per epoch.
  EnvConfig c;
  c.schedulers = 3;
  c.servers = 1;
  c.access = 1;
  c.arrival_rate = 0.3;
  c.service_rate = 1.0;
  c.buffer_cap = 2;
  c.seed = 42;
  Env env(c);
  const auto acts = uniform_actions(c);

  const int epochs = 100000;
  double drops = 0.0, drops_sq = 0.0;
  for (int t = 0; t < epochs; ++t) {
    const auto out = env.step(acts);
    const double d = out.drops_per_queue[0];
    drops += d;
    drops_sq += d * d;
  }
  const double mc = drops / epochs;
  const double var = drops_sq / epochs - mc * mc;
  const double se = std::sqrt(var / epochs);

  ChainSpec spec;
  spec.buffer_cap = 2;
  spec.arrival_rate = 0.9;
  spec.service_rate = 1.0;
  const double exact = stationary_drop_rate(spec);
  CHECK(std::abs(mc - exact) < 3 * se);
}
