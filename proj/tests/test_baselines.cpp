#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "atvc/baselines.hpp"

using namespace atvc;

namespace {

int argmax(const std::vector<double>& v) {
  return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

GaussianMessage make_message(int sender, std::vector<double> mu, std::vector<double> sigma) {
  GaussianMessage m;
  m.sender = sender;
  m.mu = std::move(mu);
  m.sigma = std::move(sigma);
  return m;
}

// Packets a queue received in one epoch, recovered from the length change plus
// what left it (no drops allowed in the calling test).
std::vector<long long> run_and_count_inflow(Env& env, int epochs,
                                            const std::vector<AllocationAction>& acts,
                                            long long* total_dispatched) {
  std::vector<long long> inflow(env.config().servers, 0);
  for (int t = 0; t < epochs; ++t) {
    const std::vector<int> before = env.lengths();
    if (total_dispatched != nullptr) {
      for (int a : env.pending_arrivals()) *total_dispatched += a;
    }
    const StepOutcome out = env.step(acts);
    for (int j = 0; j < env.config().servers; ++j) {
      REQUIRE(out.drops_per_queue[j] == 0);
      inflow[j] += env.lengths()[j] - before[j] + out.departures_per_queue[j];
    }
  }
  return inflow;
}

}  // namespace

TEST_CASE("policy names round-trip") {
  const PolicyKind kinds[] = {PolicyKind::JSQ, PolicyKind::Random, PolicyKind::ATVC,
                              PolicyKind::ATVCFullComm, PolicyKind::ATVCNoComm};
  for (PolicyKind k : kinds) {
    CHECK(policy_kind_from_string(policy_kind_name(k)) == k);
  }
  CHECK_THROWS_AS(policy_kind_from_string("greedy"), ConfigError);
  CHECK_FALSE(policy_needs_model(PolicyKind::JSQ));
  CHECK_FALSE(policy_needs_model(PolicyKind::Random));
  CHECK(policy_needs_model(PolicyKind::ATVC));
  CHECK(policy_needs_model(PolicyKind::ATVCFullComm));
  CHECK(policy_needs_model(PolicyKind::ATVCNoComm));
}

TEST_CASE("join-shortest-queue sends the whole batch to the minimum") {
  const AllocationAction a = jsq_action(0, {2, 4});
  CHECK(a.fractions[0] == 1.0);
  CHECK(a.fractions[1] == 0.0);

  const AllocationAction b = jsq_action(1, {5, 1, 3});
  CHECK(b.scheduler == 1);
  CHECK(b.fractions[1] == 1.0);
  CHECK(b.fractions[0] == 0.0);
  CHECK(b.fractions[2] == 0.0);

  const AllocationAction c = jsq_action(0, {7});
  CHECK(c.fractions == std::vector<double>{1.0});

  CHECK_THROWS_AS(jsq_action(0, {}), ContractError);
}

TEST_CASE("join-shortest-queue breaks ties toward the lowest index") {
  CHECK(argmax(jsq_action(0, {3, 3}).fractions) == 0);
  CHECK(argmax(jsq_action(0, {4, 4, 4}).fractions) == 0);
  CHECK(argmax(jsq_action(0, {2, 5, 2}).fractions) == 0);
  CHECK(argmax(jsq_action(0, {5, 2, 2}).fractions) == 1);
}

TEST_CASE("join-shortest-queue never favors a strictly longer queue") {
  Rng rng(derive_seed(99, Stream::Eval, 0, 0));
  for (int trial = 0; trial < 500; ++trial) {
    const int d = 1 + static_cast<int>(rng.bits() % 4);
    std::vector<int> lengths(d);
    for (int& x : lengths) x = static_cast<int>(rng.bits() % 6);
    const AllocationAction a = jsq_action(0, lengths);
    const int chosen = argmax(a.fractions);
    const int shortest = *std::min_element(lengths.begin(), lengths.end());
    CHECK(lengths[chosen] == shortest);
    const double mass = std::accumulate(a.fractions.begin(), a.fractions.end(), 0.0);
    CHECK(std::abs(mass - 1.0) < 1e-12);
    CHECK(a.fractions[chosen] == 1.0);
  }
}

TEST_CASE("uniform policy splits evenly across accessible queues") {
  const AllocationAction two = random_action(0, 2);
  CHECK(two.fractions == std::vector<double>{0.5, 0.5});
  CHECK(random_action(0, 1).fractions == std::vector<double>{1.0});
  const AllocationAction five = random_action(3, 5);
  CHECK(five.scheduler == 3);
  for (double f : five.fractions) CHECK(f == doctest::Approx(0.2).epsilon(1e-12));
  CHECK_THROWS_AS(random_action(0, 0), ContractError);
}

TEST_CASE("dispatcher splits a hundred thousand packets near-uniformly") {
  EnvConfig cfg;
  cfg.schedulers = 1;
  cfg.servers = 2;
  cfg.access = 2;
  cfg.arrival_rate = 1.0;
  cfg.service_rate = 2.0;
  cfg.buffer_cap = 400;
  cfg.p_stale = 0.0;
  cfg.episode_len = 1000000;
  cfg.seed = 2024;
  Env env(cfg);

  long long total = 0;
  const auto inflow = run_and_count_inflow(env, 100000, {random_action(0, 2)}, &total);
  REQUIRE(total >= 100000);
  CHECK(inflow[0] + inflow[1] == total);

  // Conditional on the total, each queue's count is Binomial(total, 1/2).
  const double dev = 3.0 * std::sqrt(0.25 * static_cast<double>(total));
  CHECK(std::abs(inflow[0] - 0.5 * total) <= dev);
}

TEST_CASE("uniform policy load per queue matches the arrival share") {
  // Two schedulers, both seeing both queues: each queue's inflow is a thinned
  // Poisson with mean (arrival_rate * sync_interval / access) per scheduler.
  EnvConfig cfg;
  cfg.schedulers = 2;
  cfg.servers = 2;
  cfg.access = 2;
  cfg.arrival_rate = 0.9;
  cfg.service_rate = 2.5;
  cfg.buffer_cap = 400;
  cfg.p_stale = 0.0;
  cfg.episode_len = 1000000;
  cfg.seed = 77;
  Env env(cfg);

  const int epochs = 20000;
  const std::vector<AllocationAction> acts = {random_action(0, 2), random_action(1, 2)};
  const auto inflow = run_and_count_inflow(env, epochs, acts, nullptr);

  const double mean = cfg.schedulers * (cfg.arrival_rate * cfg.sync_interval / cfg.access) * epochs;
  for (int j = 0; j < cfg.servers; ++j) {
    CHECK(std::abs(inflow[j] - mean) <= 3.0 * std::sqrt(mean));
  }
}

TEST_CASE("fusing every message matches the shared attention path") {
  ModelConfig cfg;
  ParamStore store = init_params(cfg, 11);

  std::vector<GaussianMessage> messages;
  messages.push_back(encode(store, cfg, {1, 4}, 0));
  messages.push_back(encode(store, cfg, {0, 2}, 1));
  messages.push_back(encode(store, cfg, {5, 5}, 2));

  const std::vector<double> alphas = attention_weights(store, cfg, messages);
  const FusedBelief direct = weighted_poe(messages, alphas, true);
  const FusedBelief fused = full_comm_fuse(store, cfg, messages);

  REQUIRE(fused.mu.size() == direct.mu.size());
  for (std::size_t c = 0; c < fused.mu.size(); ++c) {
    CHECK(fused.mu[c] == direct.mu[c]);
    CHECK(fused.sigma[c] == direct.sigma[c]);
  }
  // Softmax weights are all positive, so every sender participates.
  for (bool s : fused.selected) CHECK(s);
  for (double a : fused.alphas) CHECK(a > 0.0);
}

TEST_CASE("full fusion agrees with the per-step pipeline") {
  ModelConfig cfg;
  ParamStore store = init_params(cfg, 11);
  const auto access_map = default_access_map(3, 3, 2);
  const auto groups = comm_groups(access_map);
  const std::vector<std::vector<int>> obs = {{1, 4}, {0, 2}, {5, 5}};

  Rng rng(derive_seed(5, Stream::Policy, 0, 0));
  const StepDecision step =
      decide_step(store, cfg, groups, obs, CommMode::Full, cfg.gamma, rng, false);

  for (std::size_t i = 0; i < groups.size(); ++i) {
    std::vector<GaussianMessage> member_messages;
    for (int c : groups[i].candidates) member_messages.push_back(step.messages[c]);
    const FusedBelief fused = full_comm_fuse(store, cfg, member_messages);
    for (int c = 0; c < cfg.latent_dim; ++c) {
      CHECK(fused.mu[c] == doctest::Approx(step.fused_mu[i][c]).epsilon(1e-12));
      CHECK(fused.sigma[c] == doctest::Approx(step.fused_var[i][c]).epsilon(1e-12));
    }
    for (std::size_t j = 0; j < fused.alphas.size(); ++j) {
      CHECK(fused.alphas[j] == doctest::Approx(step.alphas[i][j]).epsilon(1e-12));
    }
  }
}

TEST_CASE("full fusion is order invariant") {
  ModelConfig cfg;
  ParamStore store = init_params(cfg, 42);
  std::vector<GaussianMessage> messages;
  messages.push_back(encode(store, cfg, {3, 0}, 0));
  messages.push_back(encode(store, cfg, {2, 2}, 1));
  messages.push_back(encode(store, cfg, {1, 5}, 2));

  const FusedBelief forward = full_comm_fuse(store, cfg, messages);
  std::vector<GaussianMessage> shuffled = {messages[2], messages[0], messages[1]};
  const FusedBelief backward = full_comm_fuse(store, cfg, shuffled);

  for (int c = 0; c < cfg.latent_dim; ++c) {
    CHECK(forward.mu[c] == doctest::Approx(backward.mu[c]).epsilon(1e-12));
    CHECK(forward.sigma[c] == doctest::Approx(backward.sigma[c]).epsilon(1e-12));
  }
}

TEST_CASE("own-message fusion uses the prior and nothing else") {
  const GaussianMessage own = make_message(0, {1.0, -2.0}, {0.5, 4.0});
  const FusedBelief fused = no_comm_fuse(own);

  // Precision 1 + 1/sigma per coordinate, mean scaled by the share of the
  // own-message precision.
  CHECK(fused.sigma[0] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  CHECK(fused.sigma[1] == doctest::Approx(0.8).epsilon(1e-12));
  CHECK(fused.mu[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
  CHECK(fused.mu[1] == doctest::Approx(-0.4).epsilon(1e-12));

  const FusedBelief direct = weighted_poe({own}, {1.0}, true);
  for (std::size_t c = 0; c < fused.mu.size(); ++c) {
    CHECK(fused.mu[c] == direct.mu[c]);
    CHECK(fused.sigma[c] == direct.sigma[c]);
  }
  CHECK(fused.selected == std::vector<bool>{true});
  CHECK(fused.alphas == std::vector<double>{1.0});
}

TEST_CASE("own-message fusion ignores other agents") {
  ModelConfig cfg;
  ParamStore store = init_params(cfg, 7);
  const GaussianMessage own = encode(store, cfg, {2, 3}, 0);

  const FusedBelief alone = no_comm_fuse(own);
  // Re-encoding unrelated observations in between changes nothing.
  (void)encode(store, cfg, {5, 0}, 1);
  (void)encode(store, cfg, {0, 0}, 2);
  const FusedBelief again = no_comm_fuse(own);

  CHECK(alone.mu == again.mu);
  CHECK(alone.sigma == again.sigma);
}
