#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "atvc/model.hpp"
#include "support/grid_poe.hpp"

using namespace atvc;

namespace {

ModelConfig base_config() {
  ModelConfig cfg;
  cfg.access = 2;
  cfg.buffer_cap = 5;
  return cfg;
}

GaussianMessage make_message(int sender, std::vector<double> mu, std::vector<double> sigma) {
  GaussianMessage m;
  m.sender = sender;
  m.mu = std::move(mu);
  m.sigma = std::move(sigma);
  return m;
}

}  // namespace

TEST_CASE("model config validation") {
  ModelConfig cfg = base_config();
  CHECK_NOTHROW(cfg.validate());
  CHECK(cfg.input_dim() == 12);
  cfg.gamma = 1.5;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = base_config();
  cfg.latent_dim = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("communication groups derive from shared queue access") {
  // Ring of 3 with d=2: every pair shares a queue.
  const auto ring = comm_groups({{0, 1}, {1, 2}, {2, 0}});
  REQUIRE(ring.size() == 3);
  for (int i = 0; i < 3; ++i) {
    CHECK(ring[i].owner == i);
    CHECK(ring[i].candidates == std::vector<int>{0, 1, 2});
  }

  // Disjoint queues: everyone talks only to themselves.
  const auto lonely = comm_groups({{0}, {1}, {2}});
  for (int i = 0; i < 3; ++i) CHECK(lonely[i].candidates == std::vector<int>{i});

  // Chain overlap: 0-1 share queue 1, 1-2 share queue 2, 0 and 2 are strangers.
  const auto chain = comm_groups({{0, 1}, {1, 2}, {2, 3}});
  CHECK(chain[0].candidates == std::vector<int>{0, 1});
  CHECK(chain[1].candidates == std::vector<int>{0, 1, 2});
  CHECK(chain[2].candidates == std::vector<int>{1, 2});
}

TEST_CASE("encoder output is deterministic, clamped, and total") {
  const ModelConfig cfg = base_config();
  ParamStore store = init_params(cfg, 21);

  const auto a = encode(store, cfg, {3, 1}, 0);
  const auto b = encode(store, cfg, {3, 1}, 0);
  CHECK(a.mu == b.mu);
  CHECK(a.sigma == b.sigma);
  CHECK(static_cast<int>(a.mu.size()) == cfg.latent_dim);

  for (int b1 = 0; b1 <= cfg.buffer_cap; ++b1) {
    for (int b2 = 0; b2 <= cfg.buffer_cap; ++b2) {
      const auto m = encode(store, cfg, {b1, b2}, 0);
      for (double v : m.mu) CHECK(std::isfinite(v));
      for (double v : m.sigma) {
        CHECK(v >= 1e-4);
        CHECK(v <= 1e4);
      }
    }
  }

  CHECK_THROWS_AS(encode(store, cfg, {3}, 0), ContractError);
  CHECK_THROWS_AS(encode(store, cfg, {3, 6}, 0), ContractError);
  CHECK_THROWS_AS(encode(store, cfg, {-1, 0}, 0), ContractError);
}

TEST_CASE("identical messages get uniform attention") {
  const ModelConfig cfg = base_config();
  ParamStore store = init_params(cfg, 3);
  const auto msg = encode(store, cfg, {2, 4}, 0);
  const auto alphas = attention_weights(store, cfg, {msg, msg, msg});
  REQUIRE(alphas.size() == 3);
  for (double a : alphas) CHECK(a == doctest::Approx(1.0 / 3).epsilon(1e-12));
}

TEST_CASE("attention weights sum to one on random batches") {
  const ModelConfig cfg = base_config();
  ParamStore store = init_params(cfg, 4);
  Rng rng(99);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<GaussianMessage> msgs;
    const int k = 1 + static_cast<int>(rng.bits() % 5);
    for (int j = 0; j < k; ++j) {
      std::vector<double> mu(cfg.latent_dim), sig(cfg.latent_dim);
      for (int c = 0; c < cfg.latent_dim; ++c) {
        mu[c] = rng.normal() * 2.0;
        sig[c] = 0.1 + rng.uniform() * 3.0;
      }
      msgs.push_back(make_message(j, mu, sig));
    }
    const auto alphas = attention_weights(store, cfg, msgs);
    double sum = 0.0;
    for (double a : alphas) {
      CHECK(a >= 0.0);
      sum += a;
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
  }
  CHECK_THROWS_AS(attention_weights(store, cfg, {}), ContractError);
}

TEST_CASE("hand-built scorer reproduces softmax arithmetic") {
  // One latent dim, one attention dim: u = tanh(w1*mu + w2*var), score = u.
  // mu chosen so scores are exactly (ln 2, 0) -> alphas (2/3, 1/3).
  ModelConfig cfg = base_config();
  cfg.latent_dim = 1;
  cfg.attention_dim = 1;
  ParamStore store;
  store.create("att/W", Tensor::col({1.0, 0.0}));  // [2L=2, A=1]
  store.create("att/b", Tensor::scalar(0.0));
  store.create("att/ug", Tensor::scalar(1.0));

  const double mu1 = std::atanh(std::log(2.0));
  const auto alphas = attention_weights(store, cfg, {make_message(0, {mu1}, {1.0}),
                                                     make_message(1, {0.0}, {1.0})});
  CHECK(alphas[0] == doctest::Approx(2.0 / 3).epsilon(1e-12));
  CHECK(alphas[1] == doctest::Approx(1.0 / 3).epsilon(1e-12));
}

TEST_CASE("scaling the context vector preserves the attention ranking") {
  const ModelConfig cfg = base_config();
  ParamStore store = init_params(cfg, 5);
  std::vector<GaussianMessage> msgs = {encode(store, cfg, {0, 5}, 0), encode(store, cfg, {2, 2}, 1),
                                       encode(store, cfg, {5, 1}, 2)};
  const auto before = attention_weights(store, cfg, msgs);
  for (double& v : store.value("att/ug").data) v *= 3.0;
  const auto after = attention_weights(store, cfg, msgs);
  const auto argmax = [](const std::vector<double>& v) {
    return std::distance(v.begin(), std::max_element(v.begin(), v.end()));
  };
  CHECK(argmax(before) == argmax(after));
}

TEST_CASE("selection threshold with owner retention") {
  const std::vector<double> alphas{0.5, 0.3, 0.2};
  CHECK(select_messages(alphas, 0.3, 0) == std::vector<bool>{true, false, false});
  CHECK(select_messages(alphas, 0.3, 2) == std::vector<bool>{true, false, true});
  CHECK(select_messages(alphas, 0.19, 0) == std::vector<bool>{true, true, true});
  CHECK(select_messages({1.0}, 1.0, 0) == std::vector<bool>{true});
  // A zero threshold keeps everything because softmax weights are positive.
  CHECK(select_messages(alphas, 0.0, 1) == std::vector<bool>{true, true, true});
  CHECK_THROWS_AS(select_messages(alphas, -0.1, 0), ContractError);
  CHECK_THROWS_AS(select_messages(alphas, 1.1, 0), ContractError);
  CHECK_THROWS_AS(select_messages(alphas, 0.3, 3), ContractError);
}

TEST_CASE("fusion closed form on known cases") {
  const auto e1 = make_message(0, {0.0}, {1.0});
  const auto e2 = make_message(1, {2.0}, {1.0});

  const auto mid = weighted_poe({e1, e2}, {1.0, 1.0}, false);
  CHECK(mid.mu[0] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(mid.sigma[0] == doctest::Approx(0.5).epsilon(1e-12));

  const auto with_prior = weighted_poe({e2}, {1.0}, true);
  CHECK(with_prior.mu[0] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(with_prior.sigma[0] == doctest::Approx(0.5).epsilon(1e-12));

  // The same case against the numeric density-product reference.
  const auto fit = testsupport::grid_poe_fit({{2.0, 1.0, 1.0}}, true);
  CHECK(with_prior.mu[0] == doctest::Approx(fit.mean).epsilon(1e-8));
  CHECK(with_prior.sigma[0] == doctest::Approx(fit.var).epsilon(1e-8));
}

TEST_CASE("fusion matches the grid reference on random expert sets") {
  Rng rng(123);
  for (int trial = 0; trial < 100; ++trial) {
    const int k = 1 + static_cast<int>(rng.bits() % 4);
    const bool prior = (rng.bits() % 2) == 0;
    std::vector<GaussianMessage> msgs;
    std::vector<double> alphas;
    std::vector<testsupport::Expert1D> ref;
    for (int j = 0; j < k; ++j) {
      const double mu = (rng.uniform() * 2 - 1) * 3.0;
      const double var = 0.1 + rng.uniform() * 3.9;
      const double alpha = 0.05 + rng.uniform() * 0.95;
      msgs.push_back(make_message(j, {mu}, {var}));
      alphas.push_back(alpha);
      ref.push_back({mu, var, alpha});
    }
    const auto fused = weighted_poe(msgs, alphas, prior);
    const auto fit = testsupport::grid_poe_fit(ref, prior);
    CHECK(std::abs(fused.mu[0] - fit.mean) / std::max(1.0, std::abs(fit.mean)) < 1e-6);
    CHECK(std::abs(fused.sigma[0] - fit.var) / fit.var < 1e-6);
  }
}

TEST_CASE("fusion properties") {
  Rng rng(7);
  const int l = 3;
  auto random_msg = [&](int id) {
    std::vector<double> mu(l), sig(l);
    for (int c = 0; c < l; ++c) {
      mu[c] = rng.normal();
      sig[c] = 0.2 + rng.uniform() * 2.0;
    }
    return make_message(id, mu, sig);
  };

  const auto a = random_msg(0), b = random_msg(1), c = random_msg(2);

  // Identity on a single expert at weight 1 with no prior.
  const auto ident = weighted_poe({a}, {1.0}, false);
  for (int i = 0; i < l; ++i) {
    CHECK(ident.mu[i] == doctest::Approx(a.mu[i]).epsilon(1e-12));
    CHECK(ident.sigma[i] == doctest::Approx(a.sigma[i]).epsilon(1e-12));
  }

  // Zero weight annihilates an expert.
  const auto with_c = weighted_poe({a, b, c}, {0.7, 0.5, 0.0}, true);
  const auto without_c = weighted_poe({a, b}, {0.7, 0.5}, true);
  for (int i = 0; i < l; ++i) {
    CHECK(with_c.mu[i] == doctest::Approx(without_c.mu[i]).epsilon(1e-12));
    CHECK(with_c.sigma[i] == doctest::Approx(without_c.sigma[i]).epsilon(1e-12));
  }

  // Order invariance.
  const auto fwd = weighted_poe({a, b, c}, {0.6, 0.3, 0.1}, true);
  const auto rev = weighted_poe({c, b, a}, {0.1, 0.3, 0.6}, true);
  for (int i = 0; i < l; ++i) {
    CHECK(fwd.mu[i] == doctest::Approx(rev.mu[i]).epsilon(1e-10));
    CHECK(fwd.sigma[i] == doctest::Approx(rev.sigma[i]).epsilon(1e-10));
  }

  // With the prior, fused precision can never dip below the prior's.
  for (int trial = 0; trial < 20; ++trial) {
    const auto m1 = random_msg(0), m2 = random_msg(1);
    const double a1 = rng.uniform(), a2 = rng.uniform();
    const auto fused = weighted_poe({m1, m2}, {a1, a2}, true);
    for (int i = 0; i < l; ++i) CHECK(fused.sigma[i] <= 1.0 + 1e-12);
  }

  // No prior and no positive weight leaves nothing to fuse.
  CHECK_THROWS_AS(weighted_poe({a, b}, {0.0, 0.0}, false), ContractError);
  CHECK_THROWS_AS(weighted_poe({a}, {-0.1}, true), ContractError);
  CHECK_THROWS_AS(weighted_poe({}, {}, true), ContractError);
}

TEST_CASE("action sampling and its log density") {
  ModelConfig cfg = base_config();
  ParamStore store = init_params(cfg, 11);
  Rng rng(5);

  // Zeroed output layer pins the mean at the origin: uniform fractions.
  std::fill(store.value("act/W2").data.begin(), store.value("act/W2").data.end(), 0.0);
  std::fill(store.value("act/logstd").data.begin(), store.value("act/logstd").data.end(), -20.0);
  const std::vector<double> z(cfg.latent_dim, 0.3);
  const auto s = act(store, cfg, z, rng);
  CHECK(s.fractions[0] == doctest::Approx(0.5).epsilon(1e-9));
  CHECK(s.fractions[1] == doctest::Approx(0.5).epsilon(1e-9));
  CHECK(std::abs(s.raw_logits[0]) < 1e-7);  // sd = e^-20, sample hugs the mean

  // Independent density evaluation at a spread-out setting.
  std::fill(store.value("act/logstd").data.begin(), store.value("act/logstd").data.end(), 0.4);
  ParamStore fresh = init_params(cfg, 11);
  std::copy(fresh.value("act/W2").data.begin(), fresh.value("act/W2").data.end(),
            store.value("act/W2").data.begin());
  for (int trial = 0; trial < 10; ++trial) {
    const auto sample = act(store, cfg, z, rng);
    double lp = 0.0;
    for (int i = 0; i < cfg.access; ++i) {
      const double sd = std::exp(0.4);
      const double d = sample.raw_logits[i] - sample.mean[i];
      lp += -0.5 * std::log(2.0 * M_PI * sd * sd) - d * d / (2.0 * sd * sd);
    }
    CHECK(sample.log_prob == doctest::Approx(lp).epsilon(1e-9));
    double frac_sum = 0.0;
    for (double f : sample.fractions) frac_sum += f;
    CHECK(frac_sum == doctest::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("value head basics") {
  const ModelConfig cfg = base_config();
  ParamStore store = init_params(cfg, 13);
  const std::vector<double> z{0.1, -0.2, 0.3, 0.0, 0.5, -0.5, 0.2, 0.1,
                              -0.1, 0.4, 0.0, 0.0, 0.7, -0.3, 0.2, 0.1};
  CHECK(value(store, cfg, z) == value(store, cfg, z));
  CHECK(std::isfinite(value(store, cfg, z)));

  for (const char* name : {"val/W1", "val/b1", "val/W2", "val/b2"}) {
    std::fill(store.value(name).data.begin(), store.value(name).data.end(), 0.0);
  }
  CHECK(value(store, cfg, z) == 0.0);
}

TEST_CASE("decoder emits one distribution per accessible queue") {
  const ModelConfig cfg = base_config();
  ParamStore store = init_params(cfg, 17);
  Rng rng(3);
  std::vector<double> z(cfg.latent_dim);
  for (double& v : z) v = rng.normal();

  const Tensor logits = decode(store, cfg, z);
  REQUIRE(logits.rows == cfg.access);
  REQUIRE(logits.cols == cfg.buffer_cap + 1);
  for (int q = 0; q < logits.rows; ++q) {
    double mx = logits.at(q, 0);
    for (int c = 1; c < logits.cols; ++c) mx = std::max(mx, logits.at(q, c));
    double sum = 0.0;
    for (int c = 0; c < logits.cols; ++c) sum += std::exp(logits.at(q, c) - mx);
    double total = 0.0;
    for (int c = 0; c < logits.cols; ++c) total += std::exp(logits.at(q, c) - mx) / sum;
    CHECK(total == doctest::Approx(1.0).epsilon(1e-9));
  }
  const Tensor again = decode(store, cfg, z);
  CHECK(again.data == logits.data);
}

TEST_CASE("full step pipeline across communication modes") {
  const ModelConfig cfg = base_config();
  ParamStore store = init_params(cfg, 77);
  const auto groups = comm_groups(default_access_map(3, 3, 2));
  const std::vector<std::vector<int>> obs{{1, 4}, {0, 2}, {5, 3}};

  for (CommMode mode : {CommMode::SoftTraining, CommMode::Threshold, CommMode::Full, CommMode::None}) {
    Rng rng(31);
    const auto d = decide_step(store, cfg, groups, obs, mode, 0.3, rng, true);
    REQUIRE(d.actions.size() == 3);
    for (int i = 0; i < 3; ++i) {
      double sum = 0.0;
      for (double f : d.actions[i].fractions) {
        CHECK(f >= 0.0);
        sum += f;
      }
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
      CHECK(std::isfinite(d.log_prob[i]));
      CHECK(std::isfinite(d.value[i]));
      for (double v : d.fused_var[i]) CHECK(v > 0.0);

      double asum = 0.0;
      for (double a : d.alphas[i]) asum += a;
      CHECK(asum == doctest::Approx(1.0).epsilon(1e-9));

      if (mode == CommMode::Full || mode == CommMode::SoftTraining) {
        for (bool sel : d.selected[i]) CHECK(sel);
      }
      if (mode == CommMode::None) {
        for (std::size_t j = 0; j < d.selected[i].size(); ++j) {
          CHECK(d.selected[i][j] == (groups[i].candidates[j] == i));
        }
      }
      if (mode == CommMode::Threshold) {
        for (std::size_t j = 0; j < d.selected[i].size(); ++j) {
          if (groups[i].candidates[j] == i) {
            CHECK(d.selected[i][j]);
          } else {
            CHECK(d.selected[i][j] == (d.alphas[i][j] > 0.3));
          }
        }
      }
    }
  }
}

TEST_CASE("soft fusion in the pipeline equals the standalone fusion op") {
  const ModelConfig cfg = base_config();
  ParamStore store = init_params(cfg, 41);
  const auto groups = comm_groups(default_access_map(3, 3, 2));
  const std::vector<std::vector<int>> obs{{2, 2}, {4, 0}, {1, 5}};
  Rng rng(8);
  const auto d = decide_step(store, cfg, groups, obs, CommMode::SoftTraining, 0.3, rng, false);

  for (int i = 0; i < 3; ++i) {
    std::vector<GaussianMessage> candidates;
    for (int c : groups[i].candidates) candidates.push_back(d.messages[c]);
    const auto fused = weighted_poe(candidates, d.alphas[i], true);
    for (int c = 0; c < cfg.latent_dim; ++c) {
      CHECK(d.fused_mu[i][c] == doctest::Approx(fused.mu[c]).epsilon(1e-12));
      CHECK(d.fused_var[i][c] == doctest::Approx(fused.sigma[c]).epsilon(1e-12));
    }

    // The standalone attention op agrees with the pipeline's weights.
    const auto alphas = attention_weights(store, cfg, candidates);
    for (std::size_t j = 0; j < alphas.size(); ++j) {
      CHECK(d.alphas[i][j] == doctest::Approx(alphas[j]).epsilon(1e-12));
    }
  }
}

TEST_CASE("pipeline determinism and validation") {
  const ModelConfig cfg = base_config();
  ParamStore store = init_params(cfg, 55);
  const auto groups = comm_groups(default_access_map(3, 3, 2));
  const std::vector<std::vector<int>> obs{{1, 1}, {2, 2}, {3, 3}};

  Rng r1(6), r2(6);
  const auto a = decide_step(store, cfg, groups, obs, CommMode::Threshold, 0.3, r1, true);
  const auto b = decide_step(store, cfg, groups, obs, CommMode::Threshold, 0.3, r2, true);
  CHECK(a.z == b.z);
  CHECK(a.raw_logits == b.raw_logits);
  CHECK(a.log_prob == b.log_prob);
  CHECK(a.value == b.value);

  auto bad_groups = groups;
  std::swap(bad_groups[0], bad_groups[1]);
  Rng r3(6);
  CHECK_THROWS_AS(decide_step(store, cfg, bad_groups, obs, CommMode::Full, 0.3, r3, false),
                  ContractError);
  CHECK_THROWS_AS(decide_step(store, cfg, groups, {{1, 1}}, CommMode::Full, 0.3, r3, false),
                  ContractError);
}

TEST_CASE("message wire format round-trips") {
  const auto m = make_message(2, {0.5, -1.25, 3.0}, {0.25, 1.0, 2.5});
  const std::string bytes = message_to_bytes(m);
  CHECK(bytes.size() == 4 + 4 + 2 * 3 * 8);
  const auto back = message_from_bytes(bytes);
  CHECK(back.sender == 2);
  CHECK(back.mu == m.mu);
  CHECK(back.sigma == m.sigma);
}

TEST_CASE("model metadata survives the checkpoint array form") {
  ModelConfig cfg = base_config();
  cfg.latent_dim = 8;
  cfg.gamma = 0.25;
  const auto arrays = model_meta_arrays(cfg);
  const ModelConfig back = model_config_from_arrays(arrays);
  CHECK(back.access == cfg.access);
  CHECK(back.buffer_cap == cfg.buffer_cap);
  CHECK(back.latent_dim == 8);
  CHECK(back.gamma == doctest::Approx(0.25));

  auto broken = arrays;
  broken.erase("meta/latent_dim");
  CHECK_THROWS_AS(model_config_from_arrays(broken), CompatError);
}

TEST_CASE("parameter initialization is seed-deterministic") {
  const ModelConfig cfg = base_config();
  ParamStore a = init_params(cfg, 100);
  ParamStore b = init_params(cfg, 100);
  ParamStore c = init_params(cfg, 101);
  bool any_diff = false;
  for (const auto& name : a.names()) {
    const Tensor& ta = a.value(name);
    CHECK(ta.same_shape(b.value(name)));
    CHECK(ta.data == b.value(name).data);
    if (ta.data != c.value(name).data) any_diff = true;
  }
  CHECK(any_diff);
}
