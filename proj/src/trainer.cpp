#include "atvc/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

namespace atvc {

namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw ContractError(msg);
}

std::vector<std::vector<int>> resolve_access_map(const EnvConfig& env_cfg) {
  return env_cfg.access_map.empty()
             ? default_access_map(env_cfg.schedulers, env_cfg.servers, env_cfg.access)
             : env_cfg.access_map;
}

void check_model_env(const ModelConfig& model_cfg, const EnvConfig& env_cfg) {
  if (model_cfg.access != env_cfg.access || model_cfg.buffer_cap != env_cfg.buffer_cap) {
    throw CompatError("model built for access=" + std::to_string(model_cfg.access) +
                      ", buffer_cap=" + std::to_string(model_cfg.buffer_cap) +
                      " but environment has access=" + std::to_string(env_cfg.access) +
                      ", buffer_cap=" + std::to_string(env_cfg.buffer_cap));
  }
}

}  // namespace

void PPOConfig::validate() const {
  if (!(lambda_gae >= 0.0 && lambda_gae <= 1.0)) throw ConfigError("lambda_gae must be in [0, 1]");
  if (!(kl_init_coeff >= 0.0)) throw ConfigError("kl_init_coeff must be >= 0");
  if (train_batch < 1) throw ConfigError("train_batch must be >= 1");
  if (minibatch < 1) throw ConfigError("minibatch must be >= 1");
  if (minibatch > train_batch) throw ConfigError("minibatch must not exceed train_batch");
  if (!std::isfinite(lr) || lr < 0.0) throw ConfigError("lr must be finite and >= 0");
  if (!(clip > 0.0 && clip < 1.0)) throw ConfigError("clip must be in (0, 1)");
  if (!(value_clip > 0.0)) throw ConfigError("value_clip must be > 0");
  if (!(value_coeff >= 0.0)) throw ConfigError("value_coeff must be >= 0");
  if (!(kappa >= 0.0)) throw ConfigError("kappa must be >= 0");
  if (!(beta_kl >= 0.0)) throw ConfigError("beta_kl must be >= 0");
  if (!(discount > 0.0 && discount <= 1.0)) throw ConfigError("discount must be in (0, 1]");
  if (epochs_per_batch < 1) throw ConfigError("epochs_per_batch must be >= 1");
  if (!(kl_target > 0.0)) throw ConfigError("kl_target must be > 0");
}

void RolloutBatch::check_aligned() const {
  const std::size_t n = static_cast<std::size_t>(samples());
  const std::size_t t = static_cast<std::size_t>(steps());
  auto want = [](bool ok, const std::string& field) {
    if (!ok) throw ContractError("rollout field " + field + " is misaligned");
  };
  want(agents >= 1 && access >= 1 && latent_dim >= 1, "shape");
  want(dispatched.size() == t, "dispatched");
  want(observed.size() == n * access, "observed");
  want(true_lengths.size() == n * access, "true_lengths");
  want(fused_mu.size() == n * latent_dim, "fused_mu");
  want(fused_var.size() == n * latent_dim, "fused_var");
  want(z.size() == n * latent_dim, "z");
  want(eps_z.size() == n * latent_dim, "eps_z");
  want(raw_logits.size() == n * access, "raw_logits");
  want(action_mean_old.size() == n * access, "action_mean_old");
  want(log_prob_old.size() == n, "log_prob_old");
  want(value_old.size() == n, "value_old");
  want(logstd_old.size() == static_cast<std::size_t>(access), "logstd_old");
  want(alphas.size() == n, "alphas");
  want(selected.size() == n, "selected");
  for (std::size_t i = 0; i < n; ++i) {
    want(alphas[i].size() == selected[i].size(), "alphas[" + std::to_string(i) + "]");
  }
  want(!episode_starts.empty() && episode_starts.front() == 0, "episode_starts");
  for (std::size_t e = 0; e + 1 < episode_starts.size(); ++e) {
    want(episode_starts[e] < episode_starts[e + 1], "episode_starts");
  }
  want(episode_starts.back() < steps(), "episode_starts");
  for (double r : rewards) {
    if (!(r <= 0.0)) throw ContractError("rollout rewards must be nonpositive");
  }
}

namespace {

struct EpisodeData {
  std::vector<double> rewards;
  std::vector<long long> dispatched;
  std::vector<int> observed, true_lengths;
  std::vector<double> fused_mu, fused_var, z, eps_z, raw_logits, action_mean_old;
  std::vector<double> log_prob_old, value_old;
  std::vector<std::vector<double>> alphas;
  std::vector<std::vector<bool>> selected;
};

EpisodeData run_episode(ParamStore& store, const ModelConfig& model_cfg, const EnvConfig& base,
                        const std::vector<std::vector<int>>& access_map,
                        const std::vector<CommGroup>& groups, std::uint64_t env_seed,
                        std::uint64_t policy_seed) {
  EnvConfig env_cfg = base;
  env_cfg.access_map = access_map;
  env_cfg.seed = env_seed;
  Env env(env_cfg);
  Rng policy_rng(policy_seed);

  const int m = env_cfg.schedulers;
  const int d = env_cfg.access;
  const int l = model_cfg.latent_dim;
  const int span = env_cfg.episode_len;

  EpisodeData ep;
  ep.rewards.reserve(span);
  ep.dispatched.reserve(span);
  ep.observed.reserve(static_cast<std::size_t>(span) * m * d);
  ep.true_lengths.reserve(static_cast<std::size_t>(span) * m * d);
  ep.fused_mu.reserve(static_cast<std::size_t>(span) * m * l);

  std::vector<std::vector<int>> obs(m, std::vector<int>(d));
  for (int t = 0; t < span; ++t) {
    for (int i = 0; i < m; ++i) {
      const Observation o = env.observe(i);
      for (int q = 0; q < d; ++q) obs[i][q] = o.entries[q].length;
    }
    const std::vector<int> truth = env.lengths();
    long long routed = 0;
    for (int a : env.pending_arrivals()) routed += a;

    StepDecision dec = decide_step(store, model_cfg, groups, obs, CommMode::SoftTraining,
                                   model_cfg.gamma, policy_rng, true);
    const StepOutcome out = env.step(dec.actions);

    ep.rewards.push_back(out.reward);
    ep.dispatched.push_back(routed);
    for (int i = 0; i < m; ++i) {
      for (int q = 0; q < d; ++q) {
        ep.observed.push_back(obs[i][q]);
        ep.true_lengths.push_back(truth[access_map[i][q]]);
      }
      ep.fused_mu.insert(ep.fused_mu.end(), dec.fused_mu[i].begin(), dec.fused_mu[i].end());
      ep.fused_var.insert(ep.fused_var.end(), dec.fused_var[i].begin(), dec.fused_var[i].end());
      ep.z.insert(ep.z.end(), dec.z[i].begin(), dec.z[i].end());
      ep.eps_z.insert(ep.eps_z.end(), dec.eps_z[i].begin(), dec.eps_z[i].end());
      ep.raw_logits.insert(ep.raw_logits.end(), dec.raw_logits[i].begin(), dec.raw_logits[i].end());
      ep.action_mean_old.insert(ep.action_mean_old.end(), dec.action_mean[i].begin(),
                                dec.action_mean[i].end());
      ep.log_prob_old.push_back(dec.log_prob[i]);
      ep.value_old.push_back(dec.value[i]);
      ep.alphas.push_back(dec.alphas[i]);
      ep.selected.push_back(dec.selected[i]);
    }
  }
  return ep;
}

}  // namespace

RolloutBatch collect_rollouts(ParamStore& store, const ModelConfig& model_cfg,
                              const EnvConfig& env_cfg, int min_steps, std::uint64_t seed,
                              std::uint64_t iteration) {
  require(min_steps >= env_cfg.episode_len, "rollout target must cover at least one episode");
  check_model_env(model_cfg, env_cfg);
  const auto access_map = resolve_access_map(env_cfg);
  const auto groups = comm_groups(access_map);
  const int episodes = (min_steps + env_cfg.episode_len - 1) / env_cfg.episode_len;

  std::vector<EpisodeData> parts(episodes);
  std::exception_ptr failure = nullptr;
#pragma omp parallel for schedule(dynamic) if (episodes > 1)
  for (int e = 0; e < episodes; ++e) {
    try {
      parts[e] = run_episode(store, model_cfg, env_cfg, access_map, groups,
                             derive_seed(seed, Stream::EnvArrivals, iteration, e),
                             derive_seed(seed, Stream::Policy, iteration, e));
    } catch (...) {
#pragma omp critical
      if (!failure) failure = std::current_exception();
    }
  }
  if (failure) std::rethrow_exception(failure);

  RolloutBatch batch;
  batch.agents = env_cfg.schedulers;
  batch.access = env_cfg.access;
  batch.latent_dim = model_cfg.latent_dim;
  batch.logstd_old = store.value("act/logstd").data;
  for (EpisodeData& ep : parts) {
    batch.episode_starts.push_back(batch.steps());
    batch.rewards.insert(batch.rewards.end(), ep.rewards.begin(), ep.rewards.end());
    batch.dispatched.insert(batch.dispatched.end(), ep.dispatched.begin(), ep.dispatched.end());
    batch.observed.insert(batch.observed.end(), ep.observed.begin(), ep.observed.end());
    batch.true_lengths.insert(batch.true_lengths.end(), ep.true_lengths.begin(),
                              ep.true_lengths.end());
    batch.fused_mu.insert(batch.fused_mu.end(), ep.fused_mu.begin(), ep.fused_mu.end());
    batch.fused_var.insert(batch.fused_var.end(), ep.fused_var.begin(), ep.fused_var.end());
    batch.z.insert(batch.z.end(), ep.z.begin(), ep.z.end());
    batch.eps_z.insert(batch.eps_z.end(), ep.eps_z.begin(), ep.eps_z.end());
    batch.raw_logits.insert(batch.raw_logits.end(), ep.raw_logits.begin(), ep.raw_logits.end());
    batch.action_mean_old.insert(batch.action_mean_old.end(), ep.action_mean_old.begin(),
                                 ep.action_mean_old.end());
    batch.log_prob_old.insert(batch.log_prob_old.end(), ep.log_prob_old.begin(),
                              ep.log_prob_old.end());
    batch.value_old.insert(batch.value_old.end(), ep.value_old.begin(), ep.value_old.end());
    for (auto& a : ep.alphas) batch.alphas.push_back(std::move(a));
    for (auto& s : ep.selected) batch.selected.push_back(std::move(s));
  }
  batch.check_aligned();
  return batch;
}

void gae(const std::vector<double>& rewards, const std::vector<double>& values, double lambda,
         double discount, std::vector<double>& advantages, std::vector<double>& value_targets) {
  require(rewards.size() == values.size(), "advantage estimation needs one value per reward");
  const int span = static_cast<int>(rewards.size());
  advantages.assign(span, 0.0);
  value_targets.assign(span, 0.0);
  double running = 0.0;
  for (int t = span - 1; t >= 0; --t) {
    const double next_value = t + 1 < span ? values[t + 1] : 0.0;
    const double delta = rewards[t] + discount * next_value - values[t];
    running = delta + discount * lambda * running;
    advantages[t] = running;
    value_targets[t] = running + values[t];
  }
}

void normalize_advantages(std::vector<double>& advantages) {
  const std::size_t n = advantages.size();
  if (n == 0) return;
  double mean = 0.0;
  for (double a : advantages) mean += a;
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (double a : advantages) var += (a - mean) * (a - mean);
  const double sd = std::sqrt(var / static_cast<double>(n));
  if (sd < 1e-8) return;
  for (double& a : advantages) a = (a - mean) / sd;
}

double policy_loss(const std::vector<double>& log_prob_new,
                   const std::vector<double>& log_prob_old,
                   const std::vector<double>& advantages, double clip_eps) {
  require(!log_prob_new.empty() && log_prob_new.size() == log_prob_old.size() &&
              log_prob_new.size() == advantages.size(),
          "policy loss needs aligned nonempty inputs");
  double acc = 0.0;
  for (std::size_t i = 0; i < log_prob_new.size(); ++i) {
    const double ratio = std::exp(log_prob_new[i] - log_prob_old[i]);
    const double plain = ratio * advantages[i];
    const double clipped = std::clamp(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * advantages[i];
    acc += std::min(plain, clipped);
  }
  return -acc / static_cast<double>(log_prob_new.size());
}

double value_loss(const std::vector<double>& values_new, const std::vector<double>& values_old,
                  const std::vector<double>& targets, double delta) {
  require(!values_new.empty() && values_new.size() == values_old.size() &&
              values_new.size() == targets.size(),
          "value loss needs aligned nonempty inputs");
  double acc = 0.0;
  for (std::size_t i = 0; i < values_new.size(); ++i) {
    const double direct = values_new[i] - targets[i];
    const double step = std::clamp(values_new[i] - values_old[i], -delta, delta);
    const double clipped = values_old[i] + step - targets[i];
    acc += std::max(direct * direct, clipped * clipped);
  }
  return acc / static_cast<double>(values_new.size());
}

double diag_gaussian_kl(const std::vector<double>& mean_old,
                        const std::vector<double>& logstd_old,
                        const std::vector<double>& mean_new,
                        const std::vector<double>& logstd_new) {
  require(mean_old.size() == logstd_old.size() && mean_old.size() == mean_new.size() &&
              mean_old.size() == logstd_new.size(),
          "KL needs aligned mean and log-std vectors");
  double acc = 0.0;
  for (std::size_t i = 0; i < mean_old.size(); ++i) {
    const double diff = mean_old[i] - mean_new[i];
    const double var_old = std::exp(2.0 * logstd_old[i]);
    const double var_new = std::exp(2.0 * logstd_new[i]);
    acc += logstd_new[i] - logstd_old[i] + (var_old + diff * diff) / (2.0 * var_new) - 0.5;
  }
  return acc;
}

double categorical_ce(const std::vector<double>& logits, int true_class) {
  require(!logits.empty(), "cross entropy needs at least one class");
  require(0 <= true_class && true_class < static_cast<int>(logits.size()),
          "true class out of range");
  double mx = logits[0];
  for (double v : logits) mx = std::max(mx, v);
  double sum = 0.0;
  for (double v : logits) sum += std::exp(v - mx);
  return -(logits[true_class] - mx - std::log(sum));
}

double standard_prior_kl(const std::vector<double>& mu, const std::vector<double>& var) {
  require(mu.size() == var.size(), "prior KL needs aligned mean and variance");
  double acc = 0.0;
  for (std::size_t i = 0; i < mu.size(); ++i) {
    require(var[i] > 0.0, "prior KL needs positive variances");
    acc += var[i] + mu[i] * mu[i] - 1.0 - std::log(var[i]);
  }
  return 0.5 * acc;
}

double vae_loss(const Tensor& decoder_logits, const std::vector<int>& true_states,
                const Tensor& fused_mu, const Tensor& fused_var, double beta_kl, int access,
                int buffer_cap) {
  const int classes = buffer_cap + 1;
  const int n = decoder_logits.rows;
  require(n >= 1 && decoder_logits.cols == access * classes,
          "decoder logits must be [n, access*(buffer_cap+1)]");
  require(static_cast<int>(true_states.size()) == n * access, "one true length per queue needed");
  require(fused_mu.rows == n && fused_var.rows == n && fused_mu.cols == fused_var.cols,
          "fused moments must align with the logits");
  double ce = 0.0;
  double kl = 0.0;
  std::vector<double> block(classes);
  for (int r = 0; r < n; ++r) {
    for (int q = 0; q < access; ++q) {
      for (int c = 0; c < classes; ++c) block[c] = decoder_logits.at(r, q * classes + c);
      ce += categorical_ce(block, true_states[static_cast<std::size_t>(r) * access + q]);
    }
    std::vector<double> mu(fused_mu.data.begin() + static_cast<std::size_t>(r) * fused_mu.cols,
                           fused_mu.data.begin() + static_cast<std::size_t>(r + 1) * fused_mu.cols);
    std::vector<double> var(fused_var.data.begin() + static_cast<std::size_t>(r) * fused_var.cols,
                            fused_var.data.begin() +
                                static_cast<std::size_t>(r + 1) * fused_var.cols);
    kl += standard_prior_kl(mu, var);
  }
  return ce / n + beta_kl * (kl / n);
}

double total_loss(double policy, double value, double vae, double value_coeff, double kappa) {
  return policy + value_coeff * value + kappa * vae;
}

LossBreakdown minibatch_loss_graph(Tape& tape, ParamStore& store, const ModelConfig& model_cfg,
                                   const PPOConfig& ppo, const RolloutBatch& batch,
                                   const std::vector<CommGroup>& groups,
                                   const std::vector<int>& step_ids,
                                   const std::vector<double>& advantages,
                                   const std::vector<double>& value_targets, double nu) {
  const int m = batch.agents;
  const int d = batch.access;
  const int l = batch.latent_dim;
  const int classes = model_cfg.buffer_cap + 1;
  const int span = static_cast<int>(step_ids.size());
  require(span >= 1, "minibatch needs at least one step");
  require(static_cast<int>(groups.size()) == m, "one communication group per agent required");
  require(advantages.size() == static_cast<std::size_t>(batch.samples()) &&
              value_targets.size() == advantages.size(),
          "advantages and targets must cover the whole batch");
  for (int t : step_ids) require(0 <= t && t < batch.steps(), "step id out of range");

  // One encoder and attention pass over every agent of every step; groups
  // pick their candidate rows out of it.
  std::vector<std::vector<int>> obs_rows(static_cast<std::size_t>(span) * m,
                                         std::vector<int>(d));
  for (int r = 0; r < span; ++r) {
    for (int i = 0; i < m; ++i) {
      const std::size_t s = (static_cast<std::size_t>(step_ids[r]) * m + i) * d;
      for (int q = 0; q < d; ++q) obs_rows[static_cast<std::size_t>(r) * m + i][q] =
          batch.observed[s + q];
    }
  }
  GaussianRefs enc = encode_graph(tape, store, model_cfg,
                                  tape.constant(one_hot_obs_batch(obs_rows, model_cfg.buffer_cap)));
  ValueRef embed = attention_embed_graph(tape, store, enc.mu, enc.var);
  ValueRef score_col = attention_score_graph(tape, store, embed);

  ValueRef surr_sum, klpen_sum, value_sum, logp_sum, prior_sum;
  bool first_seg = true;
  auto accumulate = [&tape, &first_seg](ValueRef& acc, ValueRef v) {
    acc = first_seg ? v : tape.add(acc, v);
  };

  for (int owner = 0; owner < m; ++owner) {
    const CommGroup& group = groups[owner];
    const int k = static_cast<int>(group.candidates.size());

    // Experts enter the product own-first at fixed weight 1 (matching the
    // per-step path); only the peers share the attention softmax.
    std::vector<GaussianRefs> experts;
    experts.reserve(k);
    std::vector<ValueRef> peer_scores;
    peer_scores.reserve(k - 1);
    {
      std::vector<int> rows(span);
      for (int r = 0; r < span; ++r) rows[r] = r * m + owner;
      experts.push_back({tape.gather_rows(enc.mu, rows), tape.gather_rows(enc.var, rows)});
    }
    for (int j = 0; j < k; ++j) {
      if (group.candidates[j] == owner) continue;
      std::vector<int> rows(span);
      for (int r = 0; r < span; ++r) rows[r] = r * m + group.candidates[j];
      experts.push_back({tape.gather_rows(enc.mu, rows), tape.gather_rows(enc.var, rows)});
      peer_scores.push_back(tape.gather_rows(score_col, rows));
    }
    ValueRef own_w = tape.constant(Tensor(span, 1, 1.0));
    ValueRef alphas =
        peer_scores.empty()
            ? own_w
            : tape.concat_cols({own_w, tape.softmax_rows(tape.concat_cols(peer_scores))});
    GaussianRefs fused = weighted_poe_graph(tape, alphas, experts, true);

    Tensor eps(span, l), raw(span, d), mean_old(span, d), var_old(span, d), logstd_old(span, d);
    Tensor adv(span, 1), target(span, 1), lp_old(span, 1), v_old(span, 1);
    std::vector<std::vector<int>> truth_cols(d, std::vector<int>(span));
    for (int r = 0; r < span; ++r) {
      const std::size_t s = static_cast<std::size_t>(step_ids[r]) * m + owner;
      for (int c = 0; c < l; ++c) eps.at(r, c) = batch.eps_z[s * l + c];
      for (int c = 0; c < d; ++c) {
        raw.at(r, c) = batch.raw_logits[s * d + c];
        mean_old.at(r, c) = batch.action_mean_old[s * d + c];
        logstd_old.at(r, c) = batch.logstd_old[c];
        var_old.at(r, c) = std::exp(2.0 * batch.logstd_old[c]);
        truth_cols[c][r] = batch.true_lengths[s * d + c];
      }
      adv.at(r, 0) = advantages[s];
      target.at(r, 0) = value_targets[s];
      lp_old.at(r, 0) = batch.log_prob_old[s];
      v_old.at(r, 0) = batch.value_old[s];
    }

    ValueRef z = tape.reparam_sample(fused.mu, tape.sqrt(fused.var), std::move(eps));

    // Clip surrogate on the replayed action sample.
    ValueRef mean_new = action_mean_graph(tape, store, z);
    ValueRef lp_new = gaussian_log_prob_graph(tape, tape.constant(std::move(raw)), mean_new,
                                              tape.param(store, "act/logstd"));
    ValueRef ratio = tape.exp(tape.sub(lp_new, tape.constant(std::move(lp_old))));
    ValueRef adv_ref = tape.constant(std::move(adv));
    ValueRef plain = tape.mul(ratio, adv_ref);
    ValueRef clipped = tape.mul(tape.clamp(ratio, 1.0 - ppo.clip, 1.0 + ppo.clip), adv_ref);
    accumulate(surr_sum, tape.sum_all(tape.minimum(plain, clipped)));

    // KL(old || new) of the action Gaussian, closed form.
    ValueRef logstd_new =
        tape.add_row(tape.constant(Tensor(span, d, 0.0)), tape.param(store, "act/logstd"));
    ValueRef mean_diff = tape.sub(tape.constant(std::move(mean_old)), mean_new);
    ValueRef two_var_new = tape.affine(tape.exp(tape.affine(logstd_new, 2.0, 0.0)), 2.0, 0.0);
    ValueRef quad = tape.mul(tape.add(tape.constant(std::move(var_old)), tape.square(mean_diff)),
                             tape.recip(two_var_new));
    ValueRef kl_terms = tape.affine(
        tape.add(tape.sub(logstd_new, tape.constant(std::move(logstd_old))), quad), 1.0, -0.5);
    accumulate(klpen_sum, tape.sum_all(kl_terms));

    // Clipped value regression.
    ValueRef v_new = value_graph(tape, store, z);
    ValueRef v_old_ref = tape.constant(std::move(v_old));
    ValueRef target_ref = tape.constant(std::move(target));
    ValueRef stepped = tape.add(
        v_old_ref, tape.clamp(tape.sub(v_new, v_old_ref), -ppo.value_clip, ppo.value_clip));
    ValueRef direct_sq = tape.square(tape.sub(v_new, target_ref));
    ValueRef clipped_sq = tape.square(tape.sub(stepped, target_ref));
    accumulate(value_sum, tape.sum_all(tape.maximum(direct_sq, clipped_sq)));

    // Reconstruction log-likelihood and prior KL of the fused belief.
    ValueRef dec = decoder_graph(tape, store, z);
    ValueRef seg_logp;
    for (int q = 0; q < d; ++q) {
      ValueRef block = tape.log_softmax_rows(tape.slice_cols(dec, q * classes, (q + 1) * classes));
      ValueRef picked = tape.sum_all(tape.select_cols(block, truth_cols[q]));
      seg_logp = q == 0 ? picked : tape.add(seg_logp, picked);
    }
    accumulate(logp_sum, seg_logp);
    ValueRef prior_terms = tape.sub(tape.add(fused.var, tape.square(fused.mu)),
                                    tape.affine(tape.log(fused.var), 1.0, 1.0));
    accumulate(prior_sum, tape.affine(tape.sum_all(prior_terms), 0.5, 0.0));

    first_seg = false;
  }

  const double inv_n = 1.0 / (static_cast<double>(span) * m);
  LossBreakdown out;
  out.policy = tape.affine(surr_sum, -inv_n, 0.0);
  out.kl = tape.affine(klpen_sum, inv_n, 0.0);
  out.value = tape.affine(value_sum, inv_n, 0.0);
  out.vae = tape.add(tape.affine(logp_sum, -inv_n, 0.0),
                     tape.affine(prior_sum, ppo.beta_kl * inv_n, 0.0));
  out.total = tape.add(tape.add(out.policy, tape.affine(out.kl, nu, 0.0)),
                       tape.add(tape.affine(out.value, ppo.value_coeff, 0.0),
                                tape.affine(out.vae, ppo.kappa, 0.0)));
  return out;
}

const char* metrics_csv_header() {
  return "iteration,mean_reward,drop_rate,comm_ratio,policy_loss,value_loss,vae_loss,kl";
}

std::string metrics_csv_row(const IterationMetrics& m) {
  std::ostringstream os;
  os << std::setprecision(17) << m.iteration << ',' << m.mean_reward << ',' << m.drop_rate << ','
     << m.comm_ratio << ',' << m.policy_loss << ',' << m.value_loss << ',' << m.vae_loss << ','
     << m.kl;
  return os.str();
}

namespace {

std::string checkpoint_name(int iteration) {
  std::ostringstream os;
  os << "checkpoint_" << std::setw(6) << std::setfill('0') << iteration << ".bin";
  return os.str();
}

void fisher_yates(std::vector<int>& order, Rng& rng) {
  for (std::size_t i = order.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng.bits() % i);
    std::swap(order[i - 1], order[j]);
  }
}

}  // namespace

TrainResult train(ParamStore& store, const ModelConfig& model_cfg, const EnvConfig& env_cfg,
                  const PPOConfig& ppo, const TrainLoopConfig& loop,
                  std::optional<TrainerState> resume,
                  const std::function<void(const IterationMetrics&)>& on_iteration) {
  ppo.validate();
  model_cfg.validate();
  require(loop.iterations >= 0, "iteration count must be nonnegative");
  require(loop.episodes_per_iteration >= 1, "need at least one episode per iteration");

  TrainerState state = resume.value_or(TrainerState{ppo.kl_init_coeff, 0});
  require(state.iteration >= 0, "resume iteration must be nonnegative");

  const auto access_map = resolve_access_map(env_cfg);
  const auto groups = comm_groups(access_map);
  const int m = env_cfg.schedulers;
  const AdamConfig adam{ppo.lr, 0.9, 0.999, 1e-8};
  const int steps_per_minibatch = std::max(1, ppo.minibatch / m);

  std::ofstream metrics_file;
  if (!loop.run_dir.empty()) {
    std::filesystem::create_directories(loop.run_dir);
    const std::string path = loop.run_dir + "/metrics.csv";
    if (state.iteration == 0) {
      metrics_file.open(path, std::ios::trunc);
      metrics_file << metrics_csv_header() << '\n';
    } else {
      metrics_file.open(path, std::ios::app);
    }
    if (!metrics_file) throw ConfigError("cannot write " + path);
  }

  TrainResult result;
  const int min_steps = std::max(ppo.train_batch, loop.episodes_per_iteration * env_cfg.episode_len);

  for (; state.iteration < loop.iterations; ++state.iteration) {
    const int it = state.iteration;
    RolloutBatch batch = collect_rollouts(store, model_cfg, env_cfg, min_steps, loop.seed, it);

    // Per-(episode, agent) advantage estimation over the shared rewards.
    std::vector<double> advantages(batch.samples()), targets(batch.samples());
    for (std::size_t e = 0; e < batch.episode_starts.size(); ++e) {
      const int t0 = batch.episode_starts[e];
      const int t1 = e + 1 < batch.episode_starts.size() ? batch.episode_starts[e + 1]
                                                         : batch.steps();
      const std::vector<double> rewards(batch.rewards.begin() + t0, batch.rewards.begin() + t1);
      for (int i = 0; i < m; ++i) {
        std::vector<double> values(t1 - t0);
        for (int t = t0; t < t1; ++t) values[t - t0] = batch.value_old[static_cast<std::size_t>(t) * m + i];
        std::vector<double> adv, tgt;
        gae(rewards, values, ppo.lambda_gae, ppo.discount, adv, tgt);
        for (int t = t0; t < t1; ++t) {
          advantages[static_cast<std::size_t>(t) * m + i] = adv[t - t0];
          targets[static_cast<std::size_t>(t) * m + i] = tgt[t - t0];
        }
      }
    }
    normalize_advantages(advantages);

    double policy_acc = 0.0, value_acc = 0.0, vae_acc = 0.0;
    int minibatches = 0;
    std::vector<int> order(batch.steps());
    std::iota(order.begin(), order.end(), 0);

    for (int epoch = 0; epoch < ppo.epochs_per_batch; ++epoch) {
      Rng shuffle_rng(derive_seed(loop.seed, Stream::Shuffle, it, epoch));
      fisher_yates(order, shuffle_rng);
      for (int start = 0; start < batch.steps(); start += steps_per_minibatch) {
        const int end = std::min(batch.steps(), start + steps_per_minibatch);
        const std::vector<int> ids(order.begin() + start, order.begin() + end);
        Tape tape(true);
        const LossBreakdown loss = minibatch_loss_graph(tape, store, model_cfg, ppo, batch,
                                                        groups, ids, advantages, targets,
                                                        state.nu);
        const double total = tape.val(loss.total).data[0];
        if (!std::isfinite(total)) {
          std::ostringstream os;
          os << "total loss became non-finite at iteration " << it << ", epoch " << epoch
             << ", minibatch " << minibatches << ": policy=" << tape.val(loss.policy).data[0]
             << " value=" << tape.val(loss.value).data[0]
             << " vae=" << tape.val(loss.vae).data[0] << " kl=" << tape.val(loss.kl).data[0];
          if (!loop.run_dir.empty()) {
            save_training_checkpoint(loop.run_dir + "/diagnostic_nan.bin", store, model_cfg,
                                     state);
            os << " (state dumped to diagnostic_nan.bin)";
          }
          throw NumericError(os.str());
        }
        policy_acc += tape.val(loss.policy).data[0];
        value_acc += tape.val(loss.value).data[0];
        vae_acc += tape.val(loss.vae).data[0];
        ++minibatches;
        tape.backward(loss.total);
        store.adam_step(adam);
      }
    }

    // Post-update divergence from the collection policy, for the metric and
    // the adaptive penalty.
    double kl_measured = 0.0;
    for (int start = 0; start < batch.steps(); start += steps_per_minibatch) {
      const int end = std::min(batch.steps(), start + steps_per_minibatch);
      std::vector<int> ids(end - start);
      std::iota(ids.begin(), ids.end(), start);
      Tape tape(false);
      const LossBreakdown loss = minibatch_loss_graph(tape, store, model_cfg, ppo, batch, groups,
                                                      ids, advantages, targets, state.nu);
      kl_measured += tape.val(loss.kl).data[0] * static_cast<double>((end - start) * m);
    }
    kl_measured /= static_cast<double>(batch.samples());
    if (kl_measured > 2.0 * ppo.kl_target) {
      state.nu *= 2.0;
    } else if (kl_measured < 0.5 * ppo.kl_target) {
      state.nu *= 0.5;
    }

    IterationMetrics metrics;
    metrics.iteration = it;
    const double episodes = static_cast<double>(batch.episode_starts.size());
    double reward_sum = 0.0;
    for (double r : batch.rewards) reward_sum += r;
    long long routed = 0;
    for (long long a : batch.dispatched) routed += a;
    metrics.mean_reward = reward_sum / episodes;
    metrics.drop_rate = routed > 0 ? -reward_sum / static_cast<double>(routed) : 0.0;
    long long informative = 0, candidates = 0;
    for (int s = 0; s < batch.samples(); ++s) {
      const CommGroup& group = groups[s % m];
      for (std::size_t j = 0; j < group.candidates.size(); ++j) {
        if (group.candidates[j] == group.owner) continue;
        ++candidates;
        if (batch.alphas[s][j] > model_cfg.gamma) ++informative;
      }
    }
    metrics.comm_ratio =
        candidates > 0 ? static_cast<double>(informative) / static_cast<double>(candidates) : 0.0;
    metrics.policy_loss = policy_acc / minibatches;
    metrics.value_loss = value_acc / minibatches;
    metrics.vae_loss = vae_acc / minibatches;
    metrics.kl = kl_measured;

    result.history.push_back(metrics);
    if (metrics_file.is_open()) {
      metrics_file << metrics_csv_row(metrics) << '\n';
      metrics_file.flush();
    }
    if (on_iteration) on_iteration(metrics);

    if (!loop.run_dir.empty() && loop.checkpoint_every > 0 &&
        (it + 1) % loop.checkpoint_every == 0) {
      TrainerState next{state.nu, it + 1};
      save_training_checkpoint(loop.run_dir + "/" + checkpoint_name(it + 1), store, model_cfg,
                               next);
    }
  }

  if (!loop.run_dir.empty()) {
    save_training_checkpoint(loop.run_dir + "/checkpoint_final.bin", store, model_cfg, state);
  }
  result.state = state;
  return result;
}

void save_training_checkpoint(const std::string& path, const ParamStore& store,
                              const ModelConfig& model_cfg, const TrainerState& state) {
  auto arrays = store.to_arrays();
  for (auto& [key, tensor] : model_meta_arrays(model_cfg)) arrays.emplace(key, std::move(tensor));
  arrays.emplace("train/nu", Tensor::scalar(state.nu));
  arrays.emplace("train/iteration", Tensor::scalar(static_cast<double>(state.iteration)));
  save_arrays(path, arrays);
}

LoadedCheckpoint load_training_checkpoint(const std::string& path) {
  const auto arrays = load_arrays(path);
  LoadedCheckpoint out;
  out.params = ParamStore::from_arrays(arrays);
  if (out.params.names().empty()) throw CompatError("checkpoint holds no parameters: " + path);
  out.model = model_config_from_arrays(arrays);
  auto scalar = [&arrays, &path](const std::string& key) {
    auto it = arrays.find(key);
    if (it == arrays.end()) throw CompatError("checkpoint is missing " + key + ": " + path);
    return it->second.data.at(0);
  };
  out.state.nu = scalar("train/nu");
  out.state.iteration = static_cast<int>(scalar("train/iteration"));
  return out;
}

EvalMetrics evaluate(ParamStore* store, const ModelConfig* model_cfg, const EnvConfig& env_cfg,
                     const EvalConfig& eval_cfg) {
  require(eval_cfg.episodes >= 1, "evaluation needs at least one episode");
  const bool needs_model = policy_needs_model(eval_cfg.policy);
  if (needs_model) {
    require(store != nullptr && model_cfg != nullptr,
            "policy " + policy_kind_name(eval_cfg.policy) + " needs a model");
    check_model_env(*model_cfg, env_cfg);
  }
  const auto access_map = resolve_access_map(env_cfg);
  const auto groups = comm_groups(access_map);
  const int m = env_cfg.schedulers;
  const int d = env_cfg.access;

  CommMode mode = CommMode::Threshold;
  if (eval_cfg.policy == PolicyKind::ATVCFullComm) mode = CommMode::Full;
  if (eval_cfg.policy == PolicyKind::ATVCNoComm) mode = CommMode::None;

  EvalMetrics out;
  out.episodes = eval_cfg.episodes;
  double reward_sum = 0.0;
  long long informative = 0, candidates = 0, decoded = 0, decoded_right = 0;

  for (int ep = 0; ep < eval_cfg.episodes; ++ep) {
    EnvConfig episode_cfg = env_cfg;
    episode_cfg.access_map = access_map;
    episode_cfg.seed = derive_seed(eval_cfg.seed, Stream::Eval, ep, 0);
    Env env(episode_cfg);
    Rng policy_rng(derive_seed(eval_cfg.seed, Stream::Eval, ep, 1));

    for (int t = 0; t < env_cfg.episode_len; ++t) {
      for (int a : env.pending_arrivals()) out.total_dispatched += a;
      const std::vector<int> truth = env.lengths();
      std::vector<AllocationAction> actions(m);

      if (eval_cfg.policy == PolicyKind::JSQ) {
        for (int i = 0; i < m; ++i) {
          std::vector<int> accessible(d);
          for (int q = 0; q < d; ++q) accessible[q] = truth[access_map[i][q]];
          actions[i] = jsq_action(i, accessible);
        }
      } else if (eval_cfg.policy == PolicyKind::Random) {
        for (int i = 0; i < m; ++i) actions[i] = random_action(i, d);
      } else {
        std::vector<std::vector<int>> obs(m, std::vector<int>(d));
        for (int i = 0; i < m; ++i) {
          const Observation o = env.observe(i);
          for (int q = 0; q < d; ++q) obs[i][q] = o.entries[q].length;
        }
        const StepDecision dec = decide_step(*store, *model_cfg, groups, obs, mode,
                                             eval_cfg.gamma, policy_rng, false);
        actions = dec.actions;
        for (int i = 0; i < m; ++i) {
          for (std::size_t j = 0; j < groups[i].candidates.size(); ++j) {
            if (groups[i].candidates[j] == i) continue;
            ++candidates;
            if (dec.selected[i][j]) ++informative;
          }
        }
        if (eval_cfg.decoder_accuracy) {
          for (int i = 0; i < m; ++i) {
            const Tensor logits = decode(*store, *model_cfg, dec.z[i]);
            const int classes = model_cfg->buffer_cap + 1;
            for (int q = 0; q < d; ++q) {
              int best = 0;
              for (int c = 1; c < classes; ++c) {
                if (logits.data[q * classes + c] > logits.data[q * classes + best]) best = c;
              }
              ++decoded;
              if (best == truth[access_map[i][q]]) ++decoded_right;
            }
          }
        }
      }

      const StepOutcome step = env.step(actions);
      reward_sum += step.reward;
      for (int drop : step.drops_per_queue) out.total_drops += drop;
    }
  }

  out.mean_reward = reward_sum / static_cast<double>(eval_cfg.episodes);
  out.drop_rate = out.total_dispatched > 0
                      ? static_cast<double>(out.total_drops) / static_cast<double>(out.total_dispatched)
                      : 0.0;
  out.comm_ratio =
      candidates > 0 ? static_cast<double>(informative) / static_cast<double>(candidates) : 0.0;
  out.decoder_accuracy =
      decoded > 0 ? static_cast<double>(decoded_right) / static_cast<double>(decoded) : 0.0;
  return out;
}

}  // namespace atvc
