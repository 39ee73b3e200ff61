#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "atvc/baselines.hpp"
#include "atvc/env.hpp"
#include "atvc/model.hpp"
#include "atvc/nn.hpp"

namespace atvc {

struct PPOConfig {
  double lambda_gae = 1.0;
  double kl_init_coeff = 0.2;  // adaptive KL penalty start
  int train_batch = 4000;      // environment steps per iteration, minimum
  int minibatch = 128;         // agent samples per gradient step
  double lr = 5e-5;
  double clip = 0.3;
  double value_clip = 10.0;
  double value_coeff = 0.5;    // value-loss share inside the policy loss
  double kappa = 0.1;          // reconstruction-objective share in the total
  double beta_kl = 1.0;        // prior-KL weight inside the reconstruction loss
  double discount = 1.0;
  int epochs_per_batch = 8;
  double kl_target = 0.01;

  void validate() const;
};

// One iteration of on-policy experience. Episodes are concatenated along the
// step axis; per-step-per-agent fields are flattened sample-major with
// sample index = step * agents + agent.
struct RolloutBatch {
  int agents = 0;
  int access = 0;
  int latent_dim = 0;
  std::vector<int> episode_starts;          // first step index of each episode
  std::vector<double> rewards;              // [steps], shared by all agents
  std::vector<long long> dispatched;        // [steps], packets routed that step
  std::vector<int> observed;                // [samples * access]
  std::vector<int> true_lengths;            // [samples * access]
  std::vector<double> fused_mu;             // [samples * latent_dim]
  std::vector<double> fused_var;            // [samples * latent_dim]
  std::vector<double> z;                    // [samples * latent_dim]
  std::vector<double> eps_z;                // [samples * latent_dim]
  std::vector<double> raw_logits;           // [samples * access]
  std::vector<double> action_mean_old;      // [samples * access]
  std::vector<double> log_prob_old;         // [samples]
  std::vector<double> value_old;            // [samples]
  std::vector<double> logstd_old;           // [access], action log-std at collection
  std::vector<std::vector<double>> alphas;  // [samples][candidates]
  std::vector<std::vector<bool>> selected;  // [samples][candidates]

  int steps() const { return static_cast<int>(rewards.size()); }
  int samples() const { return steps() * agents; }
  void check_aligned() const;  // throws ContractError on any length mismatch
};

// Runs whole episodes (episode_len steps each) until at least min_steps steps
// are gathered, acting with soft attention-weighted fusion so the collected
// data matches what the loss recomputes. Episodes get independent derived
// seeds, so collection order is reproducible and parallelizable.
RolloutBatch collect_rollouts(ParamStore& store, const ModelConfig& model_cfg,
                              const EnvConfig& env_cfg, int min_steps, std::uint64_t seed,
                              std::uint64_t iteration);

// Generalized advantage estimation over one episode's reward/value sequence
// (terminal value zero). targets[t] = advantages[t] + values[t].
void gae(const std::vector<double>& rewards, const std::vector<double>& values, double lambda,
         double discount, std::vector<double>& advantages, std::vector<double>& value_targets);

// Rescales to mean 0, std 1. Batches with near-zero spread (including
// single-sample ones) are left untouched so the loss argmin is preserved.
void normalize_advantages(std::vector<double>& advantages);

// Clip-surrogate policy loss: -mean(min(r * A, clamp(r, 1-eps, 1+eps) * A))
// with r = exp(log_prob_new - log_prob_old).
double policy_loss(const std::vector<double>& log_prob_new,
                   const std::vector<double>& log_prob_old,
                   const std::vector<double>& advantages, double clip_eps);

// mean(max((V - target)^2, (V_old + clamp(V - V_old, -delta, delta) - target)^2)).
double value_loss(const std::vector<double>& values_new, const std::vector<double>& values_old,
                  const std::vector<double>& targets, double delta);

// KL(N(mean_old, exp(logstd_old)^2) || N(mean_new, exp(logstd_new)^2)),
// diagonal, summed over dimensions.
double diag_gaussian_kl(const std::vector<double>& mean_old,
                        const std::vector<double>& logstd_old,
                        const std::vector<double>& mean_new,
                        const std::vector<double>& logstd_new);

// -log softmax(logits)[true_class].
double categorical_ce(const std::vector<double>& logits, int true_class);

// KL(N(mu, diag(var)) || N(0, I)) = 0.5 * sum(var + mu^2 - 1 - log var).
double standard_prior_kl(const std::vector<double>& mu, const std::vector<double>& var);

// Reconstruction + beta_kl * prior KL, averaged over samples. decoder_logits
// is [n, access*(buffer_cap+1)] with one categorical block per queue;
// true_states is flattened [n * access]; fused_mu/fused_var are [n, latent].
double vae_loss(const Tensor& decoder_logits, const std::vector<int>& true_states,
                const Tensor& fused_mu, const Tensor& fused_var, double beta_kl, int access,
                int buffer_cap);

double total_loss(double policy, double value, double vae, double value_coeff, double kappa);

struct LossBreakdown {
  ValueRef total;   // optimized: policy + nu*kl + value_coeff*value + kappa*vae
  ValueRef policy;  // clip surrogate alone
  ValueRef value;
  ValueRef vae;
  ValueRef kl;      // mean KL(old || new) of the action distribution
};

// Rebuilds the full decision pipeline for the given steps (all agents of each
// step) with gradients under the tape's control: one encoder pass over every
// agent observation, attention softmax per communication group, weighted
// fusion, latent replay through the stored noise, and the three heads. At
// unchanged parameters the recomputed log-probs, values, and fused moments
// reproduce the rollout bit for bit. Minibatches are whole steps so each
// observation is encoded once however many groups consume it.
LossBreakdown minibatch_loss_graph(Tape& tape, ParamStore& store, const ModelConfig& model_cfg,
                                   const PPOConfig& ppo, const RolloutBatch& batch,
                                   const std::vector<CommGroup>& groups,
                                   const std::vector<int>& step_ids,
                                   const std::vector<double>& advantages,
                                   const std::vector<double>& value_targets, double nu);

struct IterationMetrics {
  int iteration = 0;
  double mean_reward = 0.0;  // mean episode reward = -(drops)/episodes
  double drop_rate = 0.0;    // drops per dispatched packet
  double comm_ratio = 0.0;   // non-self weights above gamma / non-self candidates
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double vae_loss = 0.0;
  double kl = 0.0;
};

const char* metrics_csv_header();
std::string metrics_csv_row(const IterationMetrics& m);

struct TrainerState {
  double nu = 0.0;
  int iteration = 0;  // next iteration to run
};

struct TrainLoopConfig {
  int iterations = 300;
  int episodes_per_iteration = 50;
  std::uint64_t seed = 0;
  std::string run_dir;        // empty: no files, metrics only in memory
  int checkpoint_every = 100; // iterations between periodic checkpoints (0: final only)
};

struct TrainResult {
  std::vector<IterationMetrics> history;
  TrainerState state;
};

// PPO loop with one shared parameter set: collect, estimate advantages,
// epochs_per_batch passes of shuffled minibatches with one Adam step each,
// adapt the KL coefficient, emit metrics. Writes metrics.csv and checkpoints
// under run_dir when set. A non-finite loss dumps a diagnostic checkpoint and
// throws NumericError.
TrainResult train(ParamStore& store, const ModelConfig& model_cfg, const EnvConfig& env_cfg,
                  const PPOConfig& ppo, const TrainLoopConfig& loop,
                  std::optional<TrainerState> resume = std::nullopt,
                  const std::function<void(const IterationMetrics&)>& on_iteration = nullptr);

// One flat array file: parameters with optimizer state, model shape metadata,
// and the trainer's adaptive-KL state.
void save_training_checkpoint(const std::string& path, const ParamStore& store,
                              const ModelConfig& model_cfg, const TrainerState& state);

struct LoadedCheckpoint {
  ParamStore params;
  ModelConfig model;
  TrainerState state;
};

LoadedCheckpoint load_training_checkpoint(const std::string& path);

struct EvalConfig {
  int episodes = 1000;
  double gamma = 0.3;  // attention threshold during execution
  PolicyKind policy = PolicyKind::ATVC;
  std::uint64_t seed = 0;
  bool decoder_accuracy = false;  // also score state reconstruction (model policies)
};

struct EvalMetrics {
  double mean_reward = 0.0;
  double drop_rate = 0.0;
  double comm_ratio = 0.0;
  double decoder_accuracy = 0.0;
  long long episodes = 0;
  long long total_drops = 0;
  long long total_dispatched = 0;
};

// Decentralized execution: hard attention thresholding for the learned
// policy, oracle queue lengths for the non-learning ones. store/model_cfg may
// be null for policies that need no model; a model incompatible with the
// environment's access width or buffer capacity raises CompatError.
EvalMetrics evaluate(ParamStore* store, const ModelConfig* model_cfg, const EnvConfig& env_cfg,
                     const EvalConfig& eval_cfg);

}  // namespace atvc
