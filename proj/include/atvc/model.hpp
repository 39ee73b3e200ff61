#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "atvc/env.hpp"
#include "atvc/nn.hpp"

namespace atvc {

// Agent network shape. `access` and `buffer_cap` must match the environment
// the agent is deployed in; everything else is free.
struct ModelConfig {
  int access = 2;
  int buffer_cap = 5;
  int latent_dim = 16;
  int encoder_hidden = 64;
  int head_hidden = 64;
  int attention_dim = 32;
  double gamma = 0.3;  // execution-time attention threshold

  int input_dim() const { return access * (buffer_cap + 1); }
  void validate() const;
};

// A diagonal Gaussian over the latent space. `sigma` holds per-dimension
// variances (precision = 1/sigma), so positivity is a hard invariant.
struct GaussianMessage {
  int sender = 0;
  std::vector<double> mu;
  std::vector<double> sigma;
};

std::string message_to_bytes(const GaussianMessage& m);
GaussianMessage message_from_bytes(const std::string& bytes);

// Schedulers sharing at least one accessible queue with the owner, owner
// included, ascending ids.
struct CommGroup {
  int owner = 0;
  std::vector<int> candidates;
};

std::vector<CommGroup> comm_groups(const std::vector<std::vector<int>>& access_map);

struct FusedBelief {
  std::vector<double> mu;
  std::vector<double> sigma;  // variances
  std::vector<bool> selected;
  std::vector<double> alphas;
};

ParamStore init_params(const ModelConfig& cfg, std::uint64_t seed);

// Shape/threshold metadata stored alongside parameters so a checkpoint can be
// validated against an environment before evaluation.
std::map<std::string, Tensor> model_meta_arrays(const ModelConfig& cfg);
ModelConfig model_config_from_arrays(const std::map<std::string, Tensor>& arrays);

// ---- Batched graph builders -------------------------------------------------
// These append to a caller-owned tape and are shared verbatim between
// training (gradients on) and execution (gradients off).

struct GaussianRefs {
  ValueRef mu;
  ValueRef var;
};

Tensor one_hot_obs(const std::vector<int>& lengths, int buffer_cap);
Tensor one_hot_obs_batch(const std::vector<std::vector<int>>& lengths_rows, int buffer_cap);

// obs: [N, d*(B+1)] one-hot rows -> message parameters, variance clamped to
// [1e-4, 1e4].
GaussianRefs encode_graph(Tape& tape, ParamStore& store, const ModelConfig& cfg, ValueRef obs);

// Message embedding u = tanh(concat(mu, var) W + b): [N, attention_dim].
ValueRef attention_embed_graph(Tape& tape, ParamStore& store, ValueRef mu, ValueRef var);

// Dot products against the learned context vector: [N, 1].
ValueRef attention_score_graph(Tape& tape, ParamStore& store, ValueRef u);

// Weighted product of Gaussian experts, one expert per column of alphas
// ([N, k]), fused per row. The standard-normal prior joins with fixed weight
// 1 when include_prior is set.
GaussianRefs weighted_poe_graph(Tape& tape, ValueRef alphas, const std::vector<GaussianRefs>& experts,
                                bool include_prior);

ValueRef action_mean_graph(Tape& tape, ParamStore& store, ValueRef z);   // [N, d]
ValueRef value_graph(Tape& tape, ParamStore& store, ValueRef z);         // [N, 1]
ValueRef decoder_graph(Tape& tape, ParamStore& store, ValueRef z);       // [N, d*(B+1)]

// Diagonal-Gaussian log density of `raw` under mean rows and the shared
// learned log-std row: [N, 1].
ValueRef gaussian_log_prob_graph(Tape& tape, ValueRef raw, ValueRef mean, ValueRef logstd_row);

// ---- Single-sample operations ----------------------------------------------

GaussianMessage encode(ParamStore& store, const ModelConfig& cfg,
                       const std::vector<int>& observed_lengths, int sender);

std::vector<double> attention_weights(ParamStore& store, const ModelConfig& cfg,
                                      const std::vector<GaussianMessage>& messages);

// mask_i = (alpha_i > gamma), with the owner's entry always kept.
std::vector<bool> select_messages(const std::vector<double>& alphas, double gamma, int owner_pos);

FusedBelief weighted_poe(const std::vector<GaussianMessage>& messages,
                         const std::vector<double>& alphas, bool include_prior);

struct ActionSample {
  std::vector<double> raw_logits;
  std::vector<double> fractions;
  std::vector<double> mean;
  double log_prob = 0.0;
};

ActionSample act(ParamStore& store, const ModelConfig& cfg, const std::vector<double>& z, Rng& rng);
double value(ParamStore& store, const ModelConfig& cfg, const std::vector<double>& z);
// Per-queue categorical logits over lengths 0..B: [d, B+1].
Tensor decode(ParamStore& store, const ModelConfig& cfg, const std::vector<double>& z);

// ---- Full per-step pipeline -------------------------------------------------

// How fusion weights are formed from the attention weights.
enum class CommMode {
  SoftTraining,  // all candidates at their attention weights (differentiable path)
  Threshold,     // candidates with alpha > gamma plus the owner, no renormalization
  Full,          // all candidates, ratio reported as 1
  None           // owner only, at weight 1
};

struct StepDecision {
  std::vector<AllocationAction> actions;
  std::vector<GaussianMessage> messages;          // own message per agent
  std::vector<std::vector<double>> fused_mu;      // per agent, L
  std::vector<std::vector<double>> fused_var;     // per agent, L
  std::vector<std::vector<double>> z;             // per agent, L
  std::vector<std::vector<double>> eps_z;         // noise behind z, for replay
  std::vector<std::vector<double>> raw_logits;    // per agent, d
  std::vector<std::vector<double>> action_mean;   // per agent, d
  std::vector<double> log_prob;                   // per agent
  std::vector<double> value;                      // per agent
  std::vector<std::vector<double>> alphas;        // per agent, per candidate
  std::vector<std::vector<bool>> selected;        // per agent, per candidate
};

// One decentralized decision for every agent: encode all observations, score
// messages, fuse per the mode, sample z, and sample actions. Runs on a
// gradient-free tape; the training loss rebuilds the same graph with
// gradients on.
StepDecision decide_step(ParamStore& store, const ModelConfig& cfg,
                         const std::vector<CommGroup>& groups,
                         const std::vector<std::vector<int>>& observed_lengths, CommMode mode,
                         double gamma, Rng& rng, bool need_value);

}  // namespace atvc
