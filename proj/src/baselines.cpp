#include "atvc/baselines.hpp"

#include <algorithm>

namespace atvc {

PolicyKind policy_kind_from_string(const std::string& name) {
  if (name == "jsq") return PolicyKind::JSQ;
  if (name == "random") return PolicyKind::Random;
  if (name == "atvc") return PolicyKind::ATVC;
  if (name == "atvc-full") return PolicyKind::ATVCFullComm;
  if (name == "atvc-nocomm") return PolicyKind::ATVCNoComm;
  throw ConfigError("unknown policy '" + name +
                    "' (options: jsq, random, atvc, atvc-full, atvc-nocomm)");
}

std::string policy_kind_name(PolicyKind kind) {
  switch (kind) {
    case PolicyKind::JSQ: return "jsq";
    case PolicyKind::Random: return "random";
    case PolicyKind::ATVC: return "atvc";
    case PolicyKind::ATVCFullComm: return "atvc-full";
    case PolicyKind::ATVCNoComm: return "atvc-nocomm";
  }
  throw ContractError("unhandled policy kind");
}

bool policy_needs_model(PolicyKind kind) {
  return kind == PolicyKind::ATVC || kind == PolicyKind::ATVCFullComm ||
         kind == PolicyKind::ATVCNoComm;
}

AllocationAction jsq_action(int scheduler, const std::vector<int>& true_lengths) {
  if (true_lengths.empty()) throw ContractError("jsq needs at least one queue");
  int best = 0;
  for (int i = 1; i < static_cast<int>(true_lengths.size()); ++i) {
    if (true_lengths[i] < true_lengths[best]) best = i;
  }
  // A huge negative logit underflows to zero after the max-subtracted softmax,
  // so the full batch lands on the winner.
  std::vector<double> logits(true_lengths.size(), -1e30);
  logits[best] = 0.0;
  return AllocationAction::from_logits(scheduler, std::move(logits));
}

AllocationAction random_action(int scheduler, int access) {
  if (access < 1) throw ContractError("random policy needs at least one queue");
  return AllocationAction::from_logits(scheduler,
                                       std::vector<double>(access, 0.0));
}

FusedBelief full_comm_fuse(ParamStore& store, const ModelConfig& cfg,
                           const std::vector<GaussianMessage>& messages, int owner) {
  int owner_pos = -1;
  for (std::size_t j = 0; j < messages.size(); ++j) {
    if (messages[j].sender == owner) {
      if (owner_pos >= 0) throw ContractError("duplicate own message in fusion input");
      owner_pos = static_cast<int>(j);
    }
  }
  if (owner_pos < 0) throw ContractError("own message missing from fusion input");

  std::vector<GaussianMessage> others;
  others.reserve(messages.size() - 1);
  for (std::size_t j = 0; j < messages.size(); ++j) {
    if (static_cast<int>(j) != owner_pos) others.push_back(messages[j]);
  }

  // Fuse own-first at fixed weight 1 so the arithmetic matches the per-step
  // pipeline term by term; peers carry their attention weights.
  std::vector<GaussianMessage> ordered;
  ordered.reserve(messages.size());
  ordered.push_back(messages[owner_pos]);
  for (const GaussianMessage& msg : others) ordered.push_back(msg);
  std::vector<double> ordered_w(ordered.size(), 1.0);
  std::vector<double> peer_alpha;
  if (!others.empty()) {
    peer_alpha = attention_weights(store, cfg, others);
    for (std::size_t p = 0; p < peer_alpha.size(); ++p) ordered_w[p + 1] = peer_alpha[p];
  }
  FusedBelief fused = weighted_poe(ordered, ordered_w, true);

  // Report weights back in the caller's message order, own entry pinned at 1.
  FusedBelief out;
  out.mu = std::move(fused.mu);
  out.sigma = std::move(fused.sigma);
  out.alphas.assign(messages.size(), 1.0);
  out.selected.assign(messages.size(), true);
  for (std::size_t j = 0, p = 0; j < messages.size(); ++j) {
    if (static_cast<int>(j) != owner_pos) out.alphas[j] = peer_alpha[p++];
  }
  return out;
}

FusedBelief no_comm_fuse(const GaussianMessage& own) {
  return weighted_poe({own}, {1.0}, true);
}

}  // namespace atvc
