#pragma once

#include <string>
#include <vector>

#include "atvc/env.hpp"
#include "atvc/model.hpp"

namespace atvc {

enum class PolicyKind { JSQ, Random, ATVC, ATVCFullComm, ATVCNoComm };

PolicyKind policy_kind_from_string(const std::string& name);
std::string policy_kind_name(PolicyKind kind);
bool policy_needs_model(PolicyKind kind);

// Whole epoch batch to the accessible queue with the smallest true length;
// ties go to the lowest queue index.
AllocationAction jsq_action(int scheduler, const std::vector<int>& true_lengths);

// Uniform fractions; the environment routes each packet multinomially.
AllocationAction random_action(int scheduler, int access);

// Communication ablations on the shared fusion path: all candidates at their
// attention weights, or the own message alone at weight 1.
FusedBelief full_comm_fuse(ParamStore& store, const ModelConfig& cfg,
                           const std::vector<GaussianMessage>& messages);
FusedBelief no_comm_fuse(const GaussianMessage& own);

}  // namespace atvc
