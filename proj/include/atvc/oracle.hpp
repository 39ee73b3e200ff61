#pragma once

#include <vector>

#include "atvc/common.hpp"

namespace atvc {

// One queue of the epoch-batched model as a finite Markov chain on {0..cap}.
// arrival_rate / service_rate are per-epoch Poisson rates (already scaled by
// the sync interval). tail_cutoff bounds Poisson enumeration; 0 = automatic.
struct ChainSpec {
  int buffer_cap = 5;
  double arrival_rate = 0.9;
  double service_rate = 1.0;
  int tail_cutoff = 0;
};

// Row-major (cap+1)^2 stochastic matrix for one epoch:
// arrivals pooled and clipped at the buffer, then Poisson departures.
// Truncated Poisson tail mass is lumped into the boundary state, so rows
// sum to 1 up to rounding.
std::vector<double> transition_matrix(const ChainSpec& spec);

// Stationary vector via power iteration (L1 change < 1e-12).
// Requires arrival_rate > 0 and service_rate > 0.
std::vector<double> stationary_distribution(const ChainSpec& spec);

// Expected drops per epoch in steady state.
double stationary_drop_rate(const ChainSpec& spec);

// E[max(0, A - free_space)] for A ~ Poisson(mean), by the exact identity
// E[max(0, A - c)] = mean - E[min(A, c)].
double expected_overflow(double mean, int free_space);

}  // namespace atvc
