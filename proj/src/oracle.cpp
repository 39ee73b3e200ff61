#include "atvc/oracle.hpp"

#include <algorithm>
#include <cmath>

namespace atvc {

namespace {

constexpr double kTailMass = 1e-13;
constexpr double kPiTol = 1e-12;
constexpr int kMaxPowerIters = 500000;

// pmf[k] for k = 0..n.
std::vector<double> poisson_pmf(double mean, int n) {
  std::vector<double> p(static_cast<std::size_t>(n) + 1, 0.0);
  p[0] = std::exp(-mean);
  for (int k = 1; k <= n; ++k) p[k] = p[k - 1] * mean / k;
  return p;
}

int auto_cutoff(double mean) {
  if (mean <= 0.0) return 0;
  double p = std::exp(-mean);
  double cdf = p;
  int k = 0;
  while (cdf < 1.0 - kTailMass && k < 100000) {
    ++k;
    p *= mean / k;
    cdf += p;
  }
  return k;
}

void validate(const ChainSpec& s) {
  if (s.buffer_cap < 1) throw ConfigError("buffer_cap must be >= 1");
  if (!(s.arrival_rate >= 0.0) || !std::isfinite(s.arrival_rate)) {
    throw ConfigError("arrival_rate must be finite and >= 0");
  }
  if (!(s.service_rate >= 0.0) || !std::isfinite(s.service_rate)) {
    throw ConfigError("service_rate must be finite and >= 0");
  }
  if (s.tail_cutoff < 0) throw ConfigError("tail_cutoff must be >= 0");
  if (s.tail_cutoff > 0) {
    // Neglected mass beyond the cutoff must be < 1e-12 for both rates.
    for (double rate : {s.arrival_rate, s.service_rate}) {
      const auto pmf = poisson_pmf(rate, s.tail_cutoff);
      double cdf = 0.0;
      for (double v : pmf) cdf += v;
      if (cdf < 1.0 - 1e-12) {
        throw ConfigError("tail_cutoff leaves Poisson mass >= 1e-12 uncovered");
      }
    }
  }
}

struct SparseRows {
  // rows[i] = list of (col, prob); each row sums to 1.
  std::vector<std::vector<std::pair<int, double>>> rows;
};

// Row q: next = min(cap, q + a), truncated arrival tail lumped into `cap`.
SparseRows arrival_factor(double mean, int cap, int cutoff) {
  SparseRows f;
  f.rows.resize(static_cast<std::size_t>(cap) + 1);
  const int amax = cutoff > 0 ? cutoff : auto_cutoff(mean);
  const auto pmf = poisson_pmf(mean, amax);
  for (int q = 0; q <= cap; ++q) {
    auto& row = f.rows[q];
    double below = 0.0;
    for (int a = 0; a < cap - q && a <= amax; ++a) {
      if (pmf[a] > 0.0) row.emplace_back(q + a, pmf[a]);
      below += pmf[a];
    }
    row.emplace_back(cap, 1.0 - below);
  }
  return f;
}

// Row q: next = max(0, q - s), truncated service tail lumped into 0.
SparseRows departure_factor(double mean, int cap, int cutoff) {
  SparseRows f;
  f.rows.resize(static_cast<std::size_t>(cap) + 1);
  const int smax = cutoff > 0 ? cutoff : auto_cutoff(mean);
  const auto pmf = poisson_pmf(mean, smax);
  for (int q = 0; q <= cap; ++q) {
    auto& row = f.rows[q];
    double above_zero = 0.0;
    for (int s = 0; s < q && s <= smax; ++s) {
      if (pmf[s] > 0.0) row.emplace_back(q - s, pmf[s]);
      above_zero += pmf[s];
    }
    row.emplace_back(0, 1.0 - above_zero);
  }
  return f;
}

void apply(const SparseRows& f, const std::vector<double>& x, std::vector<double>& y) {
  std::fill(y.begin(), y.end(), 0.0);
  for (std::size_t q = 0; q < f.rows.size(); ++q) {
    const double mass = x[q];
    if (mass == 0.0) continue;
    for (const auto& [col, p] : f.rows[q]) y[col] += mass * p;
  }
}

}  // namespace

std::vector<double> transition_matrix(const ChainSpec& spec) {
  validate(spec);
  const int n = spec.buffer_cap + 1;
  const auto arr = arrival_factor(spec.arrival_rate, spec.buffer_cap, spec.tail_cutoff);
  const auto dep = departure_factor(spec.service_rate, spec.buffer_cap, spec.tail_cutoff);
  std::vector<double> m(static_cast<std::size_t>(n) * n, 0.0);
  for (int q = 0; q < n; ++q) {
    for (const auto& [mid, pa] : arr.rows[q]) {
      for (const auto& [next, ps] : dep.rows[mid]) {
        m[static_cast<std::size_t>(q) * n + next] += pa * ps;
      }
    }
  }
  return m;
}

std::vector<double> stationary_distribution(const ChainSpec& spec) {
  validate(spec);
  if (!(spec.arrival_rate > 0.0) || !(spec.service_rate > 0.0)) {
    throw ContractError("stationary_distribution: chain must be irreducible (rates > 0)");
  }
  const int n = spec.buffer_cap + 1;
  const auto arr = arrival_factor(spec.arrival_rate, spec.buffer_cap, spec.tail_cutoff);
  const auto dep = departure_factor(spec.service_rate, spec.buffer_cap, spec.tail_cutoff);

  // Geometric warm start with the load ratio; exact shape does not matter.
  std::vector<double> pi(static_cast<std::size_t>(n), 0.0);
  const double r = std::min(spec.arrival_rate / spec.service_rate, 0.999);
  double norm = 0.0;
  for (int q = 0; q < n; ++q) {
    pi[q] = std::pow(std::max(r, 1e-6), q);
    norm += pi[q];
  }
  for (double& v : pi) v /= norm;

  std::vector<double> mid(static_cast<std::size_t>(n), 0.0);
  std::vector<double> next(static_cast<std::size_t>(n), 0.0);
  for (int it = 0; it < kMaxPowerIters; ++it) {
    apply(arr, pi, mid);
    apply(dep, mid, next);
    double sum = 0.0;
    for (double v : next) sum += v;
    double diff = 0.0;
    for (int q = 0; q < n; ++q) {
      next[q] /= sum;
      diff += std::abs(next[q] - pi[q]);
    }
    pi.swap(next);
    if (diff < kPiTol) return pi;
  }
  throw NumericError("stationary_distribution: power iteration did not converge");
}

double expected_overflow(double mean, int free_space) {
  if (free_space <= 0) return mean;
  // E[min(A, c)] = sum_{a<c} a pmf(a) + c (1 - CDF(c-1))
  const auto pmf = poisson_pmf(mean, free_space - 1);
  double partial = 0.0;
  double cdf = 0.0;
  for (int a = 0; a < free_space; ++a) {
    partial += a * pmf[a];
    cdf += pmf[a];
  }
  const double e_min = partial + free_space * (1.0 - cdf);
  return mean - e_min;
}

double stationary_drop_rate(const ChainSpec& spec) {
  validate(spec);
  if (spec.arrival_rate == 0.0) return 0.0;
  const auto pi = stationary_distribution(spec);
  double drops = 0.0;
  for (int q = 0; q <= spec.buffer_cap; ++q) {
    drops += pi[q] * expected_overflow(spec.arrival_rate, spec.buffer_cap - q);
  }
  return drops;
}

}  // namespace atvc
