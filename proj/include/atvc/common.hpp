#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace atvc {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ContractError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct CompatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// splitmix64 finalizer; used for seed derivation and stateless draws.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Named sub-streams so independent consumers never share a seed.
enum class Stream : std::uint64_t {
  EnvArrivals = 1,
  EnvService = 2,
  EnvObserve = 3,
  Policy = 4,
  Shuffle = 5,
  ParamInit = 6,
  Eval = 7,
  Heatmap = 8,
};

inline std::uint64_t derive_seed(std::uint64_t s) { return mix64(s); }

template <typename... Rest>
std::uint64_t derive_seed(std::uint64_t s, std::uint64_t v, Rest... rest) {
  return derive_seed(mix64(s ^ (v + 0x9e3779b97f4a7c15ull)), rest...);
}

template <typename... Rest>
std::uint64_t derive_seed(std::uint64_t s, Stream v, Rest... rest) {
  return derive_seed(s, static_cast<std::uint64_t>(v), rest...);
}

inline double u64_to_unit(std::uint64_t x) {
  return static_cast<double>(x >> 11) * 0x1.0p-53;
}

// Deterministic RNG with portable samplers. mt19937_64 output is fixed by the
// standard, and the samplers below avoid implementation-defined distributions,
// so streams replay identically across platforms.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  std::uint64_t bits() { return eng_(); }

  double uniform() { return u64_to_unit(eng_()); }  // [0, 1)

  double uniform_pos() {  // (0, 1]
    return static_cast<double>((eng_() >> 11) + 1) * 0x1.0p-53;
  }

  double normal() {
    double u1 = uniform_pos();
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
  }

  int poisson(double mean) {
    if (mean < 0.0 || !std::isfinite(mean)) {
      throw ContractError("poisson: mean must be finite and nonnegative");
    }
    if (mean == 0.0) return 0;
    if (mean > 30.0) return poisson(mean * 0.5) + poisson(mean * 0.5);
    const double limit = std::exp(-mean);
    int k = 0;
    double p = 1.0;
    for (;;) {
      p *= uniform();
      if (p <= limit) break;
      ++k;
    }
    return k;
  }

  // weights must be nonnegative and sum to ~1.
  int categorical(const std::vector<double>& w) {
    double u = uniform();
    double acc = 0.0;
    for (std::size_t i = 0; i + 1 < w.size(); ++i) {
      acc += w[i];
      if (u < acc) return static_cast<int>(i);
    }
    return static_cast<int>(w.size()) - 1;
  }

 private:
  std::mt19937_64 eng_;
};

}  // namespace atvc
