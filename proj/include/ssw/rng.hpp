#pragma once
// Deterministic random number generation. Everything stochastic in the
// workbench draws through this engine so results are reproducible across
// platforms and standard-library versions (std:: distributions are
// implementation-defined and therefore avoided).
//
// Engine: xoshiro256++ seeded via splitmix64. Per-stream seeds are derived
// by hashing (root seed, stream index) so sequence i of a dataset always
// sees the same draws no matter how many sequences are generated around it.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <vector>

#include "ssw/common.hpp"

namespace ssw {

inline constexpr uint64_t splitmix64(uint64_t& state) {
  uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Stable hash of (seed, index) used to key per-sequence / per-stage streams.
inline constexpr uint64_t derive_seed(uint64_t seed, uint64_t index) {
  uint64_t s = seed ^ (0x6a09e667f3bcc909ULL + index * 0x9e3779b97f4a7c15ULL);
  splitmix64(s);
  return splitmix64(s);
}

class Rng {
 public:
  explicit Rng(uint64_t seed) {
    uint64_t s = seed;
    for (auto& w : state_) w = splitmix64(s);
  }

  uint64_t next_u64() {
    auto rotl = [](uint64_t x, int k) { return (x << k) | (x >> (64 - k)); };
    uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
    uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). Rejection-free modulo bias is negligible for
  // the small n used here, but do it properly anyway.
  uint64_t uniform_int(uint64_t n) {
    if (n == 0) throw StageError("uniform_int: n must be positive");
    uint64_t threshold = (0 - n) % n;
    for (;;) {
      uint64_t r = next_u64();
      if (r >= threshold) return r % n;
    }
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Box-Muller. Two uniforms per draw; no cached spare so the stream
  // position is a pure function of the number of calls.
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  double normal(double mean, double sd) { return mean + sd * normal(); }

  double exponential(double rate) {
    if (rate <= 0.0) throw StageError("exponential: rate must be positive");
    double u = uniform();
    while (u <= 0.0) u = uniform();
    return -std::log(u) / rate;
  }

  // Marsaglia-Tsang squeeze method; shape < 1 handled by boosting.
  double gamma(double shape, double rate) {
    if (shape <= 0.0 || rate <= 0.0) throw StageError("gamma: shape and rate must be positive");
    if (shape < 1.0) {
      double u = uniform();
      while (u <= 0.0) u = uniform();
      return gamma(shape + 1.0, rate) * std::pow(u, 1.0 / shape);
    }
    double d = shape - 1.0 / 3.0;
    double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
      double x = normal();
      double v = 1.0 + c * x;
      if (v <= 0.0) continue;
      v = v * v * v;
      double u = uniform();
      while (u <= 0.0) u = uniform();
      if (std::log(u) < 0.5 * x * x + d - d * v + d * std::log(v)) return d * v / rate;
    }
  }

  double beta(double a, double b) {
    double x = gamma(a, 1.0);
    double y = gamma(b, 1.0);
    return x / (x + y);
  }

  std::vector<double> dirichlet(std::span<const double> alpha) {
    std::vector<double> out(alpha.size());
    double s = 0.0;
    for (size_t i = 0; i < alpha.size(); ++i) {
      out[i] = gamma(alpha[i], 1.0);
      s += out[i];
    }
    for (double& x : out) x /= s;
    return out;
  }

  std::vector<double> dirichlet_symmetric(double alpha, size_t dim) {
    std::vector<double> a(dim, alpha);
    return dirichlet(a);
  }

  // Linear CDF scan; final bucket absorbs rounding slack.
  uint32_t categorical(std::span<const double> probs) {
    double u = uniform();
    double acc = 0.0;
    for (size_t i = 0; i < probs.size(); ++i) {
      acc += probs[i];
      if (u < acc) return static_cast<uint32_t>(i);
    }
    return static_cast<uint32_t>(probs.size() - 1);
  }

  // Fisher-Yates.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = uniform_int(i);
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  uint64_t state_[4];
};

}  // namespace ssw
