#pragma once
// HMM oracles: forward filtering with per-step renormalization (filtered and
// predictive state distributions, exact per-token predictive NLL) and
// log-space Viterbi decoding.

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "ssw/common.hpp"

namespace ssw::infer {

using Rows = std::vector<std::vector<double>>;

struct HmmFilterResult {
  // Index t in 0..n-1 refers to prefix x_{1:t+1}.
  std::vector<std::vector<double>> filtered;    // p(z_{t+1} | x_{1:t+1})
  std::vector<std::vector<double>> predictive;  // p(z_{t+2} | x_{1:t+1})
  std::vector<double> token_nll;                // -log p(x_{t+1} | x_{1:t})
  double loglik = 0.0;                          // log p(x_{1:n})

  const std::vector<double>& last_filtered() const { return filtered.back(); }
  const std::vector<double>& last_predictive() const { return predictive.back(); }
};

inline HmmFilterResult hmm_filter(const Rows& a, const Rows& b, std::span<const double> pi,
                                  std::span<const uint32_t> x) {
  const size_t c = a.size();
  if (b.size() != c || pi.size() != c) throw StageError("hmm_filter: dimension mismatch");
  HmmFilterResult r;
  r.filtered.reserve(x.size());
  r.predictive.reserve(x.size());
  r.token_nll.reserve(x.size());
  // prior over z_{t+1} given x_{1:t}; starts at pi
  std::vector<double> prior(pi.begin(), pi.end());
  std::vector<double> post(c);
  for (size_t t = 0; t < x.size(); ++t) {
    uint32_t obs = x[t];
    double norm = 0.0;
    for (size_t i = 0; i < c; ++i) {
      if (obs >= b[i].size()) throw StageError("hmm_filter: token outside emission vocabulary");
      post[i] = prior[i] * b[i][obs];
      norm += post[i];
    }
    if (!(norm > 0.0)) throw StageError("hmm_filter: zero-probability observation");
    for (double& v : post) v /= norm;
    r.token_nll.push_back(-std::log(norm));
    r.loglik += std::log(norm);
    r.filtered.push_back(post);
    // Chapman-Kolmogorov step: predictive = filtered^T A
    std::vector<double> next(c, 0.0);
    for (size_t i = 0; i < c; ++i)
      for (size_t j = 0; j < c; ++j) next[j] += post[i] * a[i][j];
    r.predictive.push_back(next);
    prior = next;
  }
  return r;
}

struct ViterbiResult {
  std::vector<uint32_t> path;  // argmax_{z_{1:n}} p(z_{1:n} | x_{1:n})
  uint32_t last() const { return path.back(); }
};

// Max-product DP in log space; ties broken toward the lower state index.
inline ViterbiResult hmm_viterbi(const Rows& a, const Rows& b, std::span<const double> pi,
                                 std::span<const uint32_t> x) {
  const size_t c = a.size();
  const size_t n = x.size();
  if (n == 0) throw StageError("hmm_viterbi: empty observation sequence");
  auto safe_log = [](double v) {
    return v > 0.0 ? std::log(v) : -std::numeric_limits<double>::infinity();
  };
  std::vector<std::vector<double>> delta(n, std::vector<double>(c));
  std::vector<std::vector<uint32_t>> back(n, std::vector<uint32_t>(c, 0));
  for (size_t i = 0; i < c; ++i) delta[0][i] = safe_log(pi[i]) + safe_log(b[i][x[0]]);
  for (size_t t = 1; t < n; ++t) {
    for (size_t j = 0; j < c; ++j) {
      double best = -std::numeric_limits<double>::infinity();
      uint32_t arg = 0;
      for (size_t i = 0; i < c; ++i) {
        double cand = delta[t - 1][i] + safe_log(a[i][j]);
        if (cand > best) {
          best = cand;
          arg = static_cast<uint32_t>(i);
        }
      }
      delta[t][j] = best + safe_log(b[j][x[t]]);
      back[t][j] = arg;
    }
  }
  ViterbiResult r;
  r.path.resize(n);
  double best = -std::numeric_limits<double>::infinity();
  uint32_t arg = 0;
  for (size_t j = 0; j < c; ++j)
    if (delta[n - 1][j] > best) {
      best = delta[n - 1][j];
      arg = static_cast<uint32_t>(j);
    }
  if (!std::isfinite(best)) throw StageError("hmm_viterbi: zero-probability observation sequence");
  r.path[n - 1] = arg;
  for (size_t t = n - 1; t > 0; --t) r.path[t - 1] = back[t][r.path[t]];
  return r;
}

}  // namespace ssw::infer
