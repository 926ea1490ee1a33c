#pragma once
// LDA inference by collapsed Gibbs sampling: corpus fitting (topics + mixtures)
// and per-document mixture inference with topics held fixed. Estimates are
// smoothed counts averaged over the last quarter of sweeps after a burn-in of
// half the sweeps. Greedy maximum-overlap matching aligns fitted topics to a
// reference before any metric is computed.

#include <cstdint>
#include <numeric>
#include <span>
#include <vector>

#include "ssw/common.hpp"
#include "ssw/rng.hpp"

namespace ssw::infer {

struct LdaModel {
  std::vector<std::vector<double>> beta;   // K x V
  std::vector<std::vector<double>> theta;  // per document, K
};

inline LdaModel lda_fit(const std::vector<std::vector<uint32_t>>& corpus, uint32_t k, double alpha,
                        double eta, int iters, uint64_t seed) {
  if (corpus.empty()) throw StageError("lda_fit: empty corpus");
  if (k < 1) throw ConfigError("lda_fit: K must be >= 1");
  if (iters < 1) throw ConfigError("lda_fit: iters must be >= 1");
  uint32_t v = 0;
  for (const auto& doc : corpus)
    for (uint32_t w : doc) v = std::max(v, w + 1);
  const size_t d = corpus.size();
  Rng rng(derive_seed(seed, 0x1da));
  std::vector<std::vector<uint32_t>> z(d);
  std::vector<std::vector<double>> ndk(d, std::vector<double>(k, 0.0));
  std::vector<std::vector<double>> nkv(k, std::vector<double>(v, 0.0));
  std::vector<double> nk(k, 0.0);
  for (size_t i = 0; i < d; ++i) {
    z[i].resize(corpus[i].size());
    for (size_t j = 0; j < corpus[i].size(); ++j) {
      uint32_t t = static_cast<uint32_t>(rng.uniform_int(k));
      z[i][j] = t;
      ndk[i][t] += 1.0;
      nkv[t][corpus[i][j]] += 1.0;
      nk[t] += 1.0;
    }
  }
  LdaModel avg;
  avg.beta.assign(k, std::vector<double>(v, 0.0));
  avg.theta.assign(d, std::vector<double>(k, 0.0));
  int avg_from = iters - std::max(1, iters / 4);
  int avg_count = 0;
  std::vector<double> prob(k);
  for (int it = 0; it < iters; ++it) {
    for (size_t i = 0; i < d; ++i) {
      for (size_t j = 0; j < corpus[i].size(); ++j) {
        uint32_t w = corpus[i][j];
        uint32_t old = z[i][j];
        ndk[i][old] -= 1.0;
        nkv[old][w] -= 1.0;
        nk[old] -= 1.0;
        for (uint32_t t = 0; t < k; ++t)
          prob[t] = (ndk[i][t] + alpha) * (nkv[t][w] + eta) / (nk[t] + v * eta);
        normalize_in_place(prob);
        uint32_t t = rng.categorical(prob);
        z[i][j] = t;
        ndk[i][t] += 1.0;
        nkv[t][w] += 1.0;
        nk[t] += 1.0;
      }
    }
    if (it >= avg_from) {
      ++avg_count;
      for (uint32_t t = 0; t < k; ++t)
        for (uint32_t w = 0; w < v; ++w) avg.beta[t][w] += (nkv[t][w] + eta) / (nk[t] + v * eta);
      for (size_t i = 0; i < d; ++i) {
        double nd = static_cast<double>(corpus[i].size());
        for (uint32_t t = 0; t < k; ++t) avg.theta[i][t] += (ndk[i][t] + alpha) / (nd + k * alpha);
      }
    }
  }
  for (auto& row : avg.beta)
    for (double& x : row) x /= avg_count;
  for (auto& row : avg.theta)
    for (double& x : row) x /= avg_count;
  return avg;
}

// Gibbs over topic assignments with beta fixed; returns the posterior-mean
// theta. An empty document returns the symmetric prior mean.
inline std::vector<double> lda_infer_theta(const std::vector<std::vector<double>>& beta,
                                           double alpha, std::span<const uint32_t> doc, int iters,
                                           uint64_t seed) {
  const uint32_t k = static_cast<uint32_t>(beta.size());
  if (k < 1) throw ConfigError("lda_infer_theta: beta must have at least one topic");
  if (doc.empty()) return std::vector<double>(k, 1.0 / k);
  const uint32_t v = static_cast<uint32_t>(beta[0].size());
  for (uint32_t w : doc)
    if (w >= v) throw StageError("lda_infer_theta: word index outside vocabulary");
  Rng rng(derive_seed(seed, 0x7e7a));
  std::vector<uint32_t> z(doc.size());
  std::vector<double> ndk(k, 0.0);
  std::vector<double> prob(k);
  for (size_t j = 0; j < doc.size(); ++j) {
    for (uint32_t t = 0; t < k; ++t) prob[t] = beta[t][doc[j]];
    normalize_in_place(prob);
    uint32_t t = rng.categorical(prob);
    z[j] = t;
    ndk[t] += 1.0;
  }
  std::vector<double> acc(k, 0.0);
  int avg_from = iters - std::max(1, iters / 4);
  int avg_count = 0;
  double nd = static_cast<double>(doc.size());
  for (int it = 0; it < iters; ++it) {
    for (size_t j = 0; j < doc.size(); ++j) {
      uint32_t old = z[j];
      ndk[old] -= 1.0;
      for (uint32_t t = 0; t < k; ++t) prob[t] = (ndk[t] + alpha) * beta[t][doc[j]];
      normalize_in_place(prob);
      uint32_t t = rng.categorical(prob);
      z[j] = t;
      ndk[t] += 1.0;
    }
    if (it >= avg_from) {
      ++avg_count;
      for (uint32_t t = 0; t < k; ++t) acc[t] += (ndk[t] + alpha) / (nd + k * alpha);
    }
  }
  for (double& x : acc) x /= avg_count;
  return acc;
}

// Greedy maximum-overlap matching: returns perm with perm[est_topic] =
// reference topic. Overlap = histogram intersection of the word
// distributions.
inline std::vector<uint32_t> align_topics(const std::vector<std::vector<double>>& est,
                                          const std::vector<std::vector<double>>& ref) {
  const size_t k = est.size();
  if (ref.size() != k) throw StageError("align_topics: topic count mismatch");
  std::vector<std::vector<double>> overlap(k, std::vector<double>(k, 0.0));
  for (size_t i = 0; i < k; ++i)
    for (size_t j = 0; j < k; ++j) {
      size_t v = std::min(est[i].size(), ref[j].size());
      double s = 0.0;
      for (size_t w = 0; w < v; ++w) s += std::min(est[i][w], ref[j][w]);
      overlap[i][j] = s;
    }
  std::vector<uint32_t> perm(k, 0);
  std::vector<char> used_est(k, 0), used_ref(k, 0);
  for (size_t step = 0; step < k; ++step) {
    double best = -1.0;
    size_t bi = 0, bj = 0;
    for (size_t i = 0; i < k; ++i) {
      if (used_est[i]) continue;
      for (size_t j = 0; j < k; ++j) {
        if (used_ref[j]) continue;
        if (overlap[i][j] > best) {
          best = overlap[i][j];
          bi = i;
          bj = j;
        }
      }
    }
    perm[bi] = static_cast<uint32_t>(bj);
    used_est[bi] = 1;
    used_ref[bj] = 1;
  }
  return perm;
}

// Apply an alignment to a mixture estimate: out[perm[k]] = theta[k].
inline std::vector<double> permute_mixture(std::span<const double> theta,
                                           std::span<const uint32_t> perm) {
  std::vector<double> out(theta.size(), 0.0);
  for (size_t i = 0; i < theta.size(); ++i) out[perm[i]] = theta[i];
  return out;
}

// log p(doc | theta, beta) with the mixture marginalized per word.
inline double lda_doc_loglik(std::span<const double> theta,
                             const std::vector<std::vector<double>>& beta,
                             std::span<const uint32_t> doc) {
  double ll = 0.0;
  for (uint32_t w : doc) {
    double p = 0.0;
    for (size_t t = 0; t < theta.size(); ++t) p += theta[t] * beta[t][w];
    ll += std::log(p);
  }
  return ll;
}

}  // namespace ssw::infer
