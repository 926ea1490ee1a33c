#pragma once
// Conjugate-family oracles: streaming sufficient statistics, closed-form
// posterior updates (Normal-Gamma, Beta, Gamma), posterior-predictive
// densities, and raw moments of either the parameter posterior or the
// posterior predictive.

#include <cmath>
#include <span>
#include <vector>

#include "ssw/common.hpp"
#include "ssw/data.hpp"

namespace ssw::infer {

using gen::Family;

struct SufficientStat {
  Family family = Family::GaussianGamma;
  double n = 0.0;
  double mean = 0.0;  // GaussianGamma: running mean (Welford)
  double m2 = 0.0;    // GaussianGamma: sum of squared deviations
  double sum = 0.0;   // BetaBernoulli / GammaExponential: token sum

  static SufficientStat empty(Family f) {
    SufficientStat s;
    s.family = f;
    return s;
  }

  double variance() const { return n > 0 ? m2 / n : 0.0; }
  double stddev() const { return std::sqrt(variance()); }

  // Probe-target form: GaussianGamma (mean, std); others the token mean.
  std::vector<double> target() const {
    if (family == Family::GaussianGamma) return {mean, stddev()};
    return {n > 0 ? sum / n : 0.0};
  }
};

inline SufficientStat update_suffstat(SufficientStat s, double x) {
  switch (s.family) {
    case Family::GaussianGamma: {
      s.n += 1.0;
      double delta = x - s.mean;
      s.mean += delta / s.n;
      s.m2 += delta * (x - s.mean);
      break;
    }
    case Family::BetaBernoulli:
      if (x != 0.0 && x != 1.0) throw StageError("update_suffstat: Bernoulli token must be 0 or 1");
      s.n += 1.0;
      s.sum += x;
      break;
    case Family::GammaExponential:
      if (!(x > 0.0)) throw StageError("update_suffstat: Exponential token must be > 0");
      s.n += 1.0;
      s.sum += x;
      break;
    default: throw StageError("update_suffstat: not a conjugate family");
  }
  return s;
}

inline SufficientStat suffstat_of(Family f, std::span<const double> x) {
  SufficientStat s = SufficientStat::empty(f);
  for (double v : x) s = update_suffstat(s, v);
  return s;
}

struct PosteriorParams {
  Family family = Family::GaussianGamma;
  // GaussianGamma uses all four; Beta/Gamma posteriors use alpha, beta.
  double mu = 0.0, lambda = 0.0, alpha = 0.0, beta = 0.0;
};

inline PosteriorParams conjugate_posterior(Family f, std::span<const double> prior,
                                           const SufficientStat& s) {
  if (s.family != f) throw StageError("conjugate_posterior: stat family mismatch");
  PosteriorParams p;
  p.family = f;
  switch (f) {
    case Family::GaussianGamma: {
      // prior = {alpha0, beta0, mu0, lambda0}
      double a0 = prior[0], b0 = prior[1], mu0 = prior[2], l0 = prior[3];
      double n = s.n, xbar = s.mean, scatter = s.m2;
      p.lambda = l0 + n;
      p.mu = n > 0 ? (l0 * mu0 + n * xbar) / p.lambda : mu0;
      p.alpha = a0 + 0.5 * n;
      p.beta = b0 + 0.5 * scatter + (n > 0 ? l0 * n * sq(xbar - mu0) / (2.0 * (l0 + n)) : 0.0);
      break;
    }
    case Family::BetaBernoulli:
      p.alpha = prior[0] + s.sum;
      p.beta = prior[1] + s.n - s.sum;
      break;
    case Family::GammaExponential:
      p.alpha = prior[0] + s.n;
      p.beta = prior[1] + s.sum;
      break;
    default: throw StageError("conjugate_posterior: not a conjugate family");
  }
  return p;
}

// Full-sequence route. Deliberately accumulates with two-pass formulas, not
// the streaming stat, so tests can confirm sufficiency: both routes must
// yield the same posterior.
inline PosteriorParams conjugate_posterior(Family f, std::span<const double> prior,
                                           std::span<const double> x) {
  SufficientStat s = SufficientStat::empty(f);
  if (f == Family::GaussianGamma) {
    s.n = static_cast<double>(x.size());
    double total = 0.0;
    for (double v : x) total += v;
    s.mean = s.n > 0 ? total / s.n : 0.0;
    for (double v : x) s.m2 += sq(v - s.mean);
  } else {
    for (double v : x) s = update_suffstat(s, v);
  }
  return conjugate_posterior(f, prior, s);
}

// Log density of the posterior predictive p(x_{n+1} | posterior).
inline double predictive_logpdf(const PosteriorParams& p, double x) {
  switch (p.family) {
    case Family::GaussianGamma: {
      // Student-t: nu = 2*alpha, loc = mu, scale^2 = beta*(lambda+1)/(alpha*lambda)
      double nu = 2.0 * p.alpha;
      double s2 = p.beta * (p.lambda + 1.0) / (p.alpha * p.lambda);
      double z2 = sq(x - p.mu) / (nu * s2);
      return std::lgamma(0.5 * (nu + 1.0)) - std::lgamma(0.5 * nu) -
             0.5 * std::log(nu * std::numbers::pi * s2) - 0.5 * (nu + 1.0) * std::log1p(z2);
    }
    case Family::BetaBernoulli: {
      if (x != 0.0 && x != 1.0) throw StageError("predictive_logpdf: Bernoulli token must be 0 or 1");
      double p1 = p.alpha / (p.alpha + p.beta);
      return x == 1.0 ? std::log(p1) : std::log1p(-p1);
    }
    case Family::GammaExponential: {
      if (!(x > 0.0)) throw StageError("predictive_logpdf: Exponential token must be > 0");
      // Lomax(alpha, beta)
      return std::log(p.alpha) + p.alpha * std::log(p.beta) - (p.alpha + 1.0) * std::log(p.beta + x);
    }
    default: throw StageError("predictive_logpdf: not a conjugate family");
  }
}

enum class MomentMode { ParamPosterior, Predictive };

namespace detail {

// Raw moments 1..k of a location-scale Student-t(nu, loc, scale^2).
inline std::vector<double> student_t_raw_moments(double nu, double loc, double s2, int k,
                                                 const char* what) {
  if (!(nu > k))
    throw StageError(std::string(what) + ": moment of order " + std::to_string(k) +
                     " does not exist (requires dof > " + std::to_string(k) + ")");
  double c2 = k >= 2 ? s2 * nu / (nu - 2.0) : 0.0;
  double c4 = k >= 4 ? 3.0 * s2 * s2 * nu * nu / ((nu - 2.0) * (nu - 4.0)) : 0.0;
  std::vector<double> m;
  if (k >= 1) m.push_back(loc);
  if (k >= 2) m.push_back(c2 + sq(loc));
  if (k >= 3) m.push_back(loc * sq(loc) + 3.0 * loc * c2);
  if (k >= 4) m.push_back(c4 + 6.0 * sq(loc) * c2 + sq(sq(loc)));
  return m;
}

// Raw moments 1..k of Gamma(shape, rate).
inline std::vector<double> gamma_raw_moments(double shape, double rate, int k) {
  std::vector<double> m;
  double acc = 1.0;
  for (int j = 0; j < k; ++j) {
    acc *= (shape + j) / rate;
    m.push_back(acc);
  }
  return m;
}

// Raw moments 1..k of Beta(a, b).
inline std::vector<double> beta_raw_moments(double a, double b, int k) {
  std::vector<double> m;
  double acc = 1.0;
  for (int j = 0; j < k; ++j) {
    acc *= (a + j) / (a + b + j);
    m.push_back(acc);
  }
  return m;
}

}  // namespace detail

// First k raw moments. ParamPosterior: moments of the latent parameter(s);
// for GaussianGamma this returns 2k values (mu moments then tau moments).
// Predictive: moments of p(x_{n+1}|posterior). `scale` (optional) multiplies
// the output elementwise; used to build scaled probe targets.
inline std::vector<double> posterior_moments(const PosteriorParams& p, MomentMode mode, int k,
                                             std::span<const double> scale = {}) {
  if (k < 1 || k > 4) throw ConfigError("posterior_moments: k must be in 1..4");
  std::vector<double> out;
  if (mode == MomentMode::ParamPosterior) {
    switch (p.family) {
      case Family::GaussianGamma: {
        // mu | data ~ t(2 alpha, mu_n, beta/(alpha*lambda)); tau | data ~ Gamma(alpha, beta)
        out = detail::student_t_raw_moments(2.0 * p.alpha, p.mu, p.beta / (p.alpha * p.lambda), k,
                                            "posterior_moments[mu]");
        auto tau = detail::gamma_raw_moments(p.alpha, p.beta, k);
        out.insert(out.end(), tau.begin(), tau.end());
        break;
      }
      case Family::BetaBernoulli: out = detail::beta_raw_moments(p.alpha, p.beta, k); break;
      case Family::GammaExponential: out = detail::gamma_raw_moments(p.alpha, p.beta, k); break;
      default: throw StageError("posterior_moments: not a conjugate family");
    }
  } else {
    switch (p.family) {
      case Family::GaussianGamma:
        out = detail::student_t_raw_moments(2.0 * p.alpha, p.mu,
                                            p.beta * (p.lambda + 1.0) / (p.alpha * p.lambda), k,
                                            "posterior_moments[predictive]");
        break;
      case Family::BetaBernoulli: {
        double p1 = p.alpha / (p.alpha + p.beta);
        out.assign(static_cast<size_t>(k), p1);  // x^j = x for x in {0,1}
        break;
      }
      case Family::GammaExponential: {
        // Lomax(alpha, beta): E[x^j] = beta^j j! / prod_{i=1..j} (alpha - i)
        double acc = 1.0;
        for (int j = 1; j <= k; ++j) {
          if (!(p.alpha > j))
            throw StageError("posterior_moments: moment of order " + std::to_string(j) +
                             " does not exist (requires alpha > " + std::to_string(j) + ")");
          acc *= p.beta * j / (p.alpha - j);
          out.push_back(acc);
        }
        break;
      }
      default: throw StageError("posterior_moments: not a conjugate family");
    }
  }
  if (!scale.empty()) {
    if (scale.size() != out.size())
      throw ConfigError("posterior_moments: scale length must match moment vector length");
    for (size_t i = 0; i < out.size(); ++i) out[i] *= scale[i];
  }
  return out;
}

// Log-likelihood of i.i.d. tokens under a fixed latent parameter value.
inline double conjugate_loglik(Family f, std::span<const double> latent, std::span<const double> x) {
  double ll = 0.0;
  switch (f) {
    case Family::GaussianGamma: {
      double mu = latent[0], tau = latent[1];
      for (double v : x) ll += 0.5 * std::log(tau / (2.0 * std::numbers::pi)) - 0.5 * tau * sq(v - mu);
      break;
    }
    case Family::BetaBernoulli: {
      double theta = latent[0];
      for (double v : x) ll += v == 1.0 ? std::log(theta) : std::log1p(-theta);
      break;
    }
    case Family::GammaExponential: {
      double theta = latent[0];
      for (double v : x) ll += std::log(theta) - theta * v;
      break;
    }
    default: throw StageError("conjugate_loglik: not a conjugate family");
  }
  return ll;
}

}  // namespace ssw::infer
