#pragma once
// Shared basics: error types, small numeric helpers, 2-D point.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace ssw {

using json = nlohmann::json;

// Raised for invalid configuration; message names the offending field.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Raised when a pipeline stage fails at runtime (divergence, bad file, ...).
struct StageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Point2 {
  double x = 0.0;
  double y = 0.0;
};

inline double sq(double v) { return v * v; }

inline double logsumexp(std::span<const double> v) {
  double hi = -std::numeric_limits<double>::infinity();
  for (double x : v) hi = std::max(hi, x);
  if (!std::isfinite(hi)) return hi;  // all -inf (or a stray +inf/nan propagates)
  double acc = 0.0;
  for (double x : v) acc += std::exp(x - hi);
  return hi + std::log(acc);
}

inline double mean_of(std::span<const double> v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

// Sample mean and standard error of the mean.
inline std::pair<double, double> mean_stderr(std::span<const double> v) {
  double m = mean_of(v);
  if (v.size() < 2) return {m, 0.0};
  double ss = 0.0;
  for (double x : v) ss += sq(x - m);
  double var = ss / static_cast<double>(v.size() - 1);
  return {m, std::sqrt(var / static_cast<double>(v.size()))};
}

inline void check_simplex(std::span<const double> p, double tol, const char* what) {
  double s = 0.0;
  for (double x : p) {
    if (!(x >= -tol)) throw StageError(std::string(what) + ": negative probability");
    s += x;
  }
  if (std::abs(s - 1.0) > tol)
    throw StageError(std::string(what) + ": probabilities sum to " + std::to_string(s));
}

inline void normalize_in_place(std::span<double> p) {
  double s = 0.0;
  for (double x : p) s += x;
  if (s <= 0.0) throw StageError("normalize_in_place: nonpositive total");
  for (double& x : p) x /= s;
}

}  // namespace ssw
