#pragma once
// Exact posterior over the 784 axis-aligned rectangle hypotheses:
// p(h | x_{1:n}) \propto (1/area(h))^n * prod_i 1[x_i in h], uniform prior,
// normalized by exhaustive enumeration. Streaming form keeps an alive set so
// every prefix length yields a posterior in O(784) after O(784) per update.

#include <cmath>
#include <span>
#include <vector>

#include "ssw/common.hpp"
#include "ssw/data.hpp"

namespace ssw::infer {

class RectanglePosterior {
 public:
  explicit RectanglePosterior(const gen::GridSpec& grid) : grid_(grid) {
    grid.validate();
    lx_ = grid.lines_x();
    ly_ = grid.lines_y();
    neg_log_area_.resize(gen::kNumRectHypotheses);
    alive_.assign(gen::kNumRectHypotheses, 1);
    for (int h = 0; h < gen::kNumRectHypotheses; ++h)
      neg_log_area_[h] = -std::log(gen::rect_area(grid, gen::rect_hypothesis(h)));
  }

  void observe(const Point2& p) {
    if (p.x < lx_.front() || p.x > lx_.back() || p.y < ly_.front() || p.y > ly_.back())
      throw StageError("RectanglePosterior: point outside the grid bounding box");
    ++n_;
    bool any = false;
    for (int h = 0; h < gen::kNumRectHypotheses; ++h) {
      if (!alive_[h]) continue;
      gen::RectangleHypothesis r = gen::rect_hypothesis(h);
      bool in = p.x >= lx_[r.ix_lo] && p.x <= lx_[r.ix_hi] && p.y >= ly_[r.iy_lo] &&
                p.y <= ly_[r.iy_hi];
      alive_[h] = in ? 1 : 0;
      any = any || in;
    }
    if (!any) throw StageError("RectanglePosterior: no hypothesis contains all points");
  }

  int n() const { return n_; }

  // Normalized posterior over all 784 hypotheses.
  std::vector<double> posterior() const {
    std::vector<double> logw(gen::kNumRectHypotheses, -std::numeric_limits<double>::infinity());
    for (int h = 0; h < gen::kNumRectHypotheses; ++h)
      if (alive_[h]) logw[h] = n_ * neg_log_area_[h];
    double lz = logsumexp(logw);
    std::vector<double> post(gen::kNumRectHypotheses, 0.0);
    for (int h = 0; h < gen::kNumRectHypotheses; ++h)
      if (alive_[h]) post[h] = std::exp(logw[h] - lz);
    return post;
  }

 private:
  gen::GridSpec grid_;
  std::array<double, 8> lx_{}, ly_{};
  std::vector<double> neg_log_area_;
  std::vector<char> alive_;
  int n_ = 0;
};

inline std::vector<double> rectangle_posterior(const gen::GridSpec& grid,
                                               std::span<const Point2> x) {
  RectanglePosterior rp(grid);
  for (const auto& p : x) rp.observe(p);
  return rp.posterior();
}

}  // namespace ssw::infer
