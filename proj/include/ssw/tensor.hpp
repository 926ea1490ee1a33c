#pragma once
// Tape-based reverse-mode differentiation over dense row-major matrices.
// Templated on the scalar type: training runs float, gradient checking runs
// double. Nodes are identified by creation index; backward walks the tape in
// reverse creation order, which is a valid topological order because ops can
// only reference already-created nodes.

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numbers>
#include <span>
#include <vector>

#include "ssw/common.hpp"
#include "ssw/rng.hpp"

namespace ssw::net {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using MatF = Mat<float>;
using MatD = Mat<double>;

template <typename T>
class Tape {
 public:
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  int leaf(Mat<T> value, bool needs_grad = false) {
    return push(std::move(value), needs_grad && grad_enabled_, nullptr);
  }

  const Mat<T>& val(int id) const { return nodes_[id].value; }

  // Gradient of the last backward() root w.r.t. node id (zeros if unused).
  Mat<T> grad(int id) const {
    const Node& n = nodes_[id];
    if (n.grad.size() == 0) return Mat<T>::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  void backward(int root) {
    Node& r = nodes_[root];
    if (r.value.size() != 1) throw StageError("backward: root must be scalar");
    if (!grad_enabled_) throw StageError("backward: tape built with gradients disabled");
    r.grad = Mat<T>::Ones(1, 1);
    for (int i = root; i >= 0; --i) {
      Node& n = nodes_[i];
      if (n.back && n.grad.size() != 0) n.back();
    }
  }

  // ---- ops ----------------------------------------------------------------

  int matmul(int a, int b) {
    int out = push(val(a) * val(b), wants(a) || wants(b), nullptr);
    if (node(out).needs_grad)
      node(out).back = [this, a, b, out] {
        const Mat<T>& g = node(out).grad;
        if (wants(a)) accum(a, g * val(b).transpose());
        if (wants(b)) accum(b, val(a).transpose() * g);
      };
    return out;
  }

  int add(int a, int b) {
    int out = push(val(a) + val(b), wants(a) || wants(b), nullptr);
    if (node(out).needs_grad)
      node(out).back = [this, a, b, out] {
        const Mat<T>& g = node(out).grad;
        if (wants(a)) accum(a, g);
        if (wants(b)) accum(b, g);
      };
    return out;
  }

  // Broadcast a 1 x d bias over the rows of a.
  int add_rowvec(int a, int bias) {
    Mat<T> v = val(a);
    v.rowwise() += val(bias).row(0);
    int out = push(std::move(v), wants(a) || wants(bias), nullptr);
    if (node(out).needs_grad)
      node(out).back = [this, a, bias, out] {
        const Mat<T>& g = node(out).grad;
        if (wants(a)) accum(a, g);
        if (wants(bias)) accum(bias, g.colwise().sum());
      };
    return out;
  }

  int mul_scalar(int a, T s) {
    int out = push(Mat<T>(val(a) * s), wants(a), nullptr);
    if (node(out).needs_grad)
      node(out).back = [this, a, s, out] { accum(a, node(out).grad * s); };
    return out;
  }

  // value = a + table.middleRows(row0, a.rows()); used for positional embeddings.
  int add_table_rows(int a, int table, int row0) {
    Mat<T> v = val(a) + val(table).middleRows(row0, val(a).rows());
    int out = push(std::move(v), wants(a) || wants(table), nullptr);
    if (node(out).needs_grad)
      node(out).back = [this, a, table, row0, out] {
        const Mat<T>& g = node(out).grad;
        if (wants(a)) accum(a, g);
        if (wants(table)) {
          ensure_grad(table);
          node(table).grad.middleRows(row0, g.rows()) += g;
        }
      };
    return out;
  }

  // Row gather: out.row(i) = table.row(rows[i]); embedding lookup.
  int gather_rows(int table, std::vector<uint32_t> rows) {
    Mat<T> v(static_cast<Eigen::Index>(rows.size()), val(table).cols());
    for (size_t i = 0; i < rows.size(); ++i) {
      if (static_cast<Eigen::Index>(rows[i]) >= val(table).rows())
        throw StageError("gather_rows: row index out of range");
      v.row(static_cast<Eigen::Index>(i)) = val(table).row(rows[i]);
    }
    int out = push(std::move(v), wants(table), nullptr);
    if (node(out).needs_grad)
      node(out).back = [this, table, rows = std::move(rows), out] {
        const Mat<T>& g = node(out).grad;
        ensure_grad(table);
        for (size_t i = 0; i < rows.size(); ++i)
          node(table).grad.row(rows[i]) += g.row(static_cast<Eigen::Index>(i));
      };
    return out;
  }

  int slice_rows(int a, int r0, int nrows) {
    int out = push(Mat<T>(val(a).middleRows(r0, nrows)), wants(a), nullptr);
    if (node(out).needs_grad)
      node(out).back = [this, a, r0, nrows, out] {
        ensure_grad(a);
        node(a).grad.middleRows(r0, nrows) += node(out).grad;
      };
    return out;
  }

  int relu(int a) {
    Mat<T> v = val(a).cwiseMax(T(0));
    int out = push(std::move(v), wants(a), nullptr);
    if (node(out).needs_grad)
      node(out).back = [this, a, out] {
        accum(a, ((val(a).array() > T(0)).template cast<T>() * node(out).grad.array()).matrix());
      };
    return out;
  }

  // Exact GELU: x * Phi(x).
  int gelu(int a) {
    const T inv_sqrt2 = T(1) / std::sqrt(T(2));
    Mat<T> v = val(a).unaryExpr([inv_sqrt2](T x) {
      return T(0.5) * x * (T(1) + std::erf(x * inv_sqrt2));
    });
    int out = push(std::move(v), wants(a), nullptr);
    if (node(out).needs_grad)
      node(out).back = [this, a, out, inv_sqrt2] {
        const T inv_sqrt2pi = T(1) / std::sqrt(T(2) * std::numbers::pi_v<T>);
        Mat<T> d = val(a).unaryExpr([inv_sqrt2, inv_sqrt2pi](T x) {
          T phi = T(0.5) * (T(1) + std::erf(x * inv_sqrt2));
          T pdf = inv_sqrt2pi * std::exp(T(-0.5) * x * x);
          return phi + x * pdf;
        });
        accum(a, (d.array() * node(out).grad.array()).matrix());
      };
    return out;
  }

  // Row-wise layer normalization with learned gain/bias (1 x d each).
  int layernorm(int a, int gain, int bias) {
    const T eps = T(1e-5);
    const Mat<T>& x = val(a);
    const Eigen::Index r = x.rows(), c = x.cols();
    auto xhat = std::make_shared<Mat<T>>(r, c);
    auto inv_std = std::make_shared<Mat<T>>(r, 1);
    Mat<T> v(r, c);
    for (Eigen::Index i = 0; i < r; ++i) {
      T mu = x.row(i).mean();
      T var = (x.row(i).array() - mu).square().mean();
      T is = T(1) / std::sqrt(var + eps);
      (*inv_std)(i, 0) = is;
      xhat->row(i) = (x.row(i).array() - mu) * is;
      v.row(i) = xhat->row(i).array() * val(gain).row(0).array() + val(bias).row(0).array();
    }
    int out = push(std::move(v), wants(a) || wants(gain) || wants(bias), nullptr);
    if (node(out).needs_grad)
      node(out).back = [this, a, gain, bias, out, xhat, inv_std] {
        const Mat<T>& g = node(out).grad;
        if (wants(gain)) accum(gain, (g.array() * xhat->array()).colwise().sum().matrix());
        if (wants(bias)) accum(bias, g.colwise().sum());
        if (wants(a)) {
          const Eigen::Index r = g.rows(), c = g.cols();
          Mat<T> dx(r, c);
          for (Eigen::Index i = 0; i < r; ++i) {
            auto dy = (g.row(i).array() * val(gain).row(0).array()).eval();
            T m1 = dy.mean();
            T m2 = (dy * xhat->row(i).array()).mean();
            dx.row(i) = ((dy - m1 - xhat->row(i).array() * m2) * (*inv_std)(i, 0)).matrix();
          }
          accum(a, dx);
        }
      };
    return out;
  }

  // Fused multi-head scaled dot-product attention over one sequence.
  // q, k, v are N x d; head h uses the column block [h*dh, (h+1)*dh).
  int attention(int q, int k, int v, int heads, bool causal) {
    const Eigen::Index n = val(q).rows(), d = val(q).cols();
    if (d % heads != 0) throw ConfigError("attention: hidden dim not divisible by heads");
    const Eigen::Index dh = d / heads;
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));
    auto probs = std::make_shared<std::vector<Mat<T>>>();
    bool keep = grad_enabled_ && (wants(q) || wants(k) || wants(v));
    if (keep) probs->reserve(heads);
    Mat<T> out_v(n, d);
    for (int h = 0; h < heads; ++h) {
      auto qh = val(q).middleCols(h * dh, dh);
      auto kh = val(k).middleCols(h * dh, dh);
      auto vh = val(v).middleCols(h * dh, dh);
      Mat<T> s = qh * kh.transpose() * scale;
      if (causal)
        for (Eigen::Index i = 0; i < n; ++i)
          for (Eigen::Index j = i + 1; j < n; ++j) s(i, j) = -std::numeric_limits<T>::infinity();
      // row softmax
      for (Eigen::Index i = 0; i < n; ++i) {
        T hi = s.row(i).maxCoeff();
        auto e = (s.row(i).array() - hi).exp().eval();
        s.row(i) = e / e.sum();
      }
      out_v.middleCols(h * dh, dh) = s * vh;
      if (keep) probs->push_back(std::move(s));
    }
    int out = push(std::move(out_v), keep, nullptr);
    if (node(out).needs_grad)
      node(out).back = [this, q, k, v, heads, dh, scale, probs, out] {
        const Mat<T>& g = node(out).grad;
        for (int h = 0; h < heads; ++h) {
          const Mat<T>& p = (*probs)[static_cast<size_t>(h)];
          auto gh = g.middleCols(h * dh, dh);
          auto qh = val(q).middleCols(h * dh, dh);
          auto kh = val(k).middleCols(h * dh, dh);
          auto vh = val(v).middleCols(h * dh, dh);
          if (wants(v)) {
            ensure_grad(v);
            node(v).grad.middleCols(h * dh, dh) += p.transpose() * gh;
          }
          if (wants(q) || wants(k)) {
            Mat<T> dp = gh * vh.transpose();
            Mat<T> ds(p.rows(), p.cols());
            for (Eigen::Index i = 0; i < p.rows(); ++i) {
              T dot = (dp.row(i).array() * p.row(i).array()).sum();
              ds.row(i) = (p.row(i).array() * (dp.row(i).array() - dot)).matrix();
            }
            if (wants(q)) {
              ensure_grad(q);
              node(q).grad.middleCols(h * dh, dh) += ds * kh * scale;
            }
            if (wants(k)) {
              ensure_grad(k);
              node(k).grad.middleCols(h * dh, dh) += ds.transpose() * qh * scale;
            }
          }
        }
      };
    return out;
  }

  // Inverted dropout; the mask is drawn from `rng` one uniform per element, so
  // the stream position (and hence the whole run) is deterministic.
  int dropout(int a, double drop_prob, Rng& rng) {
    if (drop_prob <= 0.0) return a;
    T keep_inv = T(1.0 / (1.0 - drop_prob));
    auto mask = std::make_shared<Mat<T>>(val(a).rows(), val(a).cols());
    for (Eigen::Index i = 0; i < mask->rows(); ++i)
      for (Eigen::Index j = 0; j < mask->cols(); ++j)
        (*mask)(i, j) = rng.uniform() < drop_prob ? T(0) : keep_inv;
    int out = push(Mat<T>((val(a).array() * mask->array()).matrix()), wants(a), nullptr);
    if (node(out).needs_grad)
      node(out).back = [this, a, out, mask] {
        accum(a, (node(out).grad.array() * mask->array()).matrix());
      };
    return out;
  }

  // Mean over rows of (logsumexp(row) - row[target]); hard targets.
  int softmax_ce(int logits, std::vector<uint32_t> targets) {
    const Mat<T>& z = val(logits);
    if (static_cast<size_t>(z.rows()) != targets.size())
      throw StageError("softmax_ce: target count mismatch");
    auto probs = std::make_shared<Mat<T>>(softmax_rows(z));
    T loss = T(0);
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
      T hi = z.row(i).maxCoeff();
      T lse = hi + std::log((z.row(i).array() - hi).exp().sum());
      loss += lse - z(i, targets[static_cast<size_t>(i)]);
    }
    loss /= static_cast<T>(z.rows());
    int out = push(Mat<T>::Constant(1, 1, loss), wants(logits), nullptr);
    if (node(out).needs_grad)
      node(out).back = [this, logits, out, probs, targets = std::move(targets)] {
        T g = node(out).grad(0, 0) / static_cast<T>(probs->rows());
        Mat<T> d = *probs;
        for (Eigen::Index i = 0; i < d.rows(); ++i) d(i, targets[static_cast<size_t>(i)]) -= T(1);
        accum(logits, d * g);
      };
    return out;
  }

  // Mean over rows of (logsumexp(row) - sum_k t_k * row_k); soft targets.
  int softmax_ce_soft(int logits, Mat<T> target) {
    const Mat<T>& z = val(logits);
    if (z.rows() != target.rows() || z.cols() != target.cols())
      throw StageError("softmax_ce_soft: shape mismatch");
    auto probs = std::make_shared<Mat<T>>(softmax_rows(z));
    T loss = T(0);
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
      T hi = z.row(i).maxCoeff();
      T lse = hi + std::log((z.row(i).array() - hi).exp().sum());
      loss += lse - (target.row(i).array() * z.row(i).array()).sum();
    }
    loss /= static_cast<T>(z.rows());
    auto tgt = std::make_shared<Mat<T>>(std::move(target));
    int out = push(Mat<T>::Constant(1, 1, loss), wants(logits), nullptr);
    if (node(out).needs_grad)
      node(out).back = [this, logits, out, probs, tgt] {
        T g = node(out).grad(0, 0) / static_cast<T>(probs->rows());
        accum(logits, (*probs - *tgt) * g);
      };
    return out;
  }

  // Mean over rows of the squared error between the row softmax and target.
  int softmax_mse(int logits, Mat<T> target) {
    const Mat<T>& z = val(logits);
    if (z.rows() != target.rows() || z.cols() != target.cols())
      throw StageError("softmax_mse: shape mismatch");
    auto probs = std::make_shared<Mat<T>>(softmax_rows(z));
    T loss = (*probs - target).squaredNorm() / static_cast<T>(z.rows());
    auto tgt = std::make_shared<Mat<T>>(std::move(target));
    int out = push(Mat<T>::Constant(1, 1, loss), wants(logits), nullptr);
    if (node(out).needs_grad)
      node(out).back = [this, logits, out, probs, tgt] {
        T g = node(out).grad(0, 0) * T(2) / static_cast<T>(probs->rows());
        Mat<T> d(probs->rows(), probs->cols());
        for (Eigen::Index i = 0; i < d.rows(); ++i) {
          auto p = probs->row(i).array();
          auto dp = ((probs->row(i) - tgt->row(i)) * g).array().eval();
          T dot = (dp * p).sum();
          d.row(i) = (p * (dp - dot)).matrix();
        }
        accum(logits, d);
      };
    return out;
  }

  // Mean over rows of the squared row error (summed over columns).
  int mse(int pred, Mat<T> target) {
    const Mat<T>& p = val(pred);
    if (p.rows() != target.rows() || p.cols() != target.cols())
      throw StageError("mse: shape mismatch");
    T loss = (p - target).squaredNorm() / static_cast<T>(p.rows());
    auto tgt = std::make_shared<Mat<T>>(std::move(target));
    int out = push(Mat<T>::Constant(1, 1, loss), wants(pred), nullptr);
    if (node(out).needs_grad)
      node(out).back = [this, pred, out, tgt] {
        T g = node(out).grad(0, 0) * T(2) / static_cast<T>(tgt->rows());
        accum(pred, (val(pred) - *tgt) * g);
      };
    return out;
  }

  // Gaussian negative log-likelihood head: pred columns are (means, log sigmas)
  // for each target column; mean over rows, summed over target columns.
  int gaussian_nll(int pred, Mat<T> target) {
    const Mat<T>& p = val(pred);
    const Eigen::Index c = target.cols();
    if (p.cols() != 2 * c || p.rows() != target.rows())
      throw StageError("gaussian_nll: pred must have 2x target columns");
    const T log2pi = std::log(T(2) * std::numbers::pi_v<T>);
    T loss = T(0);
    for (Eigen::Index i = 0; i < p.rows(); ++i)
      for (Eigen::Index j = 0; j < c; ++j) {
        T m = p(i, j), ls = p(i, c + j);
        T z = (target(i, j) - m) * std::exp(-ls);
        loss += T(0.5) * (z * z + T(2) * ls + log2pi);
      }
    loss /= static_cast<T>(p.rows());
    auto tgt = std::make_shared<Mat<T>>(std::move(target));
    int out = push(Mat<T>::Constant(1, 1, loss), wants(pred), nullptr);
    if (node(out).needs_grad)
      node(out).back = [this, pred, out, tgt, c] {
        const Mat<T>& p = val(pred);
        T g = node(out).grad(0, 0) / static_cast<T>(p.rows());
        Mat<T> d = Mat<T>::Zero(p.rows(), p.cols());
        for (Eigen::Index i = 0; i < p.rows(); ++i)
          for (Eigen::Index j = 0; j < c; ++j) {
            T m = p(i, j), ls = p(i, c + j);
            T inv_var = std::exp(T(-2) * ls);
            T diff = m - (*tgt)(i, j);
            d(i, j) = g * diff * inv_var;
            d(i, c + j) = g * (T(1) - diff * diff * inv_var);
          }
        accum(pred, d);
      };
    return out;
  }

  static Mat<T> softmax_rows(const Mat<T>& z) {
    Mat<T> p(z.rows(), z.cols());
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
      T hi = z.row(i).maxCoeff();
      auto e = (z.row(i).array() - hi).exp().eval();
      p.row(i) = e / e.sum();
    }
    return p;
  }

  size_t size() const { return nodes_.size(); }
  bool grad_enabled() const { return grad_enabled_; }

 private:
  struct Node {
    Mat<T> value;
    Mat<T> grad;
    std::function<void()> back;
    bool needs_grad = false;
  };

  Node& node(int id) { return nodes_[id]; }
  bool wants(int id) const { return nodes_[id].needs_grad; }

  void ensure_grad(int id) {
    Node& n = nodes_[id];
    if (n.grad.size() == 0) n.grad = Mat<T>::Zero(n.value.rows(), n.value.cols());
  }

  template <typename Expr>
  void accum(int id, const Expr& g) {
    ensure_grad(id);
    nodes_[id].grad += g;
  }

  int push(Mat<T> value, bool needs_grad, std::function<void()> back) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = needs_grad && grad_enabled_;
    n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  std::vector<Node> nodes_;
  bool grad_enabled_;
};

}  // namespace ssw::net
