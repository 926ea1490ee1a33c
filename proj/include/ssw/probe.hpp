#pragma once
// Probing layer: align embeddings with targets, fit small supervised heads
// (linear, linear+softmax, one-hidden-layer MLP) with a learning-rate grid and
// early stopping, report distribution/regression metrics, PCA projection, and
// the reverse map from oracle statistics back to embeddings.

#include <algorithm>
#include <map>

#include "ssw/train.hpp"

namespace ssw::probe {

using net::MatD;
using net::MatF;
using json = nlohmann::json;

enum class ProbeHead { LinearSoftmax, Linear, Mlp };

inline const char* probe_head_name(ProbeHead h) {
  switch (h) {
    case ProbeHead::LinearSoftmax: return "linear_softmax";
    case ProbeHead::Linear: return "linear";
    case ProbeHead::Mlp: return "mlp";
  }
  throw ConfigError("probe_head_name: unknown head");
}

inline ProbeHead probe_head_from_name(const std::string& s) {
  for (ProbeHead h : {ProbeHead::LinearSoftmax, ProbeHead::Linear, ProbeHead::Mlp})
    if (s == probe_head_name(h)) return h;
  throw ConfigError("probe head: unknown name '" + s + "'");
}

struct ProbeConfig {
  ProbeHead head = ProbeHead::LinearSoftmax;
  std::string loss = "ce";  // "ce" (default) or "l2"; simplex heads only
  std::vector<double> lr_grid = {1e-3, 3e-3, 1e-2};
  uint32_t batch_size = 64;
  uint32_t epochs = 200;
  uint32_t patience = 10;
  double val_fraction = 0.1;
  double weight_decay = 0.0;
  uint32_t hidden_dim = 64;  // MLP only
  uint64_t seed = 0;

  void validate() const {
    if (loss != "ce" && loss != "l2") throw ConfigError("ProbeConfig.loss: must be 'ce' or 'l2'");
    if (lr_grid.empty()) throw ConfigError("ProbeConfig.lr_grid: must be non-empty");
    for (double lr : lr_grid)
      if (!(lr > 0.0)) throw ConfigError("ProbeConfig.lr_grid: rates must be > 0");
    if (batch_size == 0) throw ConfigError("ProbeConfig.batch_size: must be > 0");
    if (epochs == 0) throw ConfigError("ProbeConfig.epochs: must be > 0");
    if (!(val_fraction > 0.0 && val_fraction < 0.5))
      throw ConfigError("ProbeConfig.val_fraction: must be in (0, 0.5)");
    if (weight_decay < 0.0) throw ConfigError("ProbeConfig.weight_decay: must be >= 0");
    if (head == ProbeHead::Mlp && hidden_dim == 0)
      throw ConfigError("ProbeConfig.hidden_dim: must be > 0 for mlp");
  }
};

inline void to_json(json& j, const ProbeConfig& c) {
  j = json{{"head", probe_head_name(c.head)}, {"loss", c.loss},
           {"lr_grid", c.lr_grid},           {"batch_size", c.batch_size},
           {"epochs", c.epochs},             {"patience", c.patience},
           {"val_fraction", c.val_fraction}, {"weight_decay", c.weight_decay},
           {"hidden_dim", c.hidden_dim},     {"seed", c.seed}};
}

inline void from_json(const json& j, ProbeConfig& c) {
  c = ProbeConfig{};
  if (j.contains("head")) c.head = probe_head_from_name(j.at("head").get<std::string>());
  if (j.contains("loss")) j.at("loss").get_to(c.loss);
  if (j.contains("lr_grid")) j.at("lr_grid").get_to(c.lr_grid);
  if (j.contains("batch_size")) j.at("batch_size").get_to(c.batch_size);
  if (j.contains("epochs")) j.at("epochs").get_to(c.epochs);
  if (j.contains("patience")) j.at("patience").get_to(c.patience);
  if (j.contains("val_fraction")) j.at("val_fraction").get_to(c.val_fraction);
  if (j.contains("weight_decay")) j.at("weight_decay").get_to(c.weight_decay);
  if (j.contains("hidden_dim")) j.at("hidden_dim").get_to(c.hidden_dim);
  if (j.contains("seed")) j.at("seed").get_to(c.seed);
}

// ---------------------------------------------------------------------------
// Alignment of embeddings with target tables by (sequence_id, position).

struct AlignedData {
  MatF x;  // n x embed_dim
  MatF y;  // n x target_dim
};

inline AlignedData align(const net::EmbeddingTable& emb, const infer::TargetTable& tgt) {
  std::map<std::pair<uint32_t, uint32_t>, Eigen::Index> index;
  for (size_t i = 0; i < emb.keys.size(); ++i) index[emb.keys[i]] = static_cast<Eigen::Index>(i);
  AlignedData out;
  out.x.resize(static_cast<Eigen::Index>(tgt.records.size()), emb.vectors.cols());
  out.y.resize(static_cast<Eigen::Index>(tgt.records.size()), tgt.dim);
  std::string missing;
  int missing_count = 0;
  Eigen::Index row = 0;
  for (const auto& r : tgt.records) {
    auto it = index.find({r.sequence_id, r.position});
    if (it == index.end()) {
      if (missing_count < 5)
        missing += " (" + std::to_string(r.sequence_id) + "," + std::to_string(r.position) + ")";
      ++missing_count;
      continue;
    }
    out.x.row(row) = emb.vectors.row(it->second);
    for (uint32_t j = 0; j < tgt.dim; ++j)
      out.y(row, j) = static_cast<float>(r.value[j]);
    ++row;
  }
  if (missing_count > 0)
    throw StageError("align: " + std::to_string(missing_count) +
                     " target keys without embeddings, first:" + missing);
  return out;
}

// ---------------------------------------------------------------------------
// Probe model

struct Probe {
  ProbeHead head = ProbeHead::Linear;
  std::string loss = "ce";
  bool simplex = false;  // softmax applied to outputs
  double chosen_lr = 0.0;
  double best_val_loss = 0.0;
  uint32_t hidden_dim = 0;
  net::ParamSet<float> params;

  MatF raw_outputs(const MatF& x) const {
    if (head == ProbeHead::Mlp) {
      MatF h = (x * params.at("w1")).rowwise() +
               Eigen::RowVectorXf::Map(params.at("b1").data(), params.at("b1").cols());
      h = h.cwiseMax(0.0f);
      return (h * params.at("w2")).rowwise() +
             Eigen::RowVectorXf::Map(params.at("b2").data(), params.at("b2").cols());
    }
    return (x * params.at("w1")).rowwise() +
           Eigen::RowVectorXf::Map(params.at("b1").data(), params.at("b1").cols());
  }

  MatF predict(const MatF& x) const {
    MatF out = raw_outputs(x);
    return simplex ? net::Tape<float>::softmax_rows(out) : out;
  }
};

namespace detail {

inline int probe_forward(net::Tape<float>& tape, int xid, const std::vector<int>& pids,
                         ProbeHead head) {
  if (head == ProbeHead::Mlp) {
    int h = tape.relu(tape.add_rowvec(tape.matmul(xid, pids[0]), pids[1]));
    return tape.add_rowvec(tape.matmul(h, pids[2]), pids[3]);
  }
  return tape.add_rowvec(tape.matmul(xid, pids[0]), pids[1]);
}

inline int probe_loss(net::Tape<float>& tape, int out, MatF target, bool simplex,
                      const std::string& loss) {
  if (!simplex) return tape.mse(out, std::move(target));
  if (loss == "l2") return tape.softmax_mse(out, std::move(target));
  return tape.softmax_ce_soft(out, std::move(target));
}

inline net::ParamSet<float> init_probe_params(ProbeHead head, Eigen::Index in, Eigen::Index out,
                                              uint32_t hidden, uint64_t seed) {
  Rng rng(seed);
  auto init_mat = [&](Eigen::Index r, Eigen::Index c, double sd) {
    MatF m(r, c);
    for (Eigen::Index i = 0; i < r; ++i)
      for (Eigen::Index j = 0; j < c; ++j) m(i, j) = static_cast<float>(rng.normal(0.0, sd));
    return m;
  };
  net::ParamSet<float> p;
  if (head == ProbeHead::Mlp) {
    p.add("w1", init_mat(in, hidden, std::sqrt(2.0 / static_cast<double>(in))));
    p.add("b1", MatF::Zero(1, hidden));
    p.add("w2", init_mat(hidden, out, 1.0 / std::sqrt(static_cast<double>(hidden))));
    p.add("b2", MatF::Zero(1, out));
  } else {
    p.add("w1", init_mat(in, out, 1.0 / std::sqrt(static_cast<double>(in))));
    p.add("b1", MatF::Zero(1, out));
  }
  return p;
}

inline double probe_eval_loss(const net::ParamSet<float>& params, ProbeHead head, const MatF& x,
                              const MatF& y, bool simplex, const std::string& loss) {
  net::Tape<float> tape(false);
  std::vector<int> pids;
  for (const auto& t : params.tensors) pids.push_back(tape.leaf(t, false));
  int out = probe_forward(tape, tape.leaf(x, false), pids, head);
  return tape.val(probe_loss(tape, out, y, simplex, loss))(0, 0);
}

}  // namespace detail

inline Probe fit_probe(const MatF& x, const MatF& y, const ProbeConfig& cfg, bool simplex) {
  cfg.validate();
  if (x.rows() != y.rows()) throw StageError("fit_probe: row count mismatch");
  if (x.rows() < 8) throw StageError("fit_probe: need at least 8 examples");
  if (simplex && cfg.head == ProbeHead::Linear)
    throw ConfigError("fit_probe: simplex targets need linear_softmax or mlp head");

  const Eigen::Index n = x.rows();
  const Eigen::Index n_val = std::max<Eigen::Index>(
      1, static_cast<Eigen::Index>(std::llround(cfg.val_fraction * static_cast<double>(n))));
  const Eigen::Index n_tr = n - n_val;
  MatF xtr = x.topRows(n_tr), ytr = y.topRows(n_tr);
  MatF xva = x.bottomRows(n_val), yva = y.bottomRows(n_val);

  Probe best;
  best.best_val_loss = std::numeric_limits<double>::infinity();
  for (size_t li = 0; li < cfg.lr_grid.size(); ++li) {
    const double lr = cfg.lr_grid[li];
    net::ParamSet<float> params = detail::init_probe_params(
        cfg.head, x.cols(), y.cols(), cfg.hidden_dim, derive_seed(cfg.seed, 7 + li));
    std::vector<MatF> m(params.tensors.size()), v(params.tensors.size());
    for (size_t k = 0; k < params.tensors.size(); ++k) {
      m[k] = MatF::Zero(params.tensors[k].rows(), params.tensors[k].cols());
      v[k] = MatF::Zero(params.tensors[k].rows(), params.tensors[k].cols());
    }
    long step = 0;
    double run_best = std::numeric_limits<double>::infinity();
    net::ParamSet<float> run_best_params = params;
    uint32_t since_best = 0;

    std::vector<size_t> order(static_cast<size_t>(n_tr));
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (uint32_t epoch = 0; epoch < cfg.epochs; ++epoch) {
      Rng shuffle_rng(derive_seed(cfg.seed, 1000 * (li + 1) + epoch));
      shuffle_rng.shuffle(order);
      for (size_t base = 0; base < order.size(); base += cfg.batch_size) {
        size_t bsz = std::min<size_t>(cfg.batch_size, order.size() - base);
        MatF xb(static_cast<Eigen::Index>(bsz), x.cols());
        MatF yb(static_cast<Eigen::Index>(bsz), y.cols());
        for (size_t i = 0; i < bsz; ++i) {
          xb.row(static_cast<Eigen::Index>(i)) = xtr.row(static_cast<Eigen::Index>(order[base + i]));
          yb.row(static_cast<Eigen::Index>(i)) = ytr.row(static_cast<Eigen::Index>(order[base + i]));
        }
        net::Tape<float> tape(true);
        std::vector<int> pids;
        for (const auto& t : params.tensors) pids.push_back(tape.leaf(t, true));
        int out = detail::probe_forward(tape, tape.leaf(xb, false), pids, cfg.head);
        int loss = detail::probe_loss(tape, out, std::move(yb), simplex, cfg.loss);
        if (!std::isfinite(tape.val(loss)(0, 0))) break;  // this lr diverged
        tape.backward(loss);
        ++step;
        float b1c = 1.0f - std::pow(0.9f, static_cast<float>(step));
        float b2c = 1.0f - std::pow(0.999f, static_cast<float>(step));
        for (size_t k = 0; k < params.tensors.size(); ++k) {
          const MatF& g = tape.grad(pids[k]);
          m[k] = 0.9f * m[k] + 0.1f * g;
          v[k] = 0.999f * v[k] + 0.001f * g.cwiseProduct(g);
          params.tensors[k].array() -=
              static_cast<float>(lr) * (m[k] / b1c).array() /
              ((v[k] / b2c).array().sqrt() + 1e-8f);
          if (cfg.weight_decay > 0.0)
            params.tensors[k] *= 1.0f - static_cast<float>(lr * cfg.weight_decay);
        }
      }
      double val = detail::probe_eval_loss(params, cfg.head, xva, yva, simplex, cfg.loss);
      if (std::isfinite(val) && val < run_best) {
        run_best = val;
        run_best_params = params;
        since_best = 0;
      } else if (++since_best > cfg.patience) {
        break;
      }
    }
    if (run_best < best.best_val_loss) {
      best.head = cfg.head;
      best.loss = cfg.loss;
      best.simplex = simplex;
      best.chosen_lr = lr;
      best.best_val_loss = run_best;
      best.hidden_dim = cfg.hidden_dim;
      best.params = run_best_params;
    }
  }
  if (!std::isfinite(best.best_val_loss))
    throw StageError("fit_probe: all learning rates diverged");
  return best;
}

// ---------------------------------------------------------------------------
// Metrics

struct ProbeReport {
  std::string head;
  std::string loss;
  double chosen_lr = 0.0;
  double best_val_loss = 0.0;
  size_t eval_count = 0;
  double accuracy = 0.0;    // simplex targets: argmax match rate
  double l2 = 0.0;          // mean over examples of squared error summed over dims
  double tv = 0.0;          // simplex targets: mean total variation distance
  double scaled_mse = 0.0;  // mean over non-degenerate dims of mse_j / var_j
  std::vector<double> pearson_r;        // per target dim (0 when degenerate)
  std::vector<double> scaled_mse_dims;  // per target dim (0 when degenerate)
  std::vector<int> degenerate_dims;     // target dims with (near) zero variance
  bool simplex = false;
};

inline json report_to_json(const ProbeReport& r) {
  return json{{"head", r.head},
              {"loss", r.loss},
              {"chosen_lr", r.chosen_lr},
              {"best_val_loss", r.best_val_loss},
              {"eval_count", r.eval_count},
              {"accuracy", r.accuracy},
              {"l2", r.l2},
              {"tv", r.tv},
              {"scaled_mse", r.scaled_mse},
              {"pearson_r", r.pearson_r},
              {"scaled_mse_dims", r.scaled_mse_dims},
              {"degenerate_dims", r.degenerate_dims},
              {"simplex", r.simplex},
              {"conventions",
               json{{"l2", "mean over examples of squared error summed over dims"},
                    {"tv", "0.5 * L1, mean over examples"},
                    {"scaled_mse", "per-dim mse/variance averaged over non-degenerate dims"}}}};
}

inline ProbeReport report_from_json(const json& j) {
  ProbeReport r;
  r.head = j.value("head", "linear");
  r.loss = j.value("loss", "ce");
  r.chosen_lr = j.value("chosen_lr", 0.0);
  r.best_val_loss = j.value("best_val_loss", 0.0);
  r.eval_count = j.value("eval_count", size_t{0});
  r.accuracy = j.value("accuracy", 0.0);
  r.l2 = j.value("l2", 0.0);
  r.tv = j.value("tv", 0.0);
  r.scaled_mse = j.value("scaled_mse", 0.0);
  if (j.contains("pearson_r")) j.at("pearson_r").get_to(r.pearson_r);
  if (j.contains("scaled_mse_dims")) j.at("scaled_mse_dims").get_to(r.scaled_mse_dims);
  if (j.contains("degenerate_dims")) j.at("degenerate_dims").get_to(r.degenerate_dims);
  r.simplex = j.value("simplex", false);
  return r;
}

inline ProbeReport eval_probe(const Probe& probe, const MatF& x, const MatF& y) {
  if (x.rows() != y.rows() || x.rows() == 0) throw StageError("eval_probe: bad eval shapes");
  MatF pred = probe.predict(x);
  if (pred.cols() != y.cols()) throw StageError("eval_probe: prediction width mismatch");
  const Eigen::Index n = y.rows(), d = y.cols();

  ProbeReport r;
  r.head = probe_head_name(probe.head);
  r.loss = probe.loss;
  r.chosen_lr = probe.chosen_lr;
  r.best_val_loss = probe.best_val_loss;
  r.eval_count = static_cast<size_t>(n);
  r.simplex = probe.simplex;

  MatF err = pred - y;
  r.l2 = static_cast<double>(err.squaredNorm()) / static_cast<double>(n);

  if (probe.simplex) {
    Eigen::Index hits = 0;
    double tv = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      Eigen::Index pa, ta;
      pred.row(i).maxCoeff(&pa);
      y.row(i).maxCoeff(&ta);
      hits += (pa == ta);
      tv += 0.5 * static_cast<double>(err.row(i).cwiseAbs().sum());
    }
    r.accuracy = static_cast<double>(hits) / static_cast<double>(n);
    r.tv = tv / static_cast<double>(n);
  }

  double scaled = 0.0;
  int valid = 0;
  r.pearson_r.assign(static_cast<size_t>(d), 0.0);
  r.scaled_mse_dims.assign(static_cast<size_t>(d), 0.0);
  for (Eigen::Index j = 0; j < d; ++j) {
    double ym = y.col(j).cast<double>().mean();
    double pm = pred.col(j).cast<double>().mean();
    double yv = 0.0, pv = 0.0, cov = 0.0, mse = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      double dy = y(i, j) - ym, dp = pred(i, j) - pm;
      yv += dy * dy;
      pv += dp * dp;
      cov += dy * dp;
      mse += sq(static_cast<double>(pred(i, j)) - static_cast<double>(y(i, j)));
    }
    yv /= static_cast<double>(n);
    pv /= static_cast<double>(n);
    cov /= static_cast<double>(n);
    mse /= static_cast<double>(n);
    if (yv < 1e-12) {
      r.degenerate_dims.push_back(static_cast<int>(j));
      continue;
    }
    r.scaled_mse_dims[static_cast<size_t>(j)] = mse / yv;
    scaled += mse / yv;
    ++valid;
    if (pv > 1e-24) r.pearson_r[static_cast<size_t>(j)] = cov / std::sqrt(yv * pv);
  }
  r.scaled_mse = valid > 0 ? scaled / valid : 0.0;
  return r;
}

// Convenience: fit on (xtr, ytr), evaluate on (xev, yev).
inline std::pair<Probe, ProbeReport> fit_eval(const MatF& xtr, const MatF& ytr, const MatF& xev,
                                              const MatF& yev, const ProbeConfig& cfg,
                                              bool simplex) {
  Probe p = fit_probe(xtr, ytr, cfg, simplex);
  return {p, eval_probe(p, xev, yev)};
}

// ---------------------------------------------------------------------------
// Token-recovery probes: one linear regressor per early token index.

inline std::vector<ProbeReport> probe_tokens(const MatF& xtr, const MatF& ttr, const MatF& xev,
                                             const MatF& tev, ProbeConfig cfg) {
  if (ttr.cols() != tev.cols()) throw StageError("probe_tokens: token column mismatch");
  cfg.head = ProbeHead::Linear;
  cfg.loss = "l2";
  std::vector<ProbeReport> reports;
  for (Eigen::Index j = 0; j < ttr.cols(); ++j) {
    ProbeConfig c = cfg;
    c.seed = derive_seed(cfg.seed, 40 + static_cast<uint64_t>(j));
    auto [p, rep] = fit_eval(xtr, ttr.col(j), xev, tev.col(j), c, false);
    reports.push_back(rep);
  }
  return reports;
}

// ---------------------------------------------------------------------------
// Reverse map: oracle statistics -> embeddings, scored by variance explained.

struct ReverseMapResult {
  Probe probe;
  // 1 - mean over embedding dims of (mse_j / var_j) on the eval split;
  // dims with (near) zero variance are skipped.
  double variance_explained = 0.0;
  double l2 = 0.0;
};

inline ReverseMapResult fit_reverse_map(const MatF& stats_tr, const MatF& emb_tr,
                                        const MatF& stats_ev, const MatF& emb_ev,
                                        ProbeConfig cfg) {
  cfg.head = ProbeHead::Mlp;
  cfg.loss = "l2";
  ReverseMapResult res;
  res.probe = fit_probe(stats_tr, emb_tr, cfg, false);
  MatF pred = res.probe.predict(stats_ev);
  const Eigen::Index n = emb_ev.rows();
  double scaled = 0.0, sse = 0.0;
  int valid = 0;
  for (Eigen::Index j = 0; j < emb_ev.cols(); ++j) {
    double mean = emb_ev.col(j).cast<double>().mean();
    double mse = 0.0, var = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      mse += sq(static_cast<double>(pred(i, j)) - static_cast<double>(emb_ev(i, j)));
      var += sq(static_cast<double>(emb_ev(i, j)) - mean);
    }
    mse /= static_cast<double>(n);
    var /= static_cast<double>(n);
    sse += mse;
    if (var < 1e-12) continue;
    scaled += mse / var;
    ++valid;
  }
  res.variance_explained = valid > 0 ? 1.0 - scaled / valid : 0.0;
  res.l2 = sse;
  return res;
}

// ---------------------------------------------------------------------------
// PCA projection (double precision covariance + eigendecomposition).

struct PcaResult {
  MatD coords;                          // n x k
  std::vector<double> explained_ratio;  // k entries, eigenvalue / total variance
};

inline PcaResult pca_project(const MatF& x, int k) {
  if (k <= 0 || k > x.cols()) throw ConfigError("pca_project: k out of range");
  if (x.rows() < 2) throw StageError("pca_project: need at least 2 rows");
  MatD xc = x.cast<double>();
  Eigen::RowVectorXd mean = xc.colwise().mean();
  xc.rowwise() -= mean;
  MatD cov = (xc.transpose() * xc) / static_cast<double>(x.rows() - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  if (solver.info() != Eigen::Success) throw StageError("pca_project: eigensolver failed");
  Eigen::VectorXd evals = solver.eigenvalues();  // ascending
  double total = 0.0;
  for (Eigen::Index i = 0; i < evals.size(); ++i) total += std::max(0.0, evals(i));

  PcaResult res;
  res.coords.resize(x.rows(), k);
  for (int c = 0; c < k; ++c) {
    Eigen::Index src = evals.size() - 1 - c;
    Eigen::VectorXd v = solver.eigenvectors().col(src);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0.0) v = -v;
    res.coords.col(c) = xc * v;
    res.explained_ratio.push_back(total > 0.0 ? std::max(0.0, evals(src)) / total : 0.0);
  }
  return res;
}

}  // namespace ssw::probe
