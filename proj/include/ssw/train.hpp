#pragma once
// Training loop (Adam, early stopping on Set2, divergence guard), gradient
// checking against central finite differences in double precision, model
// checkpoint serialization, and embedding extraction.

#include <atomic>
#include <cstring>
#include <fstream>
#include <memory>
#include <thread>

#include "ssw/targets.hpp"
#include "ssw/transformer.hpp"

namespace ssw::net {

struct TrainConfig {
  double learning_rate = 1e-3;
  uint32_t batch_size = 64;
  uint32_t epochs = 40;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  uint64_t seed = 0;
  Objective objective = Objective::Autoregressive;
  double mask_prob = 0.15;
  uint32_t patience = 5;
  uint32_t workers = 1;

  void validate() const {
    if (!(learning_rate > 0.0)) throw ConfigError("TrainConfig.learning_rate: must be > 0");
    if (batch_size == 0) throw ConfigError("TrainConfig.batch_size: must be > 0");
    if (epochs == 0) throw ConfigError("TrainConfig.epochs: must be > 0");
    if (objective == Objective::Masked && !(mask_prob > 0.0 && mask_prob < 1.0))
      throw ConfigError("TrainConfig.mask_prob: must be in (0,1)");
    if (workers == 0) throw ConfigError("TrainConfig.workers: must be > 0");
  }
};

inline void to_json(json& j, const TrainConfig& c) {
  j = json{{"learning_rate", c.learning_rate},
           {"batch_size", c.batch_size},
           {"epochs", c.epochs},
           {"beta1", c.beta1},
           {"beta2", c.beta2},
           {"eps", c.eps},
           {"seed", c.seed},
           {"objective", objective_name(c.objective)},
           {"mask_prob", c.mask_prob},
           {"patience", c.patience},
           {"workers", c.workers}};
}

inline void from_json(const json& j, TrainConfig& c) {
  c = TrainConfig{};
  if (j.contains("learning_rate")) j.at("learning_rate").get_to(c.learning_rate);
  if (j.contains("batch_size")) j.at("batch_size").get_to(c.batch_size);
  if (j.contains("epochs")) j.at("epochs").get_to(c.epochs);
  if (j.contains("beta1")) j.at("beta1").get_to(c.beta1);
  if (j.contains("beta2")) j.at("beta2").get_to(c.beta2);
  if (j.contains("eps")) j.at("eps").get_to(c.eps);
  if (j.contains("seed")) j.at("seed").get_to(c.seed);
  if (j.contains("objective"))
    c.objective = j.at("objective").get<std::string>() == "masked" ? Objective::Masked
                                                                   : Objective::Autoregressive;
  if (j.contains("mask_prob")) j.at("mask_prob").get_to(c.mask_prob);
  if (j.contains("patience")) j.at("patience").get_to(c.patience);
  if (j.contains("workers")) j.at("workers").get_to(c.workers);
}

struct EpochLog {
  double train_loss = 0.0;
  double val_loss = 0.0;
};

struct TrainResult {
  Transformer<float> model;  // best-validation parameters
  double init_val_loss = 0.0;
  std::vector<EpochLog> log;
  uint32_t best_epoch = 0;
  double best_val_loss = 0.0;
  bool diverged = false;
};

namespace detail {

// Deterministic mask set for one sequence of the masked objective.
inline std::vector<uint32_t> mask_set(Rng& rng, uint32_t n, double mask_prob) {
  std::vector<uint32_t> m;
  for (uint32_t i = 0; i < n; ++i)
    if (rng.bernoulli(mask_prob)) m.push_back(i);
  if (m.empty()) m.push_back(static_cast<uint32_t>(rng.uniform_int(n)));
  return m;
}

inline double sequence_loss(const Transformer<float>& model, const ModelInput<float>& in,
                            const TrainConfig& cfg, bool train_mode, Rng* rng,
                            std::vector<Mat<float>>* grads) {
  Tape<float> tape(grads != nullptr);
  std::vector<int> param_ids = model.bind_params(tape, grads != nullptr);
  int loss;
  if (cfg.objective == Objective::Masked) {
    if (!rng) throw StageError("sequence_loss: masked objective needs an rng");
    std::vector<uint32_t> mask = mask_set(*rng, in.length(), cfg.mask_prob);
    loss = model.build_masked_loss(tape, in, mask, train_mode, rng, param_ids);
  } else {
    auto g = model.build(tape, in, train_mode, rng, false, param_ids);
    loss = model.build_ar_loss(tape, g, in);
  }
  double value = static_cast<double>(tape.val(loss)(0, 0));
  if (grads) {
    tape.backward(loss);
    for (size_t k = 0; k < param_ids.size(); ++k) (*grads)[k] += tape.grad(param_ids[k]);
  }
  return value;
}

}  // namespace detail

// Mean per-sequence loss over a split; dropout disabled. For the masked
// objective the mask of sequence i is a fixed function of (seed, i), so
// epochs are comparable.
inline double eval_loss(const Transformer<float>& model, std::span<const ModelInput<float>> inputs,
                        const TrainConfig& cfg) {
  if (inputs.empty()) throw StageError("eval_loss: empty split");
  double total = 0.0;
  for (size_t i = 0; i < inputs.size(); ++i) {
    Rng rng(derive_seed(cfg.seed ^ 0xe7a1u, i));
    total += detail::sequence_loss(model, inputs[i], cfg, false, &rng, nullptr);
  }
  return total / static_cast<double>(inputs.size());
}

template <typename T>
inline std::vector<ModelInput<T>> make_inputs(const ArchConfig& arch,
                                              std::span<const gen::Sequence> split) {
  std::vector<ModelInput<T>> v;
  v.reserve(split.size());
  for (const auto& s : split) v.push_back(model_input<T>(arch, s));
  return v;
}

inline TrainResult train(const ArchConfig& arch, std::span<const gen::Sequence> set1,
                         std::span<const gen::Sequence> set2, const TrainConfig& cfg) {
  arch.validate();
  cfg.validate();
  if (set1.empty() || set2.empty()) throw ConfigError("train: empty train or validation split");

  TrainResult res;
  res.model = Transformer<float>::init(arch, derive_seed(cfg.seed, 1));
  std::vector<ModelInput<float>> train_in = make_inputs<float>(arch, set1);
  std::vector<ModelInput<float>> val_in = make_inputs<float>(arch, set2);

  const size_t np = res.model.params.tensors.size();
  std::vector<MatF> adam_m(np), adam_v(np);
  for (size_t k = 0; k < np; ++k) {
    adam_m[k] = MatF::Zero(res.model.params.tensors[k].rows(), res.model.params.tensors[k].cols());
    adam_v[k] = MatF::Zero(adam_m[k].rows(), adam_m[k].cols());
  }
  long step = 0;

  res.init_val_loss = eval_loss(res.model, val_in, cfg);
  res.best_val_loss = res.init_val_loss;
  ParamSet<float> best_params = res.model.params;
  uint32_t since_best = 0;

  std::vector<size_t> order(train_in.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (uint32_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng shuffle_rng(derive_seed(cfg.seed, 101 + epoch));
    shuffle_rng.shuffle(order);
    double epoch_loss = 0.0;
    bool bad = false;

    for (size_t base = 0; base < order.size() && !bad; base += cfg.batch_size) {
      size_t bsz = std::min<size_t>(cfg.batch_size, order.size() - base);
      std::vector<MatF> grads(np);
      for (size_t k = 0; k < np; ++k)
        grads[k] = MatF::Zero(adam_m[k].rows(), adam_m[k].cols());
      double batch_loss = 0.0;

      if (cfg.workers <= 1) {
        for (size_t bi = 0; bi < bsz; ++bi) {
          size_t idx = order[base + bi];
          Rng rng(derive_seed(derive_seed(cfg.seed, 211 + epoch), idx));
          batch_loss +=
              detail::sequence_loss(res.model, train_in[idx], cfg, true, &rng, &grads);
        }
      } else {
        // Data-parallel chunks; each worker owns a gradient buffer and the
        // buffers are reduced in fixed worker order afterwards.
        size_t nw = std::min<size_t>(cfg.workers, bsz);
        std::vector<std::vector<MatF>> wgrads(nw);
        std::vector<double> wloss(nw, 0.0);
        std::vector<std::thread> threads;
        size_t chunk = (bsz + nw - 1) / nw;
        for (size_t w = 0; w < nw; ++w) {
          wgrads[w].resize(np);
          for (size_t k = 0; k < np; ++k)
            wgrads[w][k] = MatF::Zero(adam_m[k].rows(), adam_m[k].cols());
          threads.emplace_back([&, w] {
            size_t lo = w * chunk, hi = std::min(bsz, lo + chunk);
            for (size_t bi = lo; bi < hi; ++bi) {
              size_t idx = order[base + bi];
              Rng rng(derive_seed(derive_seed(cfg.seed, 211 + epoch), idx));
              wloss[w] +=
                  detail::sequence_loss(res.model, train_in[idx], cfg, true, &rng, &wgrads[w]);
            }
          });
        }
        for (auto& t : threads) t.join();
        for (size_t w = 0; w < nw; ++w) {
          batch_loss += wloss[w];
          for (size_t k = 0; k < np; ++k) grads[k] += wgrads[w][k];
        }
      }

      batch_loss /= static_cast<double>(bsz);
      epoch_loss += batch_loss * static_cast<double>(bsz);
      if (!std::isfinite(batch_loss)) {
        bad = true;
        break;
      }

      float inv_b = 1.0f / static_cast<float>(bsz);
      ++step;
      float b1c = 1.0f - std::pow(static_cast<float>(cfg.beta1), static_cast<float>(step));
      float b2c = 1.0f - std::pow(static_cast<float>(cfg.beta2), static_cast<float>(step));
      for (size_t k = 0; k < np; ++k) {
        MatF g = grads[k] * inv_b;
        adam_m[k] = static_cast<float>(cfg.beta1) * adam_m[k] + (1.0f - static_cast<float>(cfg.beta1)) * g;
        adam_v[k] = static_cast<float>(cfg.beta2) * adam_v[k] +
                    (1.0f - static_cast<float>(cfg.beta2)) * g.cwiseProduct(g);
        MatF mhat = adam_m[k] / b1c;
        MatF vhat = adam_v[k] / b2c;
        res.model.params.tensors[k].array() -=
            static_cast<float>(cfg.learning_rate) * mhat.array() /
            (vhat.array().sqrt() + static_cast<float>(cfg.eps));
      }
    }

    if (bad) {
      res.diverged = true;
      res.model.params = best_params;
      return res;
    }

    EpochLog lg;
    lg.train_loss = epoch_loss / static_cast<double>(order.size());
    lg.val_loss = eval_loss(res.model, val_in, cfg);
    res.log.push_back(lg);
    // Layernorm keeps activations finite even under absurd step sizes, so an
    // explosion shows up as a validation loss far above the untrained model's
    // rather than as a NaN.
    if (!std::isfinite(lg.val_loss) ||
        lg.val_loss > 10.0 * std::abs(res.init_val_loss) + 10.0) {
      res.diverged = true;
      res.model.params = best_params;
      return res;
    }
    if (lg.val_loss < res.best_val_loss) {
      res.best_val_loss = lg.val_loss;
      res.best_epoch = epoch;
      best_params = res.model.params;
      since_best = 0;
    } else if (++since_best > cfg.patience) {
      break;
    }
  }
  res.model.params = best_params;
  return res;
}

// ---------------------------------------------------------------------------
// Gradient check: analytic gradients vs central differences in double
// precision over a random subset of parameter coordinates.

inline double grad_check(const ArchConfig& arch, std::span<const gen::Sequence> seqs,
                         Objective objective = Objective::Autoregressive, double eps = 1e-5,
                         int num_coords = 200, uint64_t seed = 0) {
  Transformer<double> model = Transformer<double>::init(arch, derive_seed(seed, 1));
  std::vector<ModelInput<double>> inputs = make_inputs<double>(arch, seqs);

  auto loss_of = [&](const Transformer<double>& m) {
    double total = 0.0;
    for (size_t i = 0; i < inputs.size(); ++i) {
      Tape<double> tape(false);
      std::vector<int> pids = m.bind_params(tape, false);
      int loss;
      if (objective == Objective::Masked) {
        Rng rng(derive_seed(seed, 55 + i));
        std::vector<uint32_t> mask = detail::mask_set(rng, inputs[i].length(), 0.3);
        loss = m.build_masked_loss(tape, inputs[i], mask, false, nullptr, pids);
      } else {
        auto g = m.build(tape, inputs[i], false, nullptr, false, pids);
        loss = m.build_ar_loss(tape, g, inputs[i]);
      }
      total += tape.val(loss)(0, 0);
    }
    return total / static_cast<double>(inputs.size());
  };

  // analytic gradients
  const size_t np = model.params.tensors.size();
  std::vector<MatD> grads(np);
  for (size_t k = 0; k < np; ++k)
    grads[k] = MatD::Zero(model.params.tensors[k].rows(), model.params.tensors[k].cols());
  for (size_t i = 0; i < inputs.size(); ++i) {
    Tape<double> tape(true);
    std::vector<int> pids = model.bind_params(tape, true);
    int loss;
    if (objective == Objective::Masked) {
      Rng rng(derive_seed(seed, 55 + i));
      std::vector<uint32_t> mask = detail::mask_set(rng, inputs[i].length(), 0.3);
      loss = model.build_masked_loss(tape, inputs[i], mask, false, nullptr, pids);
    } else {
      auto g = model.build(tape, inputs[i], false, nullptr, false, pids);
      loss = model.build_ar_loss(tape, g, inputs[i]);
    }
    tape.backward(loss);
    for (size_t k = 0; k < np; ++k) grads[k] += tape.grad(pids[k]);
  }
  for (auto& g : grads) g /= static_cast<double>(inputs.size());

  Rng pick(derive_seed(seed, 99));
  double worst = 0.0;
  for (int c = 0; c < num_coords; ++c) {
    size_t k = pick.uniform_int(np);
    Eigen::Index i = static_cast<Eigen::Index>(pick.uniform_int(
        static_cast<uint64_t>(model.params.tensors[k].rows())));
    Eigen::Index j = static_cast<Eigen::Index>(pick.uniform_int(
        static_cast<uint64_t>(model.params.tensors[k].cols())));
    double orig = model.params.tensors[k](i, j);
    model.params.tensors[k](i, j) = orig + eps;
    double up = loss_of(model);
    model.params.tensors[k](i, j) = orig - eps;
    double down = loss_of(model);
    model.params.tensors[k](i, j) = orig;
    double numeric = (up - down) / (2.0 * eps);
    double analytic = grads[k](i, j);
    double rel = std::abs(analytic - numeric) /
                 std::max(1e-5, std::max(std::abs(analytic), std::abs(numeric)));
    worst = std::max(worst, rel);
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Checkpoints: JSON header line (arch + extras + tensor manifest) followed by
// the raw float32 blob; bit-exact round trip.

inline void save_checkpoint(const Transformer<float>& model, const std::string& path,
                            const json& extra = json::object()) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw StageError("save_checkpoint: cannot open " + path);
  json manifest = json::array();
  size_t offset = 0;
  for (size_t k = 0; k < model.params.tensors.size(); ++k) {
    const MatF& t = model.params.tensors[k];
    manifest.push_back(json{{"name", model.params.names[k]},
                            {"rows", t.rows()},
                            {"cols", t.cols()},
                            {"offset", offset}});
    offset += static_cast<size_t>(t.size());
  }
  json header{{"schema", 1},
              {"kind", "checkpoint"},
              {"arch", model.arch},
              {"extra", extra},
              {"manifest", manifest}};
  os << header.dump() << "\n";
  for (const MatF& t : model.params.tensors)
    os.write(reinterpret_cast<const char*>(t.data()),
             static_cast<std::streamsize>(sizeof(float) * static_cast<size_t>(t.size())));
  if (!os) throw StageError("save_checkpoint: write failed for " + path);
}

inline Transformer<float> load_checkpoint(const std::string& path, json* extra_out = nullptr) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw StageError("load_checkpoint: cannot open " + path);
  std::string line;
  if (!std::getline(is, line)) throw StageError("load_checkpoint: missing header in " + path);
  json header = json::parse(line);
  if (header.value("kind", "") != "checkpoint" || header.value("schema", 0) != 1)
    throw StageError("load_checkpoint: not a v1 checkpoint: " + path);
  Transformer<float> model;
  model.arch = header.at("arch").get<ArchConfig>();
  if (extra_out) *extra_out = header.value("extra", json::object());
  for (const auto& m : header.at("manifest")) {
    MatF t(m.at("rows").get<Eigen::Index>(), m.at("cols").get<Eigen::Index>());
    is.read(reinterpret_cast<char*>(t.data()),
            static_cast<std::streamsize>(sizeof(float) * static_cast<size_t>(t.size())));
    model.params.add(m.at("name").get<std::string>(), std::move(t));
  }
  if (!is) throw StageError("load_checkpoint: truncated checkpoint " + path);
  return model;
}

// ---------------------------------------------------------------------------
// Embedding extraction

struct EmbeddingTable {
  uint32_t dim = 0;
  std::vector<std::pair<uint32_t, uint32_t>> keys;  // (sequence_id, position)
  MatF vectors;                                     // keys.size() x dim
};

inline EmbeddingTable embed(const Transformer<float>& model, std::span<const gen::Sequence> split,
                            uint32_t id_offset, const infer::PositionSpec& pos,
                            bool bidirectional = false) {
  EmbeddingTable table;
  table.dim = model.arch.hidden_dim;
  size_t total = 0;
  std::vector<std::vector<uint32_t>> resolved(split.size());
  for (size_t i = 0; i < split.size(); ++i) {
    resolved[i] = pos.resolve(static_cast<uint32_t>(split[i].size()));
    total += resolved[i].size();
  }
  table.keys.reserve(total);
  table.vectors.resize(static_cast<Eigen::Index>(total), table.dim);
  Eigen::Index row = 0;
  for (size_t i = 0; i < split.size(); ++i) {
    ModelInput<float> in = model_input<float>(model.arch, split[i]);
    auto fwd = model.forward(in, bidirectional);
    for (uint32_t p : resolved[i]) {
      table.keys.emplace_back(id_offset + static_cast<uint32_t>(i), p);
      table.vectors.row(row++) = fwd.embeddings.row(p);
    }
  }
  return table;
}

inline void save_embeddings(const EmbeddingTable& t, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw StageError("save_embeddings: cannot open " + path);
  json header{{"schema", 1}, {"kind", "embeddings"}, {"dim", t.dim}, {"count", t.keys.size()}};
  os << header.dump() << "\n";
  for (size_t i = 0; i < t.keys.size(); ++i) {
    gen::detail::put_u32(os, t.keys[i].first);
    gen::detail::put_u32(os, t.keys[i].second);
    os.write(reinterpret_cast<const char*>(t.vectors.row(static_cast<Eigen::Index>(i)).data()),
             static_cast<std::streamsize>(sizeof(float) * t.dim));
  }
  if (!os) throw StageError("save_embeddings: write failed for " + path);
}

inline EmbeddingTable load_embeddings(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw StageError("load_embeddings: cannot open " + path);
  std::string line;
  if (!std::getline(is, line)) throw StageError("load_embeddings: missing header in " + path);
  json header = json::parse(line);
  if (header.value("kind", "") != "embeddings")
    throw StageError("load_embeddings: not an embeddings file: " + path);
  EmbeddingTable t;
  t.dim = header.at("dim").get<uint32_t>();
  size_t count = header.at("count").get<size_t>();
  t.keys.resize(count);
  t.vectors.resize(static_cast<Eigen::Index>(count), t.dim);
  for (size_t i = 0; i < count; ++i) {
    t.keys[i].first = gen::detail::get_u32(is);
    t.keys[i].second = gen::detail::get_u32(is);
    is.read(reinterpret_cast<char*>(t.vectors.row(static_cast<Eigen::Index>(i)).data()),
            static_cast<std::streamsize>(sizeof(float) * t.dim));
  }
  if (!is) throw StageError("load_embeddings: truncated file " + path);
  return t;
}

}  // namespace ssw::net
