#pragma once
// Experiment harness. An ExperimentSpec resolves into a staged pipeline
// (dataset -> model -> embeddings / targets -> probes); every stage artifact
// is cached under a content-addressed key derived from the canonical JSON of
// everything that determines it, so reruns and overlapping experiments reuse
// work. Per-seed rows are aggregated into a ResultBundle (result.json plus
// one or more CSV files per experiment kind).

#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "ssw/gen.hpp"
#include "ssw/lda.hpp"
#include "ssw/probe.hpp"
#include "ssw/targets.hpp"
#include "ssw/train.hpp"

namespace ssw::exp {

namespace fs = std::filesystem;
using json = nlohmann::json;
using net::MatF;

// ---------------------------------------------------------------------------
// Formatting, CSV, atomic writes, content keys

inline std::string fmt_g(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return std::string(buf);
}

struct CsvTable {
  std::vector<std::string> columns;
  std::vector<std::vector<std::string>> rows;

  CsvTable() = default;
  explicit CsvTable(std::vector<std::string> cols) : columns(std::move(cols)) {}

  void add_row(std::vector<std::string> row) {
    if (row.size() != columns.size())
      throw StageError("CsvTable: row has " + std::to_string(row.size()) + " fields, expected " +
                       std::to_string(columns.size()));
    rows.push_back(std::move(row));
  }

  std::string to_string() const {
    std::string out;
    auto emit = [&out](const std::vector<std::string>& fields) {
      for (size_t i = 0; i < fields.size(); ++i) {
        if (i) out += ',';
        out += fields[i];
      }
      out += '\n';
    };
    emit(columns);
    for (const auto& r : rows) emit(r);
    return out;
  }
};

// Each writer gets a private temp name so concurrent producers of the same
// (deterministic, identical) artifact can't interleave partial writes; the
// atomic rename means readers only ever see complete files and the last
// rename wins harmlessly.
inline fs::path private_tmp_name(const fs::path& path) {
  static std::atomic<uint64_t> counter{0};
  fs::path tmp = path;
  tmp += ".tmp." + std::to_string(static_cast<long>(::getpid())) + "." +
         std::to_string(counter.fetch_add(1));
  return tmp;
}

inline void write_text_atomic(const fs::path& path, const std::string& content) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = private_tmp_name(path);
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    os << content;
    if (!os) throw StageError("write_text_atomic: write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

// Writers first save to a private temp name, then rename, so a crash can never
// leave a half-written artifact under the final name.
template <typename SaveFn>
inline void save_file_atomic(const fs::path& path, SaveFn&& save) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = private_tmp_name(path);
  save(tmp.string());
  fs::rename(tmp, path);
}

inline uint64_t fnv1a64(std::string_view s) {
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

// Content key of a stage descriptor: FNV-1a over the canonical (sorted-key)
// JSON dump, rendered as 16 hex digits.
inline std::string key_of(const json& descriptor) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(fnv1a64(descriptor.dump())));
  return std::string(buf);
}

// ---------------------------------------------------------------------------
// Experiment kinds and specs

enum class ExperimentKind {
  ConjugateSuffstat,
  ConjugateMoments,
  ConjugateOod,
  Rectangles,
  HmmTargets,
  LdaTopics,
  LdaHeatmap,
  HmmLdaSweep,
  Memorization,
  Parsimonious,
  HyperSweep,
};

inline const char* kind_name(ExperimentKind k) {
  switch (k) {
    case ExperimentKind::ConjugateSuffstat: return "conjugate_suffstat";
    case ExperimentKind::ConjugateMoments: return "conjugate_moments";
    case ExperimentKind::ConjugateOod: return "conjugate_ood";
    case ExperimentKind::Rectangles: return "rectangles";
    case ExperimentKind::HmmTargets: return "hmm_targets";
    case ExperimentKind::LdaTopics: return "lda_topics";
    case ExperimentKind::LdaHeatmap: return "lda_heatmap";
    case ExperimentKind::HmmLdaSweep: return "hmm_lda_sweep";
    case ExperimentKind::Memorization: return "memorization";
    case ExperimentKind::Parsimonious: return "parsimonious";
    case ExperimentKind::HyperSweep: return "hyper_sweep";
  }
  throw ConfigError("kind_name: unknown experiment kind");
}

inline ExperimentKind kind_from_name(const std::string& s) {
  for (ExperimentKind k :
       {ExperimentKind::ConjugateSuffstat, ExperimentKind::ConjugateMoments,
        ExperimentKind::ConjugateOod, ExperimentKind::Rectangles, ExperimentKind::HmmTargets,
        ExperimentKind::LdaTopics, ExperimentKind::LdaHeatmap, ExperimentKind::HmmLdaSweep,
        ExperimentKind::Memorization, ExperimentKind::Parsimonious, ExperimentKind::HyperSweep})
    if (s == kind_name(k)) return k;
  throw ConfigError("experiment kind: unknown name '" + s + "'");
}

// True for kinds that operate on a conjugate family chosen via spec.family.
inline bool kind_needs_conjugate_family(ExperimentKind k) {
  switch (k) {
    case ExperimentKind::ConjugateSuffstat:
    case ExperimentKind::ConjugateMoments:
    case ExperimentKind::ConjugateOod:
    case ExperimentKind::Memorization:
    case ExperimentKind::Parsimonious:
    case ExperimentKind::HyperSweep: return true;
    default: return false;
  }
}

inline gen::Family family_for_kind(ExperimentKind k, gen::Family spec_family) {
  switch (k) {
    case ExperimentKind::Rectangles: return gen::Family::Rectangles;
    case ExperimentKind::HmmTargets: return gen::Family::Hmm;
    case ExperimentKind::LdaTopics:
    case ExperimentKind::LdaHeatmap: return gen::Family::Lda;
    case ExperimentKind::HmmLdaSweep: return gen::Family::HmmLda;
    default: return spec_family;
  }
}

struct ExperimentSpec {
  ExperimentKind kind = ExperimentKind::ConjugateSuffstat;
  std::string name;  // defaults to kind_name(kind)
  gen::Family family = gen::Family::GaussianGamma;
  std::vector<uint64_t> seeds = {0};
  double scale = 1.0;
  std::string out_dir = "out";
  json gen_overrides = json::object();    // merged onto the kind's default generator config
  json arch_overrides = json::object();   // merged onto the default architecture
  json train_overrides = json::object();  // merged onto the default trainer config
  json probe_overrides = json::object();  // merged onto the default probe config
  json options = json::object();          // kind-specific knobs (grids, iteration counts, ...)
  uint32_t workers = 1;                   // execution detail; never part of cache keys

  std::string display_name() const { return name.empty() ? kind_name(kind) : name; }

  void validate() const {
    if (seeds.empty()) throw ConfigError("ExperimentSpec.seeds: must be non-empty");
    if (!(scale > 0.0 && scale <= 1.0))
      throw ConfigError("ExperimentSpec.scale: must be in (0, 1]");
    if (out_dir.empty()) throw ConfigError("ExperimentSpec.out_dir: must be non-empty");
    if (workers == 0) throw ConfigError("ExperimentSpec.workers: must be > 0");
    for (const json* j : {&gen_overrides, &arch_overrides, &train_overrides, &probe_overrides,
                          &options})
      if (!j->is_object()) throw ConfigError("ExperimentSpec: overrides must be JSON objects");
    if (kind_needs_conjugate_family(kind) && family != gen::Family::GaussianGamma &&
        family != gen::Family::BetaBernoulli && family != gen::Family::GammaExponential)
      throw ConfigError(std::string("ExperimentSpec.family: kind '") + kind_name(kind) +
                        "' needs a conjugate family");
  }
};

inline json spec_to_json(const ExperimentSpec& s) {
  return json{{"kind", kind_name(s.kind)},
              {"name", s.display_name()},
              {"family", gen::family_name(s.family)},
              {"seeds", s.seeds},
              {"scale", s.scale},
              {"out_dir", s.out_dir},
              {"gen", s.gen_overrides},
              {"arch", s.arch_overrides},
              {"train", s.train_overrides},
              {"probe", s.probe_overrides},
              {"options", s.options},
              {"workers", s.workers}};
}

inline ExperimentSpec spec_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("experiment spec: expected a JSON object");
  static const std::vector<std::string> allowed = {"kind",  "name",  "family", "seeds",
                                                   "scale", "out_dir", "gen",  "arch",
                                                   "train", "probe", "options", "workers"};
  for (auto it = j.begin(); it != j.end(); ++it)
    if (std::find(allowed.begin(), allowed.end(), it.key()) == allowed.end())
      throw ConfigError("experiment spec: unknown key '" + it.key() + "'");
  ExperimentSpec s;
  if (j.contains("kind")) s.kind = kind_from_name(j.at("kind").get<std::string>());
  if (j.contains("name")) j.at("name").get_to(s.name);
  if (j.contains("family")) s.family = gen::family_from_name(j.at("family").get<std::string>());
  if (j.contains("seeds")) j.at("seeds").get_to(s.seeds);
  if (j.contains("scale")) j.at("scale").get_to(s.scale);
  if (j.contains("out_dir")) j.at("out_dir").get_to(s.out_dir);
  if (j.contains("gen")) s.gen_overrides = j.at("gen");
  if (j.contains("arch")) s.arch_overrides = j.at("arch");
  if (j.contains("train")) s.train_overrides = j.at("train");
  if (j.contains("probe")) s.probe_overrides = j.at("probe");
  if (j.contains("options")) s.options = j.at("options");
  if (j.contains("workers")) j.at("workers").get_to(s.workers);
  s.validate();
  return s;
}

// Hash over everything that determines results (drops out_dir/workers/name).
inline std::string config_hash(const ExperimentSpec& s) {
  json j = spec_to_json(s);
  j.erase("out_dir");
  j.erase("workers");
  j.erase("name");
  return key_of(j);
}

// ---------------------------------------------------------------------------
// Defaults and scaling. `scale` shrinks dataset size and sequence length
// proportionally (with floors); it never swaps in a different generator or
// architecture. Rectangle and topic-model sequence lengths are part of the
// task definition, so only their dataset sizes shrink.

inline uint32_t scaled_count(uint32_t full, double scale, uint32_t floor_v) {
  auto v = static_cast<uint32_t>(std::llround(static_cast<double>(full) * scale));
  return std::max(v, floor_v);
}

inline gen::GenConfig default_gen(gen::Family f, double scale, uint64_t seed) {
  using gen::Family;
  switch (f) {
    case Family::GaussianGamma:
    case Family::BetaBernoulli:
    case Family::GammaExponential: {
      gen::ConjugateConfig c;
      c.family = f;
      if (f == Family::GaussianGamma)
        c.hyper = {5.0, 1.0, 1.0, 1.0};  // alpha0, beta0, mu0, lambda0
      else if (f == Family::BetaBernoulli)
        c.hyper = {2.0, 8.0};
      else
        c.hyper = {2.0, 4.0};
      c.num_sequences = scaled_count(14000, scale, 70);
      c.seq_len = scaled_count(500, scale, 16);
      c.seed = seed;
      return c;
    }
    case Family::Rectangles: {
      gen::RectanglesConfig c;
      c.grid = gen::GridSpec::equal();
      c.num_sequences = scaled_count(40000, scale, 120);
      c.seq_len = 50;  // observation budget is part of the task, not the scale
      c.seed = seed;
      return c;
    }
    case Family::Hmm: {
      gen::HmmConfig c;
      c.num_sequences = scaled_count(14000, scale, 70);
      c.seq_len = scaled_count(500, scale, 16);
      c.seed = seed;
      return c;
    }
    case Family::Lda: {
      gen::LdaConfig c;
      c.num_sequences = scaled_count(14000, scale, 70);
      c.seed = seed;  // seq_len 100 fixed: document length defines the task
      return c;
    }
    case Family::HmmLda: {
      gen::HmmLdaConfig c;
      c.num_sequences = scaled_count(12000, scale, 60);
      c.seq_len = scaled_count(400, scale, 16);
      c.seed = seed;
      return c;
    }
  }
  throw ConfigError("default_gen: unknown family");
}

inline uint32_t config_seq_len(const gen::GenConfig& c) {
  return std::visit([](const auto& g) -> uint32_t { return g.seq_len; }, c);
}

inline uint32_t config_vocab(const gen::GenConfig& c) {
  if (const auto* g = std::get_if<gen::ConjugateConfig>(&c))
    return g->family == gen::Family::BetaBernoulli ? 2u : 0u;
  if (const auto* g = std::get_if<gen::HmmConfig>(&c)) return g->vocab;
  if (const auto* g = std::get_if<gen::LdaConfig>(&c)) return g->vocab;
  if (const auto* g = std::get_if<gen::HmmLdaConfig>(&c)) return g->lda.vocab;
  return 0;
}

inline net::ArchConfig default_arch(const gen::GenConfig& g) {
  net::ArchConfig a;
  a.max_seq_len = config_seq_len(g);
  switch (gen::config_family(g)) {
    case gen::Family::GaussianGamma:
    case gen::Family::GammaExponential:
      a.input_mode = net::InputMode::LinearContinuous;
      a.input_dim = 1;
      a.output_mode = net::OutputMode::ScalarHead;
      a.output_dim = 1;
      a.gaussian_head = true;
      break;
    case gen::Family::BetaBernoulli:
      a.input_mode = net::InputMode::TokenEmbedding;
      a.output_mode = net::OutputMode::CategoricalHead;
      a.vocab = 2;
      break;
    case gen::Family::Rectangles:
      a.input_mode = net::InputMode::LinearContinuous;
      a.input_dim = 2;
      a.output_mode = net::OutputMode::ScalarHead;
      a.output_dim = 2;
      a.gaussian_head = true;
      break;
    case gen::Family::Hmm:
      a.input_mode = net::InputMode::TokenEmbedding;
      a.output_mode = net::OutputMode::CategoricalHead;
      a.vocab = config_vocab(g);
      break;
    case gen::Family::Lda:
    case gen::Family::HmmLda:
      a.input_mode = net::InputMode::TokenEmbedding;
      a.output_mode = net::OutputMode::CategoricalHead;
      a.vocab = config_vocab(g);
      a.num_layers = 4;
      break;
  }
  return a;
}

inline net::TrainConfig default_train(gen::Family f) {
  net::TrainConfig t;
  if (f == gen::Family::Lda || f == gen::Family::HmmLda) {
    t.learning_rate = 1e-4;
    t.batch_size = 16;
  }
  return t;
}

inline probe::ProbeConfig default_probe(gen::Family f) {
  probe::ProbeConfig p;
  if (f == gen::Family::Lda || f == gen::Family::HmmLda) p.batch_size = 16;
  return p;
}

// Out-of-distribution prior used by the transfer/refit evaluation.
inline std::vector<double> ood_hyper(gen::Family f) {
  switch (f) {
    case gen::Family::GaussianGamma: return {2.0, 1.0, 5.0, 1.0};
    case gen::Family::BetaBernoulli: return {8.0, 2.0};
    case gen::Family::GammaExponential: return {2.0, 1.0};
    default: throw ConfigError("ood_hyper: not a conjugate family");
  }
}

// ---------------------------------------------------------------------------
// Probe (de)serialization for the JSON stage cache. Float values survive the
// round trip exactly: float -> double is exact and nlohmann prints doubles
// with shortest round-trip precision.

inline json probe_to_json(const probe::Probe& p) {
  json tensors = json::array();
  for (size_t k = 0; k < p.params.tensors.size(); ++k) {
    const MatF& t = p.params.tensors[k];
    std::vector<double> data;
    data.reserve(static_cast<size_t>(t.size()));
    for (Eigen::Index i = 0; i < t.rows(); ++i)
      for (Eigen::Index j = 0; j < t.cols(); ++j) data.push_back(static_cast<double>(t(i, j)));
    tensors.push_back(json{{"name", p.params.names[k]},
                           {"rows", t.rows()},
                           {"cols", t.cols()},
                           {"data", data}});
  }
  return json{{"head", probe::probe_head_name(p.head)},
              {"loss", p.loss},
              {"simplex", p.simplex},
              {"chosen_lr", p.chosen_lr},
              {"best_val_loss", p.best_val_loss},
              {"hidden_dim", p.hidden_dim},
              {"tensors", tensors}};
}

inline probe::Probe probe_from_json(const json& j) {
  probe::Probe p;
  p.head = probe::probe_head_from_name(j.at("head").get<std::string>());
  p.loss = j.at("loss").get<std::string>();
  p.simplex = j.at("simplex").get<bool>();
  p.chosen_lr = j.at("chosen_lr").get<double>();
  p.best_val_loss = j.at("best_val_loss").get<double>();
  p.hidden_dim = j.at("hidden_dim").get<uint32_t>();
  for (const auto& tj : j.at("tensors")) {
    MatF t(tj.at("rows").get<Eigen::Index>(), tj.at("cols").get<Eigen::Index>());
    const auto& data = tj.at("data");
    size_t idx = 0;
    for (Eigen::Index i = 0; i < t.rows(); ++i)
      for (Eigen::Index jj = 0; jj < t.cols(); ++jj)
        t(i, jj) = static_cast<float>(data.at(idx++).get<double>());
    p.params.add(tj.at("name").get<std::string>(), std::move(t));
  }
  return p;
}

// ---------------------------------------------------------------------------
// Cross-position alignment: joins an embedding table and a target table on
// sequence_id alone (both must hold exactly one row per sequence). Used when
// the probed quantity is defined at a different prefix length than the
// embedding, e.g. decoding p(z | shorter prefix) from a longer prefix.

inline probe::AlignedData align_cross(const net::EmbeddingTable& emb,
                                      const infer::TargetTable& tgt) {
  std::map<uint32_t, Eigen::Index> by_seq;
  for (size_t i = 0; i < emb.keys.size(); ++i) {
    if (!by_seq.emplace(emb.keys[i].first, static_cast<Eigen::Index>(i)).second)
      throw StageError("align_cross: embedding table has multiple positions per sequence");
  }
  probe::AlignedData out;
  out.x.resize(static_cast<Eigen::Index>(tgt.records.size()), emb.vectors.cols());
  out.y.resize(static_cast<Eigen::Index>(tgt.records.size()), tgt.dim);
  Eigen::Index r = 0;
  size_t missing = 0;
  std::string first_missing;
  for (const auto& rec : tgt.records) {
    auto it = by_seq.find(rec.sequence_id);
    if (it == by_seq.end()) {
      if (missing == 0) first_missing = std::to_string(rec.sequence_id);
      ++missing;
      continue;
    }
    out.x.row(r) = emb.vectors.row(it->second);
    for (uint32_t j = 0; j < tgt.dim; ++j)
      out.y(r, static_cast<Eigen::Index>(j)) = static_cast<float>(rec.value[j]);
    ++r;
  }
  if (missing)
    throw StageError("align_cross: " + std::to_string(missing) +
                     " target sequences missing from embeddings (first: " + first_missing + ")");
  return out;
}

// ---------------------------------------------------------------------------
// Stage cache. Artifacts live under SSW_CACHE_DIR (or <out_dir>/cache) as
//   ds_<key>.bin  model_<key>.ckpt  emb_<key>.bin  tgt_<key>.jsonl
//   probe_<key>.json  eval_<key>.json  gibbs_<key>.json  rmap_<key>.json
// Unreadable/corrupt artifacts are silently regenerated.

class Stages {
 public:
  explicit Stages(fs::path root) : root_(std::move(root)) { fs::create_directories(root_); }

  static fs::path resolve_root(const std::string& out_dir) {
    const char* env = std::getenv("SSW_CACHE_DIR");
    if (env && *env) return fs::path(env);
    return fs::path(out_dir) / "cache";
  }

  const fs::path& root() const { return root_; }

  struct DsArtifact {
    std::string key;
    std::shared_ptr<const gen::Dataset> data;
  };

  DsArtifact dataset(const gen::GenConfig& cfg) {
    gen::validate_config(cfg);
    std::string key = key_of(json{{"stage", "dataset"}, {"config", gen::config_to_json(cfg)}});
    if (auto it = ds_memo_.find(key); it != ds_memo_.end()) return {key, it->second};
    fs::path path = root_ / ("ds_" + key + ".bin");
    std::shared_ptr<const gen::Dataset> d;
    if (fs::exists(path)) {
      try {
        d = std::make_shared<gen::Dataset>(gen::load_dataset(path.string()));
      } catch (const std::exception&) {
        d.reset();  // corrupt cache entry: fall through and regenerate
      }
    }
    if (!d) {
      gen::Dataset built = gen::generate(cfg);
      save_file_atomic(path, [&](const std::string& p) { gen::save_dataset(built, p); });
      d = std::make_shared<gen::Dataset>(std::move(built));
    }
    ds_memo_[key] = d;
    return {key, d};
  }

  struct ModelArtifact {
    std::string key;
    std::shared_ptr<const net::Transformer<float>> model;
    json info;  // best_val_loss, init_val_loss, best_epoch, diverged, loss curves
  };

  ModelArtifact model(const std::string& ds_key, const gen::Dataset& d,
                      const net::ArchConfig& arch, net::TrainConfig tcfg, uint32_t workers) {
    json train_id = json(tcfg);
    train_id.erase("workers");  // execution detail, not part of the result
    std::string key = key_of(
        json{{"stage", "model"}, {"dataset", ds_key}, {"arch", json(arch)}, {"train", train_id}});
    auto finish = [this, &key](std::shared_ptr<const net::Transformer<float>> m,
                               json info) -> ModelArtifact {
      if (info.value("diverged", false))
        throw StageError("model stage: training diverged (cached under " + key + ")");
      model_memo_[key] = {m, info};
      return {key, std::move(m), std::move(info)};
    };
    if (auto it = model_memo_.find(key); it != model_memo_.end())
      return finish(it->second.first, it->second.second);
    fs::path path = root_ / ("model_" + key + ".ckpt");
    if (fs::exists(path)) {
      try {
        json info;
        auto m = std::make_shared<net::Transformer<float>>(
            net::load_checkpoint(path.string(), &info));
        return finish(std::move(m), std::move(info));
      } catch (const StageError& e) {
        if (std::string(e.what()).find("diverged") != std::string::npos) throw;
        // otherwise: corrupt checkpoint, retrain below
      } catch (const std::exception&) {
      }
    }
    tcfg.workers = workers;
    net::TrainResult r = net::train(arch, d.set1(), d.set2(), tcfg);
    json train_curve = json::array(), val_curve = json::array();
    for (const auto& e : r.log) {
      train_curve.push_back(e.train_loss);
      val_curve.push_back(e.val_loss);
    }
    json info{{"best_val_loss", r.best_val_loss}, {"init_val_loss", r.init_val_loss},
              {"best_epoch", r.best_epoch},       {"diverged", r.diverged},
              {"train_loss", train_curve},        {"val_loss", val_curve}};
    save_file_atomic(path,
                     [&](const std::string& p) { net::save_checkpoint(r.model, p, info); });
    return finish(std::make_shared<net::Transformer<float>>(std::move(r.model)), std::move(info));
  }

  struct EmbArtifact {
    std::string key;
    std::shared_ptr<const net::EmbeddingTable> table;
  };

  EmbArtifact embeddings(const std::string& model_key, const net::Transformer<float>& model,
                         const std::string& ds_key, const gen::Dataset& d, int split,
                         const infer::PositionSpec& pos, bool bidirectional = false) {
    std::string key = key_of(json{{"stage", "embeddings"},
                                  {"model", model_key},
                                  {"dataset", ds_key},
                                  {"split", split},
                                  {"positions", pos.name()},
                                  {"bidirectional", bidirectional}});
    if (auto it = emb_memo_.find(key); it != emb_memo_.end()) return {key, it->second};
    fs::path path = root_ / ("emb_" + key + ".bin");
    std::shared_ptr<const net::EmbeddingTable> t;
    if (fs::exists(path)) {
      try {
        t = std::make_shared<net::EmbeddingTable>(net::load_embeddings(path.string()));
      } catch (const std::exception&) {
        t.reset();
      }
    }
    if (!t) {
      auto [span, offset] = split_span(d, split);
      net::EmbeddingTable built = net::embed(model, span, offset, pos, bidirectional);
      save_file_atomic(path, [&](const std::string& p) { net::save_embeddings(built, p); });
      t = std::make_shared<net::EmbeddingTable>(std::move(built));
    }
    emb_memo_[key] = t;
    return {key, t};
  }

  struct TgtArtifact {
    std::string key;
    std::shared_ptr<const infer::TargetTable> table;
  };

  TgtArtifact targets(const std::string& ds_key, const gen::Dataset& d, int split,
                      infer::TargetKind kind, const infer::PositionSpec& pos,
                      const infer::TargetOptions& opts = {}) {
    json opts_id{{"moment_mode",
                  opts.moment_mode == infer::MomentMode::Predictive ? "predictive"
                                                                    : "param_posterior"},
                 {"moment_k", opts.moment_k},
                 {"moment_scale", opts.moment_scale},
                 {"token_index", opts.token_index}};
    std::string key = key_of(json{{"stage", "targets"},
                                  {"dataset", ds_key},
                                  {"split", split},
                                  {"kind", infer::target_kind_name(kind)},
                                  {"positions", pos.name()},
                                  {"options", opts_id}});
    if (auto it = tgt_memo_.find(key); it != tgt_memo_.end()) return {key, it->second};
    fs::path path = root_ / ("tgt_" + key + ".jsonl");
    std::shared_ptr<const infer::TargetTable> t;
    if (fs::exists(path)) {
      try {
        auto loaded = std::make_shared<infer::TargetTable>(infer::load_targets(path.string()));
        if (loaded->kind == kind) t = std::move(loaded);
      } catch (const std::exception&) {
        t.reset();
      }
    }
    if (!t) {
      auto [span, offset] = split_span(d, split);
      infer::TargetTable built = infer::make_targets(d, span, offset, kind, pos, opts);
      save_file_atomic(path, [&](const std::string& p) { infer::save_targets(built, p); });
      t = std::make_shared<infer::TargetTable>(std::move(built));
    }
    tgt_memo_[key] = t;
    return {key, t};
  }

  // Generic cached computation storing a JSON document (probe fits, Gibbs
  // baselines, reverse maps). Returns {key, value}.
  std::pair<std::string, json> cached_json(const std::string& prefix, const json& descriptor,
                                           const std::function<json()>& compute) {
    std::string key = key_of(descriptor);
    std::string memo_key = prefix + key;
    if (auto it = json_memo_.find(memo_key); it != json_memo_.end()) return {key, it->second};
    fs::path path = root_ / (prefix + "_" + key + ".json");
    if (fs::exists(path)) {
      try {
        std::ifstream is(path);
        json v = json::parse(is);
        json_memo_[memo_key] = v;
        return {key, v};
      } catch (const std::exception&) {
        // corrupt: recompute
      }
    }
    json v = compute();
    write_text_atomic(path, v.dump() + "\n");
    json_memo_[memo_key] = v;
    return {key, v};
  }

  static std::pair<std::span<const gen::Sequence>, uint32_t> split_span(const gen::Dataset& d,
                                                                        int split) {
    switch (split) {
      case 1: return {d.set1(), 0u};
      case 2: return {d.set2(), d.split.n1};
      case 3: return {d.set3(), d.split.n1 + d.split.n2};
      default: throw ConfigError("split_span: split must be 1, 2, or 3");
    }
  }

 private:
  fs::path root_;
  std::map<std::string, std::shared_ptr<const gen::Dataset>> ds_memo_;
  std::map<std::string, std::pair<std::shared_ptr<const net::Transformer<float>>, json>>
      model_memo_;
  std::map<std::string, std::shared_ptr<const net::EmbeddingTable>> emb_memo_;
  std::map<std::string, std::shared_ptr<const infer::TargetTable>> tgt_memo_;
  std::map<std::string, json> json_memo_;
};

// ---------------------------------------------------------------------------
// Result bundles

struct ResultBundle {
  json spec_json;
  std::vector<json> rows;  // one JSON object per (cell, seed); numeric fields aggregate
  json aggregates;         // cell -> metric -> {mean, stderr, n}
  json provenance;
  std::vector<json> errors;  // per-seed failure manifest
  std::vector<std::pair<std::string, CsvTable>> csvs;
};

inline json aggregate_rows(const std::vector<json>& rows) {
  std::map<std::string, std::map<std::string, std::vector<double>>> acc;
  for (const auto& r : rows) {
    std::string cell = r.value("cell", std::string("default"));
    for (auto it = r.begin(); it != r.end(); ++it) {
      if (it.key() == "seed" || it.key() == "cell") continue;
      if (it->is_number()) acc[cell][it.key()].push_back(it->get<double>());
    }
  }
  json out = json::object();
  for (const auto& [cell, metrics] : acc) {
    json m = json::object();
    for (const auto& [k, v] : metrics) {
      auto [mean, se] = mean_stderr(v);
      m[k] = json{{"mean", mean}, {"stderr", se}, {"n", v.size()}};
    }
    out[cell] = m;
  }
  return out;
}

inline std::string git_commit_hash() {
  fs::path dir = fs::current_path();
  for (int up = 0; up < 12; ++up) {
    fs::path head_path = dir / ".git" / "HEAD";
    if (fs::exists(head_path)) {
      std::ifstream is(head_path);
      std::string head;
      std::getline(is, head);
      if (head.rfind("ref: ", 0) == 0) {
        std::string ref = head.substr(5);
        std::ifstream rs(dir / ".git" / ref);
        std::string h;
        if (rs && std::getline(rs, h) && !h.empty()) return h;
        std::ifstream ps(dir / ".git" / "packed-refs");
        std::string line;
        while (std::getline(ps, line))
          if (line.size() > 41 && line[40] == ' ' && line.substr(41) == ref)
            return line.substr(0, 40);
        return "unknown";
      }
      return head.empty() ? "unknown" : head;
    }
    if (!dir.has_parent_path() || dir.parent_path() == dir) break;
    dir = dir.parent_path();
  }
  return "unknown";
}

inline void write_bundle(const ResultBundle& b, const std::string& out_dir) {
  for (const auto& [name, table] : b.csvs)
    write_text_atomic(fs::path(out_dir) / name, table.to_string());
  json names = json::array();
  for (const auto& [name, table] : b.csvs) names.push_back(name);
  json result{{"spec", b.spec_json},     {"rows", b.rows},     {"aggregates", b.aggregates},
              {"provenance", b.provenance}, {"errors", b.errors}, {"csv_files", names}};
  write_text_atomic(fs::path(out_dir) / "result.json", result.dump(2) + "\n");
}

// Recomputes aggregates from the per-row records and renders a summary table;
// throws StageError if the stored aggregates cannot be reproduced.
inline std::string verify_and_render(const json& result) {
  if (!result.is_object() || !result.contains("rows") || !result.contains("aggregates"))
    throw StageError("report: result.json is missing rows/aggregates");
  std::vector<json> rows;
  for (const auto& r : result.at("rows")) rows.push_back(r);
  json recomputed = aggregate_rows(rows);
  if (recomputed != result.at("aggregates"))
    throw StageError("report: stored aggregates do not match the per-seed rows");
  std::string out;
  out += "experiment: " + result.at("spec").value("name", std::string("?")) + "\n";
  out += "config_hash: " +
         result.value("provenance", json::object()).value("config_hash", std::string("?")) + "\n";
  out += "rows: " + std::to_string(rows.size()) + "\n";
  CsvTable t({"cell", "metric", "mean", "stderr", "n"});
  for (auto cell = recomputed.begin(); cell != recomputed.end(); ++cell)
    for (auto metric = cell->begin(); metric != cell->end(); ++metric)
      t.add_row({cell.key(), metric.key(), fmt_g(metric->at("mean").get<double>()),
                 fmt_g(metric->at("stderr").get<double>()),
                 std::to_string(metric->at("n").get<size_t>())});
  out += t.to_string();
  const auto& errors = result.value("errors", json::array());
  if (!errors.empty()) {
    out += "errors:\n";
    for (const auto& e : errors)
      out += "  seed " + std::to_string(e.value("seed", uint64_t{0})) + ": " +
             e.value("error", std::string("?")) + "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Runner

class Runner {
 public:
  explicit Runner(const ExperimentSpec& spec)
      : spec_(spec),
        family_(family_for_kind(spec.kind, spec.family)),
        stages_(Stages::resolve_root(spec.out_dir)) {}

  ResultBundle run() {
    bundle_.spec_json = spec_to_json(spec_);
    init_tables();
    std::string first_error;
    for (size_t i = 0; i < spec_.seeds.size(); ++i) {
      rep_index_ = i;
      probe_counter_ = 0;
      try {
        seed_pass(spec_.seeds[i]);
      } catch (const std::exception& e) {
        if (first_error.empty()) first_error = e.what();
        bundle_.errors.push_back(json{{"seed", spec_.seeds[i]}, {"error", e.what()}});
      }
    }
    if (bundle_.rows.empty() && !bundle_.errors.empty())
      throw StageError("experiment '" + spec_.display_name() +
                       "': all replicates failed: " + first_error);
    bundle_.aggregates = aggregate_rows(bundle_.rows);
    bundle_.provenance = json{{"git_commit", git_commit_hash()},
                              {"config_hash", config_hash(spec_)},
                              {"scale", spec_.scale}};
    return std::move(bundle_);
  }

 private:
  // -- shared plumbing -------------------------------------------------------

  struct Rep {
    uint64_t seed = 0;   // replicate seed as listed in the spec
    uint64_t ds = 0;     // dataset stream
    uint64_t ds2 = 0;    // secondary dataset stream (OOD)
    uint64_t train = 0;  // trainer stream
    uint64_t probe = 0;  // probe stream
    uint64_t gibbs = 0;  // baseline sampler stream
  };

  static Rep make_rep(uint64_t seed) {
    return Rep{seed,
               derive_seed(seed, 11),
               derive_seed(seed, 12),
               derive_seed(seed, 2),
               derive_seed(seed, 3),
               derive_seed(seed, 4)};
  }

  CsvTable& table(const std::string& name, std::vector<std::string> cols) {
    for (auto& [n, t] : bundle_.csvs)
      if (n == name) return t;
    bundle_.csvs.emplace_back(name, CsvTable(std::move(cols)));
    return bundle_.csvs.back().second;
  }

  json& add_row(json row) {
    bundle_.rows.push_back(std::move(row));
    return bundle_.rows.back();
  }

  gen::GenConfig resolved_gen(uint64_t ds_seed, const json& cell_patch = json::object()) const {
    json j = gen::config_to_json(default_gen(family_, spec_.scale, 0));
    j.merge_patch(spec_.gen_overrides);
    j.merge_patch(cell_patch);
    j["seed"] = ds_seed;
    gen::GenConfig c = gen::config_from_json(j);
    gen::validate_config(c);
    return c;
  }

  net::ArchConfig resolved_arch(const gen::GenConfig& g,
                                const json& cell_patch = json::object()) const {
    json j = json(default_arch(g));
    j.merge_patch(spec_.arch_overrides);
    j.merge_patch(cell_patch);
    auto a = j.get<net::ArchConfig>();
    a.validate();
    return a;
  }

  net::TrainConfig resolved_train(uint64_t train_seed) const {
    json j = json(default_train(family_));
    j.merge_patch(spec_.train_overrides);
    auto t = j.get<net::TrainConfig>();
    t.seed = train_seed;
    t.validate();
    return t;
  }

  probe::ProbeConfig resolved_probe(uint64_t seed, const json& cell_patch) const {
    json j = json(default_probe(family_));
    j.merge_patch(spec_.probe_overrides);
    j.merge_patch(cell_patch);
    auto p = j.get<probe::ProbeConfig>();
    p.seed = seed;
    p.validate();
    return p;
  }

  uint64_t next_probe_seed(const Rep& rep) { return derive_seed(rep.probe, probe_counter_++); }

  struct Pipe {
    std::string ds_key;
    std::shared_ptr<const gen::Dataset> ds;
    std::string model_key;
    std::shared_ptr<const net::Transformer<float>> model;
    json model_info;
  };

  Pipe pipeline(uint64_t ds_seed, uint64_t train_seed, const json& gen_patch = json::object(),
                const json& arch_patch = json::object()) {
    gen::GenConfig g = resolved_gen(ds_seed, gen_patch);
    auto ds = stages_.dataset(g);
    net::ArchConfig arch = resolved_arch(g, arch_patch);
    net::TrainConfig tc = resolved_train(train_seed);
    auto m = stages_.model(ds.key, *ds.data, arch, tc, spec_.workers);
    return Pipe{ds.key, ds.data, m.key, m.model, m.info};
  }

  struct ProbeOutcome {
    std::string key;  // cache key of the fitted probe stage
    probe::ProbeReport report;
    probe::Probe model;
    probe::AlignedData eval;
    std::shared_ptr<const infer::TargetTable> eval_targets;
  };

  // Fit on (etr, ttr), evaluate on (eev, tev). `cross` joins on sequence_id
  // alone (tables at different positions); otherwise on (sequence_id, position).
  ProbeOutcome probe_stage(const Stages::EmbArtifact& etr, const Stages::TgtArtifact& ttr,
                           const Stages::EmbArtifact& eev, const Stages::TgtArtifact& tev,
                           const probe::ProbeConfig& pcfg, bool simplex, bool cross = false) {
    probe::AlignedData tr =
        cross ? align_cross(*etr.table, *ttr.table) : probe::align(*etr.table, *ttr.table);
    probe::AlignedData ev =
        cross ? align_cross(*eev.table, *tev.table) : probe::align(*eev.table, *tev.table);
    json desc{{"stage", "probe"},   {"xtr", etr.key},        {"ytr", ttr.key},
              {"xev", eev.key},     {"yev", tev.key},        {"config", json(pcfg)},
              {"simplex", simplex}, {"cross", cross}};
    auto [key, out] = stages_.cached_json("probe", desc, [&]() {
      auto [p, rep] = probe::fit_eval(tr.x, tr.y, ev.x, ev.y, pcfg, simplex);
      return json{{"report", probe::report_to_json(rep)}, {"probe", probe_to_json(p)}};
    });
    ProbeOutcome o;
    o.key = key;
    o.report = probe::report_from_json(out.at("report"));
    o.model = probe_from_json(out.at("probe"));
    o.eval = std::move(ev);
    o.eval_targets = tev.table;
    return o;
  }

  // Evaluate an already-fitted probe on a different (embedding, target) pair.
  probe::ProbeReport probe_transfer(const ProbeOutcome& fitted, const Stages::EmbArtifact& eev,
                                    const Stages::TgtArtifact& tev,
                                    probe::AlignedData* eval_out = nullptr) {
    probe::AlignedData ev = probe::align(*eev.table, *tev.table);
    json desc{{"stage", "probe_eval"}, {"probe", fitted.key}, {"xev", eev.key}, {"yev", tev.key}};
    auto [key, out] = stages_.cached_json("eval", desc, [&]() {
      return probe::report_to_json(probe::eval_probe(fitted.model, ev.x, ev.y));
    });
    (void)key;
    if (eval_out) *eval_out = std::move(ev);
    return probe::report_from_json(out);
  }

  static double pearson_min(const probe::ProbeReport& r) {
    double m = std::numeric_limits<double>::infinity();
    for (size_t j = 0; j < r.pearson_r.size(); ++j) {
      bool degen = std::find(r.degenerate_dims.begin(), r.degenerate_dims.end(),
                             static_cast<int>(j)) != r.degenerate_dims.end();
      if (!degen) m = std::min(m, r.pearson_r[j]);
    }
    return std::isfinite(m) ? m : 0.0;
  }

  // Adds per-dim recovery rows (one CSV row per target dim) and, when
  // `scatter` is non-null, truth/prediction pairs for every eval example.
  void emit_recovery(CsvTable& per_dim, CsvTable* scatter, const std::string& cell,
                     uint64_t seed, const ProbeOutcome& po) {
    const auto& r = po.report;
    for (size_t j = 0; j < r.pearson_r.size(); ++j)
      per_dim.add_row({gen::family_name(family_), fmt_g(spec_.scale), std::to_string(seed), cell,
                       std::to_string(j), fmt_g(r.pearson_r[j]),
                       j < r.scaled_mse_dims.size() ? fmt_g(r.scaled_mse_dims[j]) : "0"});
    if (!scatter) return;
    MatF pred = po.model.predict(po.eval.x);
    const auto& recs = po.eval_targets->records;
    for (Eigen::Index i = 0; i < pred.rows(); ++i)
      for (Eigen::Index j = 0; j < pred.cols(); ++j)
        scatter->add_row({gen::family_name(family_), fmt_g(spec_.scale), std::to_string(seed),
                          cell, std::to_string(j),
                          std::to_string(recs[static_cast<size_t>(i)].sequence_id),
                          fmt_g(static_cast<double>(po.eval.y(i, j))),
                          fmt_g(static_cast<double>(pred(i, j)))});
  }

  // -- per-kind table setup --------------------------------------------------

  void init_tables() {
    switch (spec_.kind) {
      case ExperimentKind::ConjugateSuffstat:
        table("suffstat_recovery.csv",
              {"family", "scale", "seed", "cell", "dim", "pearson_r", "scaled_mse"});
        table("suffstat_scatter.csv",
              {"family", "scale", "seed", "cell", "dim", "sequence_id", "truth", "prediction"});
        break;
      case ExperimentKind::ConjugateMoments:
        table("posterior_moments.csv",
              {"family", "scale", "seed", "cell", "dim", "pearson_r", "scaled_mse"});
        table("moments_scatter.csv",
              {"family", "scale", "seed", "cell", "dim", "sequence_id", "truth", "prediction"});
        break;
      case ExperimentKind::ConjugateOod:
        table("suffstat_ood.csv",
              {"family", "scale", "seed", "cell", "dim", "pearson_r", "scaled_mse"});
        table("suffstat_ood_scatter.csv",
              {"family", "scale", "seed", "cell", "dim", "sequence_id", "truth", "prediction"});
        break;
      case ExperimentKind::Rectangles:
        table("rectangles.csv", {"scale", "seed", "grid", "seq_len", "accuracy",
                                 "accuracy_truth", "sq_loss", "tv"});
        table("rectangles_pca.csv",
              {"scale", "seed", "grid", "seq_len", "sequence_id", "pc1", "pc2", "hypothesis",
               "center_x", "center_y", "width", "height"});
        break;
      case ExperimentKind::HmmTargets:
        table("hmm_targets.csv", {"scale", "seed", "delta", "cell", "target_kind", "embedding",
                                  "accuracy", "sq_loss", "tv"});
        table("hmm_nll.csv",
              {"scale", "seed", "delta", "model_nll", "oracle_nll", "nll_ratio"});
        break;
      case ExperimentKind::LdaTopics:
        table("lda_topics.csv",
              {"scale", "seed", "alpha", "method", "accuracy", "sq_loss", "tv"});
        break;
      case ExperimentKind::LdaHeatmap:
        table("lda_heatmap.csv",
              {"scale", "seed", "model", "dataset", "accuracy", "sq_loss", "tv"});
        table("lda_heatmap_summary.csv",
              {"scale", "seed", "diag_mean", "offdiag_mean", "gap"});
        break;
      case ExperimentKind::HmmLdaSweep:
        table("hmm_lda_sweep.csv",
              {"scale", "seed", "semantic_prob", "accuracy", "sq_loss", "tv", "chance"});
        break;
      case ExperimentKind::Memorization:
        table("memorization.csv",
              {"family", "scale", "seed", "token_index", "pearson_r", "scaled_mse"});
        table("memorization_suffstat.csv",
              {"family", "scale", "seed", "dim", "pearson_r", "scaled_mse"});
        table("memorization_scatter.csv", {"family", "scale", "seed", "token_index",
                                           "sequence_id", "truth", "prediction"});
        break;
      case ExperimentKind::Parsimonious:
        table("parsimonious.csv",
              {"family", "scale", "seed", "hidden_dim", "variance_explained", "sq_loss"});
        break;
      case ExperimentKind::HyperSweep:
        table("hyper_sweep.csv",
              {"family", "scale", "seed", "hidden_dim", "num_layers", "num_heads", "target_dim",
               "scaled_mse_target", "scaled_mse", "pearson_min"});
        break;
    }
  }

  void seed_pass(uint64_t seed) {
    Rep rep = make_rep(seed);
    switch (spec_.kind) {
      case ExperimentKind::ConjugateSuffstat: return pass_conjugate_suffstat(rep);
      case ExperimentKind::ConjugateMoments: return pass_conjugate_moments(rep);
      case ExperimentKind::ConjugateOod: return pass_conjugate_ood(rep);
      case ExperimentKind::Rectangles: return pass_rectangles(rep);
      case ExperimentKind::HmmTargets: return pass_hmm_targets(rep);
      case ExperimentKind::LdaTopics: return pass_lda_topics(rep);
      case ExperimentKind::LdaHeatmap: return pass_lda_heatmap(rep);
      case ExperimentKind::HmmLdaSweep: return pass_hmm_lda_sweep(rep);
      case ExperimentKind::Memorization: return pass_memorization(rep);
      case ExperimentKind::Parsimonious: return pass_parsimonious(rep);
      case ExperimentKind::HyperSweep: return pass_hyper_sweep(rep);
    }
    throw ConfigError("seed_pass: unknown experiment kind");
  }

  // -- kind: conjugate_suffstat ---------------------------------------------

  ProbeOutcome suffstat_probe(const Rep& rep, const Pipe& pipe,
                              const infer::PositionSpec& pos = infer::PositionSpec::last()) {
    auto emb2 = stages_.embeddings(pipe.model_key, *pipe.model, pipe.ds_key, *pipe.ds, 2, pos);
    auto emb3 = stages_.embeddings(pipe.model_key, *pipe.model, pipe.ds_key, *pipe.ds, 3, pos);
    auto tgt2 = stages_.targets(pipe.ds_key, *pipe.ds, 2, infer::TargetKind::SuffStat, pos);
    auto tgt3 = stages_.targets(pipe.ds_key, *pipe.ds, 3, infer::TargetKind::SuffStat, pos);
    probe::ProbeConfig pcfg =
        resolved_probe(next_probe_seed(rep), json{{"head", "linear"}, {"loss", "l2"}});
    return probe_stage(emb2, tgt2, emb3, tgt3, pcfg, /*simplex=*/false);
  }

  json recovery_row(const std::string& cell, const Rep& rep, const probe::ProbeReport& r) {
    json row{{"cell", cell},
             {"seed", rep.seed},
             {"scale", spec_.scale},
             {"pearson_min", pearson_min(r)},
             {"scaled_mse", r.scaled_mse},
             {"sq_loss", r.l2},
             {"chosen_lr", r.chosen_lr},
             {"pearson_dims", r.pearson_r},
             {"scaled_mse_dims", r.scaled_mse_dims}};
    return row;
  }

  void pass_conjugate_suffstat(const Rep& rep) {
    Pipe pipe = pipeline(rep.ds, rep.train);
    ProbeOutcome po = suffstat_probe(rep, pipe);
    add_row(recovery_row("in_dist", rep, po.report));
    emit_recovery(table("suffstat_recovery.csv", {}), &table("suffstat_scatter.csv", {}),
                  "in_dist", rep.seed, po);
  }

  // -- kind: conjugate_moments ------------------------------------------------

  void pass_conjugate_moments(const Rep& rep) {
    Pipe pipe = pipeline(rep.ds, rep.train);
    infer::PositionSpec pos = infer::PositionSpec::last();
    infer::TargetOptions opts;
    opts.moment_mode = spec_.options.value("moment_mode", std::string("predictive")) ==
                               std::string("param_posterior")
                           ? infer::MomentMode::ParamPosterior
                           : infer::MomentMode::Predictive;
    opts.moment_k = spec_.options.value("moment_k", 4);
    if (spec_.options.contains("moment_scale"))
      spec_.options.at("moment_scale").get_to(opts.moment_scale);
    else if (family_ == gen::Family::GammaExponential && opts.moment_k == 4)
      opts.moment_scale = {1.0, 0.1, 0.01, 0.001};  // keep higher moments comparable in range
    auto emb2 = stages_.embeddings(pipe.model_key, *pipe.model, pipe.ds_key, *pipe.ds, 2, pos);
    auto emb3 = stages_.embeddings(pipe.model_key, *pipe.model, pipe.ds_key, *pipe.ds, 3, pos);
    auto tgt2 =
        stages_.targets(pipe.ds_key, *pipe.ds, 2, infer::TargetKind::PostMoments, pos, opts);
    auto tgt3 =
        stages_.targets(pipe.ds_key, *pipe.ds, 3, infer::TargetKind::PostMoments, pos, opts);
    std::vector<std::string> heads = {"linear", "mlp"};
    if (spec_.options.contains("heads"))
      spec_.options.at("heads").get_to(heads);
    for (const std::string& head : heads) {
      probe::ProbeConfig pcfg =
          resolved_probe(next_probe_seed(rep), json{{"head", head}, {"loss", "l2"}});
      ProbeOutcome po = probe_stage(emb2, tgt2, emb3, tgt3, pcfg, /*simplex=*/false);
      json row = recovery_row(head, rep, po.report);
      row["moment_k"] = opts.moment_k;
      add_row(std::move(row));
      emit_recovery(table("posterior_moments.csv", {}), &table("moments_scatter.csv", {}), head,
                    rep.seed, po);
    }
  }

  // -- kind: conjugate_ood -----------------------------------------------------

  void pass_conjugate_ood(const Rep& rep) {
    Pipe pipe = pipeline(rep.ds, rep.train);
    infer::PositionSpec pos = infer::PositionSpec::last();
    ProbeOutcome in_dist = suffstat_probe(rep, pipe);
    add_row(recovery_row("in_dist", rep, in_dist.report));
    emit_recovery(table("suffstat_ood.csv", {}), &table("suffstat_ood_scatter.csv", {}),
                  "in_dist", rep.seed, in_dist);

    std::vector<double> hyper = ood_hyper(family_);
    if (spec_.options.contains("ood_hyper")) spec_.options.at("ood_hyper").get_to(hyper);
    gen::GenConfig ood_cfg = resolved_gen(rep.ds2, json{{"hyper", hyper}});
    auto ood = stages_.dataset(ood_cfg);
    auto emb2o = stages_.embeddings(pipe.model_key, *pipe.model, ood.key, *ood.data, 2, pos);
    auto emb3o = stages_.embeddings(pipe.model_key, *pipe.model, ood.key, *ood.data, 3, pos);
    auto tgt2o = stages_.targets(ood.key, *ood.data, 2, infer::TargetKind::SuffStat, pos);
    auto tgt3o = stages_.targets(ood.key, *ood.data, 3, infer::TargetKind::SuffStat, pos);

    // Transfer: the in-distribution probe applied unchanged to OOD data.
    ProbeOutcome transfer = in_dist;
    transfer.report = probe_transfer(in_dist, emb3o, tgt3o, &transfer.eval);
    transfer.eval_targets = tgt3o.table;
    add_row(recovery_row("ood_transfer", rep, transfer.report));
    emit_recovery(table("suffstat_ood.csv", {}), &table("suffstat_ood_scatter.csv", {}),
                  "ood_transfer", rep.seed, transfer);

    // Refit: a fresh probe trained on OOD embeddings of the same frozen model.
    probe::ProbeConfig pcfg =
        resolved_probe(next_probe_seed(rep), json{{"head", "linear"}, {"loss", "l2"}});
    ProbeOutcome refit = probe_stage(emb2o, tgt2o, emb3o, tgt3o, pcfg, /*simplex=*/false);
    add_row(recovery_row("ood_refit", rep, refit.report));
    emit_recovery(table("suffstat_ood.csv", {}), &table("suffstat_ood_scatter.csv", {}),
                  "ood_refit", rep.seed, refit);
  }

  // -- kind: rectangles ---------------------------------------------------------

  void pass_rectangles(const Rep& rep) {
    std::vector<std::string> grids = {"equal", "unequal"};
    std::vector<uint32_t> lengths = {20, 50};
    if (spec_.options.contains("grids")) spec_.options.at("grids").get_to(grids);
    if (spec_.options.contains("lengths")) spec_.options.at("lengths").get_to(lengths);
    infer::PositionSpec pos = infer::PositionSpec::last();
    for (const std::string& grid_name : grids) {
      gen::GridSpec grid;
      if (grid_name == "equal")
        grid = gen::GridSpec::equal();
      else if (grid_name == "unequal")
        grid = gen::GridSpec::unequal();
      else
        throw ConfigError("rectangles: unknown grid '" + grid_name + "'");
      for (uint32_t n : lengths) {
        json gen_patch{{"grid", json(grid)}, {"seq_len", n}};
        Pipe pipe = pipeline(rep.ds, rep.train, gen_patch);
        auto emb2 =
            stages_.embeddings(pipe.model_key, *pipe.model, pipe.ds_key, *pipe.ds, 2, pos);
        auto emb3 =
            stages_.embeddings(pipe.model_key, *pipe.model, pipe.ds_key, *pipe.ds, 3, pos);
        auto tgt2 =
            stages_.targets(pipe.ds_key, *pipe.ds, 2, infer::TargetKind::RectPosterior, pos);
        auto tgt3 =
            stages_.targets(pipe.ds_key, *pipe.ds, 3, infer::TargetKind::RectPosterior, pos);
        probe::ProbeConfig pcfg = resolved_probe(next_probe_seed(rep),
                                                 json{{"head", "linear_softmax"}, {"loss", "ce"}});
        ProbeOutcome po = probe_stage(emb2, tgt2, emb3, tgt3, pcfg, /*simplex=*/true);

        // Accuracy against the generating hypothesis (as opposed to the
        // posterior argmax, which is what the probe report scores).
        MatF pred = po.model.predict(po.eval.x);
        size_t hit = 0;
        for (Eigen::Index i = 0; i < pred.rows(); ++i) {
          Eigen::Index arg = 0;
          pred.row(i).maxCoeff(&arg);
          uint32_t sid = po.eval_targets->records[static_cast<size_t>(i)].sequence_id;
          const auto& seq = pipe.ds->sequences[sid];
          if (seq.latents.hypothesis >= 0 &&
              arg == static_cast<Eigen::Index>(seq.latents.hypothesis))
            ++hit;
        }
        double accuracy_truth =
            pred.rows() > 0 ? static_cast<double>(hit) / static_cast<double>(pred.rows()) : 0.0;

        std::string cell = grid_name + "_n" + std::to_string(n);
        add_row(json{{"cell", cell},
                     {"seed", rep.seed},
                     {"scale", spec_.scale},
                     {"seq_len", n},
                     {"accuracy", po.report.accuracy},
                     {"accuracy_truth", accuracy_truth},
                     {"sq_loss", po.report.l2},
                     {"tv", po.report.tv},
                     {"chosen_lr", po.report.chosen_lr}});
        table("rectangles.csv", {})
            .add_row({fmt_g(spec_.scale), std::to_string(rep.seed), grid_name,
                      std::to_string(n), fmt_g(po.report.accuracy), fmt_g(accuracy_truth),
                      fmt_g(po.report.l2), fmt_g(po.report.tv)});

        if (rep_index_ == 0) {
          probe::PcaResult pca = probe::pca_project(po.eval.x, 2);
          auto lx = grid.lines_x();
          auto ly = grid.lines_y();
          CsvTable& pt = table("rectangles_pca.csv", {});
          for (Eigen::Index i = 0; i < pca.coords.rows(); ++i) {
            uint32_t sid = po.eval_targets->records[static_cast<size_t>(i)].sequence_id;
            const auto& seq = pipe.ds->sequences[sid];
            int h = seq.latents.hypothesis;
            gen::RectangleHypothesis rh = gen::rect_hypothesis(h);
            double cx = 0.5 * (lx[rh.ix_lo] + lx[rh.ix_hi]);
            double cy = 0.5 * (ly[rh.iy_lo] + ly[rh.iy_hi]);
            double w = lx[rh.ix_hi] - lx[rh.ix_lo];
            double hgt = ly[rh.iy_hi] - ly[rh.iy_lo];
            pt.add_row({fmt_g(spec_.scale), std::to_string(rep.seed), grid_name,
                        std::to_string(n), std::to_string(sid), fmt_g(pca.coords(i, 0)),
                        fmt_g(pca.coords(i, 1)), std::to_string(h), fmt_g(cx), fmt_g(cy),
                        fmt_g(w), fmt_g(hgt)});
          }
        }
      }
    }
  }

  // -- kind: hmm_targets ---------------------------------------------------------

  double hmm_oracle_nll(const gen::Dataset& d) const {
    const auto& cfg = std::get<gen::HmmConfig>(d.config);
    std::vector<double> pi = cfg.initial();
    double total = 0.0;
    size_t n = 0;
    for (const auto& s : d.set2()) {
      auto fr = infer::hmm_filter(d.shared.hmm_a, d.shared.hmm_b, pi, s.ids);
      if (fr.token_nll.size() < 2) throw StageError("hmm_oracle_nll: sequence too short");
      double seq = 0.0;
      for (size_t t = 1; t < fr.token_nll.size(); ++t) seq += fr.token_nll[t];
      total += seq / static_cast<double>(fr.token_nll.size() - 1);
      ++n;
    }
    return total / static_cast<double>(n);
  }

  void pass_hmm_targets(const Rep& rep) {
    std::vector<double> deltas = {0.5, 1.0};
    if (spec_.options.contains("delta_grid")) spec_.options.at("delta_grid").get_to(deltas);
    for (double delta : deltas) {
      Pipe pipe = pipeline(rep.ds, rep.train, json{{"dirichlet_emission", delta}});
      uint32_t n_len = config_seq_len(pipe.ds->config);
      if (n_len < 3) throw ConfigError("hmm_targets: needs sequences of length >= 3");
      infer::PositionSpec pos_n = infer::PositionSpec::at(n_len - 2);    // prefix x_{1:n}
      infer::PositionSpec pos_n1 = infer::PositionSpec::at(n_len - 1);   // prefix x_{1:n+1}

      double model_nll = pipe.model_info.value("best_val_loss", 0.0);
      double oracle_nll = hmm_oracle_nll(*pipe.ds);
      std::string dsuf = "_delta" + fmt_g(delta);
      add_row(json{{"cell", "nll" + dsuf},
                   {"seed", rep.seed},
                   {"scale", spec_.scale},
                   {"delta", delta},
                   {"model_nll", model_nll},
                   {"oracle_nll", oracle_nll},
                   {"nll_ratio", oracle_nll > 0 ? model_nll / oracle_nll : 0.0}});
      table("hmm_nll.csv", {})
          .add_row({fmt_g(spec_.scale), std::to_string(rep.seed), fmt_g(delta), fmt_g(model_nll),
                    fmt_g(oracle_nll), fmt_g(oracle_nll > 0 ? model_nll / oracle_nll : 0.0)});

      auto emb_at = [&](int split, const infer::PositionSpec& p) {
        return stages_.embeddings(pipe.model_key, *pipe.model, pipe.ds_key, *pipe.ds, split, p);
      };
      auto tgt_at = [&](int split, infer::TargetKind k, const infer::PositionSpec& p) {
        return stages_.targets(pipe.ds_key, *pipe.ds, split, k, p);
      };
      auto e2n = emb_at(2, pos_n), e3n = emb_at(3, pos_n);
      auto e2n1 = emb_at(2, pos_n1), e3n1 = emb_at(3, pos_n1);
      auto pred2 = tgt_at(2, infer::TargetKind::HmmPredictive, pos_n);
      auto pred3 = tgt_at(3, infer::TargetKind::HmmPredictive, pos_n);
      auto filt2 = tgt_at(2, infer::TargetKind::HmmFiltered, pos_n1);
      auto filt3 = tgt_at(3, infer::TargetKind::HmmFiltered, pos_n1);
      auto vit2n = tgt_at(2, infer::TargetKind::HmmViterbiNext, pos_n);
      auto vit3n = tgt_at(3, infer::TargetKind::HmmViterbiNext, pos_n);
      auto vit2n1 = tgt_at(2, infer::TargetKind::HmmViterbiNext, pos_n1);
      auto vit3n1 = tgt_at(3, infer::TargetKind::HmmViterbiNext, pos_n1);

      struct CellDef {
        const char* name;
        const char* target;
        const char* embedding;
        Stages::EmbArtifact* etr;
        Stages::TgtArtifact* ttr;
        Stages::EmbArtifact* eev;
        Stages::TgtArtifact* tev;
        bool cross;
      };
      std::vector<CellDef> cells = {
          {"pred_from_n", "hmm_predictive", "x_1:n", &e2n, &pred2, &e3n, &pred3, false},
          {"filt_from_n1", "hmm_filtered", "x_1:n+1", &e2n1, &filt2, &e3n1, &filt3, false},
          {"pred_from_n1", "hmm_predictive", "x_1:n+1", &e2n1, &pred2, &e3n1, &pred3, true},
          {"filt_from_n", "hmm_filtered", "x_1:n", &e2n, &filt2, &e3n, &filt3, true},
          {"viterbi_from_n", "hmm_viterbi_next", "x_1:n", &e2n, &vit2n, &e3n, &vit3n, false},
          {"viterbi_from_n1", "hmm_viterbi_next", "x_1:n+1", &e2n1, &vit2n1, &e3n1, &vit3n1,
           false},
      };
      for (const auto& c : cells) {
        probe::ProbeConfig pcfg = resolved_probe(next_probe_seed(rep),
                                                 json{{"head", "linear_softmax"}, {"loss", "ce"}});
        ProbeOutcome po = probe_stage(*c.etr, *c.ttr, *c.eev, *c.tev, pcfg, true, c.cross);
        add_row(json{{"cell", std::string(c.name) + dsuf},
                     {"seed", rep.seed},
                     {"scale", spec_.scale},
                     {"delta", delta},
                     {"accuracy", po.report.accuracy},
                     {"sq_loss", po.report.l2},
                     {"tv", po.report.tv},
                     {"chosen_lr", po.report.chosen_lr}});
        table("hmm_targets.csv", {})
            .add_row({fmt_g(spec_.scale), std::to_string(rep.seed), fmt_g(delta), c.name,
                      c.target, c.embedding, fmt_g(po.report.accuracy), fmt_g(po.report.l2),
                      fmt_g(po.report.tv)});
      }
    }
  }

  // -- kind: lda_topics ------------------------------------------------------------

  struct SimplexScore {
    double accuracy = 0.0, sq_loss = 0.0, tv = 0.0;
  };

  static SimplexScore score_simplex(const std::vector<std::vector<double>>& pred,
                                    const std::vector<std::vector<double>>& truth) {
    if (pred.size() != truth.size() || pred.empty())
      throw StageError("score_simplex: size mismatch or empty");
    SimplexScore s;
    for (size_t i = 0; i < pred.size(); ++i) {
      const auto& p = pred[i];
      const auto& t = truth[i];
      if (p.size() != t.size()) throw StageError("score_simplex: dim mismatch");
      size_t ap = static_cast<size_t>(
          std::max_element(p.begin(), p.end()) - p.begin());
      size_t at = static_cast<size_t>(
          std::max_element(t.begin(), t.end()) - t.begin());
      if (ap == at) s.accuracy += 1.0;
      double l2 = 0.0, l1 = 0.0;
      for (size_t k = 0; k < p.size(); ++k) {
        l2 += sq(p[k] - t[k]);
        l1 += std::abs(p[k] - t[k]);
      }
      s.sq_loss += l2;
      s.tv += 0.5 * l1;
    }
    double n = static_cast<double>(pred.size());
    s.accuracy /= n;
    s.sq_loss /= n;
    s.tv /= n;
    return s;
  }

  // Collapsed-Gibbs topic-model baseline: fit topics on set1, align them to
  // the generating topics, then infer mixtures for set3 documents.
  json gibbs_baseline(const Rep& rep, const Pipe& pipe, double alpha) {
    const auto& lc = std::get<gen::LdaConfig>(pipe.ds->config);
    int fit_iters = spec_.options.value("gibbs_iters", 200);
    int infer_iters = spec_.options.value("infer_iters", 100);
    uint64_t gseed = rep.gibbs;
    json desc{{"stage", "lda_gibbs"}, {"dataset", pipe.ds_key}, {"fit_iters", fit_iters},
              {"infer_iters", infer_iters}, {"seed", gseed}};
    auto [key, out] = stages_.cached_json("gibbs", desc, [&]() {
      std::vector<std::vector<uint32_t>> corpus;
      corpus.reserve(pipe.ds->set1().size());
      for (const auto& s : pipe.ds->set1()) corpus.push_back(s.ids);
      infer::LdaModel fit = infer::lda_fit(corpus, lc.num_topics, alpha, lc.topic_dirichlet,
                                           fit_iters, gseed);
      // Pad unseen words with a vanishing mass so inference never indexes
      // outside the fitted vocabulary, then renormalize.
      for (auto& row : fit.beta) {
        if (row.size() < lc.vocab) {
          row.resize(lc.vocab, 1e-12);
          double sum = 0.0;
          for (double v : row) sum += v;
          for (double& v : row) v /= sum;
        }
      }
      std::vector<uint32_t> perm = infer::align_topics(fit.beta, pipe.ds->shared.topics);
      std::vector<std::vector<double>> pred, truth;
      uint32_t idx = 0;
      for (const auto& s : pipe.ds->set3()) {
        std::vector<double> th = infer::lda_infer_theta(fit.beta, alpha, s.ids, infer_iters,
                                                        derive_seed(gseed, 100 + idx));
        pred.push_back(infer::permute_mixture(th, perm));
        truth.push_back(s.latents.params);
        ++idx;
      }
      SimplexScore sc = score_simplex(pred, truth);
      return json{{"accuracy", sc.accuracy}, {"sq_loss", sc.sq_loss}, {"tv", sc.tv}};
    });
    (void)key;
    return out;
  }

  ProbeOutcome theta_probe(const Rep& rep, const Pipe& pipe) {
    infer::PositionSpec pos = infer::PositionSpec::last();
    auto emb2 = stages_.embeddings(pipe.model_key, *pipe.model, pipe.ds_key, *pipe.ds, 2, pos);
    auto emb3 = stages_.embeddings(pipe.model_key, *pipe.model, pipe.ds_key, *pipe.ds, 3, pos);
    auto tgt2 = stages_.targets(pipe.ds_key, *pipe.ds, 2, infer::TargetKind::LdaTheta, pos);
    auto tgt3 = stages_.targets(pipe.ds_key, *pipe.ds, 3, infer::TargetKind::LdaTheta, pos);
    probe::ProbeConfig pcfg = resolved_probe(next_probe_seed(rep),
                                             json{{"head", "linear_softmax"}, {"loss", "ce"}});
    return probe_stage(emb2, tgt2, emb3, tgt3, pcfg, /*simplex=*/true);
  }

  void pass_lda_topics(const Rep& rep) {
    std::vector<double> alphas = {0.5, 0.8, 1.0};
    if (spec_.options.contains("alpha_grid")) spec_.options.at("alpha_grid").get_to(alphas);
    for (double alpha : alphas) {
      Pipe pipe = pipeline(rep.ds, rep.train, json{{"doc_dirichlet", alpha}});
      ProbeOutcome po = theta_probe(rep, pipe);
      std::string asuf = "_alpha" + fmt_g(alpha);
      add_row(json{{"cell", "at" + asuf},
                   {"seed", rep.seed},
                   {"scale", spec_.scale},
                   {"alpha", alpha},
                   {"accuracy", po.report.accuracy},
                   {"sq_loss", po.report.l2},
                   {"tv", po.report.tv},
                   {"chosen_lr", po.report.chosen_lr}});
      table("lda_topics.csv", {})
          .add_row({fmt_g(spec_.scale), std::to_string(rep.seed), fmt_g(alpha), "at",
                    fmt_g(po.report.accuracy), fmt_g(po.report.l2), fmt_g(po.report.tv)});
      json g = gibbs_baseline(rep, pipe, alpha);
      add_row(json{{"cell", "lda_gibbs" + asuf},
                   {"seed", rep.seed},
                   {"scale", spec_.scale},
                   {"alpha", alpha},
                   {"accuracy", g.at("accuracy").get<double>()},
                   {"sq_loss", g.at("sq_loss").get<double>()},
                   {"tv", g.at("tv").get<double>()}});
      table("lda_topics.csv", {})
          .add_row({fmt_g(spec_.scale), std::to_string(rep.seed), fmt_g(alpha), "lda_gibbs",
                    fmt_g(g.at("accuracy").get<double>()), fmt_g(g.at("sq_loss").get<double>()),
                    fmt_g(g.at("tv").get<double>())});
    }
  }

  // -- kind: lda_heatmap -------------------------------------------------------------

  void pass_lda_heatmap(const Rep& rep) {
    int num_ds = spec_.options.value("num_datasets", 5);
    if (num_ds < 2) throw ConfigError("lda_heatmap: num_datasets must be >= 2");
    std::vector<Pipe> pipes;
    pipes.reserve(static_cast<size_t>(num_ds));
    for (int j = 0; j < num_ds; ++j)
      pipes.push_back(pipeline(derive_seed(rep.seed, 20 + static_cast<uint64_t>(j)),
                               derive_seed(rep.train, static_cast<uint64_t>(j))));
    infer::PositionSpec pos = infer::PositionSpec::last();
    double diag = 0.0, off = 0.0;
    int diag_n = 0, off_n = 0;
    for (int i = 0; i < num_ds; ++i) {
      for (int j = 0; j < num_ds; ++j) {
        const Pipe& model_pipe = pipes[static_cast<size_t>(i)];
        const Pipe& data_pipe = pipes[static_cast<size_t>(j)];
        auto emb2 = stages_.embeddings(model_pipe.model_key, *model_pipe.model, data_pipe.ds_key,
                                       *data_pipe.ds, 2, pos);
        auto emb3 = stages_.embeddings(model_pipe.model_key, *model_pipe.model, data_pipe.ds_key,
                                       *data_pipe.ds, 3, pos);
        auto tgt2 =
            stages_.targets(data_pipe.ds_key, *data_pipe.ds, 2, infer::TargetKind::LdaTheta, pos);
        auto tgt3 =
            stages_.targets(data_pipe.ds_key, *data_pipe.ds, 3, infer::TargetKind::LdaTheta, pos);
        probe::ProbeConfig pcfg = resolved_probe(
            next_probe_seed(rep), json{{"head", "linear_softmax"}, {"loss", "ce"}});
        ProbeOutcome po = probe_stage(emb2, tgt2, emb3, tgt3, pcfg, /*simplex=*/true);
        add_row(json{{"cell", "m" + std::to_string(i) + "_d" + std::to_string(j)},
                     {"seed", rep.seed},
                     {"scale", spec_.scale},
                     {"model", i},
                     {"dataset", j},
                     {"accuracy", po.report.accuracy},
                     {"sq_loss", po.report.l2},
                     {"tv", po.report.tv}});
        table("lda_heatmap.csv", {})
            .add_row({fmt_g(spec_.scale), std::to_string(rep.seed), std::to_string(i),
                      std::to_string(j), fmt_g(po.report.accuracy), fmt_g(po.report.l2),
                      fmt_g(po.report.tv)});
        if (i == j) {
          diag += po.report.accuracy;
          ++diag_n;
        } else {
          off += po.report.accuracy;
          ++off_n;
        }
      }
    }
    double diag_mean = diag / std::max(diag_n, 1);
    double off_mean = off / std::max(off_n, 1);
    add_row(json{{"cell", "summary"},
                 {"seed", rep.seed},
                 {"scale", spec_.scale},
                 {"diag_mean", diag_mean},
                 {"offdiag_mean", off_mean},
                 {"gap", diag_mean - off_mean}});
    table("lda_heatmap_summary.csv", {})
        .add_row({fmt_g(spec_.scale), std::to_string(rep.seed), fmt_g(diag_mean),
                  fmt_g(off_mean), fmt_g(diag_mean - off_mean)});
  }

  // -- kind: hmm_lda_sweep -----------------------------------------------------------

  void pass_hmm_lda_sweep(const Rep& rep) {
    std::vector<double> p_grid = {0.1, 0.4, 0.7, 1.0};
    if (spec_.options.contains("p_grid")) spec_.options.at("p_grid").get_to(p_grid);
    for (double p : p_grid) {
      Pipe pipe = pipeline(rep.ds, rep.train, json{{"semantic_entry_prob", p}});
      const auto& hc = std::get<gen::HmmLdaConfig>(pipe.ds->config);
      double chance = 1.0 / static_cast<double>(hc.lda.num_topics);
      ProbeOutcome po = theta_probe(rep, pipe);
      add_row(json{{"cell", "p" + fmt_g(p)},
                   {"seed", rep.seed},
                   {"scale", spec_.scale},
                   {"semantic_prob", p},
                   {"accuracy", po.report.accuracy},
                   {"sq_loss", po.report.l2},
                   {"tv", po.report.tv},
                   {"chance", chance}});
      table("hmm_lda_sweep.csv", {})
          .add_row({fmt_g(spec_.scale), std::to_string(rep.seed), fmt_g(p),
                    fmt_g(po.report.accuracy), fmt_g(po.report.l2), fmt_g(po.report.tv),
                    fmt_g(chance)});
    }
  }

  // -- kind: memorization --------------------------------------------------------------

  void pass_memorization(const Rep& rep) {
    uint32_t position = spec_.options.value("position", 9u);
    Pipe pipe = pipeline(rep.ds, rep.train);
    if (config_seq_len(pipe.ds->config) <= position)
      throw ConfigError("memorization: sequences shorter than probe position");
    infer::PositionSpec pos = infer::PositionSpec::at(position);
    auto emb2 = stages_.embeddings(pipe.model_key, *pipe.model, pipe.ds_key, *pipe.ds, 2, pos);
    auto emb3 = stages_.embeddings(pipe.model_key, *pipe.model, pipe.ds_key, *pipe.ds, 3, pos);
    for (uint32_t t = 0; t <= position; ++t) {
      infer::TargetOptions opts;
      opts.token_index = t;
      auto tgt2 =
          stages_.targets(pipe.ds_key, *pipe.ds, 2, infer::TargetKind::TokenValue, pos, opts);
      auto tgt3 =
          stages_.targets(pipe.ds_key, *pipe.ds, 3, infer::TargetKind::TokenValue, pos, opts);
      probe::ProbeConfig pcfg =
          resolved_probe(next_probe_seed(rep), json{{"head", "linear"}, {"loss", "l2"}});
      ProbeOutcome po = probe_stage(emb2, tgt2, emb3, tgt3, pcfg, /*simplex=*/false);
      double r = po.report.pearson_r.empty() ? 0.0 : po.report.pearson_r[0];
      double smse = po.report.scaled_mse_dims.empty() ? 0.0 : po.report.scaled_mse_dims[0];
      add_row(json{{"cell", "token" + std::to_string(t)},
                   {"seed", rep.seed},
                   {"scale", spec_.scale},
                   {"token_index", t},
                   {"pearson_r", r},
                   {"scaled_mse", smse}});
      table("memorization.csv", {})
          .add_row({gen::family_name(family_), fmt_g(spec_.scale), std::to_string(rep.seed),
                    std::to_string(t), fmt_g(r), fmt_g(smse)});
      if (rep_index_ == 0) {
        MatF pred = po.model.predict(po.eval.x);
        CsvTable& sc = table("memorization_scatter.csv", {});
        for (Eigen::Index i = 0; i < pred.rows(); ++i)
          sc.add_row({gen::family_name(family_), fmt_g(spec_.scale), std::to_string(rep.seed),
                      std::to_string(t),
                      std::to_string(po.eval_targets->records[static_cast<size_t>(i)].sequence_id),
                      fmt_g(static_cast<double>(po.eval.y(i, 0))),
                      fmt_g(static_cast<double>(pred(i, 0)))});
      }
    }
    // Sufficient statistics of the prefix ending at the same position.
    ProbeOutcome sp = suffstat_probe(rep, pipe, pos);
    json row = recovery_row("suffstat_at_pos", rep, sp.report);
    add_row(std::move(row));
    const auto& r = sp.report;
    for (size_t j = 0; j < r.pearson_r.size(); ++j)
      table("memorization_suffstat.csv", {})
          .add_row({gen::family_name(family_), fmt_g(spec_.scale), std::to_string(rep.seed),
                    std::to_string(j), fmt_g(r.pearson_r[j]),
                    j < r.scaled_mse_dims.size() ? fmt_g(r.scaled_mse_dims[j]) : "0"});
  }

  // -- kind: parsimonious ---------------------------------------------------------------

  void pass_parsimonious(const Rep& rep) {
    std::vector<uint32_t> dims = {128, 8};
    if (spec_.options.contains("hidden_dims")) spec_.options.at("hidden_dims").get_to(dims);
    infer::PositionSpec pos = infer::PositionSpec::last();
    for (uint32_t d : dims) {
      Pipe pipe = pipeline(rep.ds, rep.train, json::object(), json{{"hidden_dim", d}});
      auto emb2 = stages_.embeddings(pipe.model_key, *pipe.model, pipe.ds_key, *pipe.ds, 2, pos);
      auto emb3 = stages_.embeddings(pipe.model_key, *pipe.model, pipe.ds_key, *pipe.ds, 3, pos);
      auto tgt2 = stages_.targets(pipe.ds_key, *pipe.ds, 2, infer::TargetKind::SuffStat, pos);
      auto tgt3 = stages_.targets(pipe.ds_key, *pipe.ds, 3, infer::TargetKind::SuffStat, pos);
      probe::AlignedData tr = probe::align(*emb2.table, *tgt2.table);
      probe::AlignedData ev = probe::align(*emb3.table, *tgt3.table);
      probe::ProbeConfig pcfg =
          resolved_probe(next_probe_seed(rep), json{{"head", "mlp"}, {"loss", "l2"}});
      json desc{{"stage", "reverse_map"}, {"xtr", tgt2.key}, {"ytr", emb2.key},
                {"xev", tgt3.key},        {"yev", emb3.key}, {"config", json(pcfg)}};
      auto [key, out] = stages_.cached_json("rmap", desc, [&]() {
        // Inputs are the sufficient statistics; outputs are the embeddings.
        probe::ReverseMapResult r = probe::fit_reverse_map(tr.y, tr.x, ev.y, ev.x, pcfg);
        return json{{"variance_explained", r.variance_explained}, {"sq_loss", r.l2}};
      });
      (void)key;
      add_row(json{{"cell", "d" + std::to_string(d)},
                   {"seed", rep.seed},
                   {"scale", spec_.scale},
                   {"hidden_dim", d},
                   {"variance_explained", out.at("variance_explained").get<double>()},
                   {"sq_loss", out.at("sq_loss").get<double>()}});
      table("parsimonious.csv", {})
          .add_row({gen::family_name(family_), fmt_g(spec_.scale), std::to_string(rep.seed),
                    std::to_string(d), fmt_g(out.at("variance_explained").get<double>()),
                    fmt_g(out.at("sq_loss").get<double>())});
    }
  }

  // -- kind: hyper_sweep ---------------------------------------------------------------

  void pass_hyper_sweep(const Rep& rep) {
    std::vector<uint32_t> dims = {8, 32, 128};
    std::vector<uint32_t> layers = {2, 3, 4};
    std::vector<uint32_t> heads = {4, 8};
    if (spec_.options.contains("hidden_dims")) spec_.options.at("hidden_dims").get_to(dims);
    if (spec_.options.contains("num_layers")) spec_.options.at("num_layers").get_to(layers);
    if (spec_.options.contains("num_heads")) spec_.options.at("num_heads").get_to(heads);
    size_t target_dim = family_ == gen::Family::GaussianGamma ? 1 : 0;  // std is the hard one
    for (uint32_t d : dims) {
      for (uint32_t l : layers) {
        for (uint32_t h : heads) {
          if (d % h != 0)
            throw ConfigError("hyper_sweep: hidden_dim " + std::to_string(d) +
                              " not divisible by num_heads " + std::to_string(h));
          Pipe pipe = pipeline(rep.ds, rep.train, json::object(),
                               json{{"hidden_dim", d}, {"num_layers", l}, {"num_heads", h}});
          ProbeOutcome po = suffstat_probe(rep, pipe);
          double smse_t = target_dim < po.report.scaled_mse_dims.size()
                              ? po.report.scaled_mse_dims[target_dim]
                              : 0.0;
          std::string cell =
              "d" + std::to_string(d) + "_l" + std::to_string(l) + "_h" + std::to_string(h);
          add_row(json{{"cell", cell},
                       {"seed", rep.seed},
                       {"scale", spec_.scale},
                       {"hidden_dim", d},
                       {"num_layers", l},
                       {"num_heads", h},
                       {"scaled_mse_target", smse_t},
                       {"scaled_mse", po.report.scaled_mse},
                       {"pearson_min", pearson_min(po.report)}});
          table("hyper_sweep.csv", {})
              .add_row({gen::family_name(family_), fmt_g(spec_.scale), std::to_string(rep.seed),
                        std::to_string(d), std::to_string(l), std::to_string(h),
                        std::to_string(target_dim), fmt_g(smse_t), fmt_g(po.report.scaled_mse),
                        fmt_g(pearson_min(po.report))});
        }
      }
    }
  }

  const ExperimentSpec& spec_;
  gen::Family family_;
  Stages stages_;
  ResultBundle bundle_;
  size_t rep_index_ = 0;
  uint64_t probe_counter_ = 0;
};

// ---------------------------------------------------------------------------
// Entry points

inline ResultBundle run_experiment(const ExperimentSpec& spec) {
  spec.validate();
  Runner runner(spec);
  ResultBundle b = runner.run();
  write_bundle(b, spec.out_dir);
  return b;
}

// Generic cartesian sweep: {"base": <experiment spec>, "grid": {"dotted.path":
// [values...]}}. Each grid cell patches the base spec JSON at the dotted paths
// and runs a full experiment into <out_dir>/cell_<idx>/. A single-cell grid is
// exactly equivalent to running the base experiment.
inline ResultBundle run_sweep(const json& sweep_cfg, const std::string& out_dir,
                              uint32_t workers) {
  if (!sweep_cfg.is_object() || !sweep_cfg.contains("base") || !sweep_cfg.contains("grid"))
    throw ConfigError("sweep config: expected {\"base\": {...}, \"grid\": {...}}");
  const json& grid = sweep_cfg.at("grid");
  if (!grid.is_object() || grid.empty())
    throw ConfigError("sweep config: grid must be a non-empty object");
  std::vector<std::string> params;
  std::vector<std::vector<json>> values;
  for (auto it = grid.begin(); it != grid.end(); ++it) {
    if (!it->is_array() || it->empty())
      throw ConfigError("sweep config: grid['" + it.key() + "'] must be a non-empty array");
    params.push_back(it.key());
    values.emplace_back(it->begin(), it->end());
  }
  size_t total = 1;
  for (const auto& v : values) total *= v.size();

  auto set_path = [](json& doc, const std::string& dotted, const json& value) {
    json* cur = &doc;
    size_t start = 0;
    while (true) {
      size_t dot = dotted.find('.', start);
      std::string part = dotted.substr(start, dot == std::string::npos ? dot : dot - start);
      if (part.empty()) throw ConfigError("sweep config: bad path '" + dotted + "'");
      if (dot == std::string::npos) {
        (*cur)[part] = value;
        return;
      }
      if (!cur->contains(part) || !(*cur)[part].is_object()) (*cur)[part] = json::object();
      cur = &(*cur)[part];
      start = dot + 1;
    }
  };

  ResultBundle sweep_bundle;
  sweep_bundle.spec_json = sweep_cfg;
  CsvTable cells({"cell", "param", "value"});
  CsvTable results({"cell", "result_cell", "metric", "mean", "stderr", "n"});

  std::string first_error;
  for (size_t idx = 0; idx < total; ++idx) {
    char cell_id[32];
    std::snprintf(cell_id, sizeof cell_id, "cell_%03zu", idx);
    json spec_json = sweep_cfg.at("base");
    size_t rem = idx;
    json assignment = json::object();
    for (size_t p = 0; p < params.size(); ++p) {
      const auto& vals = values[p];
      const json& v = vals[rem % vals.size()];
      rem /= vals.size();
      set_path(spec_json, params[p], v);
      assignment[params[p]] = v;
      cells.add_row({cell_id, params[p], v.is_string() ? v.get<std::string>() : v.dump()});
    }
    spec_json["out_dir"] = (fs::path(out_dir) / cell_id).string();
    try {
      ExperimentSpec spec = spec_from_json(spec_json);
      spec.workers = workers;
      ResultBundle b = run_experiment(spec);
      for (auto cell = b.aggregates.begin(); cell != b.aggregates.end(); ++cell)
        for (auto metric = cell->begin(); metric != cell->end(); ++metric)
          results.add_row({cell_id, cell.key(), metric.key(),
                           fmt_g(metric->at("mean").get<double>()),
                           fmt_g(metric->at("stderr").get<double>()),
                           std::to_string(metric->at("n").get<size_t>())});
      json row{{"cell", cell_id}, {"seed", 0}};
      row["assignment"] = assignment;
      for (auto cell = b.aggregates.begin(); cell != b.aggregates.end(); ++cell)
        for (auto metric = cell->begin(); metric != cell->end(); ++metric)
          row[cell.key() + "." + metric.key()] = metric->at("mean").get<double>();
      sweep_bundle.rows.push_back(std::move(row));
    } catch (const std::exception& e) {
      if (first_error.empty()) first_error = e.what();
      sweep_bundle.errors.push_back(json{{"cell", cell_id}, {"error", e.what()}});
    }
  }
  if (sweep_bundle.rows.empty() && !sweep_bundle.errors.empty())
    throw StageError("sweep: all cells failed: " + first_error);
  sweep_bundle.aggregates = aggregate_rows(sweep_bundle.rows);
  sweep_bundle.provenance = json{{"git_commit", git_commit_hash()},
                                 {"config_hash", key_of(sweep_cfg)},
                                 {"scale", sweep_cfg.at("base").value("scale", 1.0)}};
  sweep_bundle.csvs.emplace_back("sweep_cells.csv", std::move(cells));
  sweep_bundle.csvs.emplace_back("sweep_results.csv", std::move(results));
  write_bundle(sweep_bundle, out_dir);
  return sweep_bundle;
}

}  // namespace ssw::exp
