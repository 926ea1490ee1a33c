#pragma once
// Probe-target construction: turns oracle outputs into (sequence_id, position,
// vector) records aligned with embedding extraction, plus the JSON-lines
// serialization. Position j (0-based) always refers to the prefix x_{1:j+1},
// matching the embedding at that position.

#include <cstdint>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "ssw/conjugate.hpp"
#include "ssw/data.hpp"
#include "ssw/hmm.hpp"
#include "ssw/lda.hpp"
#include "ssw/rectangles.hpp"

namespace ssw::infer {

enum class TargetKind {
  SuffStat,        // conjugate: (mean, std) or token mean of the prefix
  PostMoments,     // conjugate: raw moments of the posterior (mode/k/scale in options)
  RectPosterior,   // Simplex(784) given the prefix
  HmmPredictive,   // p(z_{j+2} | x_{1:j+1})
  HmmFiltered,     // p(z_{j+1} | x_{1:j+1})
  HmmViterbiNext,  // one-hot MAP state at step j+2 from Viterbi on x_{1:min(j+2,N)}
  LdaTheta,        // ground-truth document mixture
  TokenValue       // raw token at options.token_index (memorization)
};

inline const char* target_kind_name(TargetKind k) {
  switch (k) {
    case TargetKind::SuffStat: return "suffstat";
    case TargetKind::PostMoments: return "post_moments";
    case TargetKind::RectPosterior: return "rect_posterior";
    case TargetKind::HmmPredictive: return "hmm_predictive";
    case TargetKind::HmmFiltered: return "hmm_filtered";
    case TargetKind::HmmViterbiNext: return "hmm_viterbi_next";
    case TargetKind::LdaTheta: return "lda_theta";
    case TargetKind::TokenValue: return "token_value";
  }
  throw ConfigError("target_kind_name: unknown kind");
}

inline TargetKind target_kind_from_name(const std::string& s) {
  for (TargetKind k : {TargetKind::SuffStat, TargetKind::PostMoments, TargetKind::RectPosterior,
                       TargetKind::HmmPredictive, TargetKind::HmmFiltered,
                       TargetKind::HmmViterbiNext, TargetKind::LdaTheta, TargetKind::TokenValue})
    if (s == target_kind_name(k)) return k;
  throw ConfigError("target_kind: unknown name '" + s + "'");
}

// True when probes over this target should use a softmax head / simplex metrics.
inline bool target_is_simplex(TargetKind k) {
  switch (k) {
    case TargetKind::RectPosterior:
    case TargetKind::HmmPredictive:
    case TargetKind::HmmFiltered:
    case TargetKind::HmmViterbiNext:
    case TargetKind::LdaTheta: return true;
    default: return false;
  }
}

struct PositionSpec {
  enum class Kind { Last, Index, All } kind = Kind::Last;
  uint32_t index = 0;

  static PositionSpec last() { return {Kind::Last, 0}; }
  static PositionSpec at(uint32_t i) { return {Kind::Index, i}; }
  static PositionSpec all() { return {Kind::All, 0}; }

  std::vector<uint32_t> resolve(uint32_t seq_len) const {
    switch (kind) {
      case Kind::Last: return {seq_len - 1};
      case Kind::Index:
        if (index >= seq_len) throw ConfigError("PositionSpec: index beyond sequence length");
        return {index};
      case Kind::All: {
        std::vector<uint32_t> v(seq_len);
        for (uint32_t i = 0; i < seq_len; ++i) v[i] = i;
        return v;
      }
    }
    throw ConfigError("PositionSpec: unknown kind");
  }

  std::string name() const {
    switch (kind) {
      case Kind::Last: return "last";
      case Kind::Index: return "index:" + std::to_string(index);
      case Kind::All: return "all";
    }
    return "?";
  }

  static PositionSpec parse(const std::string& s) {
    if (s == "last") return last();
    if (s == "all") return all();
    if (s.rfind("index:", 0) == 0) return at(static_cast<uint32_t>(std::stoul(s.substr(6))));
    throw ConfigError("PositionSpec: expected last|all|index:N, got '" + s + "'");
  }
};

struct TargetRecord {
  uint32_t sequence_id = 0;  // dataset-global index
  uint32_t position = 0;
  std::vector<double> value;
};

struct TargetTable {
  TargetKind kind = TargetKind::SuffStat;
  uint32_t dim = 0;
  std::vector<TargetRecord> records;
};

struct TargetOptions {
  MomentMode moment_mode = MomentMode::Predictive;
  int moment_k = 2;
  std::vector<double> moment_scale;  // optional elementwise scaling
  uint32_t token_index = 0;          // TokenValue
};

namespace detail {

inline std::vector<double> one_hot(uint32_t idx, size_t dim) {
  std::vector<double> v(dim, 0.0);
  v[idx] = 1.0;
  return v;
}

inline std::vector<double> real_tokens(const gen::Sequence& s) {
  if (!s.reals.empty()) return s.reals;
  std::vector<double> v(s.ids.size());
  for (size_t i = 0; i < v.size(); ++i) v[i] = static_cast<double>(s.ids[i]);
  return v;
}

}  // namespace detail

// Builds targets for `split` (a view into the dataset); sequence ids are
// offset by `id_offset` so they stay dataset-global and line up with
// embedding extraction over the same split.
inline TargetTable make_targets(const gen::Dataset& d, std::span<const gen::Sequence> split,
                                uint32_t id_offset, TargetKind kind, PositionSpec pos,
                                const TargetOptions& opts = {}) {
  TargetTable table;
  table.kind = kind;
  gen::Family fam = d.family();
  const auto* hmm_cfg = std::get_if<gen::HmmConfig>(&d.config);
  std::vector<double> pi;
  if (hmm_cfg) pi = hmm_cfg->initial();
  const gen::GridSpec* grid = nullptr;
  if (const auto* rc = std::get_if<gen::RectanglesConfig>(&d.config)) grid = &rc->grid;
  std::vector<double> prior;
  if (const auto* cc = std::get_if<gen::ConjugateConfig>(&d.config)) prior = cc->hyper;

  for (size_t si = 0; si < split.size(); ++si) {
    const gen::Sequence& s = split[si];
    uint32_t n = static_cast<uint32_t>(s.size());
    uint32_t id = id_offset + static_cast<uint32_t>(si);
    std::vector<uint32_t> positions = pos.resolve(n);

    switch (kind) {
      case TargetKind::SuffStat: {
        std::vector<double> x = detail::real_tokens(s);
        SufficientStat stat = SufficientStat::empty(fam);
        uint32_t upto = 0;
        for (uint32_t p : positions) {
          while (upto <= p) stat = update_suffstat(stat, x[upto]), ++upto;
          table.records.push_back({id, p, stat.target()});
        }
        break;
      }
      case TargetKind::PostMoments: {
        std::vector<double> x = detail::real_tokens(s);
        SufficientStat stat = SufficientStat::empty(fam);
        uint32_t upto = 0;
        for (uint32_t p : positions) {
          while (upto <= p) stat = update_suffstat(stat, x[upto]), ++upto;
          PosteriorParams params = conjugate_posterior(fam, prior, stat);
          table.records.push_back(
              {id, p, posterior_moments(params, opts.moment_mode, opts.moment_k, opts.moment_scale)});
        }
        break;
      }
      case TargetKind::RectPosterior: {
        if (!grid) throw StageError("make_targets: RectPosterior needs a rectangles dataset");
        RectanglePosterior rp(*grid);
        uint32_t upto = 0;
        for (uint32_t p : positions) {
          while (upto <= p) rp.observe(s.points[upto]), ++upto;
          table.records.push_back({id, p, rp.posterior()});
        }
        break;
      }
      case TargetKind::HmmPredictive:
      case TargetKind::HmmFiltered: {
        if (!hmm_cfg) throw StageError("make_targets: HMM targets need an HMM dataset");
        HmmFilterResult fr = hmm_filter(d.shared.hmm_a, d.shared.hmm_b, pi, s.ids);
        for (uint32_t p : positions)
          table.records.push_back(
              {id, p, kind == TargetKind::HmmPredictive ? fr.predictive[p] : fr.filtered[p]});
        break;
      }
      case TargetKind::HmmViterbiNext: {
        if (!hmm_cfg) throw StageError("make_targets: HMM targets need an HMM dataset");
        for (uint32_t p : positions) {
          uint32_t upto = std::min(p + 2, n);
          ViterbiResult vr = hmm_viterbi(d.shared.hmm_a, d.shared.hmm_b, pi,
                                         std::span<const uint32_t>(s.ids.data(), upto));
          table.records.push_back({id, p, detail::one_hot(vr.last(), hmm_cfg->num_states)});
        }
        break;
      }
      case TargetKind::LdaTheta: {
        if (fam != gen::Family::Lda && fam != gen::Family::HmmLda)
          throw StageError("make_targets: LdaTheta needs an LDA-style dataset");
        for (uint32_t p : positions) table.records.push_back({id, p, s.latents.params});
        break;
      }
      case TargetKind::TokenValue: {
        std::vector<double> x = detail::real_tokens(s);
        if (opts.token_index >= x.size())
          throw ConfigError("make_targets: token_index beyond sequence length");
        for (uint32_t p : positions) table.records.push_back({id, p, {x[opts.token_index]}});
        break;
      }
    }
  }
  if (!table.records.empty()) table.dim = static_cast<uint32_t>(table.records[0].value.size());
  return table;
}

inline void save_targets(const TargetTable& t, const std::string& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw StageError("save_targets: cannot open " + path);
  for (const auto& r : t.records) {
    gen::json j{{"sequence_id", r.sequence_id},
                {"position", r.position},
                {"target_kind", target_kind_name(t.kind)},
                {"vector", r.value}};
    os << j.dump() << "\n";
  }
  if (!os) throw StageError("save_targets: write failed for " + path);
}

inline TargetTable load_targets(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw StageError("load_targets: cannot open " + path);
  TargetTable t;
  std::string line;
  bool first = true;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    gen::json j = gen::json::parse(line);
    TargetRecord r;
    r.sequence_id = j.at("sequence_id").get<uint32_t>();
    r.position = j.at("position").get<uint32_t>();
    j.at("vector").get_to(r.value);
    if (first) {
      t.kind = target_kind_from_name(j.at("target_kind").get<std::string>());
      first = false;
    }
    t.records.push_back(std::move(r));
  }
  if (t.records.empty()) throw StageError("load_targets: no records in " + path);
  t.dim = static_cast<uint32_t>(t.records[0].value.size());
  return t;
}

// Log-likelihood of a sequence under its recorded latent; used to test
// exchangeability of the conjugate / rectangle / LDA generators.
inline double loglik_given_latent(const gen::Dataset& d, const gen::Sequence& s) {
  switch (d.family()) {
    case gen::Family::GaussianGamma:
    case gen::Family::GammaExponential:
      return conjugate_loglik(d.family(), s.latents.params, s.reals);
    case gen::Family::BetaBernoulli: {
      std::vector<double> x(s.ids.begin(), s.ids.end());
      return conjugate_loglik(d.family(), s.latents.params, x);
    }
    case gen::Family::Rectangles: {
      const auto& grid = std::get<gen::RectanglesConfig>(d.config).grid;
      gen::RectangleHypothesis h = gen::rect_hypothesis(s.latents.hypothesis);
      auto lx = grid.lines_x();
      auto ly = grid.lines_y();
      for (const auto& p : s.points)
        if (p.x < lx[h.ix_lo] || p.x > lx[h.ix_hi] || p.y < ly[h.iy_lo] || p.y > ly[h.iy_hi])
          return -std::numeric_limits<double>::infinity();
      return -static_cast<double>(s.points.size()) * std::log(gen::rect_area(grid, h));
    }
    case gen::Family::Lda: return lda_doc_loglik(s.latents.params, d.shared.topics, s.ids);
    default: throw StageError("loglik_given_latent: family is not exchangeable");
  }
}

}  // namespace ssw::infer
