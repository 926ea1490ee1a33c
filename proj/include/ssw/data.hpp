#pragma once
// Dataset model: generator configs, sequences with recorded latents, split
// bookkeeping, and the on-disk format (one JSON header line followed by
// packed little-endian binary records; round-trips exactly).

#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "ssw/common.hpp"

namespace ssw::gen {

using json = nlohmann::json;

enum class Family { GaussianGamma, BetaBernoulli, GammaExponential, Rectangles, Hmm, Lda, HmmLda };

// Token representation: real scalars, 2-D points, or vocabulary indices.
enum class TokenKind { Real, Point, Id };

inline const char* family_name(Family f) {
  switch (f) {
    case Family::GaussianGamma: return "gaussian_gamma";
    case Family::BetaBernoulli: return "beta_bernoulli";
    case Family::GammaExponential: return "gamma_exponential";
    case Family::Rectangles: return "rectangles";
    case Family::Hmm: return "hmm";
    case Family::Lda: return "lda";
    case Family::HmmLda: return "hmm_lda";
  }
  throw ConfigError("family_name: unknown family");
}

inline Family family_from_name(const std::string& s) {
  for (Family f : {Family::GaussianGamma, Family::BetaBernoulli, Family::GammaExponential,
                   Family::Rectangles, Family::Hmm, Family::Lda, Family::HmmLda})
    if (s == family_name(f)) return f;
  throw ConfigError("family: unknown name '" + s + "'");
}

inline TokenKind token_kind_of(Family f) {
  switch (f) {
    case Family::GaussianGamma:
    case Family::GammaExponential: return TokenKind::Real;
    case Family::BetaBernoulli: return TokenKind::Id;  // 0/1 vocabulary
    case Family::Rectangles: return TokenKind::Point;
    default: return TokenKind::Id;
  }
}

// ---------------------------------------------------------------------------
// Generator configs

struct ConjugateConfig {
  Family family = Family::GaussianGamma;
  // GaussianGamma: {alpha0, beta0, mu0, lambda0}; BetaBernoulli / GammaExponential: {alpha, beta}.
  std::vector<double> hyper;
  uint32_t num_sequences = 0;
  uint32_t seq_len = 0;
  uint64_t seed = 0;

  void validate() const {
    size_t want = family == Family::GaussianGamma ? 4 : 2;
    if (family != Family::GaussianGamma && family != Family::BetaBernoulli &&
        family != Family::GammaExponential)
      throw ConfigError("ConjugateConfig.family: not a conjugate family");
    if (hyper.size() != want)
      throw ConfigError("ConjugateConfig.hyper: expected " + std::to_string(want) + " values");
    for (size_t i = 0; i < hyper.size(); ++i) {
      bool must_be_positive = !(family == Family::GaussianGamma && i == 2);  // mu0 is free
      if (must_be_positive && !(hyper[i] > 0.0))
        throw ConfigError("ConjugateConfig.hyper[" + std::to_string(i) + "]: must be > 0");
      if (!std::isfinite(hyper[i]))
        throw ConfigError("ConjugateConfig.hyper[" + std::to_string(i) + "]: not finite");
    }
    if (num_sequences == 0) throw ConfigError("ConjugateConfig.num_sequences: must be > 0");
    if (seq_len == 0) throw ConfigError("ConjugateConfig.seq_len: must be > 0");
  }
};

struct GridSpec {
  std::array<double, 7> unit_lengths_x{};
  std::array<double, 7> unit_lengths_y{};

  static GridSpec equal() {
    GridSpec g;
    g.unit_lengths_x.fill(1.0);
    g.unit_lengths_y.fill(1.0);
    return g;
  }
  // Alternating long/short units.
  static GridSpec unequal() {
    GridSpec g;
    for (int i = 0; i < 7; ++i) {
      double w = (i % 2 == 0) ? 0.4 : 0.16;
      g.unit_lengths_x[i] = w;
      g.unit_lengths_y[i] = w;
    }
    return g;
  }

  void validate() const {
    for (double u : unit_lengths_x)
      if (!(u > 0.0)) throw ConfigError("GridSpec.unit_lengths_x: units must be > 0");
    for (double u : unit_lengths_y)
      if (!(u > 0.0)) throw ConfigError("GridSpec.unit_lengths_y: units must be > 0");
  }

  // Cumulative sums: 8 grid lines per axis, line 0 at 0.
  std::array<double, 8> lines_x() const {
    std::array<double, 8> l{};
    for (int i = 0; i < 7; ++i) l[i + 1] = l[i] + unit_lengths_x[i];
    return l;
  }
  std::array<double, 8> lines_y() const {
    std::array<double, 8> l{};
    for (int i = 0; i < 7; ++i) l[i + 1] = l[i] + unit_lengths_y[i];
    return l;
  }
};

struct RectangleHypothesis {
  int ix_lo = 0, ix_hi = 0, iy_lo = 0, iy_hi = 0;  // grid-line indices in 0..7
};

inline constexpr int kNumLinePairs = 28;          // C(8,2)
inline constexpr int kNumRectHypotheses = 784;    // 28 * 28

// Fixed enumeration: pairs (lo, hi) in lexicographic order per axis,
// index = x_pair * 28 + y_pair.
inline int line_pair_index(int lo, int hi) {
  // pairs before those starting at `lo`: sum_{a<lo} (7-a)
  int before = lo * 7 - lo * (lo - 1) / 2;
  return before + (hi - lo - 1);
}

inline RectangleHypothesis rect_hypothesis(int index) {
  if (index < 0 || index >= kNumRectHypotheses) throw StageError("rect_hypothesis: index out of range");
  int xp = index / kNumLinePairs, yp = index % kNumLinePairs;
  auto unpack = [](int p, int& lo, int& hi) {
    for (lo = 0; lo < 7; ++lo) {
      int count = 7 - lo;
      if (p < count) {
        hi = lo + 1 + p;
        return;
      }
      p -= count;
    }
    throw StageError("rect_hypothesis: bad pair index");
  };
  RectangleHypothesis h;
  unpack(xp, h.ix_lo, h.ix_hi);
  unpack(yp, h.iy_lo, h.iy_hi);
  return h;
}

inline int rect_index(const RectangleHypothesis& h) {
  return line_pair_index(h.ix_lo, h.ix_hi) * kNumLinePairs + line_pair_index(h.iy_lo, h.iy_hi);
}

inline double rect_area(const GridSpec& g, const RectangleHypothesis& h) {
  auto lx = g.lines_x();
  auto ly = g.lines_y();
  return (lx[h.ix_hi] - lx[h.ix_lo]) * (ly[h.iy_hi] - ly[h.iy_lo]);
}

struct RectanglesConfig {
  GridSpec grid = GridSpec::equal();
  uint32_t num_sequences = 0;
  uint32_t seq_len = 0;
  uint64_t seed = 0;

  void validate() const {
    grid.validate();
    if (num_sequences == 0) throw ConfigError("RectanglesConfig.num_sequences: must be > 0");
    if (seq_len == 0) throw ConfigError("RectanglesConfig.seq_len: must be > 0");
  }
};

struct HmmConfig {
  uint32_t num_states = 4;
  uint32_t vocab = 64;
  double dirichlet_transition = 0.5;
  double dirichlet_emission = 0.5;
  std::vector<double> initial_dist;  // empty = uniform
  uint32_t num_sequences = 0;
  uint32_t seq_len = 0;
  uint64_t seed = 0;

  std::vector<double> initial() const {
    if (!initial_dist.empty()) return initial_dist;
    return std::vector<double>(num_states, 1.0 / num_states);
  }

  void validate() const {
    if (num_states < 2) throw ConfigError("HmmConfig.num_states: must be >= 2");
    if (vocab < 2) throw ConfigError("HmmConfig.vocab: must be >= 2");
    if (!(dirichlet_transition > 0.0)) throw ConfigError("HmmConfig.dirichlet_transition: must be > 0");
    if (!(dirichlet_emission > 0.0)) throw ConfigError("HmmConfig.dirichlet_emission: must be > 0");
    if (!initial_dist.empty()) {
      if (initial_dist.size() != num_states)
        throw ConfigError("HmmConfig.initial_dist: length must equal num_states");
      double s = 0.0;
      for (double p : initial_dist) {
        if (!(p >= 0.0)) throw ConfigError("HmmConfig.initial_dist: negative entry");
        s += p;
      }
      if (std::abs(s - 1.0) > 1e-12) throw ConfigError("HmmConfig.initial_dist: must sum to 1");
    }
    if (num_sequences == 0) throw ConfigError("HmmConfig.num_sequences: must be > 0");
    if (seq_len == 0) throw ConfigError("HmmConfig.seq_len: must be > 0");
  }
};

struct LdaConfig {
  uint32_t vocab = 1000;
  uint32_t num_topics = 5;
  double doc_dirichlet = 0.5;    // alpha
  double topic_dirichlet = 0.1;  // eta
  uint32_t num_sequences = 0;
  uint32_t seq_len = 100;
  uint64_t seed = 0;

  void validate() const {
    if (vocab < 2) throw ConfigError("LdaConfig.vocab: must be >= 2");
    if (num_topics < 2) throw ConfigError("LdaConfig.num_topics: must be >= 2");
    if (!(doc_dirichlet > 0.0)) throw ConfigError("LdaConfig.doc_dirichlet: must be > 0");
    if (!(topic_dirichlet > 0.0)) throw ConfigError("LdaConfig.topic_dirichlet: must be > 0");
    if (num_sequences == 0) throw ConfigError("LdaConfig.num_sequences: must be > 0");
    if (seq_len == 0) throw ConfigError("LdaConfig.seq_len: must be > 0");
  }
};

struct HmmLdaConfig {
  LdaConfig lda;                      // vocab/topics/alpha/eta of the semantic component
  uint32_t num_syntax_classes = 3;
  double semantic_entry_prob = 0.5;   // P(next class = semantic) from every class
  double syntax_transition_dirichlet = 1.0;
  double syntax_emission_dirichlet = 0.1;
  uint32_t num_sequences = 0;
  uint32_t seq_len = 400;
  uint64_t seed = 0;

  uint32_t num_classes() const { return 1 + num_syntax_classes; }

  void validate() const {
    LdaConfig l = lda;
    l.num_sequences = num_sequences ? num_sequences : 1;
    l.seq_len = seq_len ? seq_len : 1;
    l.validate();
    if (num_syntax_classes == 0) throw ConfigError("HmmLdaConfig.num_syntax_classes: must be > 0");
    if (!(semantic_entry_prob > 0.0 && semantic_entry_prob <= 1.0))
      throw ConfigError("HmmLdaConfig.semantic_entry_prob: must be in (0, 1]");
    if (!(syntax_transition_dirichlet > 0.0))
      throw ConfigError("HmmLdaConfig.syntax_transition_dirichlet: must be > 0");
    if (!(syntax_emission_dirichlet > 0.0))
      throw ConfigError("HmmLdaConfig.syntax_emission_dirichlet: must be > 0");
    if (num_sequences == 0) throw ConfigError("HmmLdaConfig.num_sequences: must be > 0");
    if (seq_len == 0) throw ConfigError("HmmLdaConfig.seq_len: must be > 0");
  }
};

using GenConfig = std::variant<ConjugateConfig, RectanglesConfig, HmmConfig, LdaConfig, HmmLdaConfig>;

// ---------------------------------------------------------------------------
// JSON round-trips for configs

inline void to_json(json& j, const GridSpec& g) {
  j = json{{"unit_lengths_x", g.unit_lengths_x}, {"unit_lengths_y", g.unit_lengths_y}};
}
inline void from_json(const json& j, GridSpec& g) {
  j.at("unit_lengths_x").get_to(g.unit_lengths_x);
  j.at("unit_lengths_y").get_to(g.unit_lengths_y);
}

inline void to_json(json& j, const ConjugateConfig& c) {
  j = json{{"family", family_name(c.family)},
           {"hyper", c.hyper},
           {"num_sequences", c.num_sequences},
           {"seq_len", c.seq_len},
           {"seed", c.seed}};
}
inline void from_json(const json& j, ConjugateConfig& c) {
  c.family = family_from_name(j.at("family").get<std::string>());
  j.at("hyper").get_to(c.hyper);
  j.at("num_sequences").get_to(c.num_sequences);
  j.at("seq_len").get_to(c.seq_len);
  j.at("seed").get_to(c.seed);
}

inline void to_json(json& j, const RectanglesConfig& c) {
  j = json{{"family", "rectangles"},
           {"grid", c.grid},
           {"num_sequences", c.num_sequences},
           {"seq_len", c.seq_len},
           {"seed", c.seed}};
}
inline void from_json(const json& j, RectanglesConfig& c) {
  if (j.contains("grid")) j.at("grid").get_to(c.grid);
  j.at("num_sequences").get_to(c.num_sequences);
  j.at("seq_len").get_to(c.seq_len);
  j.at("seed").get_to(c.seed);
}

inline void to_json(json& j, const HmmConfig& c) {
  j = json{{"family", "hmm"},
           {"num_states", c.num_states},
           {"vocab", c.vocab},
           {"dirichlet_transition", c.dirichlet_transition},
           {"dirichlet_emission", c.dirichlet_emission},
           {"num_sequences", c.num_sequences},
           {"seq_len", c.seq_len},
           {"seed", c.seed}};
  if (!c.initial_dist.empty()) j["initial_dist"] = c.initial_dist;
}
inline void from_json(const json& j, HmmConfig& c) {
  c = HmmConfig{};
  if (j.contains("num_states")) j.at("num_states").get_to(c.num_states);
  if (j.contains("vocab")) j.at("vocab").get_to(c.vocab);
  if (j.contains("dirichlet_transition")) j.at("dirichlet_transition").get_to(c.dirichlet_transition);
  if (j.contains("dirichlet_emission")) j.at("dirichlet_emission").get_to(c.dirichlet_emission);
  if (j.contains("initial_dist")) j.at("initial_dist").get_to(c.initial_dist);
  j.at("num_sequences").get_to(c.num_sequences);
  j.at("seq_len").get_to(c.seq_len);
  j.at("seed").get_to(c.seed);
}

inline void to_json(json& j, const LdaConfig& c) {
  j = json{{"family", "lda"},
           {"vocab", c.vocab},
           {"num_topics", c.num_topics},
           {"doc_dirichlet", c.doc_dirichlet},
           {"topic_dirichlet", c.topic_dirichlet},
           {"num_sequences", c.num_sequences},
           {"seq_len", c.seq_len},
           {"seed", c.seed}};
}
inline void from_json(const json& j, LdaConfig& c) {
  c = LdaConfig{};
  if (j.contains("vocab")) j.at("vocab").get_to(c.vocab);
  if (j.contains("num_topics")) j.at("num_topics").get_to(c.num_topics);
  if (j.contains("doc_dirichlet")) j.at("doc_dirichlet").get_to(c.doc_dirichlet);
  if (j.contains("topic_dirichlet")) j.at("topic_dirichlet").get_to(c.topic_dirichlet);
  j.at("num_sequences").get_to(c.num_sequences);
  if (j.contains("seq_len")) j.at("seq_len").get_to(c.seq_len);
  j.at("seed").get_to(c.seed);
}

inline void to_json(json& j, const HmmLdaConfig& c) {
  json lda;
  to_json(lda, c.lda);
  lda.erase("family");
  j = json{{"family", "hmm_lda"},
           {"lda", lda},
           {"num_syntax_classes", c.num_syntax_classes},
           {"semantic_entry_prob", c.semantic_entry_prob},
           {"syntax_transition_dirichlet", c.syntax_transition_dirichlet},
           {"syntax_emission_dirichlet", c.syntax_emission_dirichlet},
           {"num_sequences", c.num_sequences},
           {"seq_len", c.seq_len},
           {"seed", c.seed}};
}
inline void from_json(const json& j, HmmLdaConfig& c) {
  c = HmmLdaConfig{};
  if (j.contains("lda")) {
    json lda = j.at("lda");
    lda["family"] = "lda";
    if (!lda.contains("num_sequences")) lda["num_sequences"] = 1;
    if (!lda.contains("seed")) lda["seed"] = 0;
    from_json(lda, c.lda);
  }
  if (j.contains("num_syntax_classes")) j.at("num_syntax_classes").get_to(c.num_syntax_classes);
  j.at("semantic_entry_prob").get_to(c.semantic_entry_prob);
  if (j.contains("syntax_transition_dirichlet"))
    j.at("syntax_transition_dirichlet").get_to(c.syntax_transition_dirichlet);
  if (j.contains("syntax_emission_dirichlet"))
    j.at("syntax_emission_dirichlet").get_to(c.syntax_emission_dirichlet);
  j.at("num_sequences").get_to(c.num_sequences);
  j.at("seq_len").get_to(c.seq_len);
  j.at("seed").get_to(c.seed);
}

inline Family config_family(const GenConfig& c) {
  return std::visit(
      [](const auto& cfg) -> Family {
        using T = std::decay_t<decltype(cfg)>;
        if constexpr (std::is_same_v<T, ConjugateConfig>) return cfg.family;
        else if constexpr (std::is_same_v<T, RectanglesConfig>) return Family::Rectangles;
        else if constexpr (std::is_same_v<T, HmmConfig>) return Family::Hmm;
        else if constexpr (std::is_same_v<T, LdaConfig>) return Family::Lda;
        else return Family::HmmLda;
      },
      c);
}

inline json config_to_json(const GenConfig& c) {
  return std::visit([](const auto& cfg) { return json(cfg); }, c);
}

inline GenConfig config_from_json(const json& j) {
  Family f = family_from_name(j.at("family").get<std::string>());
  switch (f) {
    case Family::GaussianGamma:
    case Family::BetaBernoulli:
    case Family::GammaExponential: return j.get<ConjugateConfig>();
    case Family::Rectangles: return j.get<RectanglesConfig>();
    case Family::Hmm: return j.get<HmmConfig>();
    case Family::Lda: return j.get<LdaConfig>();
    case Family::HmmLda: return j.get<HmmLdaConfig>();
  }
  throw ConfigError("config_from_json: unknown family");
}

inline void validate_config(const GenConfig& c) {
  std::visit([](const auto& cfg) { cfg.validate(); }, c);
}

// ---------------------------------------------------------------------------
// Sequences and datasets

struct Latents {
  std::vector<double> params;      // conjugate: theta / (mu, tau); LDA & HMM-LDA: theta_i
  std::vector<uint32_t> path;      // HMM: z path; HMM-LDA: class path (0 = semantic)
  int32_t hypothesis = -1;         // rectangles: hypothesis index
};

struct Sequence {
  std::vector<double> reals;       // TokenKind::Real
  std::vector<Point2> points;      // TokenKind::Point
  std::vector<uint32_t> ids;       // TokenKind::Id
  Latents latents;

  size_t size() const { return std::max({reals.size(), points.size(), ids.size()}); }
};

// Parameters drawn once per dataset and shared by all sequences.
struct SharedParams {
  std::vector<std::vector<double>> hmm_a;         // C x C transition rows
  std::vector<std::vector<double>> hmm_b;         // C x V emission rows
  std::vector<std::vector<double>> topics;        // K x V topic-word rows
  std::vector<std::vector<double>> class_trans;   // HMM-LDA class transitions
  std::vector<double> class_init;                 // HMM-LDA initial class dist
  std::vector<std::vector<double>> syntax_words;  // per-syntactic-class word dists
};

struct SplitSizes {
  uint32_t n1 = 0, n2 = 0, n3 = 0;
  uint32_t total() const { return n1 + n2 + n3; }
};

inline void to_json(json& j, const SplitSizes& s) { j = json::array({s.n1, s.n2, s.n3}); }
inline void from_json(const json& j, SplitSizes& s) {
  s.n1 = j.at(0).get<uint32_t>();
  s.n2 = j.at(1).get<uint32_t>();
  s.n3 = j.at(2).get<uint32_t>();
}

struct Dataset {
  GenConfig config;
  uint64_t seed = 0;
  SplitSizes split;
  SharedParams shared;
  std::vector<Sequence> sequences;

  Family family() const { return config_family(config); }
  TokenKind token_kind() const { return token_kind_of(family()); }

  uint32_t vocab() const {
    switch (family()) {
      case Family::BetaBernoulli: return 2;
      case Family::Hmm: return std::get<HmmConfig>(config).vocab;
      case Family::Lda: return std::get<LdaConfig>(config).vocab;
      case Family::HmmLda: return std::get<HmmLdaConfig>(config).lda.vocab;
      default: return 0;
    }
  }

  std::span<const Sequence> set1() const { return {sequences.data(), split.n1}; }
  std::span<const Sequence> set2() const { return {sequences.data() + split.n1, split.n2}; }
  std::span<const Sequence> set3() const { return {sequences.data() + split.n1 + split.n2, split.n3}; }
};

// Contiguous splits in generation order (generation is i.i.d. across
// sequences, so order-based splitting is unbiased).
inline std::array<std::span<const Sequence>, 3> split_dataset(const Dataset& d, uint32_t n1,
                                                              uint32_t n2, uint32_t n3) {
  if (static_cast<size_t>(n1) + n2 + n3 > d.sequences.size())
    throw ConfigError("split_dataset: n1+n2+n3 exceeds dataset size");
  const Sequence* p = d.sequences.data();
  return {std::span<const Sequence>{p, n1}, std::span<const Sequence>{p + n1, n2},
          std::span<const Sequence>{p + n1 + n2, n3}};
}

// Paper-default split proportions per family, rescaled to M when the dataset
// is generated at another size.
inline SplitSizes default_split(Family f, uint32_t m) {
  uint32_t p1 = 10000, p2 = 3000, p3 = 1000;
  if (f == Family::Rectangles) p1 = 20000, p2 = 19000, p3 = 1000;
  if (f == Family::HmmLda) p1 = 10000, p2 = 1000, p3 = 1000;
  uint32_t total = p1 + p2 + p3;
  if (m == total) return {p1, p2, p3};
  auto part = [&](uint32_t p) -> uint32_t {
    return static_cast<uint32_t>((static_cast<uint64_t>(m) * p) / total);
  };
  SplitSizes s{part(p1), part(p2), 0};
  if (s.n1 == 0) s.n1 = 1;
  if (s.n2 == 0) s.n2 = 1;
  if (s.n1 + s.n2 >= m) throw ConfigError("default_split: dataset too small to split");
  s.n3 = m - s.n1 - s.n2;
  return s;
}

// Generation-time variant: a dataset too small for a three-way split keeps
// everything in the first span, so tiny diagnostic datasets can still be
// generated; stages that need sets 2/3 fail at their own entry points.
inline SplitSizes default_split_lenient(Family f, uint32_t m) {
  try {
    return default_split(f, m);
  } catch (const ConfigError&) {
    return SplitSizes{m, 0, 0};
  }
}

// ---------------------------------------------------------------------------
// Binary serialization

namespace detail {

inline void put_u32(std::ostream& os, uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
inline void put_i32(std::ostream& os, int32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
inline void put_u64(std::ostream& os, uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }
inline void put_f64(std::ostream& os, double v) { os.write(reinterpret_cast<const char*>(&v), 8); }

inline uint32_t get_u32(std::istream& is) {
  uint32_t v;
  is.read(reinterpret_cast<char*>(&v), 4);
  return v;
}
inline int32_t get_i32(std::istream& is) {
  int32_t v;
  is.read(reinterpret_cast<char*>(&v), 4);
  return v;
}
inline uint64_t get_u64(std::istream& is) {
  uint64_t v;
  is.read(reinterpret_cast<char*>(&v), 8);
  return v;
}
inline double get_f64(std::istream& is) {
  double v;
  is.read(reinterpret_cast<char*>(&v), 8);
  return v;
}

inline void put_f64_vec(std::ostream& os, std::span<const double> v) {
  put_u32(os, static_cast<uint32_t>(v.size()));
  os.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * 8));
}
inline std::vector<double> get_f64_vec(std::istream& is) {
  std::vector<double> v(get_u32(is));
  is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * 8));
  return v;
}
inline void put_u32_vec(std::ostream& os, std::span<const uint32_t> v) {
  put_u32(os, static_cast<uint32_t>(v.size()));
  os.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * 4));
}
inline std::vector<uint32_t> get_u32_vec(std::istream& is) {
  std::vector<uint32_t> v(get_u32(is));
  is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * 4));
  return v;
}
inline void put_rows(std::ostream& os, const std::vector<std::vector<double>>& rows) {
  put_u32(os, static_cast<uint32_t>(rows.size()));
  for (const auto& r : rows) put_f64_vec(os, r);
}
inline std::vector<std::vector<double>> get_rows(std::istream& is) {
  std::vector<std::vector<double>> rows(get_u32(is));
  for (auto& r : rows) r = get_f64_vec(is);
  return rows;
}

}  // namespace detail

inline void save_dataset(const Dataset& d, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw StageError("save_dataset: cannot open " + path);
  json header{{"schema", 1},
              {"kind", "dataset"},
              {"family", family_name(d.family())},
              {"config", config_to_json(d.config)},
              {"seed", d.seed},
              {"split", d.split},
              {"num_sequences", d.sequences.size()}};
  os << header.dump() << "\n";
  using namespace detail;
  put_rows(os, d.shared.hmm_a);
  put_rows(os, d.shared.hmm_b);
  put_rows(os, d.shared.topics);
  put_rows(os, d.shared.class_trans);
  put_f64_vec(os, d.shared.class_init);
  put_rows(os, d.shared.syntax_words);
  TokenKind kind = d.token_kind();
  for (const auto& s : d.sequences) {
    switch (kind) {
      case TokenKind::Real: put_f64_vec(os, s.reals); break;
      case TokenKind::Point: {
        put_u32(os, static_cast<uint32_t>(s.points.size()));
        for (const auto& p : s.points) {
          put_f64(os, p.x);
          put_f64(os, p.y);
        }
        break;
      }
      case TokenKind::Id: put_u32_vec(os, s.ids); break;
    }
    put_f64_vec(os, s.latents.params);
    put_u32_vec(os, s.latents.path);
    put_i32(os, s.latents.hypothesis);
  }
  if (!os) throw StageError("save_dataset: write failed for " + path);
}

inline Dataset load_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw StageError("load_dataset: cannot open " + path);
  std::string line;
  if (!std::getline(is, line)) throw StageError("load_dataset: missing header in " + path);
  json header = json::parse(line);
  if (header.value("kind", "") != "dataset" || header.value("schema", 0) != 1)
    throw StageError("load_dataset: not a v1 dataset file: " + path);
  Dataset d;
  d.config = config_from_json(header.at("config"));
  d.seed = header.at("seed").get<uint64_t>();
  d.split = header.at("split").get<SplitSizes>();
  size_t m = header.at("num_sequences").get<size_t>();
  using namespace detail;
  d.shared.hmm_a = get_rows(is);
  d.shared.hmm_b = get_rows(is);
  d.shared.topics = get_rows(is);
  d.shared.class_trans = get_rows(is);
  d.shared.class_init = get_f64_vec(is);
  d.shared.syntax_words = get_rows(is);
  TokenKind kind = d.token_kind();
  d.sequences.resize(m);
  for (auto& s : d.sequences) {
    switch (kind) {
      case TokenKind::Real: s.reals = get_f64_vec(is); break;
      case TokenKind::Point: {
        uint32_t n = get_u32(is);
        s.points.resize(n);
        for (auto& p : s.points) {
          p.x = get_f64(is);
          p.y = get_f64(is);
        }
        break;
      }
      case TokenKind::Id: s.ids = get_u32_vec(is); break;
    }
    s.latents.params = get_f64_vec(is);
    s.latents.path = get_u32_vec(is);
    s.latents.hypothesis = get_i32(is);
  }
  if (!is) throw StageError("load_dataset: truncated file " + path);
  return d;
}

}  // namespace ssw::gen
