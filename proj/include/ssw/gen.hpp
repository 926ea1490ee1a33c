#pragma once
// Seeded samplers for the synthetic generative processes. Ground-truth
// latents are recorded next to each sequence. Sequence i always draws from
// Rng(derive_seed(seed, 1+i)); dataset-level shared parameters draw from
// stream 0, so output is independent of generation order or threading.

#include <cstdint>
#include <vector>

#include "ssw/data.hpp"
#include "ssw/rng.hpp"

namespace ssw::gen {

inline Dataset gen_conjugate(const ConjugateConfig& cfg) {
  cfg.validate();
  Dataset d;
  d.config = cfg;
  d.seed = cfg.seed;
  d.split = default_split_lenient(cfg.family, cfg.num_sequences);
  d.sequences.resize(cfg.num_sequences);
  for (uint32_t i = 0; i < cfg.num_sequences; ++i) {
    Rng rng(derive_seed(cfg.seed, 1 + i));
    Sequence& s = d.sequences[i];
    switch (cfg.family) {
      case Family::GaussianGamma: {
        double a0 = cfg.hyper[0], b0 = cfg.hyper[1], mu0 = cfg.hyper[2], l0 = cfg.hyper[3];
        double tau = rng.gamma(a0, b0);
        double mu = rng.normal(mu0, 1.0 / std::sqrt(l0 * tau));
        double sd = 1.0 / std::sqrt(tau);
        s.latents.params = {mu, tau};
        s.reals.resize(cfg.seq_len);
        for (auto& x : s.reals) x = rng.normal(mu, sd);
        break;
      }
      case Family::BetaBernoulli: {
        double theta = rng.beta(cfg.hyper[0], cfg.hyper[1]);
        s.latents.params = {theta};
        s.ids.resize(cfg.seq_len);
        for (auto& x : s.ids) x = rng.bernoulli(theta) ? 1u : 0u;
        break;
      }
      case Family::GammaExponential: {
        double theta = rng.gamma(cfg.hyper[0], cfg.hyper[1]);  // rate of the exponential
        s.latents.params = {theta};
        s.reals.resize(cfg.seq_len);
        for (auto& x : s.reals) x = rng.exponential(theta);
        break;
      }
      default: throw ConfigError("gen_conjugate: not a conjugate family");
    }
  }
  return d;
}

inline Dataset gen_rectangles(const RectanglesConfig& cfg) {
  cfg.validate();
  Dataset d;
  d.config = cfg;
  d.seed = cfg.seed;
  d.split = default_split_lenient(Family::Rectangles, cfg.num_sequences);
  d.sequences.resize(cfg.num_sequences);
  auto lx = cfg.grid.lines_x();
  auto ly = cfg.grid.lines_y();
  for (uint32_t i = 0; i < cfg.num_sequences; ++i) {
    Rng rng(derive_seed(cfg.seed, 1 + i));
    Sequence& s = d.sequences[i];
    int h = static_cast<int>(rng.uniform_int(kNumRectHypotheses));
    RectangleHypothesis r = rect_hypothesis(h);
    s.latents.hypothesis = h;
    s.points.resize(cfg.seq_len);
    for (auto& p : s.points) {
      p.x = rng.uniform(lx[r.ix_lo], lx[r.ix_hi]);
      p.y = rng.uniform(ly[r.iy_lo], ly[r.iy_hi]);
    }
  }
  return d;
}

inline Dataset gen_hmm(const HmmConfig& cfg) {
  cfg.validate();
  Dataset d;
  d.config = cfg;
  d.seed = cfg.seed;
  d.split = default_split_lenient(Family::Hmm, cfg.num_sequences);
  Rng shared_rng(derive_seed(cfg.seed, 0));
  d.shared.hmm_a.resize(cfg.num_states);
  for (auto& row : d.shared.hmm_a)
    row = shared_rng.dirichlet_symmetric(cfg.dirichlet_transition, cfg.num_states);
  d.shared.hmm_b.resize(cfg.num_states);
  for (auto& row : d.shared.hmm_b)
    row = shared_rng.dirichlet_symmetric(cfg.dirichlet_emission, cfg.vocab);
  std::vector<double> pi = cfg.initial();
  d.sequences.resize(cfg.num_sequences);
  for (uint32_t i = 0; i < cfg.num_sequences; ++i) {
    Rng rng(derive_seed(cfg.seed, 1 + i));
    Sequence& s = d.sequences[i];
    s.ids.resize(cfg.seq_len);
    s.latents.path.resize(cfg.seq_len);
    uint32_t z = rng.categorical(pi);
    for (uint32_t t = 0; t < cfg.seq_len; ++t) {
      s.latents.path[t] = z;
      s.ids[t] = rng.categorical(d.shared.hmm_b[z]);
      if (t + 1 < cfg.seq_len) z = rng.categorical(d.shared.hmm_a[z]);
    }
  }
  return d;
}

inline Dataset gen_lda(const LdaConfig& cfg) {
  cfg.validate();
  Dataset d;
  d.config = cfg;
  d.seed = cfg.seed;
  d.split = default_split_lenient(Family::Lda, cfg.num_sequences);
  Rng shared_rng(derive_seed(cfg.seed, 0));
  d.shared.topics.resize(cfg.num_topics);
  for (auto& row : d.shared.topics)
    row = shared_rng.dirichlet_symmetric(cfg.topic_dirichlet, cfg.vocab);
  d.sequences.resize(cfg.num_sequences);
  for (uint32_t i = 0; i < cfg.num_sequences; ++i) {
    Rng rng(derive_seed(cfg.seed, 1 + i));
    Sequence& s = d.sequences[i];
    s.latents.params = rng.dirichlet_symmetric(cfg.doc_dirichlet, cfg.num_topics);
    s.ids.resize(cfg.seq_len);
    for (auto& w : s.ids) {
      uint32_t topic = rng.categorical(s.latents.params);
      w = rng.categorical(d.shared.topics[topic]);
    }
  }
  return d;
}

inline Dataset gen_hmm_lda(const HmmLdaConfig& cfg) {
  cfg.validate();
  Dataset d;
  d.config = cfg;
  d.seed = cfg.seed;
  d.split = default_split_lenient(Family::HmmLda, cfg.num_sequences);
  Rng shared_rng(derive_seed(cfg.seed, 0));
  const uint32_t k = cfg.lda.num_topics, v = cfg.lda.vocab;
  const uint32_t syn = cfg.num_syntax_classes, classes = cfg.num_classes();
  const double p = cfg.semantic_entry_prob;
  d.shared.topics.resize(k);
  for (auto& row : d.shared.topics) row = shared_rng.dirichlet_symmetric(cfg.lda.topic_dirichlet, v);
  d.shared.syntax_words.resize(syn);
  for (auto& row : d.shared.syntax_words)
    row = shared_rng.dirichlet_symmetric(cfg.syntax_emission_dirichlet, v);
  // Class 0 is semantic. Every row enters it with probability p; the
  // remaining mass spreads over syntactic classes by a Dirichlet draw.
  auto make_class_dist = [&]() {
    std::vector<double> row(classes);
    row[0] = p;
    std::vector<double> rest = shared_rng.dirichlet_symmetric(cfg.syntax_transition_dirichlet, syn);
    for (uint32_t c = 0; c < syn; ++c) row[1 + c] = (1.0 - p) * rest[c];
    return row;
  };
  d.shared.class_init = make_class_dist();
  d.shared.class_trans.resize(classes);
  for (auto& row : d.shared.class_trans) row = make_class_dist();
  d.sequences.resize(cfg.num_sequences);
  for (uint32_t i = 0; i < cfg.num_sequences; ++i) {
    Rng rng(derive_seed(cfg.seed, 1 + i));
    Sequence& s = d.sequences[i];
    s.latents.params = rng.dirichlet_symmetric(cfg.lda.doc_dirichlet, k);
    s.ids.resize(cfg.seq_len);
    s.latents.path.resize(cfg.seq_len);
    uint32_t c = rng.categorical(d.shared.class_init);
    for (uint32_t t = 0; t < cfg.seq_len; ++t) {
      s.latents.path[t] = c;
      if (c == 0) {
        uint32_t topic = rng.categorical(s.latents.params);
        s.ids[t] = rng.categorical(d.shared.topics[topic]);
      } else {
        s.ids[t] = rng.categorical(d.shared.syntax_words[c - 1]);
      }
      if (t + 1 < cfg.seq_len) c = rng.categorical(d.shared.class_trans[c]);
    }
  }
  return d;
}

inline Dataset generate(const GenConfig& cfg) {
  return std::visit(
      [](const auto& c) -> Dataset {
        using T = std::decay_t<decltype(c)>;
        if constexpr (std::is_same_v<T, ConjugateConfig>) return gen_conjugate(c);
        else if constexpr (std::is_same_v<T, RectanglesConfig>) return gen_rectangles(c);
        else if constexpr (std::is_same_v<T, HmmConfig>) return gen_hmm(c);
        else if constexpr (std::is_same_v<T, LdaConfig>) return gen_lda(c);
        else return gen_hmm_lda(c);
      },
      cfg);
}

}  // namespace ssw::gen
