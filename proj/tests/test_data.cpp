#include <catch2/catch_amalgamated.hpp>

#include <unistd.h>

#include <filesystem>
#include <fstream>

#include <ssw/data.hpp>
#include <ssw/gen.hpp>

namespace fs = std::filesystem;
using namespace ssw;
using namespace ssw::gen;
using json = nlohmann::json;

namespace {

fs::path temp_file(const std::string& stem) {
  return fs::temp_directory_path() / ("ssw_test_" + stem + "_" + std::to_string(::getpid()));
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

TEST_CASE("family and token-kind tables round trip") {
  for (Family f : {Family::GaussianGamma, Family::BetaBernoulli, Family::GammaExponential,
                   Family::Rectangles, Family::Hmm, Family::Lda, Family::HmmLda})
    REQUIRE(family_from_name(family_name(f)) == f);
  REQUIRE_THROWS_AS(family_from_name("nope"), ConfigError);
  REQUIRE(token_kind_of(Family::GaussianGamma) == TokenKind::Real);
  REQUIRE(token_kind_of(Family::Rectangles) == TokenKind::Point);
  REQUIRE(token_kind_of(Family::BetaBernoulli) == TokenKind::Id);
  REQUIRE(token_kind_of(Family::Lda) == TokenKind::Id);
}

TEST_CASE("gen configs survive a JSON round trip") {
  ConjugateConfig cj;
  cj.family = Family::GaussianGamma;
  cj.hyper = {5, 1, 1, 1};
  cj.num_sequences = 10;
  cj.seq_len = 4;
  cj.seed = 99;

  RectanglesConfig rc;
  rc.grid = GridSpec::unequal();
  rc.num_sequences = 7;
  rc.seq_len = 20;
  rc.seed = 3;

  HmmConfig hc;
  hc.num_sequences = 5;
  hc.seq_len = 12;
  hc.seed = 4;
  hc.dirichlet_emission = 1.0;

  LdaConfig lc;
  lc.vocab = 50;
  lc.num_sequences = 5;
  lc.seq_len = 30;
  lc.seed = 5;

  HmmLdaConfig hl;
  hl.lda = lc;
  hl.num_sequences = 5;
  hl.seq_len = 40;
  hl.seed = 6;
  hl.semantic_entry_prob = 0.4;

  for (GenConfig cfg : {GenConfig(cj), GenConfig(rc), GenConfig(hc), GenConfig(lc), GenConfig(hl)}) {
    json j = config_to_json(cfg);
    GenConfig back = config_from_json(j);
    REQUIRE(config_to_json(back) == j);
    REQUIRE(config_family(back) == config_family(cfg));
  }
}

TEST_CASE("config validation rejects malformed settings") {
  ConjugateConfig cj;
  cj.family = Family::BetaBernoulli;
  cj.hyper = {2, 8, 1};  // wrong arity
  cj.num_sequences = 1;
  cj.seq_len = 1;
  REQUIRE_THROWS_AS(cj.validate(), ConfigError);
  cj.hyper = {2, -1};
  REQUIRE_THROWS_AS(cj.validate(), ConfigError);
  cj.hyper = {2, 8};
  REQUIRE_NOTHROW(cj.validate());
  cj.num_sequences = 0;
  REQUIRE_THROWS_AS(cj.validate(), ConfigError);

  // GaussianGamma mu0 may be negative, other hypers must stay positive.
  ConjugateConfig gg;
  gg.family = Family::GaussianGamma;
  gg.hyper = {5, 1, -2.5, 1};
  gg.num_sequences = 1;
  gg.seq_len = 1;
  REQUIRE_NOTHROW(gg.validate());
  gg.hyper = {5, 1, 1, -1};
  REQUIRE_THROWS_AS(gg.validate(), ConfigError);

  HmmConfig hc;
  hc.num_sequences = 1;
  hc.seq_len = 1;
  hc.initial_dist = {0.5, 0.5, 0.0, 0.1};  // wrong sum
  REQUIRE_THROWS_AS(hc.validate(), ConfigError);
  hc.initial_dist = {0.25, 0.25, 0.25, 0.25};
  REQUIRE_NOTHROW(hc.validate());

  HmmLdaConfig hl;
  hl.lda.vocab = 20;
  hl.num_sequences = 1;
  hl.seq_len = 1;
  hl.semantic_entry_prob = 0.0;  // degenerate: semantic words never appear
  REQUIRE_THROWS_AS(hl.validate(), ConfigError);
  hl.semantic_entry_prob = 1.0;
  REQUIRE_NOTHROW(hl.validate());
}

TEST_CASE("default split matches pinned proportions") {
  SECTION("exact totals reproduce the canonical sizes") {
    auto s = default_split(Family::GaussianGamma, 14000);
    REQUIRE(s.n1 == 10000);
    REQUIRE(s.n2 == 3000);
    REQUIRE(s.n3 == 1000);
    auto r = default_split(Family::Rectangles, 40000);
    REQUIRE(r.n1 == 20000);
    REQUIRE(r.n2 == 19000);
    REQUIRE(r.n3 == 1000);
    auto h = default_split(Family::HmmLda, 12000);
    REQUIRE(h.n1 == 10000);
    REQUIRE(h.n2 == 1000);
    REQUIRE(h.n3 == 1000);
  }
  SECTION("reduced totals scale by floor with remainder in the eval split") {
    auto s = default_split(Family::BetaBernoulli, 2800);
    REQUIRE(s.n1 == 2000);
    REQUIRE(s.n2 == 600);
    REQUIRE(s.n3 == 200);
    auto r = default_split(Family::Rectangles, 8000);
    REQUIRE(r.n1 == 4000);
    REQUIRE(r.n2 == 3800);
    REQUIRE(r.n3 == 200);
    auto h = default_split(Family::HmmLda, 2400);
    REQUIRE(h.n1 == 2000);
    REQUIRE(h.n2 == 200);
    REQUIRE(h.n3 == 200);
    REQUIRE(s.total() == 2800);
    REQUIRE(r.total() == 8000);
    REQUIRE(h.total() == 2400);
  }
  SECTION("degenerate totals are rejected") {
    REQUIRE_THROWS_AS(default_split(Family::GaussianGamma, 2), ConfigError);
  }
}

TEST_CASE("split accessors partition the dataset in generation order") {
  ConjugateConfig cj;
  cj.family = Family::BetaBernoulli;
  cj.hyper = {2, 8};
  cj.num_sequences = 28;
  cj.seq_len = 5;
  cj.seed = 1;
  Dataset d = generate(cj);
  REQUIRE(d.split.total() == 28);
  REQUIRE(d.set1().size() == d.split.n1);
  REQUIRE(d.set2().size() == d.split.n2);
  REQUIRE(d.set3().size() == d.split.n3);
  REQUIRE(d.set1().data() + d.split.n1 == d.set2().data());
  REQUIRE(d.set2().data() + d.split.n2 == d.set3().data());
  REQUIRE_THROWS_AS(split_dataset(d, 20, 20, 20), ConfigError);
}

TEST_CASE("dataset binary round trip is exact for every family") {
  std::vector<GenConfig> configs;
  {
    ConjugateConfig c;
    c.family = Family::GaussianGamma;
    c.hyper = {5, 1, 1, 1};
    c.num_sequences = 9;
    c.seq_len = 6;
    c.seed = 11;
    configs.push_back(c);
    c.family = Family::GammaExponential;
    c.hyper = {2, 4};
    configs.push_back(c);
    c.family = Family::BetaBernoulli;
    c.hyper = {2, 8};
    configs.push_back(c);
  }
  {
    RectanglesConfig c;
    c.num_sequences = 9;
    c.seq_len = 5;
    c.seed = 12;
    configs.push_back(c);
  }
  {
    HmmConfig c;
    c.vocab = 8;
    c.num_states = 3;
    c.num_sequences = 9;
    c.seq_len = 7;
    c.seed = 13;
    configs.push_back(c);
  }
  {
    LdaConfig c;
    c.vocab = 30;
    c.num_sequences = 9;
    c.seq_len = 15;
    c.seed = 14;
    configs.push_back(c);
  }
  {
    HmmLdaConfig c;
    c.lda.vocab = 30;
    c.num_sequences = 9;
    c.seq_len = 18;
    c.seed = 15;
    configs.push_back(c);
  }

  int idx = 0;
  for (const GenConfig& cfg : configs) {
    Dataset d = generate(cfg);
    fs::path p = temp_file("roundtrip_" + std::to_string(idx++));
    save_dataset(d, p.string());
    Dataset back = load_dataset(p.string());

    REQUIRE(config_to_json(back.config) == config_to_json(d.config));
    REQUIRE(back.seed == d.seed);
    REQUIRE(back.split.n1 == d.split.n1);
    REQUIRE(back.split.n2 == d.split.n2);
    REQUIRE(back.split.n3 == d.split.n3);
    REQUIRE(back.shared.hmm_a == d.shared.hmm_a);
    REQUIRE(back.shared.hmm_b == d.shared.hmm_b);
    REQUIRE(back.shared.topics == d.shared.topics);
    REQUIRE(back.shared.class_trans == d.shared.class_trans);
    REQUIRE(back.shared.class_init == d.shared.class_init);
    REQUIRE(back.shared.syntax_words == d.shared.syntax_words);
    REQUIRE(back.sequences.size() == d.sequences.size());
    for (size_t i = 0; i < d.sequences.size(); ++i) {
      REQUIRE(back.sequences[i].reals == d.sequences[i].reals);
      REQUIRE(back.sequences[i].ids == d.sequences[i].ids);
      REQUIRE(back.sequences[i].points.size() == d.sequences[i].points.size());
      for (size_t t = 0; t < d.sequences[i].points.size(); ++t) {
        REQUIRE(back.sequences[i].points[t].x == d.sequences[i].points[t].x);
        REQUIRE(back.sequences[i].points[t].y == d.sequences[i].points[t].y);
      }
      REQUIRE(back.sequences[i].latents.params == d.sequences[i].latents.params);
      REQUIRE(back.sequences[i].latents.path == d.sequences[i].latents.path);
      REQUIRE(back.sequences[i].latents.hypothesis == d.sequences[i].latents.hypothesis);
    }

    // serializing the same dataset twice is byte-identical
    fs::path p2 = temp_file("roundtrip_b_" + std::to_string(idx));
    save_dataset(d, p2.string());
    REQUIRE(slurp(p) == slurp(p2));
    fs::remove(p);
    fs::remove(p2);
  }
}

TEST_CASE("dataset loader rejects missing and corrupt files") {
  REQUIRE_THROWS(load_dataset((temp_file("missing")).string()));

  ConjugateConfig c;
  c.family = Family::BetaBernoulli;
  c.hyper = {2, 8};
  c.num_sequences = 5;
  c.seq_len = 4;
  c.seed = 2;
  Dataset d = generate(c);
  fs::path p = temp_file("corrupt");
  save_dataset(d, p.string());
  std::string bytes = slurp(p);
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
  out.close();
  REQUIRE_THROWS(load_dataset(p.string()));
  fs::remove(p);
}

TEST_CASE("rectangle hypothesis enumeration is a bijection") {
  for (int i = 0; i < kNumRectHypotheses; ++i) {
    RectangleHypothesis h = rect_hypothesis(i);
    REQUIRE(h.ix_lo < h.ix_hi);
    REQUIRE(h.iy_lo < h.iy_hi);
    REQUIRE(rect_index(h) == i);
  }
  REQUIRE_THROWS_AS(rect_hypothesis(784), StageError);
  REQUIRE(line_pair_index(0, 1) == 0);
  REQUIRE(line_pair_index(0, 7) == 6);
  REQUIRE(line_pair_index(1, 2) == 7);
  REQUIRE(line_pair_index(6, 7) == 27);
}

TEST_CASE("grid line accumulation and area") {
  GridSpec g = GridSpec::equal();
  auto lx = g.lines_x();
  REQUIRE(lx[0] == 0.0);
  REQUIRE(lx[7] == 7.0);
  RectangleHypothesis h{2, 5, 1, 2};
  REQUIRE_THAT(rect_area(g, h), Catch::Matchers::WithinAbs(3.0, 1e-12));

  GridSpec u = GridSpec::unequal();
  auto ux = u.lines_x();
  REQUIRE(ux[1] == Catch::Approx(0.4));
  REQUIRE(ux[2] == Catch::Approx(0.56));
  double total = ux[7];
  RectangleHypothesis full{0, 7, 0, 7};
  REQUIRE_THAT(rect_area(u, full), Catch::Matchers::WithinAbs(total * total, 1e-12));
}
