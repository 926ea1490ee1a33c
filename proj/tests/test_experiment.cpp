// Experiment harness: CSV/key utilities, spec parsing, a tiny end-to-end
// conjugate experiment (with byte-identical rerun under a fresh cache), the
// sweep driver, and the command-line front end's exit-code contract.

#include <sys/wait.h>
#include <unistd.h>

#include <catch2/catch_amalgamated.hpp>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "ssw/experiment.hpp"

using ssw::ConfigError;
using ssw::StageError;
using ssw::json;
namespace ex = ssw::exp;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() /
           ("ssw_exp_" + tag + "_" + std::to_string(static_cast<long>(::getpid())));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
};

struct ScopedCache {
  explicit ScopedCache(const fs::path& dir) { ::setenv("SSW_CACHE_DIR", dir.c_str(), 1); }
  ~ScopedCache() { ::unsetenv("SSW_CACHE_DIR"); }
};

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  REQUIRE(is.good());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

json tiny_spec_json(const fs::path& out_dir) {
  return json{{"kind", "conjugate_suffstat"},
              {"family", "beta_bernoulli"},
              {"seeds", {1, 2}},
              {"scale", 1.0},
              {"out_dir", out_dir.string()},
              {"gen", {{"num_sequences", 120}, {"seq_len", 12}}},
              {"arch", {{"hidden_dim", 16}, {"num_layers", 1}, {"num_heads", 2}, {"dropout", 0.0}}},
              {"train", {{"epochs", 2}, {"batch_size", 16}}},
              {"probe", {{"epochs", 20}, {"lr_grid", {0.01}}}}};
}

int run_cli(const std::string& args) {
  std::string cmd = std::string(SSW_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  int rc = std::system(cmd.c_str());
  REQUIRE(rc != -1);
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

}  // namespace

TEST_CASE("fmt_g and CsvTable serialization", "[experiment]") {
  REQUIRE(ex::fmt_g(0.5) == "0.5");
  REQUIRE(ex::fmt_g(2.0) == "2");
  REQUIRE(ex::fmt_g(1e-10) == "1e-10");
  REQUIRE(ex::fmt_g(-3.25) == "-3.25");

  ex::CsvTable t({"a", "b"});
  t.add_row({"1", "x"});
  t.add_row({"2", "y"});
  REQUIRE(t.to_string() == "a,b\n1,x\n2,y\n");
  REQUIRE_THROWS_AS(t.add_row({"only-one"}), StageError);
}

TEST_CASE("key_of is a stable 16-hex-digit content key", "[experiment]") {
  json a{{"x", 1}, {"y", "z"}};
  json b{{"y", "z"}, {"x", 1}};  // same object, different construction order
  std::string ka = ex::key_of(a);
  REQUIRE(ka.size() == 16);
  REQUIRE(ka.find_first_not_of("0123456789abcdef") == std::string::npos);
  REQUIRE(ka == ex::key_of(b));
  json c{{"x", 2}, {"y", "z"}};
  REQUIRE(ka != ex::key_of(c));
}

TEST_CASE("scaled_count rounds and respects the floor", "[experiment]") {
  REQUIRE(ex::scaled_count(100, 0.25, 1) == 25);
  REQUIRE(ex::scaled_count(10, 0.55, 1) == 6);   // llround(5.5)
  REQUIRE(ex::scaled_count(20, 0.1, 10) == 10);  // floored
  REQUIRE(ex::scaled_count(7, 0.01, 4) == 4);
  REQUIRE(ex::scaled_count(100, 1.0, 1) == 100);
}

TEST_CASE("experiment spec parsing and hashing", "[experiment]") {
  json j = tiny_spec_json("somewhere");
  ex::ExperimentSpec s = ex::spec_from_json(j);
  REQUIRE(s.kind == ex::ExperimentKind::ConjugateSuffstat);
  REQUIRE(s.family == ssw::gen::Family::BetaBernoulli);
  REQUIRE(s.seeds == std::vector<uint64_t>{1, 2});
  REQUIRE(s.gen_overrides.at("num_sequences") == 120);
  REQUIRE(s.display_name() == "conjugate_suffstat");

  SECTION("round trip through json") {
    ex::ExperimentSpec s2 = ex::spec_from_json(ex::spec_to_json(s));
    REQUIRE(ex::spec_to_json(s2) == ex::spec_to_json(s));
  }
  SECTION("unknown keys are rejected") {
    json bad = j;
    bad["epochs"] = 3;  // belongs under "train"
    REQUIRE_THROWS_AS(ex::spec_from_json(bad), ConfigError);
  }
  SECTION("invalid fields are rejected") {
    json bad = j;
    bad["kind"] = "no_such_kind";
    REQUIRE_THROWS_AS(ex::spec_from_json(bad), ConfigError);
    bad = j;
    bad["scale"] = 1.5;
    REQUIRE_THROWS_AS(ex::spec_from_json(bad), ConfigError);
    bad = j;
    bad["seeds"] = json::array();
    REQUIRE_THROWS_AS(ex::spec_from_json(bad), ConfigError);
    bad = j;
    bad["family"] = "hmm";  // conjugate kind needs a conjugate family
    REQUIRE_THROWS_AS(ex::spec_from_json(bad), ConfigError);
    bad = j;
    bad["train"] = 7;  // overrides must be objects
    REQUIRE_THROWS_AS(ex::spec_from_json(bad), ConfigError);
  }
  SECTION("config hash ignores naming and placement, tracks content") {
    ex::ExperimentSpec s2 = s;
    s2.out_dir = "elsewhere";
    s2.name = "renamed";
    s2.workers = 4;
    REQUIRE(ex::config_hash(s2) == ex::config_hash(s));
    ex::ExperimentSpec s3 = s;
    s3.seeds = {1, 3};
    REQUIRE(ex::config_hash(s3) != ex::config_hash(s));
  }
}

TEST_CASE("tiny conjugate experiment runs end to end and reruns identically", "[experiment]") {
  TempDir tmp("e2e");
  fs::path run1 = tmp.path / "run1";
  ex::ResultBundle b;
  {
    ScopedCache cache(tmp.path / "cache1");
    ex::ExperimentSpec spec = ex::spec_from_json(tiny_spec_json(run1));
    b = ex::run_experiment(spec);
  }

  REQUIRE(b.errors.empty());
  REQUIRE(b.rows.size() == 2);
  for (const auto& row : b.rows) {
    REQUIRE(row.at("cell") == "in_dist");
    REQUIRE(row.at("pearson_min").is_number());
    REQUIRE(row.at("scaled_mse").is_number());
    REQUIRE(row.at("sq_loss").is_number());
  }
  REQUIRE(b.rows[0].at("seed") != b.rows[1].at("seed"));
  REQUIRE(b.aggregates.contains("in_dist"));
  REQUIRE(b.aggregates.at("in_dist").at("pearson_min").at("n").get<size_t>() == 2);
  REQUIRE(b.provenance.at("config_hash").get<std::string>().size() == 16);
  REQUIRE(b.provenance.at("scale").get<double>() == 1.0);

  // Artifacts on disk.
  REQUIRE(fs::exists(run1 / "result.json"));
  REQUIRE(fs::exists(run1 / "suffstat_recovery.csv"));
  REQUIRE(fs::exists(run1 / "suffstat_scatter.csv"));

  std::string rec = slurp(run1 / "suffstat_recovery.csv");
  REQUIRE(rec.rfind("family,scale,seed,cell,dim,pearson_r,scaled_mse\n", 0) == 0);
  REQUIRE(rec.find("beta_bernoulli,1,1,in_dist,") != std::string::npos);
  REQUIRE(rec.find("beta_bernoulli,1,2,in_dist,") != std::string::npos);
  std::string sc = slurp(run1 / "suffstat_scatter.csv");
  REQUIRE(sc.rfind("family,scale,seed,cell,dim,sequence_id,truth,prediction\n", 0) == 0);
  REQUIRE(std::count(sc.begin(), sc.end(), '\n') > 10);

  // result.json is verifiable and renders a summary.
  json result = json::parse(slurp(run1 / "result.json"));
  std::string rendered = ex::verify_and_render(result);
  REQUIRE(rendered.find("experiment: conjugate_suffstat") != std::string::npos);
  REQUIRE(rendered.find("in_dist") != std::string::npos);
  // Tampered aggregates are caught.
  json tampered = result;
  tampered["aggregates"]["in_dist"]["pearson_min"]["mean"] = 0.123456;
  REQUIRE_THROWS_AS(ex::verify_and_render(tampered), StageError);

  // Rerun with identical config+seeds into a fresh out dir and a fresh cache:
  // every derived artifact must be byte-identical.
  fs::path run2 = tmp.path / "run2";
  ex::ResultBundle b2;
  {
    ScopedCache cache(tmp.path / "cache2");
    ex::ExperimentSpec spec = ex::spec_from_json(tiny_spec_json(run2));
    b2 = ex::run_experiment(spec);
  }
  REQUIRE(b2.rows == b.rows);
  REQUIRE(b2.aggregates == b.aggregates);
  REQUIRE(slurp(run2 / "suffstat_recovery.csv") == rec);
  REQUIRE(slurp(run2 / "suffstat_scatter.csv") == sc);

  // Cached rerun into a third dir (same cache as run2) also matches bytes.
  fs::path run3 = tmp.path / "run3";
  {
    ScopedCache cache(tmp.path / "cache2");
    ex::ExperimentSpec spec = ex::spec_from_json(tiny_spec_json(run3));
    ex::run_experiment(spec);
  }
  REQUIRE(slurp(run3 / "suffstat_recovery.csv") == rec);

  // A single-cell sweep is equivalent to the base experiment.
  fs::path sweep_out = tmp.path / "sweep";
  ex::ResultBundle sb;
  {
    ScopedCache cache(tmp.path / "cache2");
    json sweep_cfg{{"base", tiny_spec_json(tmp.path / "unused")}, {"grid", {{"scale", {1.0}}}}};
    sb = ex::run_sweep(sweep_cfg, sweep_out.string(), 1);
  }
  REQUIRE(sb.errors.empty());
  REQUIRE(sb.rows.size() == 1);
  REQUIRE(sb.rows[0].at("cell") == "cell_000");
  REQUIRE(sb.rows[0].at("in_dist.pearson_min").get<double>() ==
          Catch::Approx(b.aggregates.at("in_dist").at("pearson_min").at("mean").get<double>()));
  REQUIRE(fs::exists(sweep_out / "result.json"));
  REQUIRE(fs::exists(sweep_out / "sweep_cells.csv"));
  REQUIRE(fs::exists(sweep_out / "sweep_results.csv"));
  REQUIRE(slurp(sweep_out / "cell_000" / "suffstat_recovery.csv") == rec);

  // CLI front end against the same artifacts (inherits SSW_CACHE_DIR).
  {
    ScopedCache cache(tmp.path / "cache2");
    fs::path spec_file = tmp.path / "spec.json";
    ex::write_text_atomic(spec_file, tiny_spec_json(tmp.path / "unused2").dump());

    REQUIRE(run_cli("") == 2);                       // no subcommand
    REQUIRE(run_cli("gen") == 2);                    // missing required flags
    REQUIRE(run_cli("report " + (tmp.path / "missing.json").string()) == 2);
    REQUIRE(run_cli("report " + run1.string()) == 0);  // directory form

    fs::path tampered_dir = tmp.path / "tampered";
    fs::create_directories(tampered_dir);
    ex::write_text_atomic(tampered_dir / "result.json", tampered.dump());
    REQUIRE(run_cli("report " + tampered_dir.string()) == 3);

    fs::path cli_out = tmp.path / "run_cli";
    REQUIRE(run_cli("experiment run --config " + spec_file.string() + " --out " +
                    cli_out.string()) == 0);
    REQUIRE(fs::exists(cli_out / "result.json"));
    REQUIRE(slurp(cli_out / "suffstat_recovery.csv") == rec);
  }
}

TEST_CASE("sweep configuration validation", "[experiment]") {
  REQUIRE_THROWS_AS(ex::run_sweep(json{{"base", json::object()}}, "x", 1), ConfigError);
  REQUIRE_THROWS_AS(
      ex::run_sweep(json{{"base", json::object()}, {"grid", json::object()}}, "x", 1),
      ConfigError);
  REQUIRE_THROWS_AS(
      ex::run_sweep(json{{"base", json::object()}, {"grid", {{"scale", 1.0}}}}, "x", 1),
      ConfigError);  // grid values must be non-empty arrays
}

TEST_CASE("cli gen and oracle stages", "[experiment]") {
  TempDir tmp("cli");
  ScopedCache cache(tmp.path / "cache");

  ssw::gen::ConjugateConfig cc;
  cc.family = ssw::gen::Family::BetaBernoulli;
  cc.hyper = {2.0, 8.0};
  cc.num_sequences = 40;
  cc.seq_len = 8;
  cc.seed = 5;
  json cfg = ssw::gen::config_to_json(ssw::gen::GenConfig{cc});
  fs::path cfg_file = tmp.path / "gen.json";
  ex::write_text_atomic(cfg_file, cfg.dump());

  fs::path ds_file = tmp.path / "ds.bin";
  REQUIRE(run_cli("gen --config " + cfg_file.string() + " --out " + ds_file.string() +
                  " --seed 9") == 0);
  REQUIRE(fs::exists(ds_file));
  ssw::gen::Dataset d = ssw::gen::load_dataset(ds_file.string());
  REQUIRE(d.sequences.size() == 40);
  REQUIRE(std::visit([](const auto& g) { return g.seed; }, d.config) == 9);

  SECTION("invalid generator config exits with the config code") {
    fs::path bad = tmp.path / "bad.json";
    ex::write_text_atomic(bad, R"({"family": "no_such_family"})");
    REQUIRE(run_cli("gen --config " + bad.string() + " --out " + (tmp.path / "x.bin").string()) ==
            2);
    ex::write_text_atomic(bad, "{not json");
    REQUIRE(run_cli("gen --config " + bad.string() + " --out " + (tmp.path / "x.bin").string()) ==
            2);
  }
  SECTION("oracle writes a target table for the test split") {
    fs::path tgt_file = tmp.path / "targets.jsonl";
    REQUIRE(run_cli("oracle --data " + ds_file.string() + " --kind suffstat --out " +
                    tgt_file.string()) == 0);
    ssw::infer::TargetTable t = ssw::infer::load_targets(tgt_file.string());
    REQUIRE(t.kind == ssw::infer::TargetKind::SuffStat);
    REQUIRE(!t.records.empty());
    REQUIRE(run_cli("oracle --data " + (tmp.path / "nope.bin").string() +
                    " --kind suffstat --out " + tgt_file.string()) == 3);
  }
}
