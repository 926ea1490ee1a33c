// Command-line front end. Subcommands map one-to-one onto pipeline stages
// (gen / oracle / train / embed / probe operate on explicit files; experiment
// run|sweep drive the cached multi-stage harness; report re-renders results).
//
// Exit codes: 0 success, 2 configuration error, 3 stage failure.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "ssw/experiment.hpp"

namespace {

using json = nlohmann::json;
namespace exp = ssw::exp;

json load_json_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ssw::ConfigError("cannot open config file: " + path);
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    throw ssw::ConfigError("cannot parse " + path + ": " + e.what());
  }
}

struct CommonFlags {
  std::string config;
  std::optional<uint64_t> seed;
  std::optional<double> scale;
  std::string out;
  uint32_t workers = 1;
};

void add_common(CLI::App* cmd, CommonFlags& f, bool config_required, bool out_required) {
  auto* c = cmd->add_option("--config", f.config, "JSON configuration file");
  if (config_required) c->required();
  cmd->add_option("--seed", [&f](const CLI::results_t& r) {
    f.seed = std::stoull(r[0]);
    return true;
  }, "Override the seed");
  cmd->add_option("--scale", [&f](const CLI::results_t& r) {
    f.scale = std::stod(r[0]);
    return true;
  }, "Dataset scale factor in (0, 1]");
  auto* o = cmd->add_option("--out", f.out, "Output path");
  if (out_required) o->required();
  cmd->add_option("--workers", f.workers, "Worker threads for training");
}

int cmd_gen(const CommonFlags& f) {
  json cfg = load_json_file(f.config);
  if (f.seed) cfg["seed"] = *f.seed;
  ssw::gen::GenConfig gc = ssw::gen::config_from_json(cfg);
  if (f.scale) {
    // Scale shrinks the dataset the same way the experiment harness does.
    json scaled = ssw::gen::config_to_json(
        exp::default_gen(ssw::gen::config_family(gc), *f.scale, 0));
    json merged = scaled;
    merged.merge_patch(cfg);
    for (const char* key : {"num_sequences", "seq_len"})
      if (!cfg.contains(key) && scaled.contains(key)) merged[key] = scaled[key];
    gc = ssw::gen::config_from_json(merged);
  }
  ssw::gen::validate_config(gc);
  ssw::gen::Dataset d = ssw::gen::generate(gc);
  exp::save_file_atomic(f.out, [&](const std::string& p) { ssw::gen::save_dataset(d, p); });
  std::printf("wrote %s (%zu sequences)\n", f.out.c_str(), d.sequences.size());
  return 0;
}

int cmd_oracle(const CommonFlags& f, const std::string& data, const std::string& kind_s,
               const std::string& positions, int split) {
  ssw::gen::Dataset d = ssw::gen::load_dataset(data);
  ssw::infer::TargetKind kind = ssw::infer::target_kind_from_name(kind_s);
  ssw::infer::PositionSpec pos = ssw::infer::PositionSpec::parse(positions);
  ssw::infer::TargetOptions opts;
  if (!f.config.empty()) {
    json j = load_json_file(f.config);
    if (j.contains("moment_mode"))
      opts.moment_mode = j.at("moment_mode").get<std::string>() == "param_posterior"
                             ? ssw::infer::MomentMode::ParamPosterior
                             : ssw::infer::MomentMode::Predictive;
    if (j.contains("moment_k")) j.at("moment_k").get_to(opts.moment_k);
    if (j.contains("moment_scale")) j.at("moment_scale").get_to(opts.moment_scale);
    if (j.contains("token_index")) j.at("token_index").get_to(opts.token_index);
  }
  auto [span, offset] = exp::Stages::split_span(d, split);
  ssw::infer::TargetTable t = ssw::infer::make_targets(d, span, offset, kind, pos, opts);
  exp::save_file_atomic(f.out, [&](const std::string& p) { ssw::infer::save_targets(t, p); });
  std::printf("wrote %s (%zu records, dim %u)\n", f.out.c_str(), t.records.size(), t.dim);
  return 0;
}

int cmd_train(const CommonFlags& f, const std::string& data) {
  ssw::gen::Dataset d = ssw::gen::load_dataset(data);
  json cfg = f.config.empty() ? json::object() : load_json_file(f.config);
  json arch_j = json(exp::default_arch(d.config));
  if (cfg.contains("arch")) arch_j.merge_patch(cfg.at("arch"));
  json train_j = json(exp::default_train(d.family()));
  if (cfg.contains("train")) train_j.merge_patch(cfg.at("train"));
  auto arch = arch_j.get<ssw::net::ArchConfig>();
  arch.validate();
  auto tc = train_j.get<ssw::net::TrainConfig>();
  if (f.seed) tc.seed = *f.seed;
  tc.workers = f.workers;
  tc.validate();
  ssw::net::TrainResult r = ssw::net::train(arch, d.set1(), d.set2(), tc);
  json curve_t = json::array(), curve_v = json::array();
  for (const auto& e : r.log) {
    curve_t.push_back(e.train_loss);
    curve_v.push_back(e.val_loss);
  }
  json info{{"best_val_loss", r.best_val_loss}, {"init_val_loss", r.init_val_loss},
            {"best_epoch", r.best_epoch},       {"diverged", r.diverged},
            {"train_loss", curve_t},            {"val_loss", curve_v}};
  exp::save_file_atomic(f.out,
                        [&](const std::string& p) { ssw::net::save_checkpoint(r.model, p, info); });
  std::printf("wrote %s (best val loss %.6f at epoch %u)\n", f.out.c_str(), r.best_val_loss,
              r.best_epoch);
  if (r.diverged) throw ssw::StageError("training diverged; checkpoint holds the best params");
  return 0;
}

int cmd_embed(const CommonFlags& f, const std::string& model_path, const std::string& data,
              const std::string& positions, int split, bool bidirectional) {
  ssw::net::Transformer<float> model = ssw::net::load_checkpoint(model_path);
  ssw::gen::Dataset d = ssw::gen::load_dataset(data);
  ssw::infer::PositionSpec pos = ssw::infer::PositionSpec::parse(positions);
  auto [span, offset] = exp::Stages::split_span(d, split);
  ssw::net::EmbeddingTable t = ssw::net::embed(model, span, offset, pos, bidirectional);
  exp::save_file_atomic(f.out, [&](const std::string& p) { ssw::net::save_embeddings(t, p); });
  std::printf("wrote %s (%zu vectors, dim %u)\n", f.out.c_str(), t.keys.size(), t.dim);
  return 0;
}

int cmd_probe(const CommonFlags& f, const std::string& emb_tr, const std::string& tgt_tr,
              const std::string& emb_ev, const std::string& tgt_ev) {
  ssw::net::EmbeddingTable etr = ssw::net::load_embeddings(emb_tr);
  ssw::infer::TargetTable ttr = ssw::infer::load_targets(tgt_tr);
  ssw::net::EmbeddingTable eev = ssw::net::load_embeddings(emb_ev);
  ssw::infer::TargetTable tev = ssw::infer::load_targets(tgt_ev);
  if (ttr.kind != tev.kind) throw ssw::ConfigError("probe: target kinds differ between splits");
  bool simplex = ssw::infer::target_is_simplex(ttr.kind);
  json pj = json(ssw::probe::ProbeConfig{});
  if (simplex) {
    pj["head"] = "linear_softmax";
    pj["loss"] = "ce";
  } else {
    pj["head"] = "linear";
    pj["loss"] = "l2";
  }
  if (!f.config.empty()) pj.merge_patch(load_json_file(f.config));
  auto pcfg = pj.get<ssw::probe::ProbeConfig>();
  if (f.seed) pcfg.seed = *f.seed;
  pcfg.validate();
  ssw::probe::AlignedData tr = ssw::probe::align(etr, ttr);
  ssw::probe::AlignedData ev = ssw::probe::align(eev, tev);
  auto [p, rep] = ssw::probe::fit_eval(tr.x, tr.y, ev.x, ev.y, pcfg, simplex);
  json out{{"report", ssw::probe::report_to_json(rep)}, {"probe", exp::probe_to_json(p)}};
  exp::write_text_atomic(f.out, out.dump(2) + "\n");
  std::printf("wrote %s (accuracy %.4f, sq loss %.6f)\n", f.out.c_str(), rep.accuracy, rep.l2);
  return 0;
}

int cmd_experiment_run(const CommonFlags& f) {
  json spec_j = load_json_file(f.config);
  if (f.seed) spec_j["seeds"] = json::array({*f.seed});
  if (f.scale) spec_j["scale"] = *f.scale;
  if (!f.out.empty()) spec_j["out_dir"] = f.out;
  spec_j["workers"] = f.workers;
  exp::ExperimentSpec spec = exp::spec_from_json(spec_j);
  exp::ResultBundle b = exp::run_experiment(spec);
  std::printf("experiment %s: %zu rows, %zu errors -> %s\n", spec.display_name().c_str(),
              b.rows.size(), b.errors.size(), spec.out_dir.c_str());
  return 0;
}

int cmd_experiment_sweep(const CommonFlags& f) {
  json sweep_j = load_json_file(f.config);
  if (f.seed && sweep_j.contains("base")) sweep_j["base"]["seeds"] = json::array({*f.seed});
  if (f.scale && sweep_j.contains("base")) sweep_j["base"]["scale"] = *f.scale;
  std::string out_dir = f.out.empty() ? "out_sweep" : f.out;
  exp::ResultBundle b = exp::run_sweep(sweep_j, out_dir, f.workers);
  std::printf("sweep: %zu cells, %zu errors -> %s\n", b.rows.size(), b.errors.size(),
              out_dir.c_str());
  return 0;
}

int cmd_report(const std::string& path) {
  namespace fs = std::filesystem;
  fs::path p(path);
  if (fs::is_directory(p)) p /= "result.json";
  std::ifstream is(p);
  if (!is) throw ssw::ConfigError("report: cannot open " + p.string());
  json result;
  try {
    result = json::parse(is);
  } catch (const json::exception& e) {
    throw ssw::ConfigError("report: cannot parse " + p.string() + ": " + e.what());
  }
  std::fputs(exp::verify_and_render(result).c_str(), stdout);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sequence-statistics workbench: synthetic data, exact oracles, "
               "autoregressive models, and embedding probes"};
  app.require_subcommand(1);

  CommonFlags gen_f, oracle_f, train_f, embed_f, probe_f, run_f, sweep_f;

  auto* gen_cmd = app.add_subcommand("gen", "Generate a dataset");
  add_common(gen_cmd, gen_f, true, true);

  auto* oracle_cmd = app.add_subcommand("oracle", "Compute exact target quantities");
  std::string oracle_data, oracle_kind, oracle_pos = "last";
  int oracle_split = 3;
  oracle_cmd->add_option("--data", oracle_data, "Dataset file")->required();
  oracle_cmd->add_option("--kind", oracle_kind, "Target kind")->required();
  oracle_cmd->add_option("--positions", oracle_pos, "last | index:N | all");
  oracle_cmd->add_option("--split", oracle_split, "Dataset split (1, 2, or 3)");
  add_common(oracle_cmd, oracle_f, false, true);

  auto* train_cmd = app.add_subcommand("train", "Train a sequence model");
  std::string train_data;
  train_cmd->add_option("--data", train_data, "Dataset file")->required();
  add_common(train_cmd, train_f, false, true);

  auto* embed_cmd = app.add_subcommand("embed", "Extract embeddings from a checkpoint");
  std::string embed_model, embed_data, embed_pos = "last";
  int embed_split = 3;
  bool embed_bidir = false;
  embed_cmd->add_option("--model", embed_model, "Checkpoint file")->required();
  embed_cmd->add_option("--data", embed_data, "Dataset file")->required();
  embed_cmd->add_option("--positions", embed_pos, "last | index:N | all");
  embed_cmd->add_option("--split", embed_split, "Dataset split (1, 2, or 3)");
  embed_cmd->add_flag("--bidirectional", embed_bidir, "Bidirectional attention");
  add_common(embed_cmd, embed_f, false, true);

  auto* probe_cmd = app.add_subcommand("probe", "Fit and evaluate a probe");
  std::string pe_tr, pt_tr, pe_ev, pt_ev;
  probe_cmd->add_option("--train-embeddings", pe_tr, "Training embeddings")->required();
  probe_cmd->add_option("--train-targets", pt_tr, "Training targets")->required();
  probe_cmd->add_option("--eval-embeddings", pe_ev, "Evaluation embeddings")->required();
  probe_cmd->add_option("--eval-targets", pt_ev, "Evaluation targets")->required();
  add_common(probe_cmd, probe_f, false, true);

  auto* exp_cmd = app.add_subcommand("experiment", "Run experiments");
  exp_cmd->require_subcommand(1);
  auto* run_cmd = exp_cmd->add_subcommand("run", "Run one experiment spec");
  add_common(run_cmd, run_f, true, false);
  auto* sweep_cmd = exp_cmd->add_subcommand("sweep", "Run a parameter sweep");
  add_common(sweep_cmd, sweep_f, true, false);

  auto* report_cmd = app.add_subcommand("report", "Verify and summarize a result file");
  std::string report_path;
  report_cmd->add_option("path", report_path, "result.json or its directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (gen_cmd->parsed()) return cmd_gen(gen_f);
    if (oracle_cmd->parsed())
      return cmd_oracle(oracle_f, oracle_data, oracle_kind, oracle_pos, oracle_split);
    if (train_cmd->parsed()) return cmd_train(train_f, train_data);
    if (embed_cmd->parsed())
      return cmd_embed(embed_f, embed_model, embed_data, embed_pos, embed_split, embed_bidir);
    if (probe_cmd->parsed()) return cmd_probe(probe_f, pe_tr, pt_tr, pe_ev, pt_ev);
    if (exp_cmd->parsed()) {
      if (run_cmd->parsed()) return cmd_experiment_run(run_f);
      if (sweep_cmd->parsed()) return cmd_experiment_sweep(sweep_f);
    }
    if (report_cmd->parsed()) return cmd_report(report_path);
    std::fprintf(stderr, "no subcommand given\n");
    return 2;
  } catch (const ssw::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const ssw::StageError& e) {
    std::fprintf(stderr, "stage error: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  }
}
