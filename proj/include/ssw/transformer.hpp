#pragma once
// Decoder-style transformer sized for the workbench experiments: pre-LN
// residual blocks, multi-head attention, GELU feed-forward of width 4d,
// learned absolute positional embeddings. Input is either a token embedding
// table or a linear map of continuous values; the head is categorical
// (softmax over V) or scalar regression (optionally a Gaussian NLL head).
// A masked objective (bidirectional attention, reserved mask token, only
// masked positions scored) is available besides the autoregressive one.

#include <json.hpp>
#include <string>
#include <vector>

#include "ssw/data.hpp"
#include "ssw/tensor.hpp"

namespace ssw::net {

using json = nlohmann::json;

enum class InputMode { TokenEmbedding, LinearContinuous };
enum class OutputMode { CategoricalHead, ScalarHead };
enum class Objective { Autoregressive, Masked };

inline const char* objective_name(Objective o) {
  return o == Objective::Autoregressive ? "autoregressive" : "masked";
}

struct ArchConfig {
  uint32_t num_layers = 3;
  uint32_t hidden_dim = 128;
  uint32_t num_heads = 8;
  InputMode input_mode = InputMode::TokenEmbedding;
  uint32_t vocab = 0;      // TokenEmbedding / CategoricalHead
  uint32_t input_dim = 0;  // LinearContinuous
  OutputMode output_mode = OutputMode::CategoricalHead;
  uint32_t output_dim = 0;  // ScalarHead target width
  bool gaussian_head = false;  // ScalarHead trains with Gaussian NLL instead of MSE
  double dropout = 0.1;
  uint32_t max_seq_len = 0;

  void validate() const {
    if (num_layers == 0) throw ConfigError("ArchConfig.num_layers: must be > 0");
    if (hidden_dim == 0 || hidden_dim % num_heads != 0)
      throw ConfigError("ArchConfig.hidden_dim: must be divisible by num_heads");
    if (input_mode == InputMode::TokenEmbedding && vocab < 2)
      throw ConfigError("ArchConfig.vocab: TokenEmbedding needs vocab >= 2");
    if (input_mode == InputMode::LinearContinuous && input_dim == 0)
      throw ConfigError("ArchConfig.input_dim: LinearContinuous needs input_dim > 0");
    if (output_mode == OutputMode::CategoricalHead && vocab < 2)
      throw ConfigError("ArchConfig.vocab: CategoricalHead needs vocab >= 2");
    if (output_mode == OutputMode::ScalarHead && output_dim == 0)
      throw ConfigError("ArchConfig.output_dim: ScalarHead needs output_dim > 0");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("ArchConfig.dropout: must be in [0,1)");
    if (max_seq_len == 0) throw ConfigError("ArchConfig.max_seq_len: must be > 0");
  }

  // Embedding table has one extra reserved row for the mask token, so
  // autoregressive and masked checkpoints share shapes.
  uint32_t embed_rows() const { return vocab + 1; }
  uint32_t mask_token() const { return vocab; }
  uint32_t head_dim() const {
    if (output_mode == OutputMode::CategoricalHead) return vocab;
    return gaussian_head ? 2 * output_dim : output_dim;
  }
};

inline void to_json(json& j, const ArchConfig& a) {
  j = json{{"num_layers", a.num_layers},
           {"hidden_dim", a.hidden_dim},
           {"num_heads", a.num_heads},
           {"input_mode", a.input_mode == InputMode::TokenEmbedding ? "token" : "linear"},
           {"vocab", a.vocab},
           {"input_dim", a.input_dim},
           {"output_mode", a.output_mode == OutputMode::CategoricalHead ? "categorical" : "scalar"},
           {"output_dim", a.output_dim},
           {"gaussian_head", a.gaussian_head},
           {"dropout", a.dropout},
           {"max_seq_len", a.max_seq_len}};
}

inline void from_json(const json& j, ArchConfig& a) {
  a = ArchConfig{};
  if (j.contains("num_layers")) j.at("num_layers").get_to(a.num_layers);
  if (j.contains("hidden_dim")) j.at("hidden_dim").get_to(a.hidden_dim);
  if (j.contains("num_heads")) j.at("num_heads").get_to(a.num_heads);
  if (j.contains("input_mode"))
    a.input_mode = j.at("input_mode").get<std::string>() == "token" ? InputMode::TokenEmbedding
                                                                    : InputMode::LinearContinuous;
  if (j.contains("vocab")) j.at("vocab").get_to(a.vocab);
  if (j.contains("input_dim")) j.at("input_dim").get_to(a.input_dim);
  if (j.contains("output_mode"))
    a.output_mode = j.at("output_mode").get<std::string>() == "categorical"
                        ? OutputMode::CategoricalHead
                        : OutputMode::ScalarHead;
  if (j.contains("output_dim")) j.at("output_dim").get_to(a.output_dim);
  if (j.contains("gaussian_head")) j.at("gaussian_head").get_to(a.gaussian_head);
  if (j.contains("dropout")) j.at("dropout").get_to(a.dropout);
  if (j.contains("max_seq_len")) j.at("max_seq_len").get_to(a.max_seq_len);
}

template <typename T>
struct ParamSet {
  std::vector<std::string> names;
  std::vector<Mat<T>> tensors;

  int add(const std::string& name, Mat<T> t) {
    names.push_back(name);
    tensors.push_back(std::move(t));
    return static_cast<int>(tensors.size()) - 1;
  }

  int index(const std::string& name) const {
    for (size_t i = 0; i < names.size(); ++i)
      if (names[i] == name) return static_cast<int>(i);
    throw StageError("ParamSet: no tensor named " + name);
  }

  Mat<T>& at(const std::string& name) { return tensors[static_cast<size_t>(index(name))]; }
  const Mat<T>& at(const std::string& name) const {
    return tensors[static_cast<size_t>(index(name))];
  }

  size_t scalar_count() const {
    size_t n = 0;
    for (const auto& t : tensors) n += static_cast<size_t>(t.size());
    return n;
  }

  template <typename U>
  ParamSet<U> cast() const {
    ParamSet<U> out;
    out.names = names;
    out.tensors.reserve(tensors.size());
    for (const auto& t : tensors) out.tensors.push_back(t.template cast<U>());
    return out;
  }
};

// Model input for one sequence: token ids or a row-per-position real matrix.
template <typename T>
struct ModelInput {
  std::vector<uint32_t> ids;
  Mat<T> reals;

  uint32_t length() const {
    return ids.empty() ? static_cast<uint32_t>(reals.rows()) : static_cast<uint32_t>(ids.size());
  }
};

template <typename T>
inline ModelInput<T> model_input(const ArchConfig& arch, const gen::Sequence& s) {
  ModelInput<T> in;
  if (arch.input_mode == InputMode::TokenEmbedding) {
    if (s.ids.empty()) throw StageError("model_input: dataset has no token ids");
    in.ids = s.ids;
  } else if (!s.points.empty()) {
    if (arch.input_dim != 2) throw StageError("model_input: point tokens need input_dim 2");
    in.reals.resize(static_cast<Eigen::Index>(s.points.size()), 2);
    for (size_t i = 0; i < s.points.size(); ++i) {
      in.reals(static_cast<Eigen::Index>(i), 0) = static_cast<T>(s.points[i].x);
      in.reals(static_cast<Eigen::Index>(i), 1) = static_cast<T>(s.points[i].y);
    }
  } else {
    if (s.reals.empty()) throw StageError("model_input: dataset has no continuous tokens");
    if (arch.input_dim != 1) throw StageError("model_input: scalar tokens need input_dim 1");
    in.reals.resize(static_cast<Eigen::Index>(s.reals.size()), 1);
    for (size_t i = 0; i < s.reals.size(); ++i)
      in.reals(static_cast<Eigen::Index>(i), 0) = static_cast<T>(s.reals[i]);
  }
  return in;
}

template <typename T>
struct Transformer {
  ArchConfig arch;
  ParamSet<T> params;

  static Transformer init(const ArchConfig& arch, uint64_t seed) {
    arch.validate();
    Transformer m;
    m.arch = arch;
    Rng rng(derive_seed(seed, 0x9a9a));
    const uint32_t d = arch.hidden_dim;
    const T base_std = T(0.02);
    // residual output projections scaled down with depth, GPT-style
    const T resid_std = base_std / std::sqrt(T(2) * static_cast<T>(arch.num_layers));
    auto randn = [&rng](uint32_t r, uint32_t c, T sd) {
      Mat<T> w(r, c);
      for (Eigen::Index i = 0; i < w.rows(); ++i)
        for (Eigen::Index j = 0; j < w.cols(); ++j) w(i, j) = static_cast<T>(rng.normal()) * sd;
      return w;
    };
    auto zeros = [](uint32_t r, uint32_t c) { return Mat<T>::Zero(r, c); };
    auto ones = [](uint32_t r, uint32_t c) { return Mat<T>::Ones(r, c); };

    if (arch.input_mode == InputMode::TokenEmbedding) {
      m.params.add("tok_emb", randn(arch.embed_rows(), d, base_std));
    } else {
      m.params.add("in.w", randn(arch.input_dim, d, base_std));
      m.params.add("in.b", zeros(1, d));
    }
    m.params.add("pos_emb", randn(arch.max_seq_len, d, base_std));
    for (uint32_t l = 0; l < arch.num_layers; ++l) {
      std::string p = "L" + std::to_string(l) + ".";
      m.params.add(p + "ln1.g", ones(1, d));
      m.params.add(p + "ln1.b", zeros(1, d));
      m.params.add(p + "attn.wq", randn(d, d, base_std));
      m.params.add(p + "attn.bq", zeros(1, d));
      m.params.add(p + "attn.wk", randn(d, d, base_std));
      m.params.add(p + "attn.bk", zeros(1, d));
      m.params.add(p + "attn.wv", randn(d, d, base_std));
      m.params.add(p + "attn.bv", zeros(1, d));
      m.params.add(p + "attn.wo", randn(d, d, resid_std));
      m.params.add(p + "attn.bo", zeros(1, d));
      m.params.add(p + "ln2.g", ones(1, d));
      m.params.add(p + "ln2.b", zeros(1, d));
      m.params.add(p + "mlp.w1", randn(d, 4 * d, base_std));
      m.params.add(p + "mlp.b1", zeros(1, 4 * d));
      m.params.add(p + "mlp.w2", randn(4 * d, d, resid_std));
      m.params.add(p + "mlp.b2", zeros(1, d));
    }
    m.params.add("lnf.g", ones(1, d));
    m.params.add("lnf.b", zeros(1, d));
    m.params.add("head.w", randn(d, arch.head_dim(), base_std));
    m.params.add("head.b", zeros(1, arch.head_dim()));
    return m;
  }

  // Nodes of one forward pass; param_ids align with params.tensors.
  struct Graph {
    std::vector<int> param_ids;
    int out = -1;  // N x head_dim
    int emb = -1;  // N x d, post final layer norm
  };

  std::vector<int> bind_params(Tape<T>& tape, bool needs_grad) const {
    std::vector<int> ids;
    ids.reserve(params.tensors.size());
    for (const auto& t : params.tensors) ids.push_back(tape.leaf(t, needs_grad));
    return ids;
  }

  // Builds the forward graph for one sequence. `override_ids` substitutes the
  // input tokens (used for mask-token replacement) without touching targets.
  Graph build(Tape<T>& tape, const ModelInput<T>& in, bool train_mode, Rng* drop_rng,
              bool bidirectional, std::vector<int> param_ids = {},
              const std::vector<uint32_t>* override_ids = nullptr) const {
    const uint32_t n = in.length();
    if (n == 0) throw StageError("forward: empty sequence");
    if (n > arch.max_seq_len) throw StageError("forward: sequence longer than max_seq_len");
    Graph g;
    g.param_ids = param_ids.empty() ? bind_params(tape, tape.grad_enabled()) : std::move(param_ids);
    auto pid = [&](const std::string& name) { return g.param_ids[params.index(name)]; };

    bool drop = train_mode && arch.dropout > 0.0;
    if (drop && !drop_rng) throw StageError("forward: dropout enabled but no rng provided");

    int h;
    if (arch.input_mode == InputMode::TokenEmbedding) {
      const std::vector<uint32_t>& ids = override_ids ? *override_ids : in.ids;
      for (uint32_t t : ids)
        if (t >= arch.embed_rows()) throw StageError("forward: token id outside vocabulary");
      h = tape.gather_rows(pid("tok_emb"), ids);
    } else {
      if (in.reals.cols() != static_cast<Eigen::Index>(arch.input_dim))
        throw StageError("forward: input width mismatch");
      int x = tape.leaf(in.reals, false);
      h = tape.add_rowvec(tape.matmul(x, pid("in.w")), pid("in.b"));
    }
    h = tape.add_table_rows(h, pid("pos_emb"), 0);
    if (drop) h = tape.dropout(h, arch.dropout, *drop_rng);

    for (uint32_t l = 0; l < arch.num_layers; ++l) {
      std::string p = "L" + std::to_string(l) + ".";
      int a = tape.layernorm(h, pid(p + "ln1.g"), pid(p + "ln1.b"));
      int q = tape.add_rowvec(tape.matmul(a, pid(p + "attn.wq")), pid(p + "attn.bq"));
      int k = tape.add_rowvec(tape.matmul(a, pid(p + "attn.wk")), pid(p + "attn.bk"));
      int v = tape.add_rowvec(tape.matmul(a, pid(p + "attn.wv")), pid(p + "attn.bv"));
      int att = tape.attention(q, k, v, static_cast<int>(arch.num_heads), !bidirectional);
      int o = tape.add_rowvec(tape.matmul(att, pid(p + "attn.wo")), pid(p + "attn.bo"));
      if (drop) o = tape.dropout(o, arch.dropout, *drop_rng);
      h = tape.add(h, o);
      int m = tape.layernorm(h, pid(p + "ln2.g"), pid(p + "ln2.b"));
      int f = tape.add_rowvec(tape.matmul(m, pid(p + "mlp.w1")), pid(p + "mlp.b1"));
      f = tape.gelu(f);
      f = tape.add_rowvec(tape.matmul(f, pid(p + "mlp.w2")), pid(p + "mlp.b2"));
      if (drop) f = tape.dropout(f, arch.dropout, *drop_rng);
      h = tape.add(h, f);
    }
    g.emb = tape.layernorm(h, pid("lnf.g"), pid("lnf.b"));
    g.out = tape.add_rowvec(tape.matmul(g.emb, pid("head.w")), pid("head.b"));
    return g;
  }

  // Autoregressive loss: predictions at positions 0..N-2 vs tokens 1..N-1.
  int build_ar_loss(Tape<T>& tape, const Graph& g, const ModelInput<T>& in) const {
    const uint32_t n = in.length();
    if (n < 2) throw StageError("ar loss: need at least 2 tokens");
    int pred = tape.slice_rows(g.out, 0, n - 1);
    if (arch.output_mode == OutputMode::CategoricalHead) {
      std::vector<uint32_t> tgt(in.ids.begin() + 1, in.ids.end());
      return tape.softmax_ce(pred, std::move(tgt));
    }
    Mat<T> tgt = in.reals.middleRows(1, n - 1);
    return arch.gaussian_head ? tape.gaussian_nll(pred, std::move(tgt))
                              : tape.mse(pred, std::move(tgt));
  }

  // Masked loss: masked positions are replaced by the reserved mask token in
  // the input, attention is bidirectional, and only masked rows are scored.
  int build_masked_loss(Tape<T>& tape, const ModelInput<T>& in,
                        std::span<const uint32_t> mask_positions, bool train_mode, Rng* drop_rng,
                        std::vector<int> param_ids = {}) const {
    if (arch.input_mode != InputMode::TokenEmbedding ||
        arch.output_mode != OutputMode::CategoricalHead)
      throw ConfigError("masked objective requires token input and categorical head");
    if (mask_positions.empty()) throw StageError("masked loss: empty mask set");
    std::vector<uint32_t> masked = in.ids;
    for (uint32_t p : mask_positions) {
      if (p >= masked.size()) throw StageError("masked loss: mask position out of range");
      masked[p] = arch.mask_token();
    }
    Graph g = build(tape, in, train_mode, drop_rng, /*bidirectional=*/true, std::move(param_ids),
                    &masked);
    // score exactly the masked rows: per-row CE, averaged
    int total = -1;
    for (size_t i = 0; i < mask_positions.size(); ++i) {
      int row = tape.slice_rows(g.out, static_cast<int>(mask_positions[i]), 1);
      int ce = tape.softmax_ce(row, {in.ids[mask_positions[i]]});
      total = total < 0 ? ce : tape.add(total, ce);
    }
    return tape.mul_scalar(total, T(1) / static_cast<T>(mask_positions.size()));
  }

  struct ForwardResult {
    Mat<T> outputs;     // N x head_dim (logits for categorical)
    Mat<T> embeddings;  // N x d
  };

  // Inference pass: no gradients, no dropout.
  ForwardResult forward(const ModelInput<T>& in, bool bidirectional = false) const {
    Tape<T> tape(false);
    Graph g = build(tape, in, false, nullptr, bidirectional);
    return {tape.val(g.out), tape.val(g.emb)};
  }

  Mat<T> predict_probs(const ModelInput<T>& in) const {
    if (arch.output_mode != OutputMode::CategoricalHead)
      throw StageError("predict_probs: categorical head required");
    return Tape<T>::softmax_rows(forward(in).outputs);
  }

  template <typename U>
  Transformer<U> cast() const {
    Transformer<U> out;
    out.arch = arch;
    out.params = params.template cast<U>();
    return out;
  }
};

}  // namespace ssw::net
