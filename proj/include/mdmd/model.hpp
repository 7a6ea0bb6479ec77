#pragma once

#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mdmd/graph.hpp"
#include "mdmd/prediction.hpp"
#include "mdmd/rng.hpp"
#include "mdmd/schema.hpp"

namespace mdmd {

struct ModelConfig {
  int image_size = 224;
  int patch_size = 16;
  int embed_dim = 768;
  int encoder_layers = 12;
  int encoder_heads = 12;
  int decoder_blocks = 3;
  int decoder_heads = 0;  // 0 means: same as encoder_heads
  int ffn_ratio = 4;
  // The decoder block equations end in a bare FFN; the conventional residual
  // can be switched on for experiments.
  bool decoder_ffn_residual = false;

  int patches_per_side() const { return image_size / patch_size; }
  int token_count() const {
    return patches_per_side() * patches_per_side() + 1;
  }
  int patch_dim() const { return patch_size * patch_size * 3; }
  int effective_decoder_heads() const {
    return decoder_heads > 0 ? decoder_heads : encoder_heads;
  }

  void validate() const {
    if (image_size <= 0 || patch_size <= 0 || image_size % patch_size != 0)
      fail("config", "image_size must be a positive multiple of patch_size");
    if (embed_dim <= 0 || encoder_heads <= 0 || embed_dim % encoder_heads != 0)
      fail("config", "embed_dim must be divisible by encoder_heads");
    if (embed_dim % effective_decoder_heads() != 0)
      fail("config", "embed_dim must be divisible by decoder_heads");
    if (embed_dim % 4 != 0) fail("config", "embed_dim must be divisible by 4");
    if (encoder_layers < 0 || decoder_blocks < 0 || ffn_ratio <= 0)
      fail("config", "layer counts must be non-negative, ffn_ratio positive");
  }
};

// Ordered named tensors; insertion order fixes both initialization and
// serialization order.
template <typename S>
struct ParamStore {
  std::vector<std::string> names;
  std::vector<Mat<S>> values;
  std::unordered_map<std::string, size_t> index;

  Mat<S>& add(const std::string& name, Eigen::Index rows, Eigen::Index cols) {
    if (index.count(name)) fail("internal", "duplicate parameter " + name);
    index.emplace(name, names.size());
    names.push_back(name);
    values.push_back(Mat<S>::Zero(rows, cols));
    return values.back();
  }
  Mat<S>& at(const std::string& name) {
    auto it = index.find(name);
    if (it == index.end()) fail("internal", "unknown parameter " + name);
    return values[it->second];
  }
  const Mat<S>& at(const std::string& name) const {
    auto it = index.find(name);
    if (it == index.end()) fail("internal", "unknown parameter " + name);
    return values[it->second];
  }
  size_t size() const { return names.size(); }
};

// Parameters of one tape: leaves aligned with the store, by name.
template <typename S>
struct BoundParams {
  std::vector<Node<S>*> leaves;  // store order
  std::unordered_map<std::string, Node<S>*> by_name;

  Node<S>* at(const std::string& name) const {
    auto it = by_name.find(name);
    if (it == by_name.end()) fail("internal", "unbound parameter " + name);
    return it->second;
  }
};

// Attention probability matrices collected during a forward pass, for
// diagnostics and tests.
template <typename S>
struct ForwardTrace {
  std::vector<Node<S>*> attention_rows;
};

// Encoder-decoder landmark model: patch embedding + pre-norm transformer
// encoder, learned group queries refined by cross/self-attention blocks, and
// per-(dataset, group) regression head pairs.
template <typename S>
class MdmdModel {
 public:
  MdmdModel(ModelConfig config, SchemaSet schemas)
      : cfg_(config), schemas_(std::move(schemas)) {
    cfg_.validate();
    build_store();
  }

  const ModelConfig& config() const { return cfg_; }
  const SchemaSet& schema_set() const { return schemas_; }
  ParamStore<S>& params() { return params_; }
  const ParamStore<S>& params() const { return params_; }

  // Truncated-normal (sigma 0.02, cut at 2 sigma) for weights and embeddings,
  // ones for normalization gains, zeros for biases. One stream, store order.
  void init_params(std::uint64_t seed) {
    Rng rng = derive_rng(seed, "init");
    for (size_t i = 0; i < params_.size(); ++i) {
      Mat<S>& m = params_.values[i];
      const std::string& name = params_.names[i];
      const std::string tail = name.substr(name.rfind('.') + 1);
      if (tail == "g") {
        m.setOnes();
      } else if (is_bias(tail)) {
        m.setZero();
      } else {
        for (Eigen::Index r = 0; r < m.rows(); ++r)
          for (Eigen::Index c = 0; c < m.cols(); ++c)
            m(r, c) = static_cast<S>(rng.trunc_normal(0.02));
      }
    }
  }

  BoundParams<S> bind(Tape<S>& tape, bool needs_grad) const {
    BoundParams<S> bound;
    bound.leaves.reserve(params_.size());
    for (size_t i = 0; i < params_.size(); ++i) {
      Node<S>* leaf = tape.leaf(params_.values[i], needs_grad);
      bound.leaves.push_back(leaf);
      bound.by_name.emplace(params_.names[i], leaf);
    }
    return bound;
  }

  // Image layout: rows = y, cols = x*3 + channel.
  Node<S>* patchify(Tape<S>& tape, const BoundParams<S>& p,
                    const Mat<S>& image) const {
    const int ps = cfg_.patch_size, grid = cfg_.patches_per_side();
    if (image.rows() != cfg_.image_size || image.cols() != cfg_.image_size * 3)
      fail("shape", "patchify expects " + std::to_string(cfg_.image_size) + "x" +
                        std::to_string(cfg_.image_size) + "x3 image");
    Mat<S> patch_rows(grid * grid, cfg_.patch_dim());
    for (int py = 0; py < grid; ++py)
      for (int px = 0; px < grid; ++px)
        for (int dy = 0; dy < ps; ++dy)
          patch_rows.block(py * grid + px, dy * ps * 3, 1, ps * 3) =
              image.block(py * ps + dy, px * ps * 3, 1, ps * 3);
    Node<S>* tokens = tape.add_rowvec(
        tape.matmul(tape.constant(std::move(patch_rows)), p.at("patch.W")),
        p.at("patch.b"));
    Node<S>* with_global = tape.concat_rows({tokens, p.at("global")});
    return tape.add(with_global, p.at("pos"));
  }

  Node<S>* encode(Tape<S>& tape, const BoundParams<S>& p, Node<S>* tokens,
                  ForwardTrace<S>* trace = nullptr) const {
    Node<S>* x = tokens;
    for (int layer = 0; layer < cfg_.encoder_layers; ++layer) {
      const std::string base = "enc." + std::to_string(layer);
      Node<S>* xn = norm(tape, p, base + ".ln1", x);
      Node<S>* attended =
          attention(tape, p, base + ".attn", xn, xn, cfg_.encoder_heads, trace);
      x = tape.add(attended, x);
      x = tape.add(ffn(tape, p, base + ".ffn", norm(tape, p, base + ".ln2", x)), x);
    }
    return x;
  }

  Node<S>* decoder_block(Tape<S>& tape, const BoundParams<S>& p, int block,
                         Node<S>* f, Node<S>* x,
                         ForwardTrace<S>* trace = nullptr) const {
    const std::string base = "dec." + std::to_string(block);
    Node<S>* f1 = tape.add(
        attention(tape, p, base + ".ca", norm(tape, p, base + ".ca.lnq", f),
                  norm(tape, p, base + ".ca.lnkv", x),
                  cfg_.effective_decoder_heads(), trace),
        f);
    Node<S>* f1n = norm(tape, p, base + ".sa.ln", f1);
    Node<S>* f2 = tape.add(attention(tape, p, base + ".sa", f1n, f1n,
                                     cfg_.effective_decoder_heads(), trace),
                           f1);
    Node<S>* out = ffn(tape, p, base + ".ffn", norm(tape, p, base + ".ffn.ln", f2));
    return cfg_.decoder_ffn_residual ? tape.add(out, f2) : out;
  }

  Node<S>* decode(Tape<S>& tape, const BoundParams<S>& p, Node<S>* x,
                  ForwardTrace<S>* trace = nullptr) const {
    Node<S>* f = p.at("flsg");
    for (int block = 0; block < cfg_.decoder_blocks; ++block)
      f = decoder_block(tape, p, block, f, x, trace);
    return f;
  }

  // Applies the dataset's per-group head pairs and scatters rows back to the
  // schema's canonical landmark order.
  std::pair<Node<S>*, Node<S>*> predict_heads(Tape<S>& tape,
                                              const BoundParams<S>& p,
                                              Node<S>* f, int dataset_id) const {
    const DatasetSchema& schema = schemas_.at(dataset_id);
    std::vector<Node<S>*> lm_parts, chol_parts;
    for (size_t g = 0; g < schema.flsg_map.groups.size(); ++g) {
      const auto& group = schema.flsg_map.groups[g];
      if (group.empty()) continue;
      const std::string base = head_base(schema.name, g);
      Node<S>* token = tape.slice_rows(f, static_cast<Eigen::Index>(g), 1);
      const auto n = static_cast<Eigen::Index>(group.size());
      lm_parts.push_back(tape.reshape(mlp(tape, p, base + ".lm", token), n, 2));
      chol_parts.push_back(tape.reshape(mlp(tape, p, base + ".chol", token), n, 3));
    }
    std::vector<int> targets = flatten_ids(schema.flsg_map);
    Node<S>* lm = tape.scatter_rows(tape.concat_rows(lm_parts), targets,
                                    schema.landmark_count);
    Node<S>* chol = tape.scatter_rows(tape.concat_rows(chol_parts), targets,
                                      schema.landmark_count);
    return {lm, chol};
  }

  std::pair<Node<S>*, Node<S>*> forward_nodes(Tape<S>& tape,
                                              const BoundParams<S>& p,
                                              const Mat<S>& image, int dataset_id,
                                              ForwardTrace<S>* trace = nullptr) const {
    Node<S>* tokens = patchify(tape, p, image);
    Node<S>* encoded = encode(tape, p, tokens, trace);
    Node<S>* groups = decode(tape, p, encoded, trace);
    return predict_heads(tape, p, groups, dataset_id);
  }

  // Inference convenience: one throwaway tape, values only.
  PredictionSet<S> forward(const Mat<S>& image, int dataset_id) const {
    Tape<S> tape;
    BoundParams<S> p = bind(tape, false);
    auto [lm, chol] = forward_nodes(tape, p, image, dataset_id);
    return {lm->value, chol->value};
  }

  static std::string head_base(const std::string& schema_name, size_t group) {
    return "head." + schema_name + ".g" + std::to_string(group);
  }

 private:
  static bool is_bias(const std::string& tail) {
    return tail == "b" || tail == "bq" || tail == "bk" || tail == "bv" ||
           tail == "bo" || tail == "b1" || tail == "b2";
  }

  Node<S>* norm(Tape<S>& tape, const BoundParams<S>& p, const std::string& base,
                Node<S>* x) const {
    return tape.layer_norm(x, p.at(base + ".g"), p.at(base + ".b"));
  }

  Node<S>* linear(Tape<S>& tape, const BoundParams<S>& p, const std::string& base,
                  const char* w, const char* b, Node<S>* x) const {
    return tape.add_rowvec(tape.matmul(x, p.at(base + "." + w)),
                           p.at(base + "." + b));
  }

  // Multi-head attention; queries from q_in, keys/values from kv_in.
  Node<S>* attention(Tape<S>& tape, const BoundParams<S>& p,
                     const std::string& base, Node<S>* q_in, Node<S>* kv_in,
                     int heads, ForwardTrace<S>* trace) const {
    Node<S>* q = linear(tape, p, base, "Wq", "bq", q_in);
    Node<S>* k = linear(tape, p, base, "Wk", "bk", kv_in);
    Node<S>* v = linear(tape, p, base, "Wv", "bv", kv_in);
    const int dh = cfg_.embed_dim / heads;
    const S inv_sqrt = S(1) / std::sqrt(static_cast<S>(dh));
    std::vector<Node<S>*> merged;
    for (int h = 0; h < heads; ++h) {
      Node<S>* qh = tape.slice_cols(q, h * dh, dh);
      Node<S>* kh = tape.slice_cols(k, h * dh, dh);
      Node<S>* vh = tape.slice_cols(v, h * dh, dh);
      Node<S>* probs = tape.softmax_rows(
          tape.scale(tape.matmul(qh, tape.transpose(kh)), inv_sqrt));
      if (trace) trace->attention_rows.push_back(probs);
      merged.push_back(tape.matmul(probs, vh));
    }
    return linear(tape, p, base, "Wo", "bo", tape.concat_cols(merged));
  }

  Node<S>* ffn(Tape<S>& tape, const BoundParams<S>& p, const std::string& base,
               Node<S>* x) const {
    return linear(tape, p, base, "W2", "b2",
                  tape.gelu(linear(tape, p, base, "W1", "b1", x)));
  }

  // Two affine layers with a rectifier between; 1 x D in, 1 x out_dim out.
  Node<S>* mlp(Tape<S>& tape, const BoundParams<S>& p, const std::string& base,
               Node<S>* x) const {
    return linear(tape, p, base, "W2", "b2",
                  tape.relu(linear(tape, p, base, "W1", "b1", x)));
  }

  void add_attention_params(const std::string& base) {
    const int d = cfg_.embed_dim;
    params_.add(base + ".Wq", d, d);
    params_.add(base + ".bq", 1, d);
    params_.add(base + ".Wk", d, d);
    params_.add(base + ".bk", 1, d);
    params_.add(base + ".Wv", d, d);
    params_.add(base + ".bv", 1, d);
    params_.add(base + ".Wo", d, d);
    params_.add(base + ".bo", 1, d);
  }

  void add_norm_params(const std::string& base) {
    params_.add(base + ".g", 1, cfg_.embed_dim);
    params_.add(base + ".b", 1, cfg_.embed_dim);
  }

  void add_ffn_params(const std::string& base) {
    const int d = cfg_.embed_dim, hidden = cfg_.embed_dim * cfg_.ffn_ratio;
    params_.add(base + ".W1", d, hidden);
    params_.add(base + ".b1", 1, hidden);
    params_.add(base + ".W2", hidden, d);
    params_.add(base + ".b2", 1, d);
  }

  void add_mlp_params(const std::string& base, int out_dim) {
    const int d = cfg_.embed_dim, hidden = cfg_.embed_dim / 4;
    params_.add(base + ".W1", d, hidden);
    params_.add(base + ".b1", 1, hidden);
    params_.add(base + ".W2", hidden, out_dim);
    params_.add(base + ".b2", 1, out_dim);
  }

  void build_store() {
    const int d = cfg_.embed_dim;
    params_.add("patch.W", cfg_.patch_dim(), d);
    params_.add("patch.b", 1, d);
    params_.add("global", 1, d);
    params_.add("pos", cfg_.token_count(), d);
    for (int i = 0; i < cfg_.encoder_layers; ++i) {
      const std::string base = "enc." + std::to_string(i);
      add_norm_params(base + ".ln1");
      add_attention_params(base + ".attn");
      add_norm_params(base + ".ln2");
      add_ffn_params(base + ".ffn");
    }
    params_.add("flsg", schemas_.group_count, d);
    for (int i = 0; i < cfg_.decoder_blocks; ++i) {
      const std::string base = "dec." + std::to_string(i);
      add_norm_params(base + ".ca.lnq");
      add_norm_params(base + ".ca.lnkv");
      add_attention_params(base + ".ca");
      add_norm_params(base + ".sa.ln");
      add_attention_params(base + ".sa");
      add_norm_params(base + ".ffn.ln");
      add_ffn_params(base + ".ffn");
    }
    for (const DatasetSchema& schema : schemas_.schemas) {
      for (size_t g = 0; g < schema.flsg_map.groups.size(); ++g) {
        const auto& group = schema.flsg_map.groups[g];
        if (group.empty()) continue;
        const std::string base = head_base(schema.name, g);
        add_mlp_params(base + ".lm", static_cast<int>(group.size()) * 2);
        add_mlp_params(base + ".chol", static_cast<int>(group.size()) * 3);
      }
    }
  }

  ModelConfig cfg_;
  SchemaSet schemas_;
  ParamStore<S> params_;
};

}  // namespace mdmd
