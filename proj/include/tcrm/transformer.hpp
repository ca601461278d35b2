#pragma once

// Decoder-only transformer trunk shared by the reward scorer and the toy
// policy: token + learned absolute position embeddings, pre-norm blocks of
// causal multi-head attention and a GELU feed-forward, final RMS norm.

#include <cmath>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "tcrm/autodiff.hpp"

namespace tcrm {

struct ScorerConfig {
  int vocab_size = 32;
  int embed_dim = 64;
  int num_blocks = 2;
  int num_heads = 2;
  int max_seq_len = 64;
  int ff_mult = 4;
  int pad_id = 0;

  void validate() const {
    detail::require(vocab_size > 1 && vocab_size <= 4096, "vocab_size out of range");
    detail::require(embed_dim > 0 && num_heads > 0 && embed_dim % num_heads == 0,
                    "embed_dim must be a positive multiple of num_heads");
    detail::require(num_blocks > 0, "num_blocks must be positive");
    detail::require(max_seq_len > 0, "max_seq_len must be positive");
    detail::require(ff_mult > 0, "ff_mult must be positive");
    detail::require(pad_id >= 0 && pad_id < vocab_size, "pad_id outside vocabulary");
  }

  [[nodiscard]] std::map<std::string, std::string> to_meta() const {
    return {{"vocab_size", std::to_string(vocab_size)}, {"embed_dim", std::to_string(embed_dim)},
            {"num_blocks", std::to_string(num_blocks)}, {"num_heads", std::to_string(num_heads)},
            {"max_seq_len", std::to_string(max_seq_len)}, {"ff_mult", std::to_string(ff_mult)},
            {"pad_id", std::to_string(pad_id)}};
  }

  static ScorerConfig from_meta(const std::map<std::string, std::string>& meta) {
    ScorerConfig c;
    auto get = [&](const char* key, int& field) {
      if (auto it = meta.find(key); it != meta.end()) {
        field = std::stoi(it->second);
      }
    };
    get("vocab_size", c.vocab_size);
    get("embed_dim", c.embed_dim);
    get("num_blocks", c.num_blocks);
    get("num_heads", c.num_heads);
    get("max_seq_len", c.max_seq_len);
    get("ff_mult", c.ff_mult);
    get("pad_id", c.pad_id);
    c.validate();
    return c;
  }
};

/// Right-padded batch of token rows, B x L flattened row-major.
struct PaddedBatch {
  int width = 0;
  std::vector<int> ids;
  std::vector<int> lengths;

  [[nodiscard]] int size() const { return static_cast<int>(lengths.size()); }

  static PaddedBatch from(std::span<const std::vector<int>> rows, const ScorerConfig& cfg) {
    detail::require(!rows.empty(), "empty batch");
    PaddedBatch b;
    for (const auto& r : rows) {
      detail::require(!r.empty(), "empty token row");
      detail::require(static_cast<int>(r.size()) <= cfg.max_seq_len,
                      "sequence length " + std::to_string(r.size()) + " exceeds max_seq_len " +
                          std::to_string(cfg.max_seq_len));
      b.width = std::max(b.width, static_cast<int>(r.size()));
    }
    b.ids.assign(rows.size() * static_cast<std::size_t>(b.width), cfg.pad_id);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      for (std::size_t t = 0; t < rows[i].size(); ++t) {
        const int id = rows[i][t];
        detail::require(id >= 0 && id < cfg.vocab_size, "token id " + std::to_string(id) + " outside vocabulary");
        b.ids[i * static_cast<std::size_t>(b.width) + t] = id;
      }
      b.lengths.push_back(static_cast<int>(rows[i].size()));
    }
    return b;
  }
};

/// Parameter access for one forward pass: trainable parameters become graph
/// leaves that receive gradient, frozen ones become constants.
struct ParamView {
  ParameterStore* store;
  bool trainable = true;
  std::string prefix;

  /// Parameters enter the graph as trainable leaves.
  static ParamView train(ParameterStore& s, std::string prefix = "") { return {&s, true, std::move(prefix)}; }
  /// Parameters enter the graph as constants.
  static ParamView read(const ParameterStore& s, std::string prefix = "") {
    return {const_cast<ParameterStore*>(&s), false, std::move(prefix)};
  }

  Var operator()(Graph& g, const std::string& name) const {
    return trainable ? g.parameter(*store, prefix + name) : g.frozen_parameter(*store, prefix + name);
  }
};

inline void register_trunk(ParameterStore& store, const ScorerConfig& cfg, const std::string& prefix = "") {
  cfg.validate();
  const int d = cfg.embed_dim;
  const int ff = cfg.ff_mult * d;
  store.add(prefix + "tok_emb", cfg.vocab_size, d, Init::normal);
  store.add(prefix + "pos_emb", cfg.max_seq_len, d, Init::normal);
  for (int l = 0; l < cfg.num_blocks; ++l) {
    const std::string b = prefix + "block" + std::to_string(l) + ".";
    store.add(b + "attn_norm", 1, d, Init::ones);
    store.add(b + "w_qkv", d, 3 * d, Init::normal);
    store.add(b + "b_qkv", 1, 3 * d, Init::zeros);
    store.add(b + "w_out", d, d, Init::normal);
    store.add(b + "b_out", 1, d, Init::zeros);
    store.add(b + "ff_norm", 1, d, Init::ones);
    store.add(b + "w_ff1", d, ff, Init::normal);
    store.add(b + "b_ff1", 1, ff, Init::zeros);
    store.add(b + "w_ff2", ff, d, Init::normal);
    store.add(b + "b_ff2", 1, d, Init::zeros);
  }
  store.add(prefix + "final_norm", 1, d, Init::ones);
}

/// Multi-head scaled dot-product attention over packed (B*width) x 3D rows
/// [q | k | v]. Query t sees keys 0..min(t, length-1) of its own sequence. One graph node; the softmax weights are
/// kept for the backward pass.
inline Var causal_attention(const Var& qkv, int heads, const PaddedBatch& batch) {
  const Eigen::Index width = batch.width;
  const Eigen::Index d = qkv.cols() / 3;
  const Eigen::Index dh = d / heads;
  detail::require(qkv.cols() == 3 * d && d % heads == 0, "causal_attention: bad qkv width");
  detail::require(qkv.rows() == width * batch.size(), "causal_attention: row count does not match batch");
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  const Matrix& x = qkv.value();
  Graph& g = qkv.graph();
  const bool rg = qkv.requires_grad() && g.recording();

  Matrix y(x.rows(), d);
  std::vector<Matrix> probs;
  if (rg) {
    probs.reserve(static_cast<std::size_t>(batch.size() * heads));
  }
  // Products run over the sequence's own keys only, so a sequence's output
  // does not depend on how wide the padded batch is.
  for (int s = 0; s < batch.size(); ++s) {
    const Eigen::Index len = batch.lengths[static_cast<std::size_t>(s)];
    const Eigen::Index r0 = s * width;
    for (int h = 0; h < heads; ++h) {
      const Eigen::Index c0 = h * dh;
      Matrix sc = x.block(r0, c0, width, dh) * x.block(r0, d + c0, len, dh).transpose();
      for (Eigen::Index i = 0; i < width; ++i) {
        const Eigen::Index vis = std::min(i + 1, len);
        auto row = sc.row(i).head(vis);
        row *= inv_sqrt;
        row.array() = (row.array() - row.maxCoeff()).exp();
        row /= row.sum();
        sc.row(i).tail(len - vis).setZero();
      }
      y.block(r0, c0, width, dh).noalias() = sc * x.block(r0, 2 * d + c0, len, dh);
      if (rg) {
        probs.push_back(std::move(sc));
      }
    }
  }
  const NodeId xi = qkv.id();
  std::vector<Eigen::Index> lengths(batch.lengths.begin(), batch.lengths.end());
  return g.push(std::move(y), rg,
                [xi, heads, width, d, dh, inv_sqrt, lengths = std::move(lengths), probs = std::move(probs)](
                    Graph& gr, NodeId self) {
                  const Matrix& up = gr.upstream(self);
                  const Matrix& xv = gr.value(xi);
                  Matrix& dx = *gr.grad_slot(xi);
                  for (std::size_t s = 0; s < lengths.size(); ++s) {
                    const Eigen::Index len = lengths[s];
                    const Eigen::Index r0 = static_cast<Eigen::Index>(s) * width;
                    for (int h = 0; h < heads; ++h) {
                      const Eigen::Index c0 = h * dh;
                      const Matrix& p = probs[s * static_cast<std::size_t>(heads) + static_cast<std::size_t>(h)];
                      auto dout = up.block(r0, c0, width, dh);
                      dx.block(r0, 2 * d + c0, len, dh).noalias() += p.transpose() * dout;
                      Matrix dp = dout * xv.block(r0, 2 * d + c0, len, dh).transpose();
                      const Eigen::VectorXd dot = p.cwiseProduct(dp).rowwise().sum();
                      dp = p.cwiseProduct(dp - dot.replicate(1, len)) * inv_sqrt;
                      dx.block(r0, c0, width, dh).noalias() += dp * xv.block(r0, d + c0, len, dh);
                      dx.block(r0, d + c0, len, dh).noalias() += dp.transpose() * xv.block(r0, c0, width, dh);
                    }
                  }
                });
}

/// Runs the trunk over a padded batch; returns (B*width) x embed_dim hidden
/// states after the final norm. Row b*width + t is token t of sequence b.
inline Var trunk_forward(Graph& g, const ParamView& p, const ScorerConfig& cfg, const PaddedBatch& batch) {
  const int heads = cfg.num_heads;
  const int width = batch.width;

  std::vector<int> positions(batch.ids.size());
  for (std::size_t i = 0; i < positions.size(); ++i) {
    positions[i] = static_cast<int>(i % static_cast<std::size_t>(width));
  }
  Var x = add(gather_rows(p(g, "tok_emb"), batch.ids), gather_rows(p(g, "pos_emb"), positions));

  for (int l = 0; l < cfg.num_blocks; ++l) {
    const std::string b = "block" + std::to_string(l) + ".";
    Var h = rms_norm_rows(x, p(g, b + "attn_norm"));
    Var qkv = add_row(matmul(h, p(g, b + "w_qkv")), p(g, b + "b_qkv"));

    Var attn = causal_attention(qkv, heads, batch);
    x = add(x, add_row(matmul(attn, p(g, b + "w_out")), p(g, b + "b_out")));

    Var h2 = rms_norm_rows(x, p(g, b + "ff_norm"));
    Var f = gelu(add_row(matmul(h2, p(g, b + "w_ff1")), p(g, b + "b_ff1")));
    x = add(x, add_row(matmul(f, p(g, b + "w_ff2")), p(g, b + "b_ff2")));
  }
  return rms_norm_rows(x, p(g, "final_norm"));
}

}  // namespace tcrm
