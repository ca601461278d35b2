#pragma once

// Per-token causal reward scorer: a linear scalar head on every position of
// the transformer trunk. Entry k of a RewardTrajectory is the score after
// response token k, which by the causal mask depends only on the prompt and
// response tokens 0..k.

#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "tcrm/transformer.hpp"

namespace tcrm {

/// Prompt plus EOS-terminated response.
struct TokenSequence {
  std::vector<int> prompt;
  std::vector<int> response;
  int eos_id = 2;

  [[nodiscard]] std::vector<int> joined() const {
    std::vector<int> all(prompt);
    all.insert(all.end(), response.begin(), response.end());
    return all;
  }

  void validate(const ScorerConfig& cfg) const {
    detail::require(!response.empty(), "response must be nonempty");
    detail::require(response.back() == eos_id, "response must end with EOS");
    detail::require(static_cast<int>(prompt.size() + response.size()) <= cfg.max_seq_len,
                    "sequence longer than max_seq_len");
    for (int id : prompt) {
      detail::require(id >= 0 && id < cfg.vocab_size, "prompt token outside vocabulary");
    }
    for (int id : response) {
      detail::require(id >= 0 && id < cfg.vocab_size, "response token outside vocabulary");
    }
  }
};

/// scores[k] = r(x, y_0..k). The empty response scores 0 by convention and is
/// not stored.
struct RewardTrajectory {
  std::vector<double> scores;

  [[nodiscard]] std::size_t size() const { return scores.size(); }
  [[nodiscard]] double final_score() const { return scores.back(); }
};

inline void register_scorer(ParameterStore& store, const ScorerConfig& cfg) {
  register_trunk(store, cfg);
  store.add("head_w", cfg.embed_dim, 1, Init::normal);
  store.add("head_b", 1, 1, Init::zeros);
}

/// Scalar head output for every row of the padded batch: (B*width) x 1.
inline Var scorer_forward(Graph& g, const ParamView& p, const ScorerConfig& cfg, const PaddedBatch& batch) {
  Var h = trunk_forward(g, p, cfg, batch);
  return add_row(matmul(h, p(g, "head_w")), p(g, "head_b"));
}

/// Per-response trajectory nodes (each (K+1) x 1) carved out of a scorer
/// forward over `seqs`.
inline std::vector<Var> response_trajectories(Graph& g, const ParamView& p, const ScorerConfig& cfg,
                                              std::span<const TokenSequence> seqs) {
  std::vector<std::vector<int>> rows;
  rows.reserve(seqs.size());
  for (const auto& s : seqs) {
    s.validate(cfg);
    rows.push_back(s.joined());
  }
  const PaddedBatch batch = PaddedBatch::from(rows, cfg);
  Var all = scorer_forward(g, p, cfg, batch);
  std::vector<Var> out;
  out.reserve(seqs.size());
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    const auto start = static_cast<Eigen::Index>(i) * batch.width + static_cast<Eigen::Index>(seqs[i].prompt.size());
    out.push_back(slice_rows(all, start, static_cast<Eigen::Index>(seqs[i].response.size())));
  }
  return out;
}

/// Scores a padded batch in one forward pass (inference only).
inline std::vector<RewardTrajectory> score_batch(std::span<const TokenSequence> seqs, const ParameterStore& params,
                                                 const ScorerConfig& cfg) {
  Graph g(false);
  const ParamView view = ParamView::read(params);
  std::vector<Var> trajs = response_trajectories(g, view, cfg, seqs);
  std::vector<RewardTrajectory> out(trajs.size());
  for (std::size_t i = 0; i < trajs.size(); ++i) {
    const Matrix& v = trajs[i].value();
    out[i].scores.assign(v.data(), v.data() + v.size());
  }
  return out;
}

inline RewardTrajectory score_sequence(const TokenSequence& seq, const ParameterStore& params,
                                       const ScorerConfig& cfg) {
  return score_batch(std::span(&seq, 1), params, cfg).front();
}

/// Scores many sequences in fixed-size chunks; serial order preserved.
inline std::vector<RewardTrajectory> score_all(std::span<const TokenSequence> seqs, const ParameterStore& params,
                                               const ScorerConfig& cfg, std::size_t chunk = 64) {
  std::vector<RewardTrajectory> out;
  out.reserve(seqs.size());
  for (std::size_t i = 0; i < seqs.size(); i += chunk) {
    auto part = score_batch(seqs.subspan(i, std::min(chunk, seqs.size() - i)), params, cfg);
    for (auto& t : part) {
      out.push_back(std::move(t));
    }
  }
  return out;
}

/// d[0] = r(y_0) - r({}) = scores[0]; d[k] = scores[k] - scores[k-1].
inline std::vector<double> delta_decomposition(const RewardTrajectory& traj) {
  detail::require(!traj.scores.empty(), "delta_decomposition: empty trajectory");
  std::vector<double> d(traj.scores.size());
  d[0] = traj.scores[0];
  for (std::size_t k = 1; k < d.size(); ++k) {
    d[k] = traj.scores[k] - traj.scores[k - 1];
  }
  return d;
}

/// Interpretability dump: one row per response token.
inline void write_trajectory_csv(std::ostream& out, std::span<const TokenSequence> seqs,
                                 std::span<const RewardTrajectory> trajs, std::size_t first_id = 0) {
  detail::require(seqs.size() == trajs.size(), "write_trajectory_csv: size mismatch");
  out << "sequence_id,position,token_id,score,delta\n";
  out.precision(17);
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    const auto d = delta_decomposition(trajs[i]);
    for (std::size_t k = 0; k < d.size(); ++k) {
      out << (first_id + i) << ',' << k << ',' << seqs[i].response[k] << ',' << trajs[i].scores[k] << ',' << d[k]
          << '\n';
    }
  }
}

/// Scorer config + parameters, persisted together.
struct RewardModel {
  ScorerConfig cfg;
  ParameterStore params;

  RewardModel(const ScorerConfig& c, std::uint64_t seed) : cfg(c), params(seed) { register_scorer(params, cfg); }

  [[nodiscard]] RewardTrajectory score(const TokenSequence& seq) const { return score_sequence(seq, params, cfg); }

  void save(const std::string& path, std::map<std::string, std::string> meta = {}) const {
    for (auto& [k, v] : cfg.to_meta()) {
      meta[k] = v;
    }
    meta["kind"] = "scorer";
    save_checkpoint(path, params, meta);
  }

  static RewardModel load(const std::string& path) {
    const Checkpoint ck = load_checkpoint(path);
    RewardModel m(ScorerConfig::from_meta(ck.meta), ck.seed);
    restore(m.params, ck);
    return m;
  }
};

}  // namespace tcrm
