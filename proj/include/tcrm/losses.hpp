#pragma once

// Training objectives. Each loss exists twice: over plain score spans (for
// metrics, diagnostics and identity checks) and over graph nodes (for
// training). Both walk the summands in the same order.

#include <optional>
#include <span>
#include <vector>

#include "tcrm/scorer.hpp"

namespace tcrm {

struct LossWeights {
  double a_sm = 0.1;
  double a_la = 0.01;
  bool detach_sm = true;
  bool detach_la = true;
  /// Divide each response's regularizer sums by its number of terms.
  bool length_normalize = false;

  void validate() const {
    detail::require(std::isfinite(a_sm) && a_sm >= 0.0, "a_sm must be finite and nonnegative");
    detail::require(std::isfinite(a_la) && a_la >= 0.0, "a_la must be finite and nonnegative");
  }

  [[nodiscard]] bool is_baseline() const { return a_sm == 0.0 && a_la == 0.0; }
};

/// One prompt with a preferred and a rejected EOS-terminated response.
struct PreferencePair {
  std::vector<int> prompt;
  std::vector<int> winner;
  std::vector<int> loser;
  std::optional<double> gt_w;
  std::optional<double> gt_l;
  int eos_id = 2;

  [[nodiscard]] TokenSequence winner_seq() const { return {prompt, winner, eos_id}; }
  [[nodiscard]] TokenSequence loser_seq() const { return {prompt, loser, eos_id}; }
};

using PairBatch = std::vector<PreferencePair>;

/// Rejects pairs whose responses are identical; BT has no preference signal there.
inline void validate_pairs(std::span<const PreferencePair> pairs, const ScorerConfig& cfg) {
  for (const auto& p : pairs) {
    detail::require(p.winner != p.loser, "preference pair with identical responses");
    p.winner_seq().validate(cfg);
    p.loser_seq().validate(cfg);
  }
}

// ---------------------------------------------------------------------------
// Plain-value losses

/// -log sigma(rw - rl), computed as softplus(rl - rw).
inline double bt_loss(double rw, double rl) { return softplus(rl - rw); }

/// sum_{k=1..K} (s[k-1] - s[k])^2; 0 for a single-entry trajectory.
inline double smoothness_loss(std::span<const double> s) {
  double total = 0.0;
  for (std::size_t k = 1; k < s.size(); ++k) {
    const double d = s[k - 1] - s[k];
    total += d * d;
  }
  return total;
}

/// sum_{k=0..K-1} (s[k] - s[K])^2.
inline double lookahead_loss(std::span<const double> s) {
  detail::require(!s.empty(), "lookahead_loss: empty trajectory");
  const double fin = s.back();
  double total = 0.0;
  for (std::size_t k = 0; k + 1 < s.size(); ++k) {
    const double d = s[k] - fin;
    total += d * d;
  }
  return total;
}

/// Monte Carlo value loss: every non-terminal prefix value regressed onto the
/// observed return.
inline double value_mc_loss(std::span<const double> values, double target) {
  detail::require(!values.empty(), "value_mc_loss: empty trajectory");
  double total = 0.0;
  for (std::size_t k = 0; k + 1 < values.size(); ++k) {
    const double d = values[k] - target;
    total += d * d;
  }
  return total;
}

/// One-step TD value loss with zero intermediate reward: V_k regressed onto
/// V_{k+1}, and the terminal V_K onto the observed reward (defaults to V_K,
/// making the terminal term vanish).
inline double value_td_loss(std::span<const double> values, std::optional<double> terminal_reward = std::nullopt) {
  detail::require(!values.empty(), "value_td_loss: empty trajectory");
  double total = 0.0;
  for (std::size_t k = 1; k < values.size(); ++k) {
    const double d = values[k - 1] - values[k];
    total += d * d;
  }
  const double t = values.back() - terminal_reward.value_or(values.back());
  return total + t * t;
}

// ---------------------------------------------------------------------------
// Graph losses. Trajectories are (K+1) x 1 nodes.

inline Var bt_loss(const Var& rw, const Var& rl) { return softplus(sub(rl, rw)); }

inline Var smoothness_loss(const Var& traj, bool detach) {
  const Eigen::Index n = traj.rows();
  if (n < 2) {
    return traj.graph().constant(0.0);
  }
  Var earlier = slice_rows(traj, 0, n - 1);
  Var later = slice_rows(traj, 1, n - 1);
  if (detach) {
    later = stop_gradient(later);
  }
  return sum(sq_diff(earlier, later));
}

inline Var lookahead_loss(const Var& traj, bool detach) {
  const Eigen::Index n = traj.rows();
  if (n < 2) {
    return traj.graph().constant(0.0);
  }
  Var fin = slice_rows(traj, n - 1, 1);
  if (detach) {
    fin = stop_gradient(fin);
  }
  return sum(sq_diff(slice_rows(traj, 0, n - 1), broadcast(fin, n - 1, 1)));
}

/// Graph form of value_mc_loss; `target` is 1x1 (pass a stop_gradient node for
/// a detached return).
inline Var value_mc_loss(const Var& values, const Var& target) {
  const Eigen::Index n = values.rows();
  if (n < 2) {
    return values.graph().constant(0.0);
  }
  return sum(sq_diff(slice_rows(values, 0, n - 1), broadcast(target, n - 1, 1)));
}

/// Per-token squared error to per-token returns, averaged over tokens.
inline Var value_regression_loss(const Var& values, const Matrix& returns) {
  return mean(sq_diff(values, values.graph().constant(returns)));
}

struct LossParts {
  Var total;
  double bt = 0.0;
  double sm = 0.0;
  double la = 0.0;
};

/// mean over pairs of BT + a_sm (L_sm(w) + L_sm(l)) + a_la (L_LA(w) + L_LA(l)).
/// The reported sm / la parts are unweighted batch means of the per-pair sums.
inline LossParts overall_loss(std::span<const Var> winners, std::span<const Var> losers,
                              const LossWeights& w) {
  detail::require(!winners.empty(), "overall_loss: empty batch");
  detail::require(winners.size() == losers.size(), "overall_loss: winner/loser count mismatch");
  w.validate();
  const double inv_n = 1.0 / static_cast<double>(winners.size());
  LossParts parts;
  std::vector<Var> terms;
  terms.reserve(winners.size());
  for (std::size_t i = 0; i < winners.size(); ++i) {
    const Var& tw = winners[i];
    const Var& tl = losers[i];
    Var term = bt_loss(slice_rows(tw, tw.rows() - 1, 1), slice_rows(tl, tl.rows() - 1, 1));
    parts.bt += term.item() * inv_n;

    auto regularize = [&](auto&& loss, bool detach, double coeff, double& log) {
      Var lw = loss(tw, detach);
      Var ll = loss(tl, detach);
      log += (lw.item() + ll.item()) * inv_n;
      if (w.length_normalize) {
        lw = scale(lw, 1.0 / std::max<double>(1.0, static_cast<double>(tw.rows() - 1)));
        ll = scale(ll, 1.0 / std::max<double>(1.0, static_cast<double>(tl.rows() - 1)));
      }
      term = add(term, scale(add(lw, ll), coeff));
    };
    if (w.a_sm > 0.0) {
      regularize([](const Var& t, bool d) { return smoothness_loss(t, d); }, w.detach_sm, w.a_sm, parts.sm);
    }
    if (w.a_la > 0.0) {
      regularize([](const Var& t, bool d) { return lookahead_loss(t, d); }, w.detach_la, w.a_la, parts.la);
    }
    terms.push_back(term);
  }
  parts.total = scale(sum(concat_rows(terms)), inv_n);
  return parts;
}

/// Builds the scorer graph for a pair batch and returns the combined loss.
inline LossParts pair_batch_loss(Graph& g, const ParamView& p, const ScorerConfig& cfg,
                                 std::span<const PreferencePair> batch, const LossWeights& w) {
  detail::require(!batch.empty(), "pair_batch_loss: empty batch");
  std::vector<TokenSequence> seqs;
  seqs.reserve(batch.size() * 2);
  for (const auto& pr : batch) {
    seqs.push_back(pr.winner_seq());
  }
  for (const auto& pr : batch) {
    seqs.push_back(pr.loser_seq());
  }
  std::vector<Var> trajs = response_trajectories(g, p, cfg, seqs);
  std::span<const Var> all(trajs);
  return overall_loss(all.first(batch.size()), all.subspan(batch.size()), w);
}

/// Value of the combined loss at the current parameters.
inline double overall_loss_value(std::span<const PreferencePair> batch, const ParameterStore& params,
                                 const ScorerConfig& cfg, const LossWeights& w) {
  Graph g(false);
  const ParamView view = ParamView::read(params);
  return pair_batch_loss(g, view, cfg, batch, w).total.item();
}

}  // namespace tcrm
