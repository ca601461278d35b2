#pragma once

#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "tcrm/losses.hpp"

namespace tcrm {

/// Fraction of (winner, loser) score pairs ordered correctly; an exact tie
/// earns `tie_credit`.
inline double pairwise_accuracy(std::span<const std::pair<double, double>> pairs, double tie_credit = 0.5) {
  detail::require(!pairs.empty(), "pairwise_accuracy: no pairs");
  detail::require(tie_credit >= 0.0 && tie_credit <= 1.0, "pairwise_accuracy: tie_credit outside [0,1]");
  double correct = 0.0;
  for (const auto& [w, l] : pairs) {
    if (w > l) {
      correct += 1.0;
    } else if (w == l) {
      correct += tie_credit;
    }
  }
  return correct / static_cast<double>(pairs.size());
}

/// Last index of the first half of a trajectory: ceil(len/2) - 1.
inline std::size_t middle_position(std::size_t traj_len) {
  detail::require(traj_len >= 1, "middle_position: empty trajectory");
  return (traj_len + 1) / 2 - 1;
}

/// sum_{k=1..K} (s[k] - s[k-1])^2 / K
inline double mean_sq_step_delta(std::span<const double> s) {
  if (s.size() < 2) {
    return 0.0;
  }
  return smoothness_loss(s) / static_cast<double>(s.size() - 1);
}

/// sum_{k=0..K-1} (s[k] - s[K])^2 / K; the same summands as lookahead_loss.
inline double mean_sq_final_delta(std::span<const double> s) {
  if (s.size() < 2) {
    return 0.0;
  }
  return lookahead_loss(s) / static_cast<double>(s.size() - 1);
}

struct MetricReport {
  double final_accuracy = 0.0;
  double middle_accuracy = 0.0;
  double mean_sq_step_delta = 0.0;
  double mean_sq_final_delta = 0.0;
  std::size_t n_pairs = 0;
};

/// Metrics over scored pairs. Delta metrics average over every response
/// (winners and losers alike).
inline MetricReport compute_metrics(std::span<const RewardTrajectory> winners, std::span<const RewardTrajectory> losers,
                                    double tie_credit = 0.5) {
  detail::require(!winners.empty() && winners.size() == losers.size(), "compute_metrics: bad pair lists");
  std::vector<std::pair<double, double>> fin;
  std::vector<std::pair<double, double>> mid;
  double step = 0.0;
  double final_delta = 0.0;
  for (std::size_t i = 0; i < winners.size(); ++i) {
    const auto& w = winners[i].scores;
    const auto& l = losers[i].scores;
    fin.emplace_back(w.back(), l.back());
    mid.emplace_back(w[middle_position(w.size())], l[middle_position(l.size())]);
    step += mean_sq_step_delta(w) + mean_sq_step_delta(l);
    final_delta += mean_sq_final_delta(w) + mean_sq_final_delta(l);
  }
  const double n = static_cast<double>(winners.size());
  return {pairwise_accuracy(fin, tie_credit), pairwise_accuracy(mid, tie_credit), step / (2.0 * n),
          final_delta / (2.0 * n), winners.size()};
}

inline MetricReport evaluate_pairs(std::span<const PreferencePair> pairs, const ParameterStore& params,
                                   const ScorerConfig& cfg, double tie_credit = 0.5) {
  std::vector<TokenSequence> ws;
  std::vector<TokenSequence> ls;
  for (const auto& p : pairs) {
    ws.push_back(p.winner_seq());
    ls.push_back(p.loser_seq());
  }
  const auto tw = score_all(ws, params, cfg);
  const auto tl = score_all(ls, params, cfg);
  return compute_metrics(tw, tl, tie_credit);
}

inline void write_metrics_header(std::ostream& out) {
  out << "model_tag,epoch,final_accuracy,middle_accuracy,mean_sq_step_delta,mean_sq_final_delta,n_pairs\n";
}

inline void write_metrics_row(std::ostream& out, const std::string& tag, int epoch, const MetricReport& m) {
  out.precision(10);
  out << tag << ',' << epoch << ',' << m.final_accuracy << ',' << m.middle_accuracy << ',' << m.mean_sq_step_delta
      << ',' << m.mean_sq_final_delta << ',' << m.n_pairs << '\n';
}

}  // namespace tcrm
