#pragma once

// Step-level error localization from token-level score trajectories. A step
// is judged by the change in score across it; the first step whose judgement
// falls below a threshold is the predicted first error.

#include <algorithm>
#include <cmath>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "tcrm/scorer.hpp"
#include "tcrm/synth.hpp"

namespace tcrm {

enum class PrmMethod { difference, sigmoid_difference, sigmoid_ratio };

inline std::string to_string(PrmMethod m) {
  switch (m) {
    case PrmMethod::difference:
      return "difference";
    case PrmMethod::sigmoid_difference:
      return "sigmoid_difference";
    case PrmMethod::sigmoid_ratio:
      return "sigmoid_ratio";
  }
  return "?";
}

inline PrmMethod parse_prm_method(const std::string& s) {
  if (s == "difference") {
    return PrmMethod::difference;
  }
  if (s == "sigmoid_difference") {
    return PrmMethod::sigmoid_difference;
  }
  if (s == "sigmoid_ratio") {
    return PrmMethod::sigmoid_ratio;
  }
  detail::fail("unknown PRM method '" + s + "'");
}

inline constexpr PrmMethod kAllPrmMethods[] = {PrmMethod::difference, PrmMethod::sigmoid_difference,
                                               PrmMethod::sigmoid_ratio};

struct PrmConfig {
  PrmMethod method = PrmMethod::difference;
  double threshold = 0.0;
  /// Replace scores by their running sums before differencing.
  bool cumulative = false;

  void validate() const { detail::require(std::isfinite(threshold), "PRM threshold must be finite"); }
};

struct StepScore {
  int step_index = 0;
  int end_position = 0;
  double value = 0.0;
};

/// One value per step. The first step is measured from the score at its first
/// token; step i > 0 from the score at the end of step i-1.
inline std::vector<StepScore> step_scores(const RewardTrajectory& traj, std::span<const int> boundaries,
                                          const PrmConfig& cfg) {
  detail::require(!boundaries.empty(), "step_scores: no step boundaries");
  std::vector<double> r = traj.scores;
  if (cfg.cumulative) {
    for (std::size_t k = 1; k < r.size(); ++k) {
      r[k] += r[k - 1];
    }
  }
  int prev_end = -1;
  for (int b : boundaries) {
    detail::require(b > prev_end && b < static_cast<int>(r.size()), "step_scores: boundaries not increasing or out of range");
    prev_end = b;
  }
  std::vector<StepScore> out;
  out.reserve(boundaries.size());
  for (std::size_t i = 0; i < boundaries.size(); ++i) {
    const double cur = r[static_cast<std::size_t>(boundaries[i])];
    const double prev = i == 0 ? r[0] : r[static_cast<std::size_t>(boundaries[i - 1])];
    double v = 0.0;
    switch (cfg.method) {
      case PrmMethod::difference:
        v = cur - prev;
        break;
      case PrmMethod::sigmoid_difference:
        v = sigmoid(cur) - sigmoid(prev);
        break;
      case PrmMethod::sigmoid_ratio:
        v = sigmoid(cur) / sigmoid(prev);
        break;
    }
    out.push_back({static_cast<int>(i), boundaries[i], v});
  }
  return out;
}

/// Earliest step scoring below `threshold`; empty means "no error found".
inline std::optional<int> classify_first_error(std::span<const StepScore> scores, double threshold) {
  detail::require(!scores.empty(), "classify_first_error: no steps");
  for (const auto& s : scores) {
    if (s.value < threshold) {
      return s.step_index;
    }
  }
  return std::nullopt;
}

struct PrmF1 {
  double acc_error = 0.0;
  double acc_correct = 0.0;
  /// Empty when either class is absent.
  std::optional<double> f1;
};

inline PrmF1 prm_f1(std::span<const StepRecord> records, std::span<const std::optional<int>> predictions) {
  detail::require(records.size() == predictions.size(), "prm_f1: records and predictions differ in length");
  std::size_t n_err = 0;
  std::size_t n_ok = 0;
  std::size_t hit_err = 0;
  std::size_t hit_ok = 0;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (records[i].first_error_step) {
      ++n_err;
      hit_err += (predictions[i] == records[i].first_error_step) ? 1 : 0;
    } else {
      ++n_ok;
      hit_ok += predictions[i] ? 0 : 1;
    }
  }
  PrmF1 out;
  out.acc_error = n_err ? static_cast<double>(hit_err) / static_cast<double>(n_err) : 0.0;
  out.acc_correct = n_ok ? static_cast<double>(hit_ok) / static_cast<double>(n_ok) : 0.0;
  if (n_err > 0 && n_ok > 0) {
    const double s = out.acc_error + out.acc_correct;
    out.f1 = s > 0.0 ? 2.0 * out.acc_error * out.acc_correct / s : 0.0;
  }
  return out;
}

/// Linear-interpolation quantiles q = 0, 1/(count-1), ..., 1 of `values`.
inline std::vector<double> quantile_grid(std::vector<double> values, int count = 101) {
  detail::require(!values.empty() && count >= 2, "quantile_grid: need values and at least two points");
  std::sort(values.begin(), values.end());
  std::vector<double> grid;
  grid.reserve(static_cast<std::size_t>(count));
  const double last = static_cast<double>(values.size() - 1);
  for (int i = 0; i < count; ++i) {
    const double h = last * static_cast<double>(i) / static_cast<double>(count - 1);
    const auto lo = static_cast<std::size_t>(std::floor(h));
    const std::size_t hi = std::min(lo + 1, values.size() - 1);
    grid.push_back(values[lo] + (h - static_cast<double>(lo)) * (values[hi] - values[lo]));
  }
  return grid;
}

inline std::vector<std::optional<int>> predict_first_errors(std::span<const RewardTrajectory> trajs,
                                                            std::span<const StepRecord> records,
                                                            const PrmConfig& cfg) {
  detail::require(trajs.size() == records.size(), "predict_first_errors: size mismatch");
  cfg.validate();
  std::vector<std::optional<int>> out;
  out.reserve(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    out.push_back(classify_first_error(step_scores(trajs[i], records[i].boundaries, cfg), cfg.threshold));
  }
  return out;
}

inline PrmF1 evaluate_prm(std::span<const RewardTrajectory> trajs, std::span<const StepRecord> records,
                          const PrmConfig& cfg) {
  return prm_f1(records, predict_first_errors(trajs, records, cfg));
}

struct PrmReportRow {
  PrmConfig cfg;
  PrmF1 score;
  std::string split;
};

struct SweepResult {
  PrmConfig best;
  double best_f1 = 0.0;
  std::vector<PrmReportRow> grid;
};

/// Grid search over methods x 101 step-score quantiles per method on a dev
/// set. Highest F1 wins; ties go to the smaller |threshold|, then to the
/// earlier method in `methods`.
inline SweepResult threshold_sweep(std::span<const RewardTrajectory> trajs, std::span<const StepRecord> records,
                                   std::span<const PrmMethod> methods, bool cumulative = false) {
  detail::require(trajs.size() == records.size(), "threshold_sweep: size mismatch");
  detail::require(!methods.empty(), "threshold_sweep: no methods");
  const bool has_err = std::any_of(records.begin(), records.end(), [](const auto& r) { return r.first_error_step.has_value(); });
  const bool has_ok = std::any_of(records.begin(), records.end(), [](const auto& r) { return !r.first_error_step; });
  detail::require(has_err && has_ok, "threshold_sweep: dev set needs both erroneous and correct records");

  SweepResult res;
  bool have_best = false;
  for (PrmMethod m : methods) {
    PrmConfig base{m, 0.0, cumulative};
    std::vector<std::vector<StepScore>> per_record;
    per_record.reserve(records.size());
    std::vector<double> pool;
    for (std::size_t i = 0; i < records.size(); ++i) {
      per_record.push_back(step_scores(trajs[i], records[i].boundaries, base));
      for (const auto& s : per_record.back()) {
        pool.push_back(s.value);
      }
    }
    for (double th : quantile_grid(pool)) {
      std::vector<std::optional<int>> pred;
      pred.reserve(records.size());
      for (const auto& sc : per_record) {
        pred.push_back(classify_first_error(sc, th));
      }
      const PrmF1 f = prm_f1(records, pred);
      const PrmConfig cfg{m, th, cumulative};
      res.grid.push_back({cfg, f, "dev"});
      const double f1 = *f.f1;
      if (!have_best || f1 > res.best_f1 ||
          (f1 == res.best_f1 && std::abs(th) < std::abs(res.best.threshold))) {
        res.best = cfg;
        res.best_f1 = f1;
        have_best = true;
      }
    }
  }
  return res;
}

inline void write_prm_report(std::ostream& out, std::span<const PrmReportRow> rows) {
  out << "method,threshold,acc_error,acc_correct,f1,split\n";
  out.precision(10);
  for (const auto& r : rows) {
    out << to_string(r.cfg.method) << ',' << r.cfg.threshold << ',' << r.score.acc_error << ','
        << r.score.acc_correct << ',';
    if (r.score.f1) {
      out << *r.score.f1;
    } else {
      out << "NA";
    }
    out << ',' << r.split << '\n';
  }
}

}  // namespace tcrm
