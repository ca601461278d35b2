#pragma once

// Exact machinery over finite token processes: conditional expectations by
// leaf enumeration, the backward Doob recursion, the jointly-minimized
// smoothness fixed point on a deterministic path, and position-bucketed
// orthogonality diagnostics.

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <vector>

#include "tcrm/scorer.hpp"
#include "tcrm/synth.hpp"

namespace tcrm {

inline constexpr std::size_t kMaxLeaves = 1'000'000;

/// Fixed-horizon process over an alphabet. Prefixes of length 0..T form a
/// complete alphabet-ary tree; node id = level_offset(len) + base-A value of
/// the prefix (first symbol most significant).
class FiniteProcess {
 public:
  FiniteProcess(int alphabet, int horizon) : alphabet_(alphabet), horizon_(horizon) {
    detail::require(alphabet >= 1 && horizon >= 1, "FiniteProcess: alphabet and horizon must be positive");
    offsets_.push_back(0);
    std::size_t width = 1;
    for (int t = 0; t <= horizon; ++t) {
      offsets_.push_back(offsets_.back() + width);
      if (t < horizon) {
        if (width > kMaxLeaves / static_cast<std::size_t>(alphabet)) {
          detail::fail("FiniteProcess: more than 10^6 leaf paths");
        }
        width *= static_cast<std::size_t>(alphabet);
      }
    }
    leaves_ = width;
    next_.assign(offsets_[static_cast<std::size_t>(horizon)] * static_cast<std::size_t>(alphabet), 0.0);
    terminal_.assign(leaves_, 0.0);
  }

  [[nodiscard]] int alphabet() const { return alphabet_; }
  [[nodiscard]] int horizon() const { return horizon_; }
  [[nodiscard]] std::size_t leaf_count() const { return leaves_; }
  [[nodiscard]] std::size_t node_count() const { return offsets_.back(); }
  [[nodiscard]] std::size_t level_offset(int len) const { return offsets_[static_cast<std::size_t>(len)]; }
  [[nodiscard]] std::size_t level_width(int len) const {
    return offsets_[static_cast<std::size_t>(len) + 1] - offsets_[static_cast<std::size_t>(len)];
  }

  [[nodiscard]] std::size_t node_id(std::span<const int> prefix) const {
    detail::require(static_cast<int>(prefix.size()) <= horizon_, "node_id: prefix longer than horizon");
    std::size_t v = 0;
    for (int s : prefix) {
      detail::require(s >= 0 && s < alphabet_, "node_id: symbol outside alphabet");
      v = v * static_cast<std::size_t>(alphabet_) + static_cast<std::size_t>(s);
    }
    return level_offset(static_cast<int>(prefix.size())) + v;
  }

  /// Child node of `node` (at level `len`) after appending symbol s.
  [[nodiscard]] std::size_t child(std::size_t node, int len, int s) const {
    const std::size_t v = node - level_offset(len);
    return level_offset(len + 1) + v * static_cast<std::size_t>(alphabet_) + static_cast<std::size_t>(s);
  }

  /// Symbols of leaf index `leaf` (0 .. leaf_count-1).
  [[nodiscard]] std::vector<int> leaf_symbols(std::size_t leaf) const {
    std::vector<int> sym(static_cast<std::size_t>(horizon_));
    for (int t = horizon_ - 1; t >= 0; --t) {
      sym[static_cast<std::size_t>(t)] = static_cast<int>(leaf % static_cast<std::size_t>(alphabet_));
      leaf /= static_cast<std::size_t>(alphabet_);
    }
    return sym;
  }

  /// Next-symbol probabilities after an internal node (level < T).
  [[nodiscard]] std::span<double> next(std::size_t node) {
    return {next_.data() + node * static_cast<std::size_t>(alphabet_), static_cast<std::size_t>(alphabet_)};
  }
  [[nodiscard]] std::span<const double> next(std::size_t node) const {
    return {next_.data() + node * static_cast<std::size_t>(alphabet_), static_cast<std::size_t>(alphabet_)};
  }

  [[nodiscard]] double& terminal(std::size_t leaf) { return terminal_[leaf]; }
  [[nodiscard]] double terminal(std::size_t leaf) const { return terminal_[leaf]; }

  void validate() const {
    for (std::size_t node = 0; node < level_offset(horizon_); ++node) {
      double total = 0.0;
      for (double p : next(node)) {
        detail::require(p >= 0.0 && std::isfinite(p), "FiniteProcess: negative or non-finite probability");
        total += p;
      }
      detail::require(std::abs(total - 1.0) <= 1e-12, "FiniteProcess: distribution does not sum to 1");
    }
    for (double x : terminal_) {
      detail::require(std::isfinite(x), "FiniteProcess: non-finite terminal value");
    }
  }

  /// Probability of reaching each leaf.
  [[nodiscard]] std::vector<double> leaf_probabilities() const {
    std::vector<double> mass(node_count(), 0.0);
    mass[0] = 1.0;
    for (int t = 0; t < horizon_; ++t) {
      for (std::size_t node = level_offset(t); node < level_offset(t + 1); ++node) {
        auto p = next(node);
        for (int s = 0; s < alphabet_; ++s) {
          mass[child(node, t, s)] = mass[node] * p[static_cast<std::size_t>(s)];
        }
      }
    }
    return {mass.begin() + static_cast<std::ptrdiff_t>(level_offset(horizon_)), mass.end()};
  }

  [[nodiscard]] std::vector<int> sample(std::mt19937_64& rng) const {
    std::vector<int> sym;
    std::size_t node = 0;
    for (int t = 0; t < horizon_; ++t) {
      auto p = next(node);
      const int s = std::discrete_distribution<int>(p.begin(), p.end())(rng);
      sym.push_back(s);
      node = child(node, t, s);
    }
    return sym;
  }

  /// Uniform transitions with terminal value f(symbols).
  static FiniteProcess uniform(int alphabet, int horizon, const std::function<double(std::span<const int>)>& f) {
    FiniteProcess p(alphabet, horizon);
    for (std::size_t node = 0; node < p.level_offset(horizon); ++node) {
      for (double& q : p.next(node)) {
        q = 1.0 / alphabet;
      }
    }
    for (std::size_t leaf = 0; leaf < p.leaf_count(); ++leaf) {
      p.terminal(leaf) = f(p.leaf_symbols(leaf));
    }
    return p;
  }

 private:
  int alphabet_;
  int horizon_;
  std::size_t leaves_ = 0;
  std::vector<std::size_t> offsets_;
  std::vector<double> next_;
  std::vector<double> terminal_;
};

/// Value for every prefix node, plus the probability of reaching it.
/// Unreachable prefixes hold NaN in tables built by enumeration.
struct PrefixValueTable {
  std::vector<double> values;
  std::vector<double> mass;

  [[nodiscard]] double at(const FiniteProcess& p, std::span<const int> prefix) const { return values[p.node_id(prefix)]; }
};

namespace detail {

inline std::vector<double> node_masses(const FiniteProcess& p) {
  std::vector<double> mass(p.node_count(), 0.0);
  mass[0] = 1.0;
  for (int t = 0; t < p.horizon(); ++t) {
    for (std::size_t node = p.level_offset(t); node < p.level_offset(t + 1); ++node) {
      auto q = p.next(node);
      for (int s = 0; s < p.alphabet(); ++s) {
        mass[p.child(node, t, s)] = mass[node] * q[static_cast<std::size_t>(s)];
      }
    }
  }
  return mass;
}

}  // namespace detail

/// E[X_T | prefix] for every reachable prefix by enumerating leaves forward:
/// each leaf adds P(leaf) X_T and P(leaf) to all of its prefixes.
inline PrefixValueTable cond_expectation(const FiniteProcess& p) {
  p.validate();
  const std::vector<double> leaf_p = p.leaf_probabilities();
  std::vector<double> weighted(p.node_count(), 0.0);
  std::vector<double> mass(p.node_count(), 0.0);
  for (std::size_t leaf = 0; leaf < p.leaf_count(); ++leaf) {
    const double w = leaf_p[leaf];
    if (w == 0.0) {
      continue;
    }
    const std::vector<int> sym = p.leaf_symbols(leaf);
    const double x = p.terminal(leaf);
    for (int len = 0; len <= p.horizon(); ++len) {
      const std::size_t id = p.node_id(std::span(sym).first(static_cast<std::size_t>(len)));
      weighted[id] += w * x;
      mass[id] += w;
    }
  }
  PrefixValueTable out;
  out.values.resize(p.node_count());
  for (std::size_t id = 0; id < p.node_count(); ++id) {
    out.values[id] = mass[id] > 0.0 ? weighted[id] / mass[id] : std::numeric_limits<double>::quiet_NaN();
  }
  out.mass = std::move(mass);
  return out;
}

/// Backward recursion X*_T = X_T, X*_t = E[X*_{t+1} | F_t].
inline PrefixValueTable doob_recursion(const FiniteProcess& p) {
  p.validate();
  PrefixValueTable out;
  out.values.assign(p.node_count(), 0.0);
  for (std::size_t leaf = 0; leaf < p.leaf_count(); ++leaf) {
    out.values[p.level_offset(p.horizon()) + leaf] = p.terminal(leaf);
  }
  for (int t = p.horizon() - 1; t >= 0; --t) {
    for (std::size_t node = p.level_offset(t); node < p.level_offset(t + 1); ++node) {
      auto q = p.next(node);
      double v = 0.0;
      for (int s = 0; s < p.alphabet(); ++s) {
        v += q[static_cast<std::size_t>(s)] * out.values[p.child(node, t, s)];
      }
      out.values[node] = v;
    }
  }
  out.mass = detail::node_masses(p);
  return out;
}

/// max over reachable internal prefixes of |E[X_{t+1} | prefix] - X_t|.
inline double martingale_violation(const FiniteProcess& p, const PrefixValueTable& table) {
  double worst = 0.0;
  for (int t = 0; t < p.horizon(); ++t) {
    for (std::size_t node = p.level_offset(t); node < p.level_offset(t + 1); ++node) {
      if (!(table.mass[node] > 0.0)) {
        continue;
      }
      auto q = p.next(node);
      double v = 0.0;
      for (int s = 0; s < p.alphabet(); ++s) {
        if (q[static_cast<std::size_t>(s)] > 0.0) {
          v += q[static_cast<std::size_t>(s)] * table.values[p.child(node, t, s)];
        }
      }
      worst = std::max(worst, std::abs(v - table.values[node]));
    }
  }
  return worst;
}

/// E[(X_T - g(prefix_t))^2] for the length-t prefix function g given by
/// `values` (indexed by node id).
inline double expected_squared_error(const FiniteProcess& p, std::span<const double> values, int t) {
  const std::vector<double> leaf_p = p.leaf_probabilities();
  double total = 0.0;
  for (std::size_t leaf = 0; leaf < p.leaf_count(); ++leaf) {
    if (leaf_p[leaf] == 0.0) {
      continue;
    }
    const std::vector<int> sym = p.leaf_symbols(leaf);
    const double g = values[p.node_id(std::span(sym).first(static_cast<std::size_t>(t)))];
    const double e = p.terminal(leaf) - g;
    total += leaf_p[leaf] * e * e;
  }
  return total;
}

/// Jointly minimizes sum_t (X_t - X_{t+1})^2 over the interior of a path with
/// fixed endpoints X_0 = x0 and X_T = xt. Stationarity gives
/// X_t = (X_{t-1} + X_{t+1}) / 2, a tridiagonal system solved with the Thomas
/// algorithm.
inline std::vector<double> joint_min_path(double x0, double xt, int horizon) {
  detail::require(horizon >= 1, "joint_min_path: horizon must be >= 1");
  const auto n = static_cast<std::size_t>(horizon - 1);
  std::vector<double> x(static_cast<std::size_t>(horizon) + 1);
  x.front() = x0;
  x.back() = xt;
  if (n == 0) {
    return x;
  }
  // row i: -y_{i-1} + 2 y_i - y_{i+1} = rhs_i
  std::vector<double> cp(n);
  std::vector<double> dp(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double rhs = (i == 0 ? x0 : 0.0) + (i + 1 == n ? xt : 0.0);
    // sub-diagonal -1: denom = 2 - (-1) * cp[i-1]
    const double denom = i == 0 ? 2.0 : 2.0 + cp[i - 1];
    cp[i] = -1.0 / denom;
    dp[i] = (rhs + (i == 0 ? 0.0 : dp[i - 1])) / denom;
  }
  x[n] = dp[n - 1];
  for (std::size_t i = n - 1; i-- > 0;) {
    x[i + 1] = dp[i] - cp[i] * x[i + 2];
  }
  return x;
}

/// joint_min_path along the single path of a deterministic process, with the
/// terminal value taken from its leaf. Stochastic transitions are rejected.
inline std::vector<double> joint_min_fixed_point(const FiniteProcess& p, double x0) {
  p.validate();
  std::size_t node = 0;
  for (int t = 0; t < p.horizon(); ++t) {
    auto q = p.next(node);
    int chosen = -1;
    for (int s = 0; s < p.alphabet(); ++s) {
      if (q[static_cast<std::size_t>(s)] == 1.0) {
        chosen = s;
      } else if (q[static_cast<std::size_t>(s)] != 0.0) {
        detail::fail("joint_min_fixed_point: transitions are not deterministic; system is not a single path");
      }
    }
    node = p.child(node, t, chosen);
  }
  const double xt = p.terminal(node - p.level_offset(p.horizon()));
  return joint_min_path(x0, xt, p.horizon());
}

// ---------------------------------------------------------------------------
// Markov-oracle task

/// Random first-order Markov chain over the alphabet (rows drawn from a flat
/// Dirichlet) with additive terminal reward sum_t w[y_t], w ~ U(-1, 1).
inline FiniteProcess gen_markov_process(const TaskSpec& spec) {
  spec.validate();
  detail::require(spec.task_kind == TaskKind::markov_oracle, "gen_markov_process: wrong task kind");
  std::mt19937_64 rng(detail::splitmix64(spec.seed ^ 0x4D41524BULL));
  const int a = spec.alphabet;
  std::exponential_distribution<double> expo(1.0);
  // Row a is the initial distribution.
  std::vector<std::vector<double>> rows(static_cast<std::size_t>(a) + 1, std::vector<double>(static_cast<std::size_t>(a)));
  for (auto& row : rows) {
    double total = 0.0;
    for (double& v : row) {
      v = expo(rng);
      total += v;
    }
    for (double& v : row) {
      v /= total;
    }
  }
  std::vector<double> weights(static_cast<std::size_t>(a));
  for (double& w : weights) {
    w = std::uniform_real_distribution<double>(-1.0, 1.0)(rng);
  }

  FiniteProcess p(a, spec.horizon);
  for (int t = 0; t < spec.horizon; ++t) {
    for (std::size_t node = p.level_offset(t); node < p.level_offset(t + 1); ++node) {
      const std::size_t last =
          t == 0 ? static_cast<std::size_t>(a) : (node - p.level_offset(t)) % static_cast<std::size_t>(a);
      auto q = p.next(node);
      std::copy(rows[last].begin(), rows[last].end(), q.begin());
      // Renormalize so each row sums to 1 within rounding of a single pass.
      double total = 0.0;
      for (double v : q) {
        total += v;
      }
      for (double& v : q) {
        v /= total;
      }
    }
  }
  for (std::size_t leaf = 0; leaf < p.leaf_count(); ++leaf) {
    double x = 0.0;
    for (int s : p.leaf_symbols(leaf)) {
      x += weights[static_cast<std::size_t>(s)];
    }
    p.terminal(leaf) = x;
  }
  return p;
}

inline std::vector<int> markov_tokens(std::span<const int> symbols) {
  std::vector<int> out;
  out.reserve(symbols.size() + 1);
  for (int s : symbols) {
    out.push_back(kFirstTaskToken + s);
  }
  out.push_back(kEos);
  return out;
}

/// Preference pairs from two independent samples of the process; the one with
/// the higher terminal value wins, equal values are redrawn.
inline std::vector<PreferencePair> gen_markov_pairs(const FiniteProcess& p, std::size_t n, std::uint64_t seed) {
  std::vector<PreferencePair> out;
  out.reserve(n);
  std::vector<double> values;
  for (std::size_t i = 0; i < n; ++i) {
    auto rng = detail::record_rng(seed, i, 2);
    auto a = p.sample(rng);
    auto b = p.sample(rng);
    auto value = [&](const std::vector<int>& s) { return p.terminal(p.node_id(s) - p.level_offset(p.horizon())); };
    int attempts = 0;
    while (value(a) == value(b)) {
      detail::require(++attempts < 10000, "gen_markov_pairs: terminal values never differ");
      b = p.sample(rng);
    }
    if (value(a) < value(b)) {
      std::swap(a, b);
    }
    PreferencePair pr;
    pr.prompt = {kBos};
    pr.winner = markov_tokens(a);
    pr.loser = markov_tokens(b);
    pr.gt_w = value(a);
    pr.gt_l = value(b);
    out.push_back(std::move(pr));
  }
  return out;
}

/// How far a scorer's prefix scores sit from the conditional expectation of
/// its own final score, computed exactly over every leaf of the process.
struct OracleFit {
  /// Mean over leaves (weighted by probability) and positions t < T of
  /// (score after t+1 symbols - E[final | those symbols])^2.
  double msd = 0.0;
  /// Variance of the final score under the process.
  double final_variance = 0.0;
  /// Entry t: E[(final - score after t+1 symbols)^2], t = 0..T-1.
  std::vector<double> prediction_error;
};

/// Scores every leaf as prompt {BOS} + markov_tokens(leaf). The final score
/// is the score at EOS.
inline OracleFit oracle_fit(const FiniteProcess& p, const ParameterStore& params, const ScorerConfig& cfg) {
  std::vector<TokenSequence> seqs;
  seqs.reserve(p.leaf_count());
  for (std::size_t leaf = 0; leaf < p.leaf_count(); ++leaf) {
    seqs.push_back({{kBos}, markov_tokens(p.leaf_symbols(leaf)), kEos});
  }
  const auto trajs = score_all(seqs, params, cfg);
  FiniteProcess q = p;
  for (std::size_t leaf = 0; leaf < p.leaf_count(); ++leaf) {
    q.terminal(leaf) = trajs[leaf].final_score();
  }
  const PrefixValueTable table = cond_expectation(q);
  const std::vector<double> leaf_p = p.leaf_probabilities();
  const int horizon = p.horizon();
  OracleFit fit;
  fit.prediction_error.assign(static_cast<std::size_t>(horizon), 0.0);
  double mean = 0.0;
  double sq = 0.0;
  for (std::size_t leaf = 0; leaf < p.leaf_count(); ++leaf) {
    const double w = leaf_p[leaf];
    if (w == 0.0) {
      continue;
    }
    const std::vector<int> sym = p.leaf_symbols(leaf);
    const auto& s = trajs[leaf].scores;
    const double fin = s.back();
    mean += w * fin;
    sq += w * fin * fin;
    for (int t = 0; t < horizon; ++t) {
      const double target = table.at(p, std::span(sym).first(static_cast<std::size_t>(t) + 1));
      const double v = s[static_cast<std::size_t>(t)];
      fit.msd += w * (v - target) * (v - target);
      fit.prediction_error[static_cast<std::size_t>(t)] += w * (fin - v) * (fin - v);
    }
  }
  fit.msd /= static_cast<double>(horizon);
  fit.final_variance = sq - mean * mean;
  return fit;
}

// ---------------------------------------------------------------------------
// Orthogonality diagnostics

struct BucketStats {
  std::size_t bucket = 0;
  double bias = std::numeric_limits<double>::quiet_NaN();
  double mse = std::numeric_limits<double>::quiet_NaN();
  /// Pearson correlation of (final - score) with score; empty when either
  /// side has zero variance or fewer than two samples.
  std::optional<double> residual_corr;
  std::size_t n = 0;
};

/// Buckets every non-final position k of each trajectory by relative position
/// k / K into `bucket_count` equal bins and reports bias, mean squared error
/// and residual correlation against the final score. `finals` overrides the
/// target per trajectory (defaults to each trajectory's own last score).
inline std::vector<BucketStats> orthogonality_test(std::span<const RewardTrajectory> trajs, std::size_t bucket_count,
                                                   std::span<const double> finals = {}) {
  detail::require(bucket_count >= 1, "orthogonality_test: bucket_count must be >= 1");
  detail::require(finals.empty() || finals.size() == trajs.size(), "orthogonality_test: finals size mismatch");
  struct Acc {
    double n = 0, sr = 0, srr = 0, ss = 0, sss = 0, srs = 0;
  };
  std::vector<Acc> acc(bucket_count);
  std::vector<double> bias_sum(bucket_count, 0.0);
  for (std::size_t i = 0; i < trajs.size(); ++i) {
    const auto& s = trajs[i].scores;
    if (s.size() < 2) {
      continue;
    }
    const double fin = finals.empty() ? s.back() : finals[i];
    const double big_k = static_cast<double>(s.size() - 1);
    for (std::size_t k = 0; k + 1 < s.size(); ++k) {
      const auto b = std::min(bucket_count - 1,
                              static_cast<std::size_t>(std::floor(static_cast<double>(k) / big_k * bucket_count)));
      const double r = fin - s[k];
      Acc& a = acc[b];
      a.n += 1;
      a.sr += r;
      a.srr += r * r;
      a.ss += s[k];
      a.sss += s[k] * s[k];
      a.srs += r * s[k];
    }
  }
  std::vector<BucketStats> out(bucket_count);
  for (std::size_t b = 0; b < bucket_count; ++b) {
    const Acc& a = acc[b];
    out[b].bucket = b;
    out[b].n = static_cast<std::size_t>(a.n);
    if (a.n == 0) {
      continue;
    }
    out[b].bias = -a.sr / a.n;
    out[b].mse = a.srr / a.n;
    if (a.n >= 2) {
      const double var_r = a.srr / a.n - (a.sr / a.n) * (a.sr / a.n);
      const double var_s = a.sss / a.n - (a.ss / a.n) * (a.ss / a.n);
      const double cov = a.srs / a.n - (a.sr / a.n) * (a.ss / a.n);
      const double scale_r = std::max(1.0, a.srr / a.n);
      const double scale_s = std::max(1.0, a.sss / a.n);
      if (var_r > 1e-14 * scale_r && var_s > 1e-14 * scale_s) {
        out[b].residual_corr = cov / std::sqrt(var_r * var_s);
      }
    }
  }
  return out;
}

inline void write_diagnostic_csv(std::ostream& out, std::span<const BucketStats> stats) {
  out << "bucket,bias,mse,residual_corr,n\n";
  out.precision(10);
  for (const auto& s : stats) {
    out << s.bucket << ',';
    if (s.n == 0) {
      out << "NA,NA,";
    } else {
      out << s.bias << ',' << s.mse << ',';
    }
    if (s.residual_corr) {
      out << *s.residual_corr;
    } else {
      out << "NA";
    }
    out << ',' << s.n << '\n';
  }
}

}  // namespace tcrm
