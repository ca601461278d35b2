#pragma once

// Synthetic tasks with known ground truth.
//
// Token layout shared by every task:
//   0 PAD, 1 BOS, 2 EOS, 3 SEP, then task tokens from kFirstTaskToken.
// prefix-signal: GOOD, BAD, DECOY, then filler ids up to vocab_size.
// step-arithmetic: digit d is token kFirstTaskToken + d.
// markov-oracle: symbol s is token kFirstTaskToken + s.
//
// Record i is generated from its own generator seeded by (seed, i), so output
// is independent of how records are sharded or ordered during generation.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tcrm/losses.hpp"

namespace tcrm {

inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;
inline constexpr int kSep = 3;
inline constexpr int kFirstTaskToken = 4;
inline constexpr int kGood = kFirstTaskToken;
inline constexpr int kBad = kFirstTaskToken + 1;
inline constexpr int kDecoy = kFirstTaskToken + 2;
inline constexpr int kFirstFiller = kFirstTaskToken + 3;

enum class TaskKind { prefix_signal, step_arithmetic, markov_oracle };

inline std::string to_string(TaskKind k) {
  switch (k) {
    case TaskKind::prefix_signal:
      return "prefix-signal";
    case TaskKind::step_arithmetic:
      return "step-arithmetic";
    case TaskKind::markov_oracle:
      return "markov-oracle";
  }
  return "?";
}

inline TaskKind parse_task_kind(const std::string& s) {
  if (s == "prefix-signal") {
    return TaskKind::prefix_signal;
  }
  if (s == "step-arithmetic") {
    return TaskKind::step_arithmetic;
  }
  if (s == "markov-oracle") {
    return TaskKind::markov_oracle;
  }
  detail::fail("unknown task kind '" + s + "'");
}

struct TaskSpec {
  TaskKind task_kind = TaskKind::prefix_signal;
  int vocab_size = 32;
  /// Response length bounds before EOS. For step-arithmetic these count steps.
  int min_len = 8;
  int max_len = 32;
  double signal_position_fraction = 0.7;
  /// prefix-signal: probability that a signal slot holds a neutral decoy.
  double noise_rate = 0.0;
  /// Signal slots per response = max(1, floor(len * signal_density)).
  double signal_density = 0.2;
  int digit_base = 5;
  int alphabet = 4;
  int horizon = 6;
  std::uint64_t seed = 0;

  void validate() const {
    detail::require(min_len >= 2 && max_len >= min_len, "lengths must satisfy 2 <= min <= max");
    detail::require(signal_position_fraction >= 0.0 && signal_position_fraction <= 1.0,
                    "signal_position_fraction outside [0,1]");
    detail::require(noise_rate >= 0.0 && noise_rate <= 1.0, "noise_rate outside [0,1]");
    detail::require(signal_density > 0.0 && signal_density <= 0.2, "signal_density outside (0, 0.2]");
    switch (task_kind) {
      case TaskKind::prefix_signal:
        detail::require(vocab_size > kFirstFiller + 1, "vocab_size too small for prefix-signal");
        break;
      case TaskKind::step_arithmetic:
        detail::require(digit_base >= 2 && kFirstTaskToken + digit_base <= vocab_size,
                        "digit_base does not fit the vocabulary");
        break;
      case TaskKind::markov_oracle:
        detail::require(alphabet >= 2 && alphabet <= 8, "markov alphabet must be in [2, 8]");
        detail::require(horizon >= 1 && horizon <= 8, "markov horizon must be in [1, 8]");
        detail::require(kFirstTaskToken + alphabet <= vocab_size, "alphabet does not fit the vocabulary");
        break;
    }
  }
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline std::mt19937_64 record_rng(std::uint64_t seed, std::uint64_t index, std::uint64_t stream = 0) {
  return std::mt19937_64(splitmix64(splitmix64(seed ^ (stream * 0xA24BAED4963EE407ULL)) + index));
}

inline int uniform_int(std::mt19937_64& rng, int lo, int hi) {
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

inline double uniform01(std::mt19937_64& rng) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng); }

}  // namespace detail

// ---------------------------------------------------------------------------
// prefix-signal

struct PrefixResponse {
  std::vector<int> tokens;  // EOS-terminated
  double reward = 0.0;
};

/// Ground truth for prefix-signal: #GOOD - #BAD.
inline double prefix_signal_reward(std::span<const int> response) {
  double r = 0.0;
  for (int t : response) {
    r += (t == kGood) ? 1.0 : (t == kBad ? -1.0 : 0.0);
  }
  return r;
}

inline PrefixResponse sample_prefix_response(const TaskSpec& spec, std::mt19937_64& rng) {
  const int len = detail::uniform_int(rng, spec.min_len, spec.max_len);
  std::vector<int> tokens(static_cast<std::size_t>(len) + 1);
  for (int k = 0; k < len; ++k) {
    tokens[static_cast<std::size_t>(k)] = detail::uniform_int(rng, kFirstFiller, spec.vocab_size - 1);
  }
  tokens.back() = kEos;

  // First half is trajectory positions 0..middle, matching the middle-token metric.
  const int middle = (len + 2) / 2 - 1;
  std::vector<int> first;
  std::vector<int> second;
  for (int k = 0; k < len; ++k) {
    (k <= middle ? first : second).push_back(k);
  }
  std::shuffle(first.begin(), first.end(), rng);
  std::shuffle(second.begin(), second.end(), rng);

  const int slots = std::max(1, static_cast<int>(std::floor(len * spec.signal_density)));
  for (int s = 0; s < slots; ++s) {
    const bool want_first = detail::uniform01(rng) < spec.signal_position_fraction;
    std::vector<int>& pool = want_first ? (first.empty() ? second : first) : (second.empty() ? first : second);
    const int pos = pool.back();
    pool.pop_back();
    int tok = kDecoy;
    if (detail::uniform01(rng) >= spec.noise_rate) {
      tok = detail::uniform01(rng) < 0.5 ? kGood : kBad;
    }
    tokens[static_cast<std::size_t>(pos)] = tok;
  }
  return {tokens, prefix_signal_reward(tokens)};
}

/// Prompt: BOS plus 1-3 filler tokens. The ground truth ignores the prompt.
inline std::vector<int> sample_prefix_prompt(const TaskSpec& spec, std::mt19937_64& rng) {
  std::vector<int> prompt{kBos};
  const int n = detail::uniform_int(rng, 1, 3);
  for (int i = 0; i < n; ++i) {
    prompt.push_back(detail::uniform_int(rng, kFirstFiller, spec.vocab_size - 1));
  }
  return prompt;
}

inline std::vector<PreferencePair> gen_prefix_signal(const TaskSpec& spec, std::size_t n) {
  spec.validate();
  detail::require(spec.task_kind == TaskKind::prefix_signal, "gen_prefix_signal: wrong task kind");
  detail::require(spec.noise_rate < 1.0, "noise_rate 1 makes every reward 0; distinct rewards impossible");
  constexpr int kMaxAttempts = 10000;
  std::vector<PreferencePair> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto rng = detail::record_rng(spec.seed, i);
    PreferencePair p;
    p.prompt = sample_prefix_prompt(spec, rng);
    PrefixResponse a = sample_prefix_response(spec, rng);
    PrefixResponse b = sample_prefix_response(spec, rng);
    int attempts = 0;
    while (a.reward == b.reward) {
      if (++attempts > kMaxAttempts) {
        detail::fail("gen_prefix_signal: could not draw responses with distinct rewards");
      }
      b = sample_prefix_response(spec, rng);
    }
    if (a.reward < b.reward) {
      std::swap(a, b);
    }
    p.winner = std::move(a.tokens);
    p.loser = std::move(b.tokens);
    p.gt_w = a.reward;
    p.gt_l = b.reward;
    out.push_back(std::move(p));
  }
  return out;
}

// ---------------------------------------------------------------------------
// step-arithmetic
//
// Prompt: BOS, s0. Step i (0-based) is the three tokens [a_i, s_i, SEP] with
// s_i = (s_{i-1} + a_i) mod base; the last step ends in EOS instead of SEP.

struct StepRecord {
  std::vector<int> prompt;
  std::vector<int> response;
  /// Response position of each step's closing SEP/EOS token.
  std::vector<int> boundaries;
  std::optional<int> first_error_step;
  bool outcome = true;

  [[nodiscard]] TokenSequence sequence() const { return {prompt, response, kEos}; }
};

inline int digit_token(int d) { return kFirstTaskToken + d; }
inline int token_digit(int t) { return t - kFirstTaskToken; }

/// Builds one chain; corrupt_step (if any) gets a wrong result digit and later
/// steps continue from it.
inline StepRecord build_step_chain(int base, int start, std::span<const int> addends, std::optional<int> corrupt_step,
                                   int corruption) {
  StepRecord r;
  r.prompt = {kBos, digit_token(start)};
  int running = start;
  int truth = start;
  for (std::size_t i = 0; i < addends.size(); ++i) {
    truth = (truth + addends[i]) % base;
    running = (running + addends[i]) % base;
    if (corrupt_step && static_cast<std::size_t>(*corrupt_step) == i) {
      running = (running + corruption) % base;
    }
    r.response.push_back(digit_token(addends[i]));
    r.response.push_back(digit_token(running));
    r.response.push_back(i + 1 == addends.size() ? kEos : kSep);
    r.boundaries.push_back(static_cast<int>(r.response.size()) - 1);
  }
  r.first_error_step = corrupt_step;
  r.outcome = (running == truth);
  return r;
}

inline std::vector<StepRecord> gen_step_arithmetic(const TaskSpec& spec, std::size_t n, double error_rate) {
  spec.validate();
  detail::require(spec.task_kind == TaskKind::step_arithmetic, "gen_step_arithmetic: wrong task kind");
  detail::require(error_rate >= 0.0 && error_rate <= 1.0, "error_rate outside [0,1]");
  const int base = spec.digit_base;
  std::vector<StepRecord> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto rng = detail::record_rng(spec.seed, i, 1);
    const int steps = detail::uniform_int(rng, spec.min_len, spec.max_len);
    const int start = detail::uniform_int(rng, 0, base - 1);
    std::vector<int> addends(static_cast<std::size_t>(steps));
    for (int& a : addends) {
      a = detail::uniform_int(rng, 0, base - 1);
    }
    std::optional<int> corrupt;
    int corruption = 0;
    if (detail::uniform01(rng) < error_rate) {
      corrupt = detail::uniform_int(rng, 0, steps - 1);
      corruption = detail::uniform_int(rng, 1, base - 1);
    }
    out.push_back(build_step_chain(base, start, addends, corrupt, corruption));
  }
  return out;
}

/// Outcome-only preference pairs: every erroneous record loses to the correct
/// chain with the same prompt and addends. Step labels never enter the pairs.
inline std::vector<PreferencePair> make_outcome_pairs(std::span<const StepRecord> records, int base) {
  detail::require(base >= 2, "make_outcome_pairs: base must be >= 2");
  std::vector<PreferencePair> out;
  for (const auto& r : records) {
    if (r.outcome) {
      continue;
    }
    detail::require(r.prompt.size() == 2 && r.response.size() % 3 == 0, "make_outcome_pairs: malformed step record");
    std::vector<int> addends;
    for (std::size_t i = 0; i < r.response.size(); i += 3) {
      addends.push_back(token_digit(r.response[i]));
    }
    const StepRecord good = build_step_chain(base, token_digit(r.prompt[1]), addends, std::nullopt, 0);
    PreferencePair p;
    p.prompt = r.prompt;
    p.winner = good.response;
    p.loser = r.response;
    p.gt_w = 1.0;
    p.gt_l = 0.0;
    out.push_back(std::move(p));
  }
  return out;
}

// ---------------------------------------------------------------------------

/// Deterministic 90/10 style split: a seeded permutation, first
/// round(train_fraction * n) indices to train.
template <class T>
std::pair<std::vector<T>, std::vector<T>> split_train_test(std::span<const T> items, double train_fraction,
                                                           std::uint64_t seed) {
  detail::require(train_fraction > 0.0 && train_fraction < 1.0, "train_fraction outside (0,1)");
  std::vector<std::size_t> order(items.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(detail::splitmix64(seed ^ 0x5EEDULL));
  std::shuffle(order.begin(), order.end(), rng);
  const auto cut = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(items.size())));
  std::pair<std::vector<T>, std::vector<T>> out;
  for (std::size_t i = 0; i < order.size(); ++i) {
    (i < cut ? out.first : out.second).push_back(items[order[i]]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// JSON-lines dataset files

inline void write_preference_jsonl(std::ostream& out, std::span<const PreferencePair> pairs) {
  for (const auto& p : pairs) {
    nlohmann::json j;
    j["prompt"] = p.prompt;
    j["winner"] = p.winner;
    j["loser"] = p.loser;
    j["gt_w"] = p.gt_w ? nlohmann::json(*p.gt_w) : nlohmann::json(nullptr);
    j["gt_l"] = p.gt_l ? nlohmann::json(*p.gt_l) : nlohmann::json(nullptr);
    out << j.dump() << '\n';
  }
}

inline std::vector<PreferencePair> read_preference_jsonl(std::istream& in) {
  std::vector<PreferencePair> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) {
      continue;
    }
    try {
      const auto j = nlohmann::json::parse(line);
      PreferencePair p;
      p.prompt = j.at("prompt").get<std::vector<int>>();
      p.winner = j.at("winner").get<std::vector<int>>();
      p.loser = j.at("loser").get<std::vector<int>>();
      if (j.contains("gt_w") && !j["gt_w"].is_null()) {
        p.gt_w = j["gt_w"].get<double>();
      }
      if (j.contains("gt_l") && !j["gt_l"].is_null()) {
        p.gt_l = j["gt_l"].get<double>();
      }
      out.push_back(std::move(p));
    } catch (const nlohmann::json::exception& e) {
      detail::fail("dataset line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

inline void write_step_jsonl(std::ostream& out, std::span<const StepRecord> records) {
  for (const auto& r : records) {
    nlohmann::json j;
    j["prompt"] = r.prompt;
    j["response"] = r.response;
    j["boundaries"] = r.boundaries;
    j["first_error_step"] = r.first_error_step ? nlohmann::json(*r.first_error_step) : nlohmann::json(nullptr);
    j["outcome"] = r.outcome;
    out << j.dump() << '\n';
  }
}

inline std::vector<StepRecord> read_step_jsonl(std::istream& in) {
  std::vector<StepRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) {
      continue;
    }
    try {
      const auto j = nlohmann::json::parse(line);
      StepRecord r;
      r.prompt = j.at("prompt").get<std::vector<int>>();
      r.response = j.at("response").get<std::vector<int>>();
      r.boundaries = j.at("boundaries").get<std::vector<int>>();
      if (!j.at("first_error_step").is_null()) {
        r.first_error_step = j["first_error_step"].get<int>();
      }
      r.outcome = j.at("outcome").get<bool>();
      out.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      detail::fail("dataset line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace tcrm
