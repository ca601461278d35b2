#pragma once

// Toy PPO over a small causal language-model policy. The terminal reward is a
// trained scorer's final-token score; the value model is a scorer whose
// per-prefix outputs are read directly as state values.

#include <algorithm>
#include <cmath>
#include <functional>
#include <istream>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "tcrm/optim.hpp"
#include "tcrm/scorer.hpp"
#include "tcrm/synth.hpp"

namespace tcrm {

// ---------------------------------------------------------------------------
// Policy

struct PolicyConfig {
  ScorerConfig net;
  double temperature = 1.0;

  void validate() const {
    net.validate();
    detail::require(std::isfinite(temperature) && temperature > 0.0, "policy temperature must be positive");
  }
};

struct PolicyModel {
  PolicyConfig cfg;
  ParameterStore params;

  PolicyModel(const PolicyConfig& c, std::uint64_t seed) : cfg(c), params(seed) {
    cfg.validate();
    register_trunk(params, cfg.net);
    params.add("lm_w", cfg.net.embed_dim, cfg.net.vocab_size, Init::normal);
    params.add("lm_b", 1, cfg.net.vocab_size, Init::zeros);
  }

  void save(const std::string& path, std::map<std::string, std::string> meta = {}) const {
    for (auto& [k, v] : cfg.net.to_meta()) {
      meta[k] = v;
    }
    std::ostringstream t;
    t.precision(17);
    t << cfg.temperature;
    meta["temperature"] = t.str();
    meta["kind"] = "policy";
    save_checkpoint(path, params, meta);
  }

  static PolicyModel load(const std::string& path) {
    const Checkpoint ck = load_checkpoint(path);
    PolicyConfig c;
    c.net = ScorerConfig::from_meta(ck.meta);
    if (auto it = ck.meta.find("temperature"); it != ck.meta.end()) {
      c.temperature = std::stod(it->second);
    }
    PolicyModel m(c, ck.seed);
    restore(m.params, ck);
    return m;
  }
};

/// Next-token log-probabilities for every row of the padded batch:
/// (B*width) x vocab, at the policy's temperature.
inline Var policy_log_probs(Graph& g, const ParamView& p, const PolicyConfig& cfg, const PaddedBatch& batch) {
  Var h = trunk_forward(g, p, cfg.net, batch);
  Var logits = add_row(matmul(h, p(g, "lm_w")), p(g, "lm_b"));
  return log_softmax_rows(cfg.temperature == 1.0 ? logits : scale(logits, 1.0 / cfg.temperature));
}

namespace detail {

/// Row of the batch whose output predicts response token t of sequence i.
inline std::vector<int> action_rows(std::span<const TokenSequence> seqs, int width) {
  std::vector<int> rows;
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    const int base = static_cast<int>(i) * width + static_cast<int>(seqs[i].prompt.size()) - 1;
    for (std::size_t t = 0; t < seqs[i].response.size(); ++t) {
      rows.push_back(base + static_cast<int>(t));
    }
  }
  return rows;
}

inline PaddedBatch joined_batch(std::span<const TokenSequence> seqs, const ScorerConfig& cfg) {
  std::vector<std::vector<int>> rows;
  rows.reserve(seqs.size());
  for (const auto& s : seqs) {
    detail::require(!s.prompt.empty(), "policy sequences need a nonempty prompt");
    rows.push_back(s.joined());
  }
  return PaddedBatch::from(rows, cfg);
}

}  // namespace detail

/// Log-probability of every response token, all sequences concatenated.
inline Var response_log_probs(Graph& g, const ParamView& p, const PolicyConfig& cfg,
                              std::span<const TokenSequence> seqs) {
  const PaddedBatch batch = detail::joined_batch(seqs, cfg.net);
  Var lp = policy_log_probs(g, p, cfg, batch);
  std::vector<std::pair<int, int>> at;
  const std::vector<int> rows = detail::action_rows(seqs, batch.width);
  std::size_t r = 0;
  for (const auto& s : seqs) {
    for (int tok : s.response) {
      at.emplace_back(rows[r++], tok);
    }
  }
  return pick(lp, at);
}

/// Next-token cross-entropy on response tokens; returns the per-step mean loss.
inline std::vector<double> pretrain_policy(PolicyModel& policy, std::span<const TokenSequence> data, int epochs,
                                           int batch_size, double lr, std::uint64_t seed) {
  detail::require(!data.empty() && epochs > 0 && batch_size > 0, "pretrain_policy: bad arguments");
  AdamW opt({.lr = lr});
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> log;
  std::vector<TokenSequence> batch;
  for (int e = 0; e < epochs; ++e) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(batch_size)) {
      batch.clear();
      for (std::size_t i = start; i < std::min(order.size(), start + static_cast<std::size_t>(batch_size)); ++i) {
        batch.push_back(data[order[i]]);
      }
      Graph g;
      Var loss = scale(mean(response_log_probs(g, ParamView::train(policy.params), policy.cfg, batch)), -1.0);
      g.backward(loss);
      opt.step(policy.params);
      log.push_back(loss.item());
    }
  }
  return log;
}

struct SampledResponse {
  std::vector<int> tokens;  // EOS-terminated
  bool truncated = false;
};

/// Autoregressive sampling for a batch of prompts. Responses hold at most
/// `max_new_tokens` tokens; one that has not emitted EOS by then gets EOS in
/// its last slot and is flagged as truncated.
inline std::vector<SampledResponse> sample_responses(const PolicyModel& policy, std::span<const std::vector<int>> prompts,
                                                     int max_new_tokens, std::mt19937_64& rng) {
  detail::require(max_new_tokens >= 1, "max_new_tokens must be >= 1");
  const int vocab = policy.cfg.net.vocab_size;
  std::vector<SampledResponse> out(prompts.size());
  std::vector<std::size_t> live(prompts.size());
  std::iota(live.begin(), live.end(), 0);
  const ParamView view = ParamView::read(policy.params);
  for (int step = 0; step < max_new_tokens && !live.empty(); ++step) {
    if (step + 1 == max_new_tokens) {
      for (std::size_t i : live) {
        out[i].tokens.push_back(kEos);
        out[i].truncated = true;
      }
      break;
    }
    std::vector<std::vector<int>> rows;
    rows.reserve(live.size());
    for (std::size_t i : live) {
      std::vector<int> r(prompts[i]);
      r.insert(r.end(), out[i].tokens.begin(), out[i].tokens.end());
      rows.push_back(std::move(r));
    }
    const PaddedBatch batch = PaddedBatch::from(rows, policy.cfg.net);
    Graph g(false);
    const Matrix& lp = policy_log_probs(g, view, policy.cfg, batch).value();
    std::vector<std::size_t> still;
    for (std::size_t j = 0; j < live.size(); ++j) {
      const auto row = static_cast<Eigen::Index>(j) * batch.width + static_cast<Eigen::Index>(rows[j].size()) - 1;
      double u = detail::uniform01(rng);
      int tok = vocab - 1;
      for (int v = 0; v < vocab; ++v) {
        u -= std::exp(lp(row, v));
        if (u < 0.0) {
          tok = v;
          break;
        }
      }
      out[live[j]].tokens.push_back(tok);
      if (tok != kEos) {
        still.push_back(live[j]);
      }
    }
    live = std::move(still);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Values and advantages

/// Value of the state before each response action: entry t is the scorer's
/// output at the last prompt token (t = 0) or after response token t-1.
inline std::vector<Var> state_values(Graph& g, const ParamView& p, const ScorerConfig& cfg,
                                     std::span<const TokenSequence> seqs) {
  const PaddedBatch batch = detail::joined_batch(seqs, cfg);
  Var all = scorer_forward(g, p, cfg, batch);
  std::vector<Var> out;
  out.reserve(seqs.size());
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    const auto start = static_cast<Eigen::Index>(i) * batch.width + static_cast<Eigen::Index>(seqs[i].prompt.size()) - 1;
    out.push_back(slice_rows(all, start, static_cast<Eigen::Index>(seqs[i].response.size())));
  }
  return out;
}

/// GAE over one episode with zero reward everywhere except the last action.
/// values[t] = V(s_t); the state after the last action is terminal (V = 0).
inline std::vector<double> gae(std::span<const double> rewards, std::span<const double> values, double gamma,
                               double lambda) {
  detail::require(rewards.size() == values.size() && !values.empty(), "gae: rewards and values must align");
  std::vector<double> adv(values.size());
  double next_adv = 0.0;
  for (std::size_t t = values.size(); t-- > 0;) {
    const double next_v = t + 1 < values.size() ? values[t + 1] : 0.0;
    const double delta = rewards[t] + gamma * next_v - values[t];
    next_adv = delta + gamma * lambda * next_adv;
    adv[t] = next_adv;
  }
  return adv;
}

struct Episode {
  std::vector<int> prompt;
  std::vector<int> response;
  bool truncated = false;
  /// Behavior-policy log-probabilities of each response token.
  std::vector<double> log_probs;
  /// Per-action rewards; only the last entry is nonzero.
  std::vector<double> rewards;
  std::vector<double> values;
  double reward = 0.0;
  double gt_reward = 0.0;

  [[nodiscard]] TokenSequence sequence() const { return {prompt, response, kEos}; }
};

struct EpisodeBatch {
  std::vector<Episode> episodes;
};

inline std::vector<std::vector<double>> gae_advantages(const EpisodeBatch& batch, double gamma, double lambda) {
  std::vector<std::vector<double>> out;
  out.reserve(batch.episodes.size());
  for (const auto& e : batch.episodes) {
    out.push_back(gae(e.rewards, e.values, gamma, lambda));
  }
  return out;
}

/// 1 - Var(return - value) / Var(return) over all actions of the batch.
inline double explained_variance(const EpisodeBatch& batch) {
  std::vector<double> ret;
  std::vector<double> res;
  for (const auto& e : batch.episodes) {
    for (double v : e.values) {
      ret.push_back(e.reward);
      res.push_back(e.reward - v);
    }
  }
  auto var = [](const std::vector<double>& x) {
    const double m = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
    double s = 0.0;
    for (double v : x) {
      s += (v - m) * (v - m);
    }
    return s / static_cast<double>(x.size());
  };
  const double vr = var(ret);
  return vr > 0.0 ? 1.0 - var(res) / vr : std::numeric_limits<double>::quiet_NaN();
}

/// Samples one response per prompt, scores it with the reward model and
/// records behavior log-probabilities and state values. Log-probabilities and
/// values come from full-sequence forwards, the same path the update uses.
inline EpisodeBatch rollout(const PolicyModel& policy, std::span<const std::vector<int>> prompts,
                            const RewardModel& reward_model, const RewardModel& value_model, int max_new_tokens,
                            const std::function<double(std::span<const int>)>& gt_reward, std::mt19937_64& rng) {
  detail::require(!prompts.empty(), "rollout: no prompts");
  const auto samples = sample_responses(policy, prompts, max_new_tokens, rng);
  EpisodeBatch batch;
  std::vector<TokenSequence> seqs;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    Episode e;
    e.prompt = prompts[i];
    e.response = samples[i].tokens;
    e.truncated = samples[i].truncated;
    seqs.push_back(e.sequence());
    batch.episodes.push_back(std::move(e));
  }
  {
    Graph g(false);
    const Matrix& lp =
        response_log_probs(g, ParamView::read(policy.params), policy.cfg, seqs).value();
    Eigen::Index r = 0;
    for (auto& e : batch.episodes) {
      for (std::size_t t = 0; t < e.response.size(); ++t) {
        e.log_probs.push_back(lp(r++, 0));
      }
    }
  }
  {
    Graph g(false);
    auto vals = state_values(g, ParamView::read(value_model.params), value_model.cfg, seqs);
    for (std::size_t i = 0; i < seqs.size(); ++i) {
      const Matrix& v = vals[i].value();
      batch.episodes[i].values.assign(v.data(), v.data() + v.size());
    }
  }
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    Episode& e = batch.episodes[i];
    e.reward = score_sequence(seqs[i], reward_model.params, reward_model.cfg).final_score();
    e.gt_reward = gt_reward(e.response);
    e.rewards.assign(e.response.size(), 0.0);
    e.rewards.back() = e.reward;
  }
  return batch;
}

// ---------------------------------------------------------------------------
// PPO update

enum class ValueSetup { frozen_tcrm, finetune_tcrm, scratch };

inline std::string to_string(ValueSetup v) {
  switch (v) {
    case ValueSetup::frozen_tcrm:
      return "frozen_tcrm";
    case ValueSetup::finetune_tcrm:
      return "finetune_tcrm";
    case ValueSetup::scratch:
      return "scratch";
  }
  return "?";
}

inline ValueSetup parse_value_setup(const std::string& s) {
  if (s == "frozen_tcrm") {
    return ValueSetup::frozen_tcrm;
  }
  if (s == "finetune_tcrm") {
    return ValueSetup::finetune_tcrm;
  }
  if (s == "scratch") {
    return ValueSetup::scratch;
  }
  detail::fail("unknown value_setup '" + s + "'");
}

struct PpoConfig {
  int batch_size = 32;
  int mini_batch_size = 16;
  double clip_epsilon = 0.2;
  double actor_lr = 3e-4;
  double critic_lr = 1e-3;
  double kl_coeff = 1e-3;
  double gae_gamma = 1.0;
  double gae_lambda = 1.0;
  ValueSetup value_setup = ValueSetup::frozen_tcrm;
  int policy_freeze_steps = 0;
  int total_steps = 60;
  int max_new_tokens = 34;
  bool whiten_advantages = true;
  int val_prompts = 32;
  std::uint64_t seed = 0;

  void validate() const {
    detail::require(batch_size > 0 && mini_batch_size > 0, "batch sizes must be positive");
    detail::require(batch_size % mini_batch_size == 0, "mini_batch_size must divide batch_size");
    detail::require(clip_epsilon > 0.0, "clip_epsilon must be positive (inf disables clipping)");
    detail::require(actor_lr >= 0.0 && critic_lr >= 0.0, "learning rates must be nonnegative");
    detail::require(std::isfinite(kl_coeff) && kl_coeff >= 0.0, "kl_coeff must be finite and nonnegative");
    detail::require(gae_gamma >= 0.0 && gae_gamma <= 1.0 && gae_lambda >= 0.0 && gae_lambda <= 1.0,
                    "gae_gamma and gae_lambda must lie in [0,1]");
    detail::require(policy_freeze_steps >= 0 && total_steps > 0, "step counts must be nonnegative");
    detail::require(max_new_tokens >= 1 && val_prompts >= 0, "bad rollout sizes");
  }
};

/// Flat key = value text; blank lines and '#' comments ignored.
inline PpoConfig parse_ppo_config(std::istream& in, PpoConfig c = {}) {
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) {
      line.erase(hash);
    }
    auto trim = [](std::string s) {
      const auto a = s.find_first_not_of(" \t\r");
      const auto b = s.find_last_not_of(" \t\r");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    line = trim(line);
    if (line.empty()) {
      continue;
    }
    const auto eq = line.find('=');
    detail::require(eq != std::string::npos, "config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string val = trim(line.substr(eq + 1));
    try {
      if (key == "batch_size") {
        c.batch_size = std::stoi(val);
      } else if (key == "mini_batch_size") {
        c.mini_batch_size = std::stoi(val);
      } else if (key == "clip_epsilon") {
        c.clip_epsilon = std::stod(val);
      } else if (key == "actor_lr") {
        c.actor_lr = std::stod(val);
      } else if (key == "critic_lr") {
        c.critic_lr = std::stod(val);
      } else if (key == "kl_coeff") {
        c.kl_coeff = std::stod(val);
      } else if (key == "gae_gamma") {
        c.gae_gamma = std::stod(val);
      } else if (key == "gae_lambda") {
        c.gae_lambda = std::stod(val);
      } else if (key == "value_setup") {
        c.value_setup = parse_value_setup(val);
      } else if (key == "policy_freeze_steps") {
        c.policy_freeze_steps = std::stoi(val);
      } else if (key == "total_steps") {
        c.total_steps = std::stoi(val);
      } else if (key == "max_new_tokens") {
        c.max_new_tokens = std::stoi(val);
      } else if (key == "whiten_advantages") {
        c.whiten_advantages = (val == "1" || val == "true");
      } else if (key == "val_prompts") {
        c.val_prompts = std::stoi(val);
      } else if (key == "seed") {
        c.seed = std::stoull(val);
      } else {
        detail::fail("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
      }
    } catch (const std::logic_error& e) {
      if (dynamic_cast<const InvalidInput*>(&e) != nullptr) {
        throw;
      }
      detail::fail("config line " + std::to_string(lineno) + ": bad value for '" + key + "'");
    }
  }
  c.validate();
  return c;
}

inline void write_ppo_config(std::ostream& out, const PpoConfig& c) {
  out.precision(17);
  out << "batch_size = " << c.batch_size << '\n'
      << "mini_batch_size = " << c.mini_batch_size << '\n'
      << "clip_epsilon = " << c.clip_epsilon << '\n'
      << "actor_lr = " << c.actor_lr << '\n'
      << "critic_lr = " << c.critic_lr << '\n'
      << "kl_coeff = " << c.kl_coeff << '\n'
      << "gae_gamma = " << c.gae_gamma << '\n'
      << "gae_lambda = " << c.gae_lambda << '\n'
      << "value_setup = " << to_string(c.value_setup) << '\n'
      << "policy_freeze_steps = " << c.policy_freeze_steps << '\n'
      << "total_steps = " << c.total_steps << '\n'
      << "max_new_tokens = " << c.max_new_tokens << '\n'
      << "whiten_advantages = " << (c.whiten_advantages ? "true" : "false") << '\n'
      << "val_prompts = " << c.val_prompts << '\n'
      << "seed = " << c.seed << '\n';
}

struct PpoStats {
  double policy_loss = 0.0;
  double kl = 0.0;
  double value_loss = 0.0;
  double explained_variance = 0.0;
  double clip_fraction = 0.0;
  bool policy_updated = false;
  bool value_updated = false;
};

/// Exact mean KL(policy || reference) over the response actions of `seqs`.
inline double mean_kl(const PolicyModel& policy, const PolicyModel& reference, std::span<const TokenSequence> seqs) {
  const PaddedBatch batch = detail::joined_batch(seqs, policy.cfg.net);
  const std::vector<int> rows = detail::action_rows(seqs, batch.width);
  Graph g(false);
  const Matrix lp =
      policy_log_probs(g, ParamView::read(policy.params), policy.cfg, batch).value();
  const Matrix lr =
      policy_log_probs(g, ParamView::read(reference.params), reference.cfg, batch)
          .value();
  double total = 0.0;
  for (int r : rows) {
    total += (lp.row(r).array().exp() * (lp.row(r) - lr.row(r)).array()).sum();
  }
  return total / static_cast<double>(rows.size());
}

/// Optimizer state carried across PPO steps.
struct PpoState {
  AdamW actor;
  AdamW critic;
  int step = 0;
};

/// One PPO epoch over `batch` in minibatches: clipped surrogate plus
/// kl_coeff * KL(policy || reference) on the policy, squared error to the
/// return on the value model unless it is frozen. The policy is left untouched
/// while state.step < policy_freeze_steps.
inline PpoStats ppo_update(const EpisodeBatch& batch, PolicyModel& policy, const PolicyModel& reference,
                           RewardModel& value_model, const PpoConfig& cfg, PpoState& state) {
  cfg.validate();
  detail::require(static_cast<int>(batch.episodes.size()) == cfg.batch_size, "ppo_update: batch size mismatch");
  PpoStats stats;
  stats.explained_variance = explained_variance(batch);
  {
    double vl = 0.0;
    std::size_t n = 0;
    for (const auto& e : batch.episodes) {
      for (double v : e.values) {
        vl += (v - e.reward) * (v - e.reward);
        ++n;
      }
    }
    stats.value_loss = vl / static_cast<double>(n);
  }

  auto adv = gae_advantages(batch, cfg.gae_gamma, cfg.gae_lambda);
  if (cfg.whiten_advantages) {
    double s = 0.0;
    double ss = 0.0;
    std::size_t n = 0;
    for (const auto& a : adv) {
      for (double v : a) {
        s += v;
        ss += v * v;
        ++n;
      }
    }
    const double m = s / static_cast<double>(n);
    const double sd = std::sqrt(std::max(0.0, ss / static_cast<double>(n) - m * m));
    for (auto& a : adv) {
      for (double& v : a) {
        v = (v - m) / (sd + 1e-8);
      }
    }
  }

  const bool train_policy = state.step >= cfg.policy_freeze_steps;
  const bool train_value = cfg.value_setup != ValueSetup::frozen_tcrm;
  state.actor.set_lr(cfg.actor_lr);
  state.critic.set_lr(cfg.critic_lr);
  const double lo = 1.0 - cfg.clip_epsilon;
  const double hi = 1.0 + cfg.clip_epsilon;
  std::size_t clipped = 0;
  std::size_t actions = 0;
  double policy_loss = 0.0;

  for (int start = 0; start < cfg.batch_size; start += cfg.mini_batch_size) {
    std::vector<TokenSequence> seqs;
    Matrix old_lp;
    Matrix a_mat;
    Matrix returns;
    {
      std::vector<double> o;
      std::vector<double> a;
      std::vector<double> ret;
      for (int i = start; i < start + cfg.mini_batch_size; ++i) {
        const Episode& e = batch.episodes[static_cast<std::size_t>(i)];
        seqs.push_back(e.sequence());
        o.insert(o.end(), e.log_probs.begin(), e.log_probs.end());
        a.insert(a.end(), adv[static_cast<std::size_t>(i)].begin(), adv[static_cast<std::size_t>(i)].end());
        ret.insert(ret.end(), e.response.size(), e.reward);
      }
      old_lp = Eigen::Map<const Matrix>(o.data(), static_cast<Eigen::Index>(o.size()), 1);
      a_mat = Eigen::Map<const Matrix>(a.data(), static_cast<Eigen::Index>(a.size()), 1);
      returns = Eigen::Map<const Matrix>(ret.data(), static_cast<Eigen::Index>(ret.size()), 1);
    }
    const double frac = static_cast<double>(cfg.mini_batch_size) / static_cast<double>(cfg.batch_size);

    if (train_policy) {
      Graph g;
      const PaddedBatch pb = detail::joined_batch(seqs, policy.cfg.net);
      const std::vector<int> rows = detail::action_rows(seqs, pb.width);
      Var lp_all = policy_log_probs(g, ParamView::train(policy.params), policy.cfg, pb);
      std::vector<std::pair<int, int>> at;
      std::size_t r = 0;
      for (const auto& s : seqs) {
        for (int tok : s.response) {
          at.emplace_back(rows[r++], tok);
        }
      }
      Var new_lp = pick(lp_all, at);
      Var ratio = exp(sub(new_lp, g.constant(old_lp)));
      Var adv_c = g.constant(a_mat);
      Var surr = minimum(mul(ratio, adv_c), mul(clamp(ratio, lo, hi), adv_c));
      Var loss = scale(mean(surr), -1.0);
      policy_loss += loss.item() * frac;
      if (cfg.kl_coeff > 0.0) {
        Var lp_rows = gather_rows(lp_all, rows);
        const Matrix ref_all =
            policy_log_probs(g, ParamView::read(reference.params), reference.cfg, pb)
                .value();
        Matrix ref_rows(static_cast<Eigen::Index>(rows.size()), ref_all.cols());
        for (std::size_t k = 0; k < rows.size(); ++k) {
          ref_rows.row(static_cast<Eigen::Index>(k)) = ref_all.row(rows[k]);
        }
        Var kl = scale(sum(mul(exp(lp_rows), sub(lp_rows, g.constant(ref_rows)))),
                       1.0 / static_cast<double>(rows.size()));
        loss = add(loss, scale(kl, cfg.kl_coeff));
      }
      for (Eigen::Index k = 0; k < ratio.rows(); ++k) {
        const double q = ratio.value()(k, 0);
        clipped += (q < lo || q > hi) ? 1 : 0;
      }
      actions += static_cast<std::size_t>(ratio.rows());
      if (!std::isfinite(loss.item())) {
        throw NumericError("ppo_update: non-finite policy loss");
      }
      g.backward(loss);
      state.actor.step(policy.params);
      stats.policy_updated = true;
    }

    if (train_value) {
      Graph g;
      auto vals = state_values(g, ParamView::train(value_model.params), value_model.cfg, seqs);
      Var loss = value_regression_loss(concat_rows(vals), returns);
      if (!std::isfinite(loss.item())) {
        throw NumericError("ppo_update: non-finite value loss");
      }
      g.backward(loss);
      state.critic.step(value_model.params);
      stats.value_updated = true;
    }
  }
  stats.policy_loss = policy_loss;
  stats.clip_fraction = actions ? static_cast<double>(clipped) / static_cast<double>(actions) : 0.0;
  std::vector<TokenSequence> all;
  for (const auto& e : batch.episodes) {
    all.push_back(e.sequence());
  }
  stats.kl = mean_kl(policy, reference, all);
  ++state.step;
  return stats;
}

// ---------------------------------------------------------------------------
// Experiment

struct ProgressRow {
  int step = 0;
  double val_score = 0.0;
  double val_gt_reward = 0.0;
  double kl = 0.0;
  double value_loss = 0.0;
  double explained_variance = 0.0;
};

inline void write_progress_csv(std::ostream& out, std::span<const ProgressRow> rows) {
  out << "step,val_rm_score,val_gt_reward,kl_to_reference,value_loss,value_explained_variance\n";
  out.precision(10);
  for (const auto& r : rows) {
    out << r.step << ',' << r.val_score << ',' << r.val_gt_reward << ',' << r.kl << ',' << r.value_loss << ','
        << r.explained_variance << '\n';
  }
}

struct ValidationResult {
  double score = 0.0;
  double gt_reward = 0.0;
};

/// Mean reward-model score and ground truth over one sampled response per
/// validation prompt.
inline ValidationResult validate_policy(const PolicyModel& policy, std::span<const std::vector<int>> prompts,
                                        const RewardModel& reward_model, int max_new_tokens,
                                        const std::function<double(std::span<const int>)>& gt_reward,
                                        std::mt19937_64& rng) {
  ValidationResult v;
  if (prompts.empty()) {
    return v;
  }
  const auto samples = sample_responses(policy, prompts, max_new_tokens, rng);
  std::vector<TokenSequence> seqs;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    seqs.push_back({prompts[i], samples[i].tokens, kEos});
    v.gt_reward += gt_reward(samples[i].tokens);
  }
  for (const auto& t : score_all(seqs, reward_model.params, reward_model.cfg)) {
    v.score += t.final_score();
  }
  v.score /= static_cast<double>(prompts.size());
  v.gt_reward /= static_cast<double>(prompts.size());
  return v;
}

struct PpoInputs {
  const PolicyModel* policy = nullptr;
  const RewardModel* reward_model = nullptr;
  /// Initial value model: the trained scorer for the tcrm setups, a freshly
  /// initialized scorer for scratch.
  const RewardModel* value_init = nullptr;
  std::vector<std::vector<int>> train_prompts;
  std::vector<std::vector<int>> val_prompts;
  std::function<double(std::span<const int>)> gt_reward;
};

/// Runs total_steps PPO steps. Row `step` reports that update's KL and value
/// statistics (measured on its rollout) and validation metrics of the policy
/// after the update.
inline std::vector<ProgressRow> run_experiment(const PpoInputs& in, const PpoConfig& cfg,
                                               PolicyModel* final_policy = nullptr) {
  cfg.validate();
  detail::require(in.policy && in.reward_model && in.value_init && in.gt_reward, "run_experiment: missing inputs");
  detail::require(!in.train_prompts.empty(), "run_experiment: no training prompts");
  PolicyModel policy = *in.policy;
  const PolicyModel reference = *in.policy;
  RewardModel value = *in.value_init;
  PpoState state{AdamW({.lr = cfg.actor_lr}), AdamW({.lr = cfg.critic_lr})};
  std::mt19937_64 rng(detail::splitmix64(cfg.seed ^ 0x9907ULL));
  std::vector<ProgressRow> rows;
  std::vector<std::vector<int>> prompts(static_cast<std::size_t>(cfg.batch_size));
  const std::span<const std::vector<int>> val(in.val_prompts.data(),
                                              std::min(in.val_prompts.size(), static_cast<std::size_t>(cfg.val_prompts)));
  for (int step = 0; step < cfg.total_steps; ++step) {
    for (auto& p : prompts) {
      p = in.train_prompts[static_cast<std::size_t>(
          detail::uniform_int(rng, 0, static_cast<int>(in.train_prompts.size()) - 1))];
    }
    const EpisodeBatch batch =
        rollout(policy, prompts, *in.reward_model, value, cfg.max_new_tokens, in.gt_reward, rng);
    const PpoStats s = ppo_update(batch, policy, reference, value, cfg, state);
    auto vrng = detail::record_rng(cfg.seed, static_cast<std::uint64_t>(step), 7);
    const ValidationResult v = validate_policy(policy, val, *in.reward_model, cfg.max_new_tokens, in.gt_reward, vrng);
    rows.push_back({step, v.score, v.gt_reward, s.kl, s.value_loss, s.explained_variance});
  }
  if (final_policy != nullptr) {
    *final_policy = std::move(policy);
  }
  return rows;
}

}  // namespace tcrm
