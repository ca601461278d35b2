#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>
#include <span>
#include <vector>

#include "tcrm/losses.hpp"
#include "tcrm/optim.hpp"

namespace tcrm {

struct TrainConfig {
  int epochs = 4;
  int batch_size = 32;
  double lr = 1e-4;
  /// Linear warmup steps, then linear decay to 10% of lr over the run.
  int warmup_steps = 20;
  double weight_decay = 0.0;
  double max_grad_norm = 1.0;
  std::uint64_t seed = 0;
};

struct LossLogRow {
  int step = 0;
  double bt = 0.0;
  double sm = 0.0;
  double la = 0.0;
  double total = 0.0;
};

inline void write_loss_csv(std::ostream& out, std::span<const LossLogRow> rows) {
  out << "step,bt,sm,la,total\n";
  out.precision(10);
  for (const auto& r : rows) {
    out << r.step << ',' << r.bt << ',' << r.sm << ',' << r.la << ',' << r.total << '\n';
  }
}

inline double scheduled_lr(const TrainConfig& tc, int step, int total_steps) {
  if (step < tc.warmup_steps) {
    return tc.lr * static_cast<double>(step + 1) / static_cast<double>(tc.warmup_steps);
  }
  const double span = std::max(1, total_steps - tc.warmup_steps);
  const double frac = std::clamp(static_cast<double>(step - tc.warmup_steps) / span, 0.0, 1.0);
  return tc.lr * (1.0 - 0.9 * frac);
}

/// Minibatch AdamW on the combined pairwise loss. The shuffle order comes from
/// TrainConfig::seed, so a run is a deterministic function of
/// (model init, data, weights, config). `on_epoch` fires after every epoch.
inline std::vector<LossLogRow> train_reward_model(RewardModel& model, std::span<const PreferencePair> data,
                                                  const LossWeights& weights, const TrainConfig& tc,
                                                  const std::function<void(int)>& on_epoch = {}) {
  detail::require(!data.empty(), "train_reward_model: empty dataset");
  detail::require(tc.batch_size > 0 && tc.epochs > 0, "train_reward_model: bad batch/epoch config");
  weights.validate();
  validate_pairs(data, model.cfg);

  AdamW opt({.lr = tc.lr, .weight_decay = tc.weight_decay, .max_grad_norm = tc.max_grad_norm});
  std::mt19937_64 rng(tc.seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);

  const auto per_epoch = static_cast<int>((data.size() + static_cast<std::size_t>(tc.batch_size) - 1) /
                                          static_cast<std::size_t>(tc.batch_size));
  const int total_steps = per_epoch * tc.epochs;
  std::vector<LossLogRow> log;
  log.reserve(static_cast<std::size_t>(total_steps));
  model.params.zero_grad();

  int step = 0;
  std::vector<PreferencePair> batch;
  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(tc.batch_size)) {
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(tc.batch_size));
      batch.clear();
      for (std::size_t i = start; i < stop; ++i) {
        batch.push_back(data[order[i]]);
      }
      Graph g;
      LossParts parts = pair_batch_loss(g, ParamView::train(model.params), model.cfg, batch, weights);
      if (!std::isfinite(parts.total.item())) {
        std::ostringstream msg;
        msg << "train_reward_model: non-finite loss at step " << step << " (bt=" << parts.bt << ", sm=" << parts.sm
            << ", la=" << parts.la << ")";
        throw NumericError(msg.str());
      }
      g.backward(parts.total);
      opt.set_lr(scheduled_lr(tc, step, total_steps));
      opt.step(model.params);
      log.push_back({step, parts.bt, parts.sm, parts.la, parts.total.item()});
      ++step;
    }
    if (on_epoch) {
      on_epoch(epoch);
    }
  }
  return log;
}

}  // namespace tcrm
