#include <catch_amalgamated.hpp>

#include <cmath>
#include <set>
#include <sstream>
#include <vector>

#include "tcrm/synth.hpp"

using namespace tcrm;

namespace {

std::size_t first_signal(const std::vector<int>& response) {
  for (std::size_t k = 0; k < response.size(); ++k) {
    if (response[k] == kGood || response[k] == kBad || response[k] == kDecoy) {
      return k;
    }
  }
  return response.size();
}

}  // namespace

TEST_CASE("prefix-signal generation is deterministic and well formed", "[synth]") {
  TaskSpec spec;
  spec.seed = 3;
  const auto a = gen_prefix_signal(spec, 200);
  const auto b = gen_prefix_signal(spec, 200);
  REQUIRE(a.size() == 200);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].prompt == b[i].prompt);
    CHECK(a[i].winner == b[i].winner);
    CHECK(a[i].loser == b[i].loser);
    CHECK(*a[i].gt_w > *a[i].gt_l);
    CHECK(*a[i].gt_w == prefix_signal_reward(a[i].winner));
    CHECK(*a[i].gt_l == prefix_signal_reward(a[i].loser));
    for (const auto* r : {&a[i].winner, &a[i].loser}) {
      CHECK(r->back() == kEos);
      const int len = static_cast<int>(r->size()) - 1;
      CHECK(len >= spec.min_len);
      CHECK(len <= spec.max_len);
    }
    CHECK(a[i].prompt.front() == kBos);
  }
  spec.seed = 4;
  CHECK(gen_prefix_signal(spec, 1).front().winner != a.front().winner);
}

TEST_CASE("signal position fraction places signals in the chosen half", "[synth]") {
  TaskSpec spec;
  spec.seed = 5;
  for (double frac : {1.0, 0.0}) {
    spec.signal_position_fraction = frac;
    for (const auto& p : gen_prefix_signal(spec, 100)) {
      for (const auto* r : {&p.winner, &p.loser}) {
        const std::size_t len = r->size() - 1;
        const std::size_t middle = (len + 2) / 2 - 1;
        for (std::size_t k = 0; k < len; ++k) {
          const bool signal = (*r)[k] == kGood || (*r)[k] == kBad || (*r)[k] == kDecoy;
          if (signal) {
            if (frac == 1.0) {
              CHECK(k <= middle);
            } else {
              CHECK(k > middle);
            }
          }
        }
      }
    }
  }
  spec.signal_position_fraction = 1.0;
  const auto p = gen_prefix_signal(spec, 1).front();
  CHECK(first_signal(p.winner) < p.winner.size());
}

TEST_CASE("noise rate swaps signals for decoys", "[synth]") {
  TaskSpec spec;
  spec.seed = 6;
  spec.noise_rate = 0.0;
  for (const auto& p : gen_prefix_signal(spec, 50)) {
    CHECK(std::count(p.winner.begin(), p.winner.end(), kDecoy) == 0);
  }
  spec.noise_rate = 1.0;
  CHECK_THROWS_AS(gen_prefix_signal(spec, 1), InvalidInput);
}

TEST_CASE("invalid task specs are rejected", "[synth]") {
  TaskSpec spec;
  spec.min_len = 10;
  spec.max_len = 9;
  CHECK_THROWS_AS(gen_prefix_signal(spec, 1), InvalidInput);
  spec = TaskSpec{};
  spec.signal_position_fraction = 1.5;
  CHECK_THROWS_AS(gen_prefix_signal(spec, 1), InvalidInput);
  spec = TaskSpec{};
  spec.signal_density = 0.5;
  CHECK_THROWS_AS(gen_prefix_signal(spec, 1), InvalidInput);
  spec = TaskSpec{};
  spec.task_kind = TaskKind::step_arithmetic;
  CHECK_THROWS_AS(gen_prefix_signal(spec, 1), InvalidInput);
  spec.digit_base = 40;
  CHECK_THROWS_AS(gen_step_arithmetic(spec, 1, 0.5), InvalidInput);
  spec.digit_base = 5;
  CHECK_THROWS_AS(gen_step_arithmetic(spec, 1, 1.5), InvalidInput);
  CHECK_THROWS_AS(parse_task_kind("nope"), InvalidInput);
  CHECK(parse_task_kind("markov-oracle") == TaskKind::markov_oracle);
}

TEST_CASE("step-arithmetic chains are consistent and errors propagate", "[synth]") {
  TaskSpec spec;
  spec.task_kind = TaskKind::step_arithmetic;
  spec.min_len = 3;
  spec.max_len = 6;
  spec.seed = 7;
  const int base = spec.digit_base;
  const auto recs = gen_step_arithmetic(spec, 200, 0.5);
  int errors = 0;
  for (const auto& r : recs) {
    const std::size_t steps = r.boundaries.size();
    REQUIRE(r.response.size() == 3 * steps);
    CHECK(steps >= 3);
    CHECK(steps <= 6);
    CHECK(r.response.back() == kEos);
    int running = token_digit(r.prompt[1]);
    std::optional<int> first_wrong;
    int truth = running;
    for (std::size_t i = 0; i < steps; ++i) {
      const int a = token_digit(r.response[3 * i]);
      const int s = token_digit(r.response[3 * i + 1]);
      CHECK(r.boundaries[i] == static_cast<int>(3 * i + 2));
      truth = (truth + a) % base;
      if (s != (running + a) % base && !first_wrong) {
        first_wrong = static_cast<int>(i);
      }
      running = s;
    }
    CHECK(first_wrong == r.first_error_step);
    CHECK(r.outcome == (running == truth));
    CHECK(r.outcome == !r.first_error_step.has_value());
    errors += r.first_error_step ? 1 : 0;
  }
  // Binomial(200, 0.5): mean 100, sd ~7.07.
  CHECK(std::abs(errors - 100) <= 22);

  CHECK(gen_step_arithmetic(spec, 20, 0.0).size() == 20);
  for (const auto& r : gen_step_arithmetic(spec, 20, 0.0)) {
    CHECK(r.outcome);
  }
}

TEST_CASE("outcome pairs pair each wrong chain with its corrected twin", "[synth]") {
  TaskSpec spec;
  spec.task_kind = TaskKind::step_arithmetic;
  spec.min_len = 3;
  spec.max_len = 6;
  spec.seed = 8;
  const auto recs = gen_step_arithmetic(spec, 100, 0.5);
  const auto pairs = make_outcome_pairs(recs, spec.digit_base);
  std::size_t wrong = 0;
  for (const auto& r : recs) {
    wrong += r.outcome ? 0 : 1;
  }
  REQUIRE(pairs.size() == wrong);
  for (const auto& p : pairs) {
    CHECK(p.winner.size() == p.loser.size());
    CHECK(p.winner != p.loser);
    CHECK(*p.gt_w == 1.0);
    CHECK(*p.gt_l == 0.0);
    for (std::size_t i = 0; i < p.winner.size(); i += 3) {
      CHECK(p.winner[i] == p.loser[i]);
    }
  }
}

TEST_CASE("train/test split is a seeded disjoint partition", "[synth]") {
  std::vector<int> items(101);
  std::iota(items.begin(), items.end(), 0);
  const auto [train, test] = split_train_test<int>(items, 0.9, 1);
  CHECK(train.size() == 91);
  CHECK(test.size() == 10);
  std::set<int> all(train.begin(), train.end());
  all.insert(test.begin(), test.end());
  CHECK(all.size() == 101);
  CHECK(split_train_test<int>(items, 0.9, 1).first == train);
  CHECK(split_train_test<int>(items, 0.9, 2).first != train);
  CHECK_THROWS_AS(split_train_test<int>(items, 1.0, 1), InvalidInput);
}

TEST_CASE("JSONL datasets round-trip", "[synth]") {
  TaskSpec spec;
  spec.seed = 9;
  const auto pairs = gen_prefix_signal(spec, 5);
  std::stringstream ss;
  write_preference_jsonl(ss, pairs);
  const auto back = read_preference_jsonl(ss);
  REQUIRE(back.size() == pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    CHECK(back[i].prompt == pairs[i].prompt);
    CHECK(back[i].winner == pairs[i].winner);
    CHECK(back[i].loser == pairs[i].loser);
    CHECK(back[i].gt_w == pairs[i].gt_w);
    CHECK(back[i].gt_l == pairs[i].gt_l);
  }

  spec.task_kind = TaskKind::step_arithmetic;
  spec.min_len = 2;
  spec.max_len = 4;
  const auto recs = gen_step_arithmetic(spec, 5, 0.5);
  std::stringstream rs;
  write_step_jsonl(rs, recs);
  const auto rback = read_step_jsonl(rs);
  REQUIRE(rback.size() == recs.size());
  for (std::size_t i = 0; i < recs.size(); ++i) {
    CHECK(rback[i].response == recs[i].response);
    CHECK(rback[i].boundaries == recs[i].boundaries);
    CHECK(rback[i].first_error_step == recs[i].first_error_step);
    CHECK(rback[i].outcome == recs[i].outcome);
  }

  std::stringstream bad("{\"prompt\": [1], \"winner\": 3}\n");
  CHECK_THROWS_AS(read_preference_jsonl(bad), InvalidInput);
}
