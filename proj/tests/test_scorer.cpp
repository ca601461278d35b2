#include <catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <random>
#include <vector>

#include "tcrm/scorer.hpp"
#include "tcrm/synth.hpp"

using namespace tcrm;

namespace {

std::vector<TokenSequence> random_sequences(std::size_t n, const ScorerConfig& cfg, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<TokenSequence> out;
  for (std::size_t i = 0; i < n; ++i) {
    TokenSequence s;
    s.prompt.push_back(kBos);
    const int plen = detail::uniform_int(rng, 0, 3);
    for (int k = 0; k < plen; ++k) {
      s.prompt.push_back(detail::uniform_int(rng, kFirstFiller, cfg.vocab_size - 1));
    }
    const int rlen = detail::uniform_int(rng, 1, 20);
    for (int k = 0; k < rlen; ++k) {
      s.response.push_back(detail::uniform_int(rng, kSep, cfg.vocab_size - 1));
    }
    s.response.push_back(kEos);
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace

TEST_CASE("scores are causal in the response", "[scorer]") {
  ScorerConfig cfg;
  RewardModel m(cfg, 3);
  auto seqs = random_sequences(10, cfg, 4);
  for (auto s : seqs) {
    const auto base = m.score(s).scores;
    const std::size_t k = s.response.size() / 2;
    for (std::size_t j = k + 1; j + 1 < s.response.size(); ++j) {
      s.response[j] = s.response[j] == kFirstFiller ? kFirstFiller + 1 : kFirstFiller;
    }
    s.response.push_back(kGood);
    s.response.push_back(kEos);
    const auto changed = m.score(s).scores;
    for (std::size_t j = 0; j <= k; ++j) {
      CHECK(std::abs(changed[j] - base[j]) <= 1e-12);
    }
  }
}

TEST_CASE("batched scoring equals one-by-one scoring", "[scorer]") {
  ScorerConfig cfg;
  RewardModel m(cfg, 5);
  const auto seqs = random_sequences(17, cfg, 6);
  const auto batched = score_batch(seqs, m.params, cfg);
  const auto chunked = score_all(seqs, m.params, cfg, 5);
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    const auto single = score_sequence(seqs[i], m.params, cfg);
    REQUIRE(single.size() == seqs[i].response.size());
    for (std::size_t k = 0; k < single.size(); ++k) {
      CHECK(std::abs(batched[i].scores[k] - single.scores[k]) <= 1e-12);
      CHECK(std::abs(chunked[i].scores[k] - single.scores[k]) <= 1e-12);
    }
  }
}

TEST_CASE("delta decomposition telescopes to the final score", "[scorer]") {
  ScorerConfig cfg;
  RewardModel m(cfg, 7);
  for (const auto& s : random_sequences(20, cfg, 8)) {
    const auto traj = m.score(s);
    const auto d = delta_decomposition(traj);
    double total = 0.0;
    for (double v : d) {
      total += v;
    }
    CHECK(std::abs(total - traj.final_score()) <= 1e-12);
    CHECK(d[0] == traj.scores[0]);
  }
  RewardTrajectory t{{0.5, 1.5, 1.0}};
  CHECK(delta_decomposition(t) == std::vector<double>{0.5, 1.0, -0.5});
}

TEST_CASE("invalid sequences are rejected", "[scorer]") {
  ScorerConfig cfg;
  RewardModel m(cfg, 1);
  CHECK_THROWS_AS(m.score({{kBos}, {}, kEos}), InvalidInput);
  CHECK_THROWS_AS(m.score({{kBos}, {kFirstFiller}, kEos}), InvalidInput);
  CHECK_THROWS_AS(m.score({{kBos}, {cfg.vocab_size, kEos}, kEos}), InvalidInput);
  TokenSequence long_seq{{kBos}, std::vector<int>(static_cast<std::size_t>(cfg.max_seq_len), kFirstFiller), kEos};
  long_seq.response.back() = kEos;
  CHECK_THROWS_AS(m.score(long_seq), InvalidInput);
}

TEST_CASE("checkpoints round-trip exactly", "[scorer]") {
  ScorerConfig cfg;
  cfg.embed_dim = 32;
  cfg.num_blocks = 1;
  RewardModel m(cfg, 11);
  const auto path = std::filesystem::temp_directory_path() / "tcrm_scorer_roundtrip.ckpt";
  m.save(path.string(), {{"tag", "unit"}});
  const RewardModel back = RewardModel::load(path.string());
  CHECK(back.cfg.embed_dim == 32);
  CHECK(back.cfg.num_blocks == 1);
  CHECK(back.params.checksum() == m.params.checksum());
  const auto s = random_sequences(1, cfg, 12).front();
  CHECK(back.score(s).scores == m.score(s).scores);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(RewardModel::load(path.string()), MissingArtifact);
}

TEST_CASE("parameter initialization is seed-determined", "[scorer]") {
  ScorerConfig cfg;
  CHECK(RewardModel(cfg, 1).params.checksum() == RewardModel(cfg, 1).params.checksum());
  CHECK(RewardModel(cfg, 1).params.checksum() != RewardModel(cfg, 2).params.checksum());
}
