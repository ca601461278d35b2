// tcrm: generate synthetic data, train and evaluate temporally coherent reward
// models, run diagnostics, PRM evaluation, coefficient ablations and PPO.
//
// Every subcommand writes into --out: manifest.json (resolved config, seed,
// version) plus its CSV outputs. Exit codes: 0 ok, 2 invalid input,
// 3 missing artifact, 4 numeric failure.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <nlohmann/json.hpp>
#include <sstream>
#include <string>
#include <vector>

#include "tcrm/tcrm.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace tcrm;

namespace {

struct Common {
  std::string out;
  std::uint64_t seed = 0;
};

struct TrainFlags {
  ScorerConfig net;
  LossWeights weights;
  TrainConfig train;
};

void add_common(CLI::App* c, Common& o) {
  c->add_option("--out", o.out, "Run directory")->required();
  c->add_option("--seed", o.seed, "Seed for every random choice of the run");
}

void add_scorer(CLI::App* c, ScorerConfig& n) {
  c->add_option("--vocab-size", n.vocab_size);
  c->add_option("--embed-dim", n.embed_dim);
  c->add_option("--num-blocks", n.num_blocks);
  c->add_option("--num-heads", n.num_heads);
  c->add_option("--max-seq-len", n.max_seq_len);
  c->add_option("--ff-mult", n.ff_mult);
}

void add_weights(CLI::App* c, LossWeights& w) {
  c->add_option("--a-sm", w.a_sm, "Smoothness weight");
  c->add_option("--a-la", w.a_la, "Lookahead weight");
  c->add_option("--detach-sm", w.detach_sm, "Stop gradients through smoothness targets");
  c->add_option("--detach-la", w.detach_la, "Stop gradients through the lookahead target");
  c->add_flag("--length-normalize", w.length_normalize);
}

void add_train(CLI::App* c, TrainConfig& t) {
  c->add_option("--epochs", t.epochs);
  c->add_option("--batch-size", t.batch_size);
  c->add_option("--lr", t.lr);
  c->add_option("--warmup-steps", t.warmup_steps);
  c->add_option("--weight-decay", t.weight_decay);
  c->add_option("--max-grad-norm", t.max_grad_norm);
}

void add_task(CLI::App* c, TaskSpec& s, std::string& kind) {
  c->add_option("--task", kind, "prefix-signal | step-arithmetic | markov-oracle");
  c->add_option("--min-len", s.min_len);
  c->add_option("--max-len", s.max_len);
  c->add_option("--signal-position-fraction", s.signal_position_fraction);
  c->add_option("--noise-rate", s.noise_rate);
  c->add_option("--signal-density", s.signal_density);
  c->add_option("--digit-base", s.digit_base);
  c->add_option("--alphabet", s.alphabet);
  c->add_option("--horizon", s.horizon);
  c->add_option("--task-vocab-size", s.vocab_size);
}

json to_json(const ScorerConfig& n) {
  return {{"vocab_size", n.vocab_size}, {"embed_dim", n.embed_dim},     {"num_blocks", n.num_blocks},
          {"num_heads", n.num_heads},   {"max_seq_len", n.max_seq_len}, {"ff_mult", n.ff_mult}};
}

json to_json(const LossWeights& w) {
  return {{"a_sm", w.a_sm},
          {"a_la", w.a_la},
          {"detach_sm", w.detach_sm},
          {"detach_la", w.detach_la},
          {"length_normalize", w.length_normalize}};
}

json to_json(const TrainConfig& t) {
  return {{"epochs", t.epochs},           {"batch_size", t.batch_size},     {"lr", t.lr},
          {"warmup_steps", t.warmup_steps}, {"weight_decay", t.weight_decay}, {"max_grad_norm", t.max_grad_norm}};
}

json to_json(const TaskSpec& s) {
  return {{"task", to_string(s.task_kind)},
          {"vocab_size", s.vocab_size},
          {"min_len", s.min_len},
          {"max_len", s.max_len},
          {"signal_position_fraction", s.signal_position_fraction},
          {"noise_rate", s.noise_rate},
          {"signal_density", s.signal_density},
          {"digit_base", s.digit_base},
          {"alphabet", s.alphabet},
          {"horizon", s.horizon},
          {"seed", s.seed}};
}

json to_json(const PpoConfig& c) {
  std::ostringstream text;
  write_ppo_config(text, c);
  json j;
  std::istringstream in(text.str());
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find(" = ");
    j[line.substr(0, eq)] = line.substr(eq + 3);
  }
  return j;
}

fs::path prepare(const Common& o) {
  detail::require(!o.out.empty(), "--out must not be empty");
  fs::create_directories(o.out);
  return o.out;
}

void write_manifest(const fs::path& dir, const std::string& cmd, const Common& o, json config) {
  json m;
  m["subcommand"] = cmd;
  m["version"] = TCRM_VERSION;
  m["seed"] = o.seed;
  m["config"] = std::move(config);
  std::ofstream(dir / "manifest.json") << m.dump(2) << '\n';
}

std::ofstream open_out(const fs::path& p) {
  std::ofstream f(p);
  if (!f) {
    throw MissingArtifact("cannot write " + p.string());
  }
  return f;
}

std::ifstream open_in(const std::string& p) {
  std::ifstream f(p);
  if (!f) {
    throw MissingArtifact("cannot read " + p);
  }
  return f;
}

std::vector<PreferencePair> read_pairs(const std::string& p) {
  auto f = open_in(p);
  auto pairs = read_preference_jsonl(f);
  detail::require(!pairs.empty(), "dataset " + p + " holds no pairs");
  return pairs;
}

std::vector<StepRecord> read_records(const std::string& p) {
  auto f = open_in(p);
  auto recs = read_step_jsonl(f);
  detail::require(!recs.empty(), "dataset " + p + " holds no records");
  return recs;
}

RewardModel load_model(const std::string& p) {
  if (!fs::exists(p)) {
    throw MissingArtifact("checkpoint not found: " + p);
  }
  return RewardModel::load(p);
}

std::string run_tag(const LossWeights& w) { return w.is_baseline() ? "baseline" : "tcrm"; }

std::vector<RewardTrajectory> score_side(const std::vector<PreferencePair>& pairs, const RewardModel& m, bool winners) {
  std::vector<TokenSequence> seqs;
  seqs.reserve(pairs.size());
  for (const auto& p : pairs) {
    seqs.push_back(winners ? p.winner_seq() : p.loser_seq());
  }
  return score_all(seqs, m.params, m.cfg);
}

std::vector<double> parse_grid(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      detail::require(used == item.size(), "bad grid value '" + item + "'");
    } catch (const std::logic_error&) {
      detail::fail("bad grid value '" + item + "'");
    }
  }
  detail::require(!out.empty(), "empty coefficient grid");
  return out;
}

// ---------------------------------------------------------------------------

struct GenArgs {
  Common common;
  TaskSpec spec;
  std::string kind = "prefix-signal";
  std::size_t n = 1000;
  double error_rate = 0.5;
};

int cmd_gen(GenArgs& a) {
  a.spec.task_kind = parse_task_kind(a.kind);
  a.spec.seed = a.common.seed;
  a.spec.validate();
  detail::require(a.n > 0, "--n must be positive");
  const fs::path dir = prepare(a.common);
  json cfg = to_json(a.spec);
  cfg["n"] = a.n;
  std::size_t erroneous = 0;
  std::size_t pairs_written = 0;
  switch (a.spec.task_kind) {
    case TaskKind::prefix_signal: {
      const auto pairs = gen_prefix_signal(a.spec, a.n);
      auto f = open_out(dir / "pairs.jsonl");
      write_preference_jsonl(f, pairs);
      pairs_written = pairs.size();
      break;
    }
    case TaskKind::step_arithmetic: {
      cfg["error_rate"] = a.error_rate;
      const auto recs = gen_step_arithmetic(a.spec, a.n, a.error_rate);
      auto f = open_out(dir / "records.jsonl");
      write_step_jsonl(f, recs);
      const auto pairs = make_outcome_pairs(recs, a.spec.digit_base);
      auto g = open_out(dir / "pairs.jsonl");
      write_preference_jsonl(g, pairs);
      pairs_written = pairs.size();
      for (const auto& r : recs) {
        erroneous += r.first_error_step ? 1 : 0;
      }
      break;
    }
    case TaskKind::markov_oracle: {
      const auto proc = gen_markov_process(a.spec);
      const auto pairs = gen_markov_pairs(proc, a.n, a.spec.seed);
      auto f = open_out(dir / "pairs.jsonl");
      write_preference_jsonl(f, pairs);
      pairs_written = pairs.size();
      break;
    }
  }
  write_manifest(dir, "gen", a.common, cfg);
  auto s = open_out(dir / "summary.csv");
  s << "task,n_records,n_pairs,n_erroneous\n"
    << a.kind << ',' << a.n << ',' << pairs_written << ',' << erroneous << '\n';
  return 0;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  Common common;
  TrainFlags f;
  std::string data;
  std::string val_data;
};

int cmd_train(TrainArgs& a) {
  a.f.net.validate();
  a.f.weights.validate();
  a.f.train.seed = a.common.seed;
  const auto pairs = read_pairs(a.data);
  const auto val = a.val_data.empty() ? pairs : read_pairs(a.val_data);
  const fs::path dir = prepare(a.common);
  const std::string tag = run_tag(a.f.weights);
  write_manifest(dir, "train", a.common,
                 {{"tag", tag},
                  {"data", a.data},
                  {"val_data", a.val_data},
                  {"scorer", to_json(a.f.net)},
                  {"weights", to_json(a.f.weights)},
                  {"train", to_json(a.f.train)}});

  RewardModel model(a.f.net, a.common.seed);
  auto metrics = open_out(dir / "metrics.csv");
  write_metrics_header(metrics);
  std::vector<LossLogRow> log;
  try {
    log = train_reward_model(model, pairs, a.f.weights, a.f.train, [&](int epoch) {
      write_metrics_row(metrics, tag, epoch + 1, evaluate_pairs(val, model.params, model.cfg));
      metrics.flush();
    });
  } catch (const NumericError& e) {
    auto dump = open_out(dir / "failure.txt");
    dump << e.what() << '\n';
    throw;
  }
  auto loss = open_out(dir / "loss.csv");
  write_loss_csv(loss, log);
  model.save((dir / "model.ckpt").string(), {{"tag", tag}});
  return 0;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  Common common;
  std::string model;
  std::string data;
  std::size_t dump = 0;
};

int cmd_eval(EvalArgs& a) {
  const RewardModel m = load_model(a.model);
  const auto pairs = read_pairs(a.data);
  const fs::path dir = prepare(a.common);
  write_manifest(dir, "eval", a.common,
                 {{"model", a.model}, {"data", a.data}, {"dump_trajectories", a.dump}, {"scorer", to_json(m.cfg)}});
  const auto tw = score_side(pairs, m, true);
  const auto tl = score_side(pairs, m, false);
  auto metrics = open_out(dir / "metrics.csv");
  write_metrics_header(metrics);
  write_metrics_row(metrics, fs::path(a.model).stem().string(), 0, compute_metrics(tw, tl));
  if (a.dump > 0) {
    const std::size_t k = std::min(a.dump, pairs.size());
    std::vector<TokenSequence> seqs;
    for (std::size_t i = 0; i < k; ++i) {
      seqs.push_back(pairs[i].winner_seq());
    }
    auto traj = open_out(dir / "trajectories.csv");
    write_trajectory_csv(traj, seqs, std::span(tw).first(k));
  }
  return 0;
}

// ---------------------------------------------------------------------------

struct DiagnoseArgs {
  Common common;
  std::string model;
  std::string data;
  std::size_t buckets = 100;
  bool markov = false;
  TaskSpec spec;
};

int cmd_diagnose(DiagnoseArgs& a) {
  const RewardModel m = load_model(a.model);
  const auto pairs = read_pairs(a.data);
  const fs::path dir = prepare(a.common);
  json cfg{{"model", a.model}, {"data", a.data}, {"bucket_count", a.buckets}, {"scorer", to_json(m.cfg)}};
  if (a.markov) {
    a.spec.task_kind = TaskKind::markov_oracle;
    a.spec.seed = a.common.seed;
    cfg["oracle_task"] = to_json(a.spec);
  }
  write_manifest(dir, "diagnose", a.common, cfg);
  auto trajs = score_side(pairs, m, true);
  const auto tl = score_side(pairs, m, false);
  trajs.insert(trajs.end(), tl.begin(), tl.end());
  auto diag = open_out(dir / "diagnostic.csv");
  write_diagnostic_csv(diag, orthogonality_test(trajs, a.buckets));
  if (a.markov) {
    const OracleFit fit = oracle_fit(gen_markov_process(a.spec), m.params, m.cfg);
    auto f = open_out(dir / "oracle.csv");
    f.precision(10);
    f << "position,prediction_error,msd,final_variance\n";
    for (std::size_t t = 0; t < fit.prediction_error.size(); ++t) {
      f << t << ',' << fit.prediction_error[t] << ',' << fit.msd << ',' << fit.final_variance << '\n';
    }
  }
  return 0;
}

// ---------------------------------------------------------------------------

struct PrmArgs {
  Common common;
  std::string model;
  std::string records;
  double dev_fraction = 0.5;
  std::vector<std::string> methods{"difference", "sigmoid_difference", "sigmoid_ratio"};
  bool cumulative = false;
};

int cmd_prm(PrmArgs& a) {
  const RewardModel m = load_model(a.model);
  const auto recs = read_records(a.records);
  std::vector<PrmMethod> methods;
  for (const auto& s : a.methods) {
    methods.push_back(parse_prm_method(s));
  }
  const fs::path dir = prepare(a.common);
  write_manifest(dir, "prm", a.common,
                 {{"model", a.model},
                  {"records", a.records},
                  {"dev_fraction", a.dev_fraction},
                  {"methods", a.methods},
                  {"cumulative", a.cumulative}});
  const auto [dev, test] = split_train_test<StepRecord>(recs, a.dev_fraction, a.common.seed);
  detail::require(!test.empty(), "prm: test split is empty");
  auto score = [&](const std::vector<StepRecord>& rs) {
    std::vector<TokenSequence> seqs;
    for (const auto& r : rs) {
      seqs.push_back(r.sequence());
    }
    return score_all(seqs, m.params, m.cfg);
  };
  SweepResult sweep = threshold_sweep(score(dev), dev, methods, a.cumulative);
  sweep.grid.push_back({sweep.best, evaluate_prm(score(test), test, sweep.best), "test"});
  auto f = open_out(dir / "prm_report.csv");
  write_prm_report(f, sweep.grid);
  return 0;
}

// ---------------------------------------------------------------------------

struct PpoArgs {
  Common common;
  PpoConfig cfg;
  std::string config_file;
  std::string value_setup = "frozen_tcrm";
  std::string reward_model;
  std::string policy;
  std::string data;
  int pretrain_epochs = 2;
  double pretrain_lr = 1e-3;
  std::size_t train_prompts = 256;
  double temperature = 1.0;
};

int cmd_ppo(PpoArgs& a, CLI::App* sub) {
  PpoConfig cfg;
  if (!a.config_file.empty()) {
    auto f = open_in(a.config_file);
    cfg = parse_ppo_config(f);
  }
  // Flags given explicitly override the config file.
  auto given = [&](const char* name) { return sub->count(name) > 0; };
  if (given("--batch-size")) cfg.batch_size = a.cfg.batch_size;
  if (given("--mini-batch-size")) cfg.mini_batch_size = a.cfg.mini_batch_size;
  if (given("--clip-epsilon")) cfg.clip_epsilon = a.cfg.clip_epsilon;
  if (given("--actor-lr")) cfg.actor_lr = a.cfg.actor_lr;
  if (given("--critic-lr")) cfg.critic_lr = a.cfg.critic_lr;
  if (given("--kl-coeff")) cfg.kl_coeff = a.cfg.kl_coeff;
  if (given("--gae-gamma")) cfg.gae_gamma = a.cfg.gae_gamma;
  if (given("--gae-lambda")) cfg.gae_lambda = a.cfg.gae_lambda;
  if (given("--value-setup")) cfg.value_setup = parse_value_setup(a.value_setup);
  if (given("--policy-freeze-steps")) cfg.policy_freeze_steps = a.cfg.policy_freeze_steps;
  if (given("--total-steps")) cfg.total_steps = a.cfg.total_steps;
  if (given("--max-new-tokens")) cfg.max_new_tokens = a.cfg.max_new_tokens;
  if (given("--whiten-advantages")) cfg.whiten_advantages = a.cfg.whiten_advantages;
  if (given("--val-prompts")) cfg.val_prompts = a.cfg.val_prompts;
  cfg.seed = a.common.seed;
  cfg.validate();

  const RewardModel rm = load_model(a.reward_model);
  const auto pairs = read_pairs(a.data);
  const fs::path dir = prepare(a.common);
  write_manifest(dir, "ppo", a.common,
                 {{"ppo", to_json(cfg)},
                  {"reward_model", a.reward_model},
                  {"policy", a.policy},
                  {"data", a.data},
                  {"pretrain_epochs", a.pretrain_epochs},
                  {"pretrain_lr", a.pretrain_lr},
                  {"train_prompts", a.train_prompts},
                  {"temperature", a.temperature}});
  {
    auto f = open_out(dir / "ppo_config.txt");
    write_ppo_config(f, cfg);
  }

  std::optional<PolicyModel> policy;
  if (!a.policy.empty()) {
    if (!fs::exists(a.policy)) {
      throw MissingArtifact("policy checkpoint not found: " + a.policy);
    }
    policy = PolicyModel::load(a.policy);
  } else {
    policy.emplace(PolicyConfig{rm.cfg, a.temperature}, a.common.seed);
    std::vector<TokenSequence> corpus;
    for (const auto& p : pairs) {
      corpus.push_back(p.winner_seq());
      corpus.push_back(p.loser_seq());
    }
    pretrain_policy(*policy, corpus, a.pretrain_epochs, 32, a.pretrain_lr, a.common.seed);
    policy->save((dir / "policy_init.ckpt").string());
  }

  PpoInputs in;
  in.policy = &*policy;
  in.reward_model = &rm;
  const RewardModel scratch(rm.cfg, detail::splitmix64(a.common.seed ^ 0x5C7A7C4ULL));
  in.value_init = cfg.value_setup == ValueSetup::scratch ? &scratch : &rm;
  const std::size_t n_val = static_cast<std::size_t>(cfg.val_prompts);
  detail::require(pairs.size() > n_val, "ppo: dataset must hold more prompts than --val-prompts");
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    if (i < n_val) {
      in.val_prompts.push_back(pairs[i].prompt);
    } else if (in.train_prompts.size() < a.train_prompts) {
      in.train_prompts.push_back(pairs[i].prompt);
    }
  }
  in.gt_reward = prefix_signal_reward;
  PolicyModel final_policy = *policy;
  const auto rows = run_experiment(in, cfg, &final_policy);
  auto f = open_out(dir / "progress.csv");
  write_progress_csv(f, rows);
  final_policy.save((dir / "policy_final.ckpt").string());
  return 0;
}

// ---------------------------------------------------------------------------

struct AblateArgs {
  Common common;
  TrainFlags f;
  std::string data;
  std::string val_data;
  std::string coefficient = "a_sm";
  std::string grid = "0,0.1,1.0";
};

int cmd_ablate(AblateArgs& a) {
  detail::require(a.coefficient == "a_sm" || a.coefficient == "a_la", "--coefficient must be a_sm or a_la");
  const std::vector<double> grid = parse_grid(a.grid);
  a.f.net.validate();
  a.f.train.seed = a.common.seed;
  auto pairs = read_pairs(a.data);
  std::vector<PreferencePair> val;
  if (a.val_data.empty()) {
    auto [tr, te] = split_train_test<PreferencePair>(pairs, 0.9, a.common.seed);
    pairs = std::move(tr);
    val = std::move(te);
  } else {
    val = read_pairs(a.val_data);
  }
  const fs::path dir = prepare(a.common);
  write_manifest(dir, "ablate", a.common,
                 {{"data", a.data},
                  {"val_data", a.val_data},
                  {"coefficient", a.coefficient},
                  {"grid", grid},
                  {"scorer", to_json(a.f.net)},
                  {"weights", to_json(a.f.weights)},
                  {"train", to_json(a.f.train)}});
  auto f = open_out(dir / "ablation.csv");
  f.precision(10);
  f << a.coefficient << ",final_accuracy,middle_accuracy,mean_sq_step_delta,mean_sq_final_delta\n";
  for (double c : grid) {
    LossWeights w = a.f.weights;
    w.a_sm = a.coefficient == "a_sm" ? c : 0.0;
    w.a_la = a.coefficient == "a_la" ? c : 0.0;
    RewardModel model(a.f.net, a.common.seed);
    train_reward_model(model, pairs, w, a.f.train);
    const MetricReport r = evaluate_pairs(val, model.params, model.cfg);
    f << c << ',' << r.final_accuracy << ',' << r.middle_accuracy << ',' << r.mean_sq_step_delta << ','
      << r.mean_sq_final_delta << '\n';
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Temporally coherent reward models on synthetic tasks"};
  app.set_version_flag("--version", std::string(TCRM_VERSION));
  app.require_subcommand(1);

  GenArgs gen;
  auto* g = app.add_subcommand("gen", "Generate a synthetic dataset");
  add_common(g, gen.common);
  add_task(g, gen.spec, gen.kind);
  g->add_option("--n", gen.n, "Number of pairs (records for step-arithmetic)");
  g->add_option("--error-rate", gen.error_rate, "step-arithmetic: fraction of corrupted chains");

  TrainArgs train;
  auto* t = app.add_subcommand("train", "Train a reward model on preference pairs");
  add_common(t, train.common);
  add_scorer(t, train.f.net);
  add_weights(t, train.f.weights);
  add_train(t, train.f.train);
  t->add_option("--data", train.data, "Preference pairs (JSONL)")->required();
  t->add_option("--val-data", train.val_data, "Pairs for per-epoch metrics (default: training pairs)");

  EvalArgs eval;
  auto* e = app.add_subcommand("eval", "Accuracy and delta metrics of a checkpoint");
  add_common(e, eval.common);
  e->add_option("--model", eval.model)->required();
  e->add_option("--data", eval.data)->required();
  e->add_option("--dump-trajectories", eval.dump, "Write per-token scores of the first N winners");

  DiagnoseArgs diag;
  auto* d = app.add_subcommand("diagnose", "Bias, error and residual correlation by position bucket");
  add_common(d, diag.common);
  d->add_option("--model", diag.model)->required();
  d->add_option("--data", diag.data)->required();
  d->add_option("--bucket-count", diag.buckets);
  d->add_flag("--markov", diag.markov, "Also fit against the markov-oracle process drawn from --seed");
  d->add_option("--alphabet", diag.spec.alphabet);
  d->add_option("--horizon", diag.spec.horizon);

  PrmArgs prm;
  auto* p = app.add_subcommand("prm", "First-error localization with a threshold sweep");
  add_common(p, prm.common);
  p->add_option("--model", prm.model)->required();
  p->add_option("--records", prm.records, "Step records (JSONL)")->required();
  p->add_option("--dev-fraction", prm.dev_fraction);
  p->add_option("--methods", prm.methods);
  p->add_flag("--cumulative", prm.cumulative);

  PpoArgs ppo;
  auto* o = app.add_subcommand("ppo", "PPO on prefix-signal prompts against a trained reward model");
  add_common(o, ppo.common);
  o->add_option("--config", ppo.config_file, "Flat key = value PPO config");
  o->add_option("--reward-model", ppo.reward_model)->required();
  o->add_option("--policy", ppo.policy, "Initial policy checkpoint (default: pretrain on --data)");
  o->add_option("--data", ppo.data, "Preference pairs supplying prompts")->required();
  o->add_option("--pretrain-epochs", ppo.pretrain_epochs);
  o->add_option("--pretrain-lr", ppo.pretrain_lr);
  o->add_option("--train-prompts", ppo.train_prompts);
  o->add_option("--temperature", ppo.temperature);
  o->add_option("--batch-size", ppo.cfg.batch_size);
  o->add_option("--mini-batch-size", ppo.cfg.mini_batch_size);
  o->add_option("--clip-epsilon", ppo.cfg.clip_epsilon);
  o->add_option("--actor-lr", ppo.cfg.actor_lr);
  o->add_option("--critic-lr", ppo.cfg.critic_lr);
  o->add_option("--kl-coeff", ppo.cfg.kl_coeff);
  o->add_option("--gae-gamma", ppo.cfg.gae_gamma);
  o->add_option("--gae-lambda", ppo.cfg.gae_lambda);
  o->add_option("--value-setup", ppo.value_setup, "frozen_tcrm | finetune_tcrm | scratch");
  o->add_option("--policy-freeze-steps", ppo.cfg.policy_freeze_steps);
  o->add_option("--total-steps", ppo.cfg.total_steps);
  o->add_option("--max-new-tokens", ppo.cfg.max_new_tokens);
  o->add_option("--whiten-advantages", ppo.cfg.whiten_advantages);
  o->add_option("--val-prompts", ppo.cfg.val_prompts);

  AblateArgs abl;
  auto* b = app.add_subcommand("ablate", "Sweep one loss coefficient with the other set to zero");
  add_common(b, abl.common);
  add_scorer(b, abl.f.net);
  add_weights(b, abl.f.weights);
  add_train(b, abl.f.train);
  b->add_option("--data", abl.data)->required();
  b->add_option("--val-data", abl.val_data);
  b->add_option("--coefficient", abl.coefficient, "a_sm | a_la");
  b->add_option("--grid", abl.grid, "Comma-separated coefficient values");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& s) {
    return app.exit(s);
  } catch (const CLI::ParseError& err) {
    app.exit(err);
    return 2;
  }

  try {
    if (*g) return cmd_gen(gen);
    if (*t) return cmd_train(train);
    if (*e) return cmd_eval(eval);
    if (*d) return cmd_diagnose(diag);
    if (*p) return cmd_prm(prm);
    if (*o) return cmd_ppo(ppo, o);
    if (*b) return cmd_ablate(abl);
  } catch (const InvalidInput& err) {
    std::cerr << "error: " << err.what() << '\n';
    return 2;
  } catch (const MissingArtifact& err) {
    std::cerr << "missing artifact: " << err.what() << '\n';
    return 3;
  } catch (const NumericError& err) {
    std::cerr << "numeric failure: " << err.what() << '\n';
    return 4;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return 1;
  }
  return 0;
}
