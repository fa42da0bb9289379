#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "sipf/objectives.hpp"
#include "sipf/rng.hpp"
#include "sipf/sampling.hpp"
#include "sipf/task.hpp"

#include <filesystem>
#include <set>
#include <sstream>

using namespace sipf;
using namespace sipf::sampling;

namespace {

const seqmodel::ModelConfig kTiny{8, 6, 16, task::TokenCodec::kVocabSize};

SampleConfig small_cfg() {
  SampleConfig cfg;
  cfg.n_pos_target = 3;
  cfg.n_neg_target = 3;
  cfg.max_attempts = 12;
  cfg.max_len = 32;
  return cfg;
}

/// Overfits a tiny policy to a single question so it solves it every time.
seqmodel::PolicyParams overfit_policy(const task::Question& q) {
  seqmodel::PolicyParams p = seqmodel::init_params(kTiny, 3);
  seqmodel::AdamState adam = seqmodel::make_adam_state(p.theta.size());
  const std::vector<objectives::PromptCompletion> batch = {
      {q.text_tokens, task::encode_path(q.gold_path)}};
  for (int i = 0; i < 400; ++i) {
    objectives::LossGrad lg = objectives::sft_loss_grad(p, batch);
    seqmodel::adam_step(p.theta, lg.grad, adam, 5e-3);
  }
  return p;
}

std::string serialize(std::span<const OutcomeLabeledPath> paths) {
  std::ostringstream s;
  for (const auto& p : paths) {
    s << p.question_id << '|' << p.outcome_correct << '|' << p.source_round << '|';
    for (const auto& step : p.path.steps) s << step << ';';
    s << '|';
    for (int t : p.raw_tokens) s << t << ',';
    s << '\n';
  }
  return s.str();
}

}  // namespace

TEST_CASE("per-round targets follow the halving schedule") {
  SampleConfig cfg = small_cfg();
  cfg.n_pos_target = 8;
  cfg.n_neg_target = 8;
  CHECK(targets_for_round(cfg, 0).n_pos_target == 8);
  CHECK(targets_for_round(cfg, 1).n_pos_target == 4);
  CHECK(targets_for_round(cfg, 2).n_pos_target == 2);
  CHECK(targets_for_round(cfg, 3).n_neg_target == 1);
  CHECK(targets_for_round(cfg, 6).n_neg_target == 1);  // floored at one
  cfg.halving = 0.25;
  CHECK(targets_for_round(cfg, 1).n_pos_target == 2);
  CHECK(targets_for_round(cfg, 2).n_pos_target == 1);
  CHECK(targets_for_round(cfg, 1).round_index == 1);
  cfg.halving = 0.3;
  CHECK_THROWS_AS(targets_for_round(cfg, 1), std::invalid_argument);
}

TEST_CASE("dedup keeps the first occurrence of each step list") {
  OutcomeLabeledPath a{1, {{"5 + 3 = 8", "8 * 2 = 16"}, 16}, true, 0, {}};
  OutcomeLabeledPath b{1, {{"5 + 3 = 8", "8 * 2 = 16"}, 17}, false, 0, {}};  // same steps
  OutcomeLabeledPath c{1, {{"5 + 3 = 8"}, 8}, false, 0, {}};                 // shorter
  const auto kept = dedup_paths(std::vector<OutcomeLabeledPath>{a, b, c});
  REQUIRE(kept.size() == 2);
  CHECK(kept[0].path.final_answer == Answer{16});  // first occurrence won
  CHECK(kept[1].path.steps.size() == 1);

  // shuffled input keeps the same set of step lists
  const auto kept2 = dedup_paths(std::vector<OutcomeLabeledPath>{c, b, a});
  std::set<std::vector<std::string>> s1, s2;
  for (const auto& p : kept) s1.insert(p.path.steps);
  for (const auto& p : kept2) s2.insert(p.path.steps);
  CHECK(s1 == s2);
}

TEST_CASE("an untrained policy produces (near-)all malformed negatives") {
  const auto qs = task::generate_dataset(21, 1, {2, 2}, task::Split::train);
  seqmodel::PolicyParams uniform{kTiny, Vector::Zero(seqmodel::param_count(kTiny))};
  QuestionStats stats;
  const auto paths = sample_paths(uniform, qs[0], small_cfg(), 5, &stats);
  CHECK(stats.attempts == small_cfg().max_attempts);
  CHECK(stats.positives == 0);
  CHECK(stats.underfilled);
  for (const auto& p : paths) {
    CHECK_FALSE(p.outcome_correct);
    CHECK(p.path.m() >= 1);
  }
}

TEST_CASE("a question the policy always solves fills positives and reports negative underfill") {
  const auto qs = task::generate_dataset(22, 1, {2, 2}, task::Split::train);
  const seqmodel::PolicyParams solver = overfit_policy(qs[0]);
  // sanity: greedy reproduces the gold path
  const task::ReasoningPath greedy =
      task::decode(seqmodel::greedy_decode(solver, qs[0].text_tokens, 32));
  REQUIRE(greedy == qs[0].gold_path);

  QuestionStats stats;
  const SampleConfig cfg = small_cfg();
  const auto paths = sample_paths(solver, qs[0], cfg, 7, &stats);
  CHECK(stats.positives == cfg.n_pos_target);
  CHECK(stats.negatives < cfg.n_neg_target);
  CHECK(stats.underfilled);
  int positives = 0;
  for (const auto& p : paths) positives += p.outcome_correct;
  CHECK(positives == cfg.n_pos_target);
}

TEST_CASE("sampling is deterministic for a fixed seed") {
  const auto qs = task::generate_dataset(23, 1, {2, 3}, task::Split::train);
  const seqmodel::PolicyParams p = seqmodel::init_params(kTiny, 9);
  const auto a = sample_paths(p, qs[0], small_cfg(), 99);
  const auto b = sample_paths(p, qs[0], small_cfg(), 99);
  CHECK(serialize(a) == serialize(b));
  const auto c = sample_paths(p, qs[0], small_cfg(), 100);
  CHECK(serialize(a) != serialize(c));
}

TEST_CASE("greedy collection draws a single deterministic path") {
  const auto qs = task::generate_dataset(24, 1, {2, 2}, task::Split::train);
  const seqmodel::PolicyParams p = seqmodel::init_params(kTiny, 11);
  SampleConfig cfg = small_cfg();
  cfg.greedy = true;
  QuestionStats stats;
  const auto paths = sample_paths(p, qs[0], cfg, 1, &stats);
  CHECK(stats.attempts == 1);
  CHECK(paths.size() <= 1);
}

TEST_CASE("collect_round aggregates, dedups, and keeps provenance") {
  const auto qs = task::generate_dataset(25, 6, {2, 3}, task::Split::train);
  const seqmodel::PolicyParams p = seqmodel::init_params(kTiny, 13);
  SampleConfig cfg = small_cfg();
  cfg.round_index = 2;

  const RoundCollection empty = collect_round(p, {}, cfg, 1);
  CHECK(empty.paths.empty());
  CHECK(empty.stats.empty());

  const RoundCollection rc = collect_round(p, qs, cfg, 31, 2);
  CHECK(rc.stats.size() == qs.size());
  std::set<std::string> seen;
  for (const auto& path : rc.paths) {
    CHECK(path.source_round == 2);
    // provenance: the stored raw tokens re-decode to the stored path
    CHECK(task::decode(path.raw_tokens) == path.path);
    // outcome recomputed from scratch agrees
    const auto it = std::find_if(qs.begin(), qs.end(),
                                 [&](const auto& q) { return q.id == path.question_id; });
    REQUIRE(it != qs.end());
    CHECK(path.outcome_correct == task::check_answer(*it, path.path.final_answer));
    // no duplicate step lists per question after dedup
    std::string key = std::to_string(path.question_id);
    for (const auto& s : path.path.steps) key += "|" + s;
    CHECK(seen.insert(key).second);
  }

  // scheduling independence: 1 thread and 2 threads agree exactly
  const RoundCollection rc1 = collect_round(p, qs, cfg, 31, 1);
  CHECK(serialize(rc.paths) == serialize(rc1.paths));
}

TEST_CASE("sampled dataset JSONL round-trips") {
  const auto qs = task::generate_dataset(26, 3, {2, 3}, task::Split::train);
  const seqmodel::PolicyParams p = seqmodel::init_params(kTiny, 17);
  const RoundCollection rc = collect_round(p, qs, small_cfg(), 41, 1);
  REQUIRE(!rc.paths.empty());
  const std::string path =
      (std::filesystem::temp_directory_path() / "sipf_samples.jsonl").string();
  write_sampled_jsonl(path, rc.paths);
  const auto back = read_sampled_jsonl(path);
  CHECK(serialize(back) == serialize(rc.paths));
}
