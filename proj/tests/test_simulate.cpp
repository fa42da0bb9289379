#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "sipf/rng.hpp"
#include "sipf/sampling.hpp"
#include "sipf/simulate.hpp"
#include "sipf/task.hpp"
#include "support/oracles.hpp"

#include <filesystem>
#include <map>

using namespace sipf;
using namespace sipf::simulate;

namespace {

SimConfig oracle_cfg() {
  SimConfig cfg;
  cfg.k = 8;
  cfg.delta = 4;
  return cfg;
}

}  // namespace

TEST_CASE("configuration validation") {
  SimConfig cfg = oracle_cfg();
  cfg.delta = 8;
  CHECK_THROWS_AS(validate(cfg), std::invalid_argument);
  cfg.delta = -1;
  CHECK_THROWS_AS(validate(cfg), std::invalid_argument);
  cfg.delta = 0;
  cfg.k = 0;
  CHECK_THROWS_AS(validate(cfg), std::invalid_argument);
  cfg = oracle_cfg();
  cfg.simulator = Simulator::policy;  // no policy attached
  CHECK_THROWS_AS(validate(cfg), std::invalid_argument);
}

TEST_CASE("oracle simulation: correct prefixes always reach the gold answer") {
  const auto qs = task::generate_dataset(3, 10, {2, 5}, task::Split::train);
  const SimConfig cfg = oracle_cfg();
  for (const auto& q : qs) {
    const std::vector<std::string> empty;
    CHECK(simulate_step(cfg, q, empty, 1) == cfg.k);
    for (int j = 1; j <= q.gold_path.m(); ++j) {
      const std::span<const std::string> prefix(q.gold_path.steps.data(),
                                                static_cast<std::size_t>(j));
      CHECK(simulate_step(cfg, q, prefix, 1) == cfg.k);
    }
  }
}

TEST_CASE("oracle simulation: a corrupted claimed value propagates to a wrong final") {
  const auto qs = task::generate_dataset(4, 10, {2, 4}, task::Split::train);
  const SimConfig cfg = oracle_cfg();
  for (const auto& q : qs) {
    std::vector<std::string> prefix = {q.gold_path.steps[0]};
    long long x = 0, z = 0;
    int y = 0;
    task::Op op{};
    REQUIRE(task::parse_step(prefix[0], x, op, y, z));
    prefix[0] = task::format_step(x, op, y, z + 1);
    CHECK(simulate_step(cfg, q, prefix, 1) == 0);
  }
}

TEST_CASE("unparseable prefixes and over-long prefixes behave sensibly") {
  const auto qs = task::generate_dataset(5, 3, {2, 2}, task::Split::train);
  const SimConfig cfg = oracle_cfg();
  const std::vector<std::string> garbage = {"not a step"};
  CHECK(simulate_step(cfg, qs[0], garbage, 1) == 0);

  // prefix consuming every scheduled operation: the claim IS the final answer
  std::vector<std::string> full = qs[0].gold_path.steps;
  CHECK(simulate_step(cfg, qs[0], full, 1) == cfg.k);
  full.push_back(task::format_step(qs[0].gold_answer, task::Op::add, 0, qs[0].gold_answer + 1));
  CHECK(simulate_step(cfg, qs[0], full, 1) == 0);
}

TEST_CASE("label threshold is strict") {
  CHECK(label_from_count(5, 4));
  CHECK_FALSE(label_from_count(4, 4));
  CHECK(label_from_count(1, 0));
  CHECK_FALSE(label_from_count(0, 0));
}

TEST_CASE("gold paths label all-ones under the oracle simulator") {
  const auto qs = task::generate_dataset(6, 10, {2, 5}, task::Split::train);
  const SimConfig cfg = oracle_cfg();
  for (const auto& q : qs) {
    const LabeledPath lp = label_path(cfg, q, q.gold_path, 9);
    CHECK(lp.step_labels == std::vector<int>(static_cast<std::size_t>(q.gold_path.m()), 1));
    for (int c : lp.correct_counts) CHECK(c == cfg.k);
  }
}

TEST_CASE("corrupted paths: labels match chain validity with a zero suffix") {
  const auto qs = task::generate_dataset(7, 40, {2, 5}, task::Split::train);
  const SimConfig cfg = oracle_cfg();
  for (std::size_t i = 0; i < qs.size(); ++i) {
    const testing::CorruptedPath cp = testing::corrupt_gold_path(qs[i], true, 500 + i);
    const LabeledPath lp = label_path(cfg, qs[i], cp.path, 9);
    CHECK(lp.step_labels == cp.truth);
    bool seen_zero = false;
    for (int l : lp.step_labels) {
      if (l == 0) seen_zero = true;
      if (seen_zero) CHECK(l == 0);
    }
    for (int c : lp.correct_counts) {
      CHECK(c >= 0);
      CHECK(c <= cfg.k);
    }
  }
}

TEST_CASE("policy simulator is reproducible for a fixed seed") {
  const auto qs = task::generate_dataset(8, 2, {2, 2}, task::Split::train);
  const seqmodel::ModelConfig mc{6, 4, 8, task::TokenCodec::kVocabSize};
  const seqmodel::PolicyParams policy = seqmodel::init_params(mc, 40);
  SimConfig cfg = oracle_cfg();
  cfg.simulator = Simulator::policy;
  cfg.policy = &policy;
  cfg.max_len = 24;
  const std::vector<std::string> prefix = {qs[0].gold_path.steps[0]};
  const int a = simulate_step(cfg, qs[0], prefix, 123);
  const int b = simulate_step(cfg, qs[0], prefix, 123);
  CHECK(a == b);
  CHECK(a >= 0);
  CHECK(a <= cfg.k);
}

TEST_CASE("build_simulated_dataset: fraction arithmetic and order-invariant labels") {
  const auto qs = task::generate_dataset(9, 50, {2, 4}, task::Split::train);
  std::vector<sampling::OutcomeLabeledPath> sampled;
  for (std::size_t i = 0; i < qs.size(); ++i) {
    const testing::CorruptedPath cp = testing::corrupt_gold_path(qs[i], i % 2 == 0, 70 + i);
    sampled.push_back({qs[i].id, cp.path, !cp.corrupted, 1, {}});
  }
  const SimConfig cfg = oracle_cfg();

  CHECK(build_simulated_dataset(cfg, sampled, qs, 1.0, 5).size() == 50);
  CHECK(build_simulated_dataset(cfg, sampled, qs, 0.25, 5).size() == 13);  // ceil(12.5)
  CHECK(build_simulated_dataset(cfg, sampled, qs, 0.5, 5).size() == 25);
  CHECK_THROWS_AS(build_simulated_dataset(cfg, {}, qs, 0.5, 5), std::invalid_argument);
  CHECK_THROWS_AS(build_simulated_dataset(cfg, sampled, qs, 0.0, 5), std::invalid_argument);

  // processing order must not change any path's labels
  const auto full = build_simulated_dataset(cfg, sampled, qs, 1.0, 5, 2);
  auto shuffled = sampled;
  Rng rng(2);
  rng.shuffle(shuffled);
  const auto full2 = build_simulated_dataset(cfg, shuffled, qs, 1.0, 5, 1);
  std::map<long long, std::vector<int>> by_id;
  for (const auto& lp : full) by_id[lp.question_id] = lp.step_labels;
  for (const auto& lp : full2) CHECK(by_id.at(lp.question_id) == lp.step_labels);
}

TEST_CASE("simulated dataset JSONL round-trips") {
  const auto qs = task::generate_dataset(10, 5, {2, 3}, task::Split::train);
  std::vector<sampling::OutcomeLabeledPath> sampled;
  for (const auto& q : qs) sampled.push_back({q.id, q.gold_path, true, 1, {}});
  const SimConfig cfg = oracle_cfg();
  const auto labeled = build_simulated_dataset(cfg, sampled, qs, 1.0, 3);
  const std::string path =
      (std::filesystem::temp_directory_path() / "sipf_dsim.jsonl").string();
  write_simulated_jsonl(path, labeled, cfg);
  int k = 0, delta = 0;
  const auto back = read_simulated_jsonl(path, &k, &delta);
  CHECK(k == cfg.k);
  CHECK(delta == cfg.delta);
  REQUIRE(back.size() == labeled.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    CHECK(back[i].question_id == labeled[i].question_id);
    CHECK(back[i].path.steps == labeled[i].path.steps);
    CHECK(back[i].step_labels == labeled[i].step_labels);
    CHECK(back[i].correct_counts == labeled[i].correct_counts);
  }
}
