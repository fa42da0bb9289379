#pragma once

#include "sipf/seqmodel.hpp"
#include "sipf/task.hpp"
#include "sipf/types.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace sipf::sampling {

struct SampleConfig {
  double temperature = 1.0;
  int n_pos_target = 8;
  int n_neg_target = 8;
  double halving = 0.5;  // per-round target shrink factor, 1/2 or 1/4
  long long time_budget_ms = 2000;
  int max_attempts = 32;
  int max_len = 96;
  int round_index = 0;
  bool greedy = false;  // greedy collection draws a single deterministic path
};

/// Targets for collection round k (k >= 0): ceil(target * halving^k), floored
/// at 1. round_index is set to k.
SampleConfig targets_for_round(const SampleConfig& round0, int k);

struct OutcomeLabeledPath {
  long long question_id = 0;
  task::ReasoningPath path;
  bool outcome_correct = false;
  int source_round = 0;
  TokenSeq raw_tokens;  // exactly what the policy emitted; re-decodes to path
};

struct QuestionStats {
  long long question_id = 0;
  int attempts = 0;
  int positives = 0;
  int negatives = 0;
  bool truncated_by_budget = false;
  bool underfilled = false;
};

/// Samples completions until both class targets fill, attempts run out, or
/// the wall-clock budget expires. Kept paths are capped per class at their
/// targets; zero-step decodes are discarded. Malformed answers count as
/// negatives.
std::vector<OutcomeLabeledPath> sample_paths(const seqmodel::PolicyParams& params,
                                             const task::Question& q, const SampleConfig& cfg,
                                             std::uint64_t seed, QuestionStats* stats = nullptr);

/// Keeps the first occurrence of each distinct ordered step list, in
/// first-seen order. Final answers do not participate in the key.
std::vector<OutcomeLabeledPath> dedup_paths(std::span<const OutcomeLabeledPath> paths);

struct RoundCollection {
  std::vector<OutcomeLabeledPath> paths;  // per-question deduplicated
  std::vector<QuestionStats> stats;
};

RoundCollection collect_round(const seqmodel::PolicyParams& params,
                              std::span<const task::Question> questions, const SampleConfig& cfg,
                              std::uint64_t seed, int n_threads = 1);

void write_sampled_jsonl(const std::string& path, std::span<const OutcomeLabeledPath> paths);
std::vector<OutcomeLabeledPath> read_sampled_jsonl(const std::string& path);

}  // namespace sipf::sampling
