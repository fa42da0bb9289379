#pragma once

#include "sipf/sampling.hpp"
#include "sipf/seqmodel.hpp"
#include "sipf/task.hpp"
#include "sipf/types.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace sipf::simulate {

enum class Simulator { oracle, policy };

struct SimConfig {
  int k = 8;       // rollouts per step
  int delta = 4;   // strict threshold: label 1 iff count > delta
  double temperature = 1.0;
  Simulator simulator = Simulator::oracle;
  const seqmodel::PolicyParams* policy = nullptr;  // required for Simulator::policy
  int max_len = 96;
};

void validate(const SimConfig& cfg);

struct LabeledPath {
  long long question_id = 0;
  task::ReasoningPath path;
  std::vector<int> step_labels;     // c in {0,1}, one per step
  std::vector<int> correct_counts;  // simulation tallies in [0, k]
};

/// Rolls out k continuations from the prefix and counts correct finals. The
/// oracle simulator continues with exact arithmetic from the prefix's claimed
/// running value, so a corrupted prefix propagates its error.
int simulate_step(const SimConfig& cfg, const task::Question& q,
                  std::span<const std::string> prefix_steps, std::uint64_t seed);

bool label_from_count(int count, int delta);

LabeledPath label_path(const SimConfig& cfg, const task::Question& q,
                       const task::ReasoningPath& path, std::uint64_t seed);

/// Labels a seeded random subset of ceil(fraction * N) sampled paths for
/// verifier training. Labels depend on (path, seed) only, never on
/// processing order.
std::vector<LabeledPath> build_simulated_dataset(
    const SimConfig& cfg, std::span<const sampling::OutcomeLabeledPath> sampled,
    std::span<const task::Question> questions, double fraction, std::uint64_t seed,
    int n_threads = 1);

void write_simulated_jsonl(const std::string& path, std::span<const LabeledPath> paths,
                           const SimConfig& cfg);
std::vector<LabeledPath> read_simulated_jsonl(const std::string& path, int* k = nullptr,
                                              int* delta = nullptr);

}  // namespace sipf::simulate
