#pragma once

#include "sipf/task.hpp"
#include "sipf/types.hpp"

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace sipf::prefdata {

struct ScoredPath {
  long long question_id = 0;
  task::ReasoningPath path;
  double r = 0.0;
};

struct PreferencePair {
  long long question_id = 0;
  task::ReasoningPath chosen;
  task::ReasoningPath rejected;
  double r_w = 0.0;
  double r_l = 0.0;
  double eta = 0.0;  // margin the pair was built under
  int round = 0;
};

/// Extreme pairing per question: sort by score descending (ties keep
/// first-seen order), then pair best against worst while r_w - r_l >= eta and
/// the per-question cap is unreached.
std::vector<PreferencePair> build_pairs(std::span<const ScoredPath> scored, double eta,
                                        int max_pairs_per_question, std::uint64_t seed,
                                        int round = 0);

struct PrefStats {
  long long n_pairs = 0;
  long long n_questions = 0;  // questions contributing at least one pair
  double margin_min = 0.0;
  double margin_mean = 0.0;
  double margin_max = 0.0;
  std::map<int, long long> pairs_per_round;
  std::map<long long, long long> pairs_per_question;
};

PrefStats pref_stats(std::span<const PreferencePair> pairs);

void write_pref_jsonl(const std::string& path, std::span<const PreferencePair> pairs);
std::vector<PreferencePair> read_pref_jsonl(const std::string& path);

}  // namespace sipf::prefdata
