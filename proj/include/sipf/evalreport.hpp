#pragma once

#include "sipf/seqmodel.hpp"
#include "sipf/task.hpp"
#include "sipf/types.hpp"

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace sipf::evalreport {

/// One metrics.csv row. NaN doubles and negative counters serialize as empty
/// cells. (run_id, round, epoch) is unique within a file.
struct MetricsRecord {
  std::string run_id;
  std::string preset;
  int round = 0;
  int epoch = 0;
  double train_loss = std::numeric_limits<double>::quiet_NaN();
  double chosen_mean_prob = std::numeric_limits<double>::quiet_NaN();
  double rejected_mean_prob = std::numeric_limits<double>::quiet_NaN();
  double test_accuracy = std::numeric_limits<double>::quiet_NaN();
  long long dataset_size = -1;
  long long pair_count = -1;
  long long wall_ms = -1;
  std::uint64_t seed = 0;
};

inline constexpr const char* kMetricsHeader =
    "run_id,preset,round,epoch,train_loss,chosen_mean_prob,rejected_mean_prob,"
    "test_accuracy,dataset_size,pair_count,wall_ms,seed";

void write_metrics_csv(const std::string& path, std::span<const MetricsRecord> rows);
std::vector<MetricsRecord> read_metrics_csv(const std::string& path);

struct EvalResult {
  double accuracy = 0.0;
  double valid_step_fraction = 0.0;  // oracle-valid steps among emitted steps
  int n_questions = 0;
};

/// Greedy-decodes every question and checks the final answer against the
/// oracle. Order-invariant and parallel across questions.
EvalResult eval_accuracy(const seqmodel::PolicyParams& params,
                         std::span<const task::Question> questions, int max_len = 96,
                         int n_threads = 1);

/// Same aggregation over an arbitrary decoder (used with the oracle solver as
/// a perfect policy in tests).
EvalResult eval_accuracy(const std::function<task::ReasoningPath(const task::Question&)>& decoder,
                         std::span<const task::Question> questions, int n_threads = 1);

/// Aggregates every run under `dir` (a run directory or a directory of run
/// directories) into report/{summary.json, iteration_curve.csv,
/// data_counts.csv, or_weight_sweep.csv, reward_table.csv}. Missing artifacts
/// are listed in the summary; partial reports are fine.
void write_report(const std::string& dir);

}  // namespace sipf::evalreport
