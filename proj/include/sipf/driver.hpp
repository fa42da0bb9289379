#pragma once

#include "sipf/evalreport.hpp"
#include "sipf/objectives.hpp"
#include "sipf/prefdata.hpp"
#include "sipf/reward.hpp"
#include "sipf/sampling.hpp"
#include "sipf/seqmodel.hpp"
#include "sipf/simulate.hpp"
#include "sipf/task.hpp"

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

namespace sipf::driver {

enum class Feedback { process, outcome };
enum class Objective { orpo, dpo, sft_only };
enum class DecodeMode { temperature, greedy };

std::string to_string(Feedback f);
std::string to_string(Objective o);
std::string to_string(DecodeMode d);

struct RunConfig {
  std::string run_id = "run";
  std::string preset = "sipf";
  std::string out_dir = "runs/run";

  std::uint64_t seed = 1;
  std::uint64_t data_seed = 42;
  int n_train = 500;
  int n_test = 200;
  int depth_min = 2;
  int depth_max = 4;

  int n_iterations = 3;
  Feedback feedback = Feedback::process;
  Objective objective = Objective::orpo;
  bool iterate = true;
  DecodeMode decode_for_collection = DecodeMode::temperature;
  bool restart_from_base = true;  // Algorithm-1 literal: align from the base model
  bool positives_only = false;    // self-taught family trains on positives only
  bool prm_filter = false;        // keep positives with verifier reward >= keep_threshold
  double keep_threshold = 0.7;
  bool retrain_verifier = true;
  bool paper_literal_or = false;
  bool rpo_nll = false;  // add NLL-on-chosen to the DPO objective
  double rpo_alpha = 1.0;

  double beta = 0.1;      // OR weight
  double beta_dpo = 0.1;
  double eta = 0.3;       // preference margin
  int pair_cap = 2;       // max pairs per question

  int sim_k = 8;
  int sim_delta = 4;
  double sim_temperature = 1.0;
  bool sim_oracle = true;
  double sim_fraction = 0.5;

  double temperature = 1.0;
  int n_pos_target = 8;
  int n_neg_target = 8;
  double halving = 0.5;
  int max_attempts = 32;
  long long time_budget_ms = 2000;
  int max_len = 96;

  int policy_window = 20;
  int policy_embed = 12;
  int policy_hidden = 96;
  int verifier_window = 20;
  int verifier_embed = 12;
  int verifier_hidden = 96;

  double lr = 1e-4;  // alignment learning rate, from the {5e-5, 8e-5, 1e-4} grid
  double sft_lr = 1e-4;
  double prm_lr = 5e-5;
  int sft_epochs = 60;
  int align_epochs = 40;
  int prm_epochs = 30;
  int sft_batch = 10;
  int align_batch = 8;
  int prm_batch = 40;
  double warmup_ratio = 0.1;
  double max_grad_norm = 0.3;

  int probe_pairs = 64;
  int n_threads = 2;
};

seqmodel::ModelConfig policy_config(const RunConfig& cfg);
seqmodel::ModelConfig verifier_config(const RunConfig& cfg);
sampling::SampleConfig sample_config(const RunConfig& cfg);
simulate::SimConfig sim_config(const RunConfig& cfg, const seqmodel::PolicyParams* policy);

/// Named baseline presets: sft, star, rft, prft, srf, psrf, rpo, siof, sipf.
RunConfig preset_config(const std::string& name);

/// Reapplies only the loop-defining fields of a preset (objective, feedback,
/// iteration shape, filters) onto an existing config, keeping its task,
/// model, and training settings.
void apply_preset_semantics(RunConfig& cfg, const std::string& name);

void apply_override(RunConfig& cfg, const std::string& key, const std::string& value);
RunConfig read_config_file(const std::string& path);
void write_config_file(const std::string& path, const RunConfig& cfg);

struct IterationState {
  int k = 0;
  seqmodel::PolicyParams policy;  // M_k
  std::optional<reward::RewardParams> verifier;
  std::vector<sampling::OutcomeLabeledPath> dataset;  // D_k, deduplicated
  std::vector<simulate::LabeledPath> simulated;       // accumulated D_simulate
};

struct RunResult {
  std::string out_dir;
  std::vector<double> accuracy_by_round;  // [0] is the SFT model
  double final_accuracy = 0.0;
  double valid_step_fraction = 0.0;
  std::vector<long long> dataset_sizes;
  std::vector<long long> pair_counts;
};

/// One end-to-end pipeline execution under a run directory: SFT
/// initialization, then per-iteration sample -> union -> label/score ->
/// pair -> align, with metrics and artifacts persisted per round.
class Run {
 public:
  explicit Run(RunConfig cfg);

  void prepare();
  void run_sft();
  void run_iteration();  // advances state k-1 -> k
  RunResult execute();   // prepare + sft + all iterations + reports

  const RunConfig& config() const { return cfg_; }
  const IterationState& state() const { return state_; }
  const seqmodel::PolicyParams& base_params() const { return base_; }
  const seqmodel::PolicyParams& sft_params() const { return m0_; }
  const std::vector<task::Question>& train_questions() const { return train_; }
  const std::vector<task::Question>& test_questions() const { return test_; }
  const std::vector<evalreport::MetricsRecord>& metrics() const { return metrics_; }
  const std::vector<objectives::TokenPair>& probe_set() const { return probe_; }

 private:
  struct ProbeStats {
    double chosen = std::numeric_limits<double>::quiet_NaN();
    double rejected = std::numeric_limits<double>::quiet_NaN();
  };
  ProbeStats probe_stats(const seqmodel::PolicyParams& params) const;
  void build_probe_set();
  void add_to_dataset(std::vector<sampling::OutcomeLabeledPath> paths,
                      std::vector<std::size_t>* added);
  const sampling::OutcomeLabeledPath& dataset_entry(long long question_id,
                                                    const std::vector<std::string>& steps) const;
  const task::Question& question_by_id(long long id) const;
  void finalize();

  RunConfig cfg_;
  std::vector<task::Question> train_;
  std::vector<task::Question> test_;
  std::unordered_map<long long, std::size_t> train_index_;
  seqmodel::PolicyParams base_;
  seqmodel::PolicyParams m0_;
  std::vector<objectives::TokenPair> probe_;
  IterationState state_;
  std::unordered_map<std::string, std::size_t> dataset_index_;
  std::vector<evalreport::MetricsRecord> metrics_;
  RunResult result_;
  std::vector<std::uint64_t> align_init_hashes_;
  bool prepared_ = false;
  bool sft_done_ = false;
};

/// Resolves a preset, applies overrides, runs the whole pipeline.
RunResult run_baseline(const std::string& preset, std::uint64_t seed,
                       const std::vector<std::pair<std::string, std::string>>& overrides = {},
                       const std::string& out_dir = "");

}  // namespace sipf::driver
