#pragma once

#include "sipf/seqmodel.hpp"
#include "sipf/task.hpp"
#include "sipf/types.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace sipf::reward {

/// Verifier: the seqmodel backbone (embeddings + tanh hidden layer) with a
/// scalar sigmoid head read at each step-separator position. Never
/// weight-shared with the policy.
struct RewardParams {
  seqmodel::ModelConfig config;
  Vector theta;  // embed | w1 | b1 | head_w | head_b
};

long long reward_param_count(const seqmodel::ModelConfig& cfg);
RewardParams init_reward_params(const seqmodel::ModelConfig& cfg, std::uint64_t seed);

struct PathScore {
  std::vector<double> step_scores;  // each strictly inside (0, 1)
  double r = 0.0;                   // arithmetic mean of step_scores
};

/// One labeled training/eval example; pointers reference caller-owned storage.
struct StepLabeledItem {
  const task::Question* question;
  const task::ReasoningPath* path;
  const std::vector<int>* labels;  // 0/1 per step
};

struct OutcomeItem {
  const task::Question* question;
  const task::ReasoningPath* path;
  bool outcome_correct;
};

struct LossGrad {
  double loss = 0.0;
  Vector grad;
};

/// Step-level binary cross-entropy, normalized by the batch's total step
/// count. Evaluated through log-sigmoid forms.
LossGrad prm_loss_grad(const RewardParams& params, std::span<const StepLabeledItem> batch);

struct RewardTrainConfig {
  int epochs = 30;
  int batch_size = 40;
  double lr = 5e-5;
  double warmup_ratio = 0.1;
  double max_grad_norm = 0.3;
};

RewardParams train_prm(std::span<const StepLabeledItem> data, const seqmodel::ModelConfig& cfg,
                       const RewardTrainConfig& tc, std::uint64_t seed,
                       std::vector<double>* loss_curve = nullptr);

/// Outcome-supervised variant: every step position inherits the path's
/// outcome label; identical machinery otherwise.
RewardParams train_orm(std::span<const OutcomeItem> data, const seqmodel::ModelConfig& cfg,
                       const RewardTrainConfig& tc, std::uint64_t seed,
                       std::vector<double>* loss_curve = nullptr);

PathScore score_path(const RewardParams& params, const task::Question& q,
                     const task::ReasoningPath& path);
double orm_score(const RewardParams& params, const task::Question& q,
                 const task::ReasoningPath& path);

/// Step prediction is c_hat > threshold; returns the fraction matching labels.
double eval_reward_model(const RewardParams& params, std::span<const StepLabeledItem> eval_set,
                         double threshold = 0.5);

/// Accuracy of raw 0/1 predictions against labels (shared by tests and the
/// evaluation report).
double step_accuracy(std::span<const int> predictions, std::span<const int> labels);

}  // namespace sipf::reward
