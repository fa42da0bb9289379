#pragma once

#include "sipf/seqmodel.hpp"
#include "sipf/types.hpp"

#include <span>
#include <vector>

namespace sipf::objectives {

enum class ObjectiveKind { sft, orpo, dpo };

/// OR-weight sweep set from the alignment hyperparameter table. Other values
/// work but are flagged by the driver.
bool beta_in_sweep_set(double beta);

/// log(P / (1 - P)) for P = exp(mean_logprob), computed as
/// mean_logprob - log(1 - exp(mean_logprob)). P >= 1 - 1e-12 is clamped.
double log_odds(double mean_logprob);

struct PromptCompletion {
  TokenSeq prompt;
  TokenSeq completion;
};

struct TokenPair {
  TokenSeq prompt;
  TokenSeq chosen;
  TokenSeq rejected;
};

struct LossGrad {
  double loss = 0.0;
  Vector grad;
};

struct PairDiagnostics {
  double mean_chosen_prob = 0.0;
  double mean_rejected_prob = 0.0;
};

struct PairLossGrad {
  double loss = 0.0;
  Vector grad;
  PairDiagnostics diag;
};

/// Mean over the batch of the negative mean completion log-probability.
LossGrad sft_loss_grad(const seqmodel::PolicyParams& params,
                       std::span<const PromptCompletion> batch);

/// Per pair: NLL(chosen) - beta * logsigmoid(log_odds(chosen) - log_odds(rejected)).
/// paper_literal_or evaluates logsigmoid(exp(delta)) instead; it saturates for
/// any odds ratio above a few and is provided for comparison only.
PairLossGrad orpo_loss_grad(const seqmodel::PolicyParams& params,
                            std::span<const TokenPair> batch, double beta,
                            bool paper_literal_or = false);

/// Per pair: -logsigmoid(beta_dpo * [(logP - logP_ref)(chosen) - (logP - logP_ref)(rejected)])
/// on mean log-probs; the gradient touches the policy only.
PairLossGrad dpo_loss_grad(const seqmodel::PolicyParams& params,
                           const seqmodel::PolicyParams& ref_params,
                           std::span<const TokenPair> batch, double beta_dpo);

}  // namespace sipf::objectives
