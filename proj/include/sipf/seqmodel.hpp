#pragma once

#include "sipf/types.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace sipf::seqmodel {

/// Fixed-window MLP language model: the last `window` token embeddings are
/// concatenated, pushed through one tanh hidden layer, and projected to
/// vocabulary logits. Small enough that the full gradient is hand-derived
/// and finite-difference checkable.
struct ModelConfig {
  int window = 16;
  int embed_dim = 8;
  int hidden_dim = 32;
  int vocab_size = 19;

  bool operator==(const ModelConfig&) const = default;
};

long long param_count(const ModelConfig& cfg);
void validate_config(const ModelConfig& cfg);

struct PolicyParams {
  ModelConfig config;
  Vector theta;
};

struct SeqLogProb {
  std::vector<double> per_token;  // natural-log probabilities, each <= 0
  double total = 0.0;
  double mean = 0.0;
};

/// Read-only views into the flat parameter vector.
struct ParamViews {
  ConstMatrixMap embed;  // embed_dim x vocab
  ConstMatrixMap w1;     // hidden x (window * embed_dim)
  ConstVectorMap b1;
  ConstMatrixMap w2;     // vocab x hidden
  ConstVectorMap b2;
};
ParamViews views(const ModelConfig& cfg, const Vector& theta);

/// Uniform init in [-s, s] with s = 1/sqrt(fan_in) per tensor; biases zero.
PolicyParams init_params(const ModelConfig& cfg, std::uint64_t seed);

SeqLogProb seq_logprob(const PolicyParams& params, const TokenSeq& prompt,
                       const TokenSeq& completion);

/// Returns the log-probability record plus d(mean completion logprob)/d(theta).
std::pair<SeqLogProb, Vector> seq_logprob_grad(const PolicyParams& params,
                                               const TokenSeq& prompt,
                                               const TokenSeq& completion);

/// Temperature sampling until end-of-sequence or max_len tokens. The padding
/// token is masked out of the distribution. Returns the completion only
/// (including the end-of-sequence token when one was drawn).
TokenSeq sample(const PolicyParams& params, const TokenSeq& prompt, double temperature,
                int max_len, std::uint64_t seed);

/// Argmax decoding; ties break toward the lowest non-padding token id.
TokenSeq greedy_decode(const PolicyParams& params, const TokenSeq& prompt, int max_len);

/// Next-token logits for the history ending at the last element of `seq`.
Vector next_token_logits(const ModelConfig& cfg, const ParamViews& v, std::span<const int> seq);

/// Copies the embedding window whose last token sits at `end_inclusive` into
/// `out` (length window * embed_dim). Out-of-range history reads as padding.
void fill_window(const ModelConfig& cfg, ConstMatrixMap embed, std::span<const int> seq,
                 long long end_inclusive, double* out);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;  // decoupled
};

struct AdamState {
  Vector m;
  Vector v;
  long long step = 0;
};

AdamState make_adam_state(long long n_params);
void adam_step(Vector& params, const Vector& grad, AdamState& state, double lr,
               const AdamConfig& cfg = {});

/// Rescales grad in place when its norm exceeds max_norm; returns the
/// pre-clip norm.
double clip_grad_norm(Vector& grad, double max_norm);

/// Linear warmup over the first ceil(ratio * total) updates.
double warmup_lr(double base_lr, long long update_index, long long total_updates, double ratio);

// Checkpoints: one JSON header line followed by the raw little-endian
// float64 array. Round-trips bit-exactly.
void save_checkpoint(const std::string& path, const ModelConfig& cfg, const Vector& theta,
                     const std::string& kind);
std::pair<ModelConfig, Vector> load_checkpoint(const std::string& path,
                                               std::string* kind = nullptr);

std::uint64_t params_hash(const Vector& theta);

}  // namespace sipf::seqmodel
