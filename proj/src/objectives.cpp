#include "sipf/objectives.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace sipf::objectives {
namespace {

using seqmodel::ModelConfig;
using seqmodel::ParamViews;
using seqmodel::PolicyParams;

double log1mexp(double m) {  // log(1 - e^m) for m < 0
  return m > -std::numbers::ln2 ? std::log(-std::expm1(m)) : std::log1p(-std::exp(m));
}

double softplus(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

const double kClampLogProb = std::log1p(-1e-12);

double log_odds_slope(double mean_logprob) {
  if (mean_logprob >= kClampLogProb) return 0.0;  // flat past the clamp
  return 1.0 / (-std::expm1(mean_logprob));
}

struct Sequence {
  const TokenSeq* prompt;
  const TokenSeq* completion;
};

/// Evaluates mean completion log-probabilities for a batch of sequences in
/// one fused forward pass, and backpropagates any per-sequence linear
/// combination of their gradients.
class BatchEvaluator {
 public:
  BatchEvaluator(const PolicyParams& params, std::span<const Sequence> seqs)
      : params_(params), cfg_(params.config), v_(seqmodel::views(cfg_, params.theta)) {
    if (seqs.empty()) throw std::invalid_argument("empty batch");
    offsets_.reserve(seqs.size() + 1);
    offsets_.push_back(0);
    for (const Sequence& s : seqs) {
      if (s.completion->empty()) throw std::invalid_argument("completion must be non-empty");
      offsets_.push_back(offsets_.back() + static_cast<long long>(s.completion->size()));
    }
    const long long total = offsets_.back();
    full_.reserve(seqs.size());
    bases_.reserve(seqs.size());
    for (const Sequence& s : seqs) {
      TokenSeq f = *s.prompt;
      f.insert(f.end(), s.completion->begin(), s.completion->end());
      for (int t : f) {
        if (t < 0 || t >= cfg_.vocab_size) {
          throw std::invalid_argument("token id outside the vocabulary");
        }
      }
      bases_.push_back(static_cast<long long>(s.prompt->size()));
      full_.push_back(std::move(f));
    }

    x_.resize(static_cast<long long>(cfg_.window) * cfg_.embed_dim, total);
    targets_.resize(static_cast<std::size_t>(total));
    for (std::size_t s = 0; s < full_.size(); ++s) {
      const long long off = offsets_[s];
      const long long len = offsets_[s + 1] - off;
      for (long long i = 0; i < len; ++i) {
        seqmodel::fill_window(cfg_, v_.embed, full_[s], bases_[s] + i - 1, x_.col(off + i).data());
        targets_[static_cast<std::size_t>(off + i)] = full_[s][bases_[s] + i];
      }
    }
    h_ = ((v_.w1 * x_).colwise() + v_.b1).array().tanh().matrix();
    probs_ = ((v_.w2 * h_).colwise() + v_.b2);
    means_.assign(full_.size(), 0.0);
    for (long long col = 0; col < total; ++col) {
      auto z = probs_.col(col);
      const double m = z.maxCoeff();
      const double norm = m + std::log((z.array() - m).exp().sum());
      const double lp = z[targets_[static_cast<std::size_t>(col)]] - norm;
      const std::size_t s = seq_of_col(col);
      means_[s] += lp / static_cast<double>(offsets_[s + 1] - offsets_[s]);
      z = (z.array() - norm).exp().matrix();  // reuse storage as softmax
    }
  }

  const std::vector<double>& means() const { return means_; }

  /// Returns sum over sequences of coeff[s] * d(mean logprob of s)/d(theta).
  Vector weighted_grad(std::span<const double> coeffs) const {
    const long long total = offsets_.back();
    Matrix dz = probs_;
    for (long long col = 0; col < total; ++col) {
      const std::size_t s = seq_of_col(col);
      const double scale = coeffs[s] / static_cast<double>(offsets_[s + 1] - offsets_[s]);
      dz.col(col) *= -scale;
      dz(targets_[static_cast<std::size_t>(col)], col) += scale;
    }

    Vector grad = Vector::Zero(params_.theta.size());
    const long long n_embed = static_cast<long long>(cfg_.embed_dim) * cfg_.vocab_size;
    const long long n_w1 = static_cast<long long>(cfg_.hidden_dim) * cfg_.window * cfg_.embed_dim;
    double* p = grad.data();
    MatrixMap g_embed(p, cfg_.embed_dim, cfg_.vocab_size);
    MatrixMap g_w1(p + n_embed, cfg_.hidden_dim, static_cast<long long>(cfg_.window) * cfg_.embed_dim);
    VectorMap g_b1(p + n_embed + n_w1, cfg_.hidden_dim);
    MatrixMap g_w2(p + n_embed + n_w1 + cfg_.hidden_dim, cfg_.vocab_size, cfg_.hidden_dim);
    VectorMap g_b2(p + n_embed + n_w1 + cfg_.hidden_dim +
                       static_cast<long long>(cfg_.vocab_size) * cfg_.hidden_dim,
                   cfg_.vocab_size);

    g_w2.noalias() = dz * h_.transpose();
    g_b2 = dz.rowwise().sum();
    const Matrix du = (v_.w2.transpose() * dz).cwiseProduct((1.0 - h_.array().square()).matrix());
    g_w1.noalias() = du * x_.transpose();
    g_b1 = du.rowwise().sum();
    const Matrix dx = v_.w1.transpose() * du;
    for (std::size_t s = 0; s < full_.size(); ++s) {
      const long long off = offsets_[s];
      const long long len = offsets_[s + 1] - off;
      for (long long i = 0; i < len; ++i) {
        for (int slot = 0; slot < cfg_.window; ++slot) {
          const long long idx = bases_[s] + i - cfg_.window + slot;
          const int tok =
              (idx >= 0 && idx < static_cast<long long>(full_[s].size())) ? full_[s][idx] : 0;
          g_embed.col(tok) +=
              dx.col(off + i).segment(static_cast<long long>(slot) * cfg_.embed_dim, cfg_.embed_dim);
        }
      }
    }
    return grad;
  }

 private:
  std::size_t seq_of_col(long long col) const {
    // offsets_ is small; linear scan with memo of the last hit.
    while (col >= offsets_[cursor_ + 1]) ++cursor_;
    while (col < offsets_[cursor_]) --cursor_;
    return cursor_;
  }

  const PolicyParams& params_;
  const ModelConfig& cfg_;
  ParamViews v_;
  std::vector<TokenSeq> full_;
  std::vector<long long> bases_;
  std::vector<long long> offsets_;
  std::vector<int> targets_;
  Matrix x_, h_, probs_;
  std::vector<double> means_;
  mutable std::size_t cursor_ = 0;
};

std::vector<Sequence> pair_sequences(std::span<const TokenPair> batch) {
  std::vector<Sequence> seqs;
  seqs.reserve(batch.size() * 2);
  for (const TokenPair& p : batch) {
    seqs.push_back({&p.prompt, &p.chosen});
    seqs.push_back({&p.prompt, &p.rejected});
  }
  return seqs;
}

}  // namespace

bool beta_in_sweep_set(double beta) {
  return beta == 0.01 || beta == 0.1 || beta == 1.0;
}

double log_odds(double mean_logprob) {
  if (mean_logprob > 0.0) throw std::invalid_argument("log_odds: mean log-probability must be <= 0");
  const double m = std::min(mean_logprob, kClampLogProb);
  return m - log1mexp(m);
}

LossGrad sft_loss_grad(const seqmodel::PolicyParams& params,
                       std::span<const PromptCompletion> batch) {
  if (batch.empty()) throw std::invalid_argument("sft_loss_grad: empty batch");
  std::vector<Sequence> seqs;
  seqs.reserve(batch.size());
  for (const PromptCompletion& pc : batch) seqs.push_back({&pc.prompt, &pc.completion});
  BatchEvaluator eval(params, seqs);

  const double inv_b = 1.0 / static_cast<double>(batch.size());
  LossGrad out;
  for (double m : eval.means()) out.loss -= m * inv_b;
  const std::vector<double> coeffs(batch.size(), -inv_b);
  out.grad = eval.weighted_grad(coeffs);
  return out;
}

PairLossGrad orpo_loss_grad(const seqmodel::PolicyParams& params,
                            std::span<const TokenPair> batch, double beta,
                            bool paper_literal_or) {
  if (batch.empty()) throw std::invalid_argument("orpo_loss_grad: empty batch");
  if (beta < 0.0) throw std::invalid_argument("orpo_loss_grad: beta must be >= 0");
  BatchEvaluator eval(params, pair_sequences(batch));
  const auto& means = eval.means();

  const double inv_b = 1.0 / static_cast<double>(batch.size());
  PairLossGrad out;
  std::vector<double> coeffs(means.size(), 0.0);
  for (std::size_t p = 0; p < batch.size(); ++p) {
    const double mw = means[2 * p];
    const double ml = means[2 * p + 1];
    const double delta = log_odds(mw) - log_odds(ml);
    double or_loss, dor_ddelta;
    if (paper_literal_or) {
      const double e = std::exp(delta);
      or_loss = softplus(-e);
      dor_ddelta = -sigmoid(-e) * e;
    } else {
      or_loss = softplus(-delta);
      dor_ddelta = -sigmoid(-delta);
    }
    out.loss += (-mw + beta * or_loss) * inv_b;
    coeffs[2 * p] = (-1.0 + beta * dor_ddelta * log_odds_slope(mw)) * inv_b;
    coeffs[2 * p + 1] = (-beta * dor_ddelta * log_odds_slope(ml)) * inv_b;
    out.diag.mean_chosen_prob += std::exp(mw) * inv_b;
    out.diag.mean_rejected_prob += std::exp(ml) * inv_b;
  }
  out.grad = eval.weighted_grad(coeffs);
  return out;
}

PairLossGrad dpo_loss_grad(const seqmodel::PolicyParams& params,
                           const seqmodel::PolicyParams& ref_params,
                           std::span<const TokenPair> batch, double beta_dpo) {
  if (batch.empty()) throw std::invalid_argument("dpo_loss_grad: empty batch");
  if (beta_dpo <= 0.0) throw std::invalid_argument("dpo_loss_grad: beta_dpo must be > 0");
  if (!(ref_params.config == params.config) ||
      ref_params.theta.size() != params.theta.size()) {
    throw std::invalid_argument("dpo_loss_grad: reference parameters missing or mismatched");
  }
  const std::vector<Sequence> seqs = pair_sequences(batch);
  BatchEvaluator eval(params, seqs);
  BatchEvaluator ref_eval(ref_params, seqs);
  const auto& means = eval.means();
  const auto& ref_means = ref_eval.means();

  const double inv_b = 1.0 / static_cast<double>(batch.size());
  PairLossGrad out;
  std::vector<double> coeffs(means.size(), 0.0);
  for (std::size_t p = 0; p < batch.size(); ++p) {
    const double mw = means[2 * p];
    const double ml = means[2 * p + 1];
    const double h =
        beta_dpo * ((mw - ref_means[2 * p]) - (ml - ref_means[2 * p + 1]));
    out.loss += softplus(-h) * inv_b;
    const double d = -sigmoid(-h) * beta_dpo;
    coeffs[2 * p] = d * inv_b;
    coeffs[2 * p + 1] = -d * inv_b;
    out.diag.mean_chosen_prob += std::exp(mw) * inv_b;
    out.diag.mean_rejected_prob += std::exp(ml) * inv_b;
  }
  out.grad = eval.weighted_grad(coeffs);
  return out;
}

}  // namespace sipf::objectives
