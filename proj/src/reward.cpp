#include "sipf/reward.hpp"

#include "sipf/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace sipf::reward {
namespace {

using seqmodel::ModelConfig;

struct Offsets {
  long long embed, w1, b1, head_w, head_b, total;
};

Offsets offsets(const ModelConfig& c) {
  Offsets o{};
  o.embed = 0;
  o.w1 = o.embed + static_cast<long long>(c.embed_dim) * c.vocab_size;
  o.b1 = o.w1 + static_cast<long long>(c.hidden_dim) * c.window * c.embed_dim;
  o.head_w = o.b1 + c.hidden_dim;
  o.head_b = o.head_w + c.hidden_dim;
  o.total = o.head_b + 1;
  return o;
}

struct Views {
  ConstMatrixMap embed;
  ConstMatrixMap w1;
  ConstVectorMap b1;
  ConstVectorMap head_w;
  double head_b;
};

Views reward_views(const ModelConfig& c, const Vector& theta) {
  const Offsets o = offsets(c);
  if (theta.size() != o.total) throw std::invalid_argument("reward parameter size mismatch");
  const double* p = theta.data();
  return Views{
      ConstMatrixMap(p + o.embed, c.embed_dim, c.vocab_size),
      ConstMatrixMap(p + o.w1, c.hidden_dim, static_cast<long long>(c.window) * c.embed_dim),
      ConstVectorMap(p + o.b1, c.hidden_dim),
      ConstVectorMap(p + o.head_w, c.hidden_dim),
      theta[o.head_b],
  };
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double log_sigmoid(double x) {
  return x > 0.0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x));
}

/// Token sequence of question + steps with positions of the separator that
/// terminates each step.
struct ScoringLayout {
  TokenSeq tokens;
  std::vector<long long> sep_positions;
};

ScoringLayout scoring_layout(const task::Question& q, const task::ReasoningPath& path) {
  ScoringLayout out;
  out.tokens = task::encode_prefix(q, path.steps);
  for (long long i = 0; i < static_cast<long long>(out.tokens.size()); ++i) {
    if (out.tokens[i] == task::kSep) out.sep_positions.push_back(i);
  }
  if (out.sep_positions.size() != static_cast<std::size_t>(path.m())) {
    throw std::invalid_argument("scoring layout: separator count disagrees with step count");
  }
  return out;
}

/// Forward over every step position of a batch; optionally backpropagates the
/// binary cross-entropy gradient.
struct BatchForward {
  Matrix x, h;
  std::vector<double> scores;                 // c_hat per step position
  std::vector<std::pair<std::size_t, int>> owner;  // (item index, window token source)
  std::vector<TokenSeq> tokens;
  std::vector<std::vector<long long>> seps;
};

BatchForward forward_batch(const RewardParams& params, std::span<const StepLabeledItem> batch) {
  const ModelConfig& c = params.config;
  const Views v = reward_views(c, params.theta);
  BatchForward f;
  long long total = 0;
  f.tokens.reserve(batch.size());
  f.seps.reserve(batch.size());
  for (const StepLabeledItem& it : batch) {
    if (it.path->m() < 1) throw std::invalid_argument("path must have at least one step");
    ScoringLayout lay = scoring_layout(*it.question, *it.path);
    total += static_cast<long long>(lay.sep_positions.size());
    f.tokens.push_back(std::move(lay.tokens));
    f.seps.push_back(std::move(lay.sep_positions));
  }
  f.x.resize(static_cast<long long>(c.window) * c.embed_dim, total);
  long long col = 0;
  for (std::size_t s = 0; s < f.tokens.size(); ++s) {
    for (long long pos : f.seps[s]) {
      seqmodel::fill_window(c, v.embed, f.tokens[s], pos, f.x.col(col).data());
      ++col;
    }
  }
  f.h = ((v.w1 * f.x).colwise() + v.b1).array().tanh().matrix();
  f.scores.resize(static_cast<std::size_t>(total));
  for (long long i = 0; i < total; ++i) {
    f.scores[static_cast<std::size_t>(i)] = sigmoid(v.head_w.dot(f.h.col(i)) + v.head_b);
  }
  return f;
}

Vector backward_batch(const RewardParams& params, const BatchForward& f,
                      std::span<const double> dz) {
  const ModelConfig& c = params.config;
  const Views v = reward_views(c, params.theta);
  const Offsets o = offsets(c);
  Vector grad = Vector::Zero(o.total);
  MatrixMap g_embed(grad.data() + o.embed, c.embed_dim, c.vocab_size);
  MatrixMap g_w1(grad.data() + o.w1, c.hidden_dim, static_cast<long long>(c.window) * c.embed_dim);
  VectorMap g_b1(grad.data() + o.b1, c.hidden_dim);
  VectorMap g_head_w(grad.data() + o.head_w, c.hidden_dim);

  const long long total = f.h.cols();
  Matrix dh(c.hidden_dim, total);
  for (long long i = 0; i < total; ++i) {
    const double d = dz[static_cast<std::size_t>(i)];
    g_head_w += d * f.h.col(i);
    grad[o.head_b] += d;
    dh.col(i) = d * v.head_w;
  }
  const Matrix du = dh.cwiseProduct((1.0 - f.h.array().square()).matrix());
  g_w1.noalias() = du * f.x.transpose();
  g_b1 = du.rowwise().sum();
  const Matrix dx = v.w1.transpose() * du;
  long long col = 0;
  for (std::size_t s = 0; s < f.tokens.size(); ++s) {
    for (long long pos : f.seps[s]) {
      for (int slot = 0; slot < c.window; ++slot) {
        const long long idx = pos - c.window + 1 + slot;
        const int tok =
            (idx >= 0 && idx < static_cast<long long>(f.tokens[s].size())) ? f.tokens[s][idx] : 0;
        g_embed.col(tok) +=
            dx.col(col).segment(static_cast<long long>(slot) * c.embed_dim, c.embed_dim);
      }
      ++col;
    }
  }
  return grad;
}

RewardParams train_on_items(std::span<const StepLabeledItem> data, const ModelConfig& cfg,
                            const RewardTrainConfig& tc, std::uint64_t seed,
                            std::vector<double>* loss_curve) {
  if (data.empty()) throw std::invalid_argument("reward training: empty dataset");
  RewardParams params = init_reward_params(cfg, derive_seed(seed, {0}));
  seqmodel::AdamState adam = seqmodel::make_adam_state(params.theta.size());
  Rng shuffle_rng(derive_seed(seed, {1}));

  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  const long long batches_per_epoch =
      (static_cast<long long>(data.size()) + tc.batch_size - 1) / tc.batch_size;
  const long long total_updates = batches_per_epoch * tc.epochs;
  long long update = 0;
  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    double epoch_loss = 0.0;
    long long n_batches = 0;
    for (std::size_t start = 0; start < order.size(); start += tc.batch_size) {
      const std::size_t stop = std::min(order.size(), start + tc.batch_size);
      std::vector<StepLabeledItem> batch;
      batch.reserve(stop - start);
      for (std::size_t i = start; i < stop; ++i) batch.push_back(data[order[i]]);
      LossGrad lg = prm_loss_grad(params, batch);
      seqmodel::clip_grad_norm(lg.grad, tc.max_grad_norm);
      const double lr = seqmodel::warmup_lr(tc.lr, update, total_updates, tc.warmup_ratio);
      seqmodel::adam_step(params.theta, lg.grad, adam, lr);
      epoch_loss += lg.loss;
      ++n_batches;
      ++update;
    }
    if (loss_curve != nullptr) loss_curve->push_back(epoch_loss / static_cast<double>(n_batches));
  }
  return params;
}

}  // namespace

long long reward_param_count(const ModelConfig& cfg) {
  seqmodel::validate_config(cfg);
  return offsets(cfg).total;
}

RewardParams init_reward_params(const ModelConfig& cfg, std::uint64_t seed) {
  seqmodel::validate_config(cfg);
  const Offsets o = offsets(cfg);
  Vector theta = Vector::Zero(o.total);
  Rng rng(seed);
  auto fill_uniform = [&](long long begin, long long end, double scale) {
    for (long long i = begin; i < end; ++i) theta[i] = (2.0 * rng.next_unit() - 1.0) * scale;
  };
  fill_uniform(o.embed, o.w1, 1.0 / std::sqrt(static_cast<double>(cfg.embed_dim)));
  fill_uniform(o.w1, o.b1, 1.0 / std::sqrt(static_cast<double>(cfg.window * cfg.embed_dim)));
  fill_uniform(o.head_w, o.head_b, 1.0 / std::sqrt(static_cast<double>(cfg.hidden_dim)));
  return RewardParams{cfg, std::move(theta)};
}

LossGrad prm_loss_grad(const RewardParams& params, std::span<const StepLabeledItem> batch) {
  if (batch.empty()) throw std::invalid_argument("prm_loss_grad: empty batch");
  long long total_steps = 0;
  for (const StepLabeledItem& it : batch) {
    if (it.labels->size() != static_cast<std::size_t>(it.path->m())) {
      throw std::invalid_argument("prm_loss_grad: label count disagrees with step count");
    }
    for (int l : *it.labels) {
      if (l != 0 && l != 1) throw std::invalid_argument("prm_loss_grad: labels must be 0 or 1");
    }
    total_steps += it.path->m();
  }

  const BatchForward f = forward_batch(params, batch);
  const Views v = reward_views(params.config, params.theta);

  LossGrad out;
  std::vector<double> dz(f.scores.size());
  std::size_t col = 0;
  for (const StepLabeledItem& it : batch) {
    for (std::size_t j = 0; j < it.labels->size(); ++j, ++col) {
      const double logit = v.head_w.dot(f.h.col(static_cast<long long>(col))) + v.head_b;
      const int c = (*it.labels)[j];
      // BCE through log-sigmoid: -[c log(sig(z)) + (1-c) log(sig(-z))]
      out.loss -= (c == 1 ? log_sigmoid(logit) : log_sigmoid(-logit));
      dz[col] = (f.scores[col] - static_cast<double>(c)) / static_cast<double>(total_steps);
    }
  }
  out.loss /= static_cast<double>(total_steps);
  out.grad = backward_batch(params, f, dz);
  return out;
}

RewardParams train_prm(std::span<const StepLabeledItem> data, const ModelConfig& cfg,
                       const RewardTrainConfig& tc, std::uint64_t seed,
                       std::vector<double>* loss_curve) {
  return train_on_items(data, cfg, tc, seed, loss_curve);
}

RewardParams train_orm(std::span<const OutcomeItem> data, const ModelConfig& cfg,
                       const RewardTrainConfig& tc, std::uint64_t seed,
                       std::vector<double>* loss_curve) {
  if (data.empty()) throw std::invalid_argument("reward training: empty dataset");
  std::vector<std::vector<int>> labels;
  labels.reserve(data.size());
  std::vector<StepLabeledItem> items;
  items.reserve(data.size());
  for (const OutcomeItem& it : data) {
    labels.emplace_back(static_cast<std::size_t>(it.path->m()), it.outcome_correct ? 1 : 0);
  }
  for (std::size_t i = 0; i < data.size(); ++i) {
    items.push_back({data[i].question, data[i].path, &labels[i]});
  }
  return train_on_items(items, cfg, tc, seed, loss_curve);
}

PathScore score_path(const RewardParams& params, const task::Question& q,
                     const task::ReasoningPath& path) {
  if (path.m() < 1) throw std::invalid_argument("score_path: path must have at least one step");
  const std::vector<int> dummy(static_cast<std::size_t>(path.m()), 0);
  const StepLabeledItem item{&q, &path, &dummy};
  const BatchForward f = forward_batch(params, std::span(&item, 1));
  PathScore out;
  out.step_scores = f.scores;
  out.r = std::accumulate(out.step_scores.begin(), out.step_scores.end(), 0.0) /
          static_cast<double>(out.step_scores.size());
  return out;
}

double orm_score(const RewardParams& params, const task::Question& q,
                 const task::ReasoningPath& path) {
  return score_path(params, q, path).r;
}

double eval_reward_model(const RewardParams& params, std::span<const StepLabeledItem> eval_set,
                         double threshold) {
  std::vector<int> predictions;
  std::vector<int> labels;
  for (const StepLabeledItem& it : eval_set) {
    const PathScore s = score_path(params, *it.question, *it.path);
    for (std::size_t j = 0; j < s.step_scores.size(); ++j) {
      predictions.push_back(s.step_scores[j] > threshold ? 1 : 0);
      labels.push_back((*it.labels)[j]);
    }
  }
  return step_accuracy(predictions, labels);
}

double step_accuracy(std::span<const int> predictions, std::span<const int> labels) {
  if (predictions.size() != labels.size() || predictions.empty()) {
    throw std::invalid_argument("step_accuracy: size mismatch or empty input");
  }
  long long hits = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) hits += predictions[i] == labels[i];
  return static_cast<double>(hits) / static_cast<double>(predictions.size());
}

}  // namespace sipf::reward
