#include "sipf/seqmodel.hpp"

#include "sipf/rng.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <stdexcept>

namespace sipf::seqmodel {
namespace {

struct Offsets {
  long long embed, w1, b1, w2, b2, total;
};

Offsets offsets(const ModelConfig& c) {
  Offsets o{};
  o.embed = 0;
  o.w1 = o.embed + static_cast<long long>(c.embed_dim) * c.vocab_size;
  o.b1 = o.w1 + static_cast<long long>(c.hidden_dim) * c.window * c.embed_dim;
  o.w2 = o.b1 + c.hidden_dim;
  o.b2 = o.w2 + static_cast<long long>(c.vocab_size) * c.hidden_dim;
  o.total = o.b2 + c.vocab_size;
  return o;
}

void check_tokens(std::span<const int> toks, int vocab) {
  for (int t : toks) {
    if (t < 0 || t >= vocab) throw std::invalid_argument("token id outside the vocabulary");
  }
}

/// Column-wise stable log-sum-exp.
double lse(const Eigen::Ref<const Vector>& z) {
  const double m = z.maxCoeff();
  return m + std::log((z.array() - m).exp().sum());
}

}  // namespace

long long param_count(const ModelConfig& c) {
  validate_config(c);
  return offsets(c).total;
}

void validate_config(const ModelConfig& c) {
  if (c.window < 1 || c.embed_dim < 1 || c.hidden_dim < 1 || c.vocab_size < 2) {
    throw std::invalid_argument("model config dimensions must be positive");
  }
}

ParamViews views(const ModelConfig& c, const Vector& theta) {
  const Offsets o = offsets(c);
  if (theta.size() != o.total) throw std::invalid_argument("parameter vector size mismatch");
  const double* p = theta.data();
  return ParamViews{
      ConstMatrixMap(p + o.embed, c.embed_dim, c.vocab_size),
      ConstMatrixMap(p + o.w1, c.hidden_dim, static_cast<long long>(c.window) * c.embed_dim),
      ConstVectorMap(p + o.b1, c.hidden_dim),
      ConstMatrixMap(p + o.w2, c.vocab_size, c.hidden_dim),
      ConstVectorMap(p + o.b2, c.vocab_size),
  };
}

PolicyParams init_params(const ModelConfig& c, std::uint64_t seed) {
  validate_config(c);
  const Offsets o = offsets(c);
  Vector theta = Vector::Zero(o.total);
  Rng rng(seed);
  auto fill_uniform = [&](long long begin, long long end, double scale) {
    for (long long i = begin; i < end; ++i) theta[i] = (2.0 * rng.next_unit() - 1.0) * scale;
  };
  fill_uniform(o.embed, o.w1, 1.0 / std::sqrt(static_cast<double>(c.embed_dim)));
  fill_uniform(o.w1, o.b1, 1.0 / std::sqrt(static_cast<double>(c.window * c.embed_dim)));
  // b1 stays zero
  fill_uniform(o.w2, o.b2, 1.0 / std::sqrt(static_cast<double>(c.hidden_dim)));
  // b2 stays zero
  return PolicyParams{c, std::move(theta)};
}

void fill_window(const ModelConfig& c, ConstMatrixMap embed, std::span<const int> seq,
                 long long end_inclusive, double* out) {
  for (int slot = 0; slot < c.window; ++slot) {
    const long long idx = end_inclusive - c.window + 1 + slot;
    const int tok = (idx >= 0 && idx < static_cast<long long>(seq.size())) ? seq[idx] : 0;
    std::memcpy(out + static_cast<long long>(slot) * c.embed_dim, embed.col(tok).data(),
                sizeof(double) * c.embed_dim);
  }
}

Vector next_token_logits(const ModelConfig& c, const ParamViews& v, std::span<const int> seq) {
  Vector x(static_cast<long long>(c.window) * c.embed_dim);
  fill_window(c, v.embed, seq, static_cast<long long>(seq.size()) - 1, x.data());
  const Vector h = ((v.w1 * x) + v.b1).array().tanh().matrix();
  return (v.w2 * h) + v.b2;
}

SeqLogProb seq_logprob(const PolicyParams& params, const TokenSeq& prompt,
                       const TokenSeq& completion) {
  const ModelConfig& c = params.config;
  if (completion.empty()) throw std::invalid_argument("completion must be non-empty");
  check_tokens(prompt, c.vocab_size);
  check_tokens(completion, c.vocab_size);

  TokenSeq full = prompt;
  full.insert(full.end(), completion.begin(), completion.end());
  const long long base = static_cast<long long>(prompt.size());
  const long long len = static_cast<long long>(completion.size());
  const ParamViews v = views(c, params.theta);

  Matrix x(static_cast<long long>(c.window) * c.embed_dim, len);
  for (long long i = 0; i < len; ++i) {
    fill_window(c, v.embed, full, base + i - 1, x.col(i).data());
  }
  const Matrix h = ((v.w1 * x).colwise() + v.b1).array().tanh().matrix();
  const Matrix z = ((v.w2 * h).colwise() + v.b2);

  SeqLogProb lp;
  lp.per_token.resize(static_cast<std::size_t>(len));
  for (long long i = 0; i < len; ++i) {
    lp.per_token[static_cast<std::size_t>(i)] =
        z(completion[static_cast<std::size_t>(i)], i) - lse(z.col(i));
  }
  for (double t : lp.per_token) lp.total += t;
  lp.mean = lp.total / static_cast<double>(len);
  return lp;
}

std::pair<SeqLogProb, Vector> seq_logprob_grad(const PolicyParams& params,
                                               const TokenSeq& prompt,
                                               const TokenSeq& completion) {
  const ModelConfig& c = params.config;
  if (completion.empty()) throw std::invalid_argument("completion must be non-empty");
  check_tokens(prompt, c.vocab_size);
  check_tokens(completion, c.vocab_size);

  TokenSeq full = prompt;
  full.insert(full.end(), completion.begin(), completion.end());
  const long long base = static_cast<long long>(prompt.size());
  const long long len = static_cast<long long>(completion.size());
  const ParamViews v = views(c, params.theta);

  Matrix x(static_cast<long long>(c.window) * c.embed_dim, len);
  for (long long i = 0; i < len; ++i) {
    fill_window(c, v.embed, full, base + i - 1, x.col(i).data());
  }
  Matrix h = ((v.w1 * x).colwise() + v.b1).array().tanh().matrix();
  Matrix z = ((v.w2 * h).colwise() + v.b2);

  SeqLogProb lp;
  lp.per_token.resize(static_cast<std::size_t>(len));
  Matrix dz(c.vocab_size, len);  // d(mean logprob)/d(logits)
  for (long long i = 0; i < len; ++i) {
    const double norm = lse(z.col(i));
    const int target = completion[static_cast<std::size_t>(i)];
    lp.per_token[static_cast<std::size_t>(i)] = z(target, i) - norm;
    dz.col(i) = (-(z.col(i).array() - norm).exp()).matrix() / static_cast<double>(len);
    dz(target, i) += 1.0 / static_cast<double>(len);
  }
  for (double t : lp.per_token) lp.total += t;
  lp.mean = lp.total / static_cast<double>(len);

  const Offsets o = offsets(c);
  Vector grad = Vector::Zero(o.total);
  MatrixMap g_embed(grad.data() + o.embed, c.embed_dim, c.vocab_size);
  MatrixMap g_w1(grad.data() + o.w1, c.hidden_dim, static_cast<long long>(c.window) * c.embed_dim);
  VectorMap g_b1(grad.data() + o.b1, c.hidden_dim);
  MatrixMap g_w2(grad.data() + o.w2, c.vocab_size, c.hidden_dim);
  VectorMap g_b2(grad.data() + o.b2, c.vocab_size);

  g_w2.noalias() = dz * h.transpose();
  g_b2 = dz.rowwise().sum();
  const Matrix du = (v.w2.transpose() * dz).cwiseProduct((1.0 - h.array().square()).matrix());
  g_w1.noalias() = du * x.transpose();
  g_b1 = du.rowwise().sum();
  const Matrix dx = v.w1.transpose() * du;
  for (long long i = 0; i < len; ++i) {
    for (int slot = 0; slot < c.window; ++slot) {
      const long long idx = base + i - 1 - c.window + 1 + slot;
      const int tok = (idx >= 0 && idx < static_cast<long long>(full.size())) ? full[idx] : 0;
      g_embed.col(tok) += dx.col(i).segment(static_cast<long long>(slot) * c.embed_dim, c.embed_dim);
    }
  }
  return {std::move(lp), std::move(grad)};
}

TokenSeq sample(const PolicyParams& params, const TokenSeq& prompt, double temperature,
                int max_len, std::uint64_t seed) {
  const ModelConfig& c = params.config;
  if (temperature <= 0.0) throw std::invalid_argument("temperature must be > 0");
  if (max_len < 1) throw std::invalid_argument("max_len must be >= 1");
  check_tokens(prompt, c.vocab_size);
  const ParamViews v = views(c, params.theta);
  Rng rng(seed);

  TokenSeq seq = prompt;
  TokenSeq completion;
  for (int step = 0; step < max_len; ++step) {
    Vector z = next_token_logits(c, v, seq) / temperature;
    z[0] = -std::numeric_limits<double>::infinity();  // never emit padding
    const double m = z.maxCoeff();
    Vector p = (z.array() - m).exp().matrix();
    p /= p.sum();
    const double u = rng.next_unit();
    double cum = 0.0;
    int tok = c.vocab_size - 1;
    for (int t = 1; t < c.vocab_size; ++t) {
      cum += p[t];
      if (u < cum) {
        tok = t;
        break;
      }
    }
    seq.push_back(tok);
    completion.push_back(tok);
    if (tok == c.vocab_size - 1) break;  // end-of-sequence sits at the top id
  }
  return completion;
}

TokenSeq greedy_decode(const PolicyParams& params, const TokenSeq& prompt, int max_len) {
  const ModelConfig& c = params.config;
  if (max_len < 1) throw std::invalid_argument("max_len must be >= 1");
  check_tokens(prompt, c.vocab_size);
  const ParamViews v = views(c, params.theta);

  TokenSeq seq = prompt;
  TokenSeq completion;
  for (int step = 0; step < max_len; ++step) {
    const Vector z = next_token_logits(c, v, seq);
    int tok = 1;
    for (int t = 2; t < c.vocab_size; ++t) {
      if (z[t] > z[tok]) tok = t;
    }
    seq.push_back(tok);
    completion.push_back(tok);
    if (tok == c.vocab_size - 1) break;
  }
  return completion;
}

AdamState make_adam_state(long long n_params) {
  return AdamState{Vector::Zero(n_params), Vector::Zero(n_params), 0};
}

void adam_step(Vector& params, const Vector& grad, AdamState& state, double lr,
               const AdamConfig& cfg) {
  if (params.size() != grad.size() || params.size() != state.m.size()) {
    throw std::invalid_argument("adam_step: shape mismatch");
  }
  if (!grad.allFinite()) throw std::runtime_error("adam_step: non-finite gradient");
  state.step += 1;
  state.m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * grad;
  state.v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * grad.cwiseProduct(grad);
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  const Eigen::ArrayXd m_hat = state.m.array() / bc1;
  const Eigen::ArrayXd v_hat = state.v.array() / bc2;
  params.array() -= lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * params.array());
  if (!params.allFinite()) throw std::runtime_error("adam_step: parameters became non-finite");
}

double clip_grad_norm(Vector& grad, double max_norm) {
  const double norm = grad.norm();
  if (norm > max_norm && norm > 0.0) grad *= max_norm / norm;
  return norm;
}

double warmup_lr(double base_lr, long long update_index, long long total_updates, double ratio) {
  const long long warm = std::max<long long>(
      1, static_cast<long long>(std::ceil(ratio * static_cast<double>(total_updates))));
  if (update_index >= warm) return base_lr;
  return base_lr * static_cast<double>(update_index + 1) / static_cast<double>(warm);
}

void save_checkpoint(const std::string& path, const ModelConfig& c, const Vector& theta,
                     const std::string& kind) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  const nlohmann::json header = {
      {"schema", 1},         {"kind", kind},
      {"window", c.window},  {"embed_dim", c.embed_dim},
      {"hidden_dim", c.hidden_dim}, {"vocab_size", c.vocab_size},
      {"count", theta.size()},
  };
  out << header.dump() << '\n';
  out.write(reinterpret_cast<const char*>(theta.data()),
            static_cast<std::streamsize>(sizeof(double) * theta.size()));
}

std::pair<ModelConfig, Vector> load_checkpoint(const std::string& path, std::string* kind) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open for reading: " + path);
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("checkpoint missing header: " + path);
  const nlohmann::json header = nlohmann::json::parse(line);
  ModelConfig c;
  c.window = header.at("window").get<int>();
  c.embed_dim = header.at("embed_dim").get<int>();
  c.hidden_dim = header.at("hidden_dim").get<int>();
  c.vocab_size = header.at("vocab_size").get<int>();
  const long long count = header.at("count").get<long long>();
  if (kind != nullptr) *kind = header.at("kind").get<std::string>();
  Vector theta(count);
  in.read(reinterpret_cast<char*>(theta.data()),
          static_cast<std::streamsize>(sizeof(double) * count));
  if (in.gcount() != static_cast<std::streamsize>(sizeof(double) * count)) {
    throw std::runtime_error("checkpoint truncated: " + path);
  }
  return {c, std::move(theta)};
}

std::uint64_t params_hash(const Vector& theta) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  const auto* bytes = reinterpret_cast<const unsigned char*>(theta.data());
  for (std::size_t i = 0; i < sizeof(double) * static_cast<std::size_t>(theta.size()); ++i) {
    h ^= bytes[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace sipf::seqmodel
