#include "sipf/simulate.hpp"

#include "sipf/parallel.hpp"
#include "sipf/rng.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <fstream>
#include <stdexcept>
#include <unordered_map>

namespace sipf::simulate {
namespace {

/// Per-path seed material from content, so labels are invariant to the order
/// in which paths are processed.
std::uint64_t path_content_seed(const sampling::OutcomeLabeledPath& p) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&](std::uint64_t v) {
    h ^= v;
    h *= 0x100000001b3ULL;
  };
  mix(static_cast<std::uint64_t>(p.question_id));
  for (const std::string& s : p.path.steps) {
    for (unsigned char c : s) mix(c);
    mix(0x1f);
  }
  return h;
}

/// The running value a prefix claims: the last step's stated result, or the
/// start value for an empty prefix. Unparseable last step yields no value.
std::optional<long long> claimed_value(const task::Question& q,
                                       std::span<const std::string> prefix) {
  if (prefix.empty()) return q.start_value;
  long long x = 0, z = 0;
  int y = 0;
  task::Op op{};
  if (!task::parse_step(prefix.back(), x, op, y, z)) return std::nullopt;
  return z;
}

}  // namespace

void validate(const SimConfig& cfg) {
  if (cfg.k < 1) throw std::invalid_argument("sim config: k must be >= 1");
  if (cfg.delta < 0 || cfg.delta >= cfg.k) {
    throw std::invalid_argument("sim config: delta must satisfy 0 <= delta < k");
  }
  if (cfg.temperature <= 0.0) throw std::invalid_argument("sim config: temperature must be > 0");
  if (cfg.simulator == Simulator::policy && cfg.policy == nullptr) {
    throw std::invalid_argument("sim config: policy simulator needs policy parameters");
  }
}

int simulate_step(const SimConfig& cfg, const task::Question& q,
                  std::span<const std::string> prefix_steps, std::uint64_t seed) {
  validate(cfg);
  if (cfg.simulator == Simulator::oracle) {
    const std::optional<long long> v = claimed_value(q, prefix_steps);
    if (!v.has_value()) return 0;
    long long value = *v;
    for (std::size_t j = prefix_steps.size(); j < q.ops.size(); ++j) {
      value = task::apply_op(value, q.ops[j].first, q.ops[j].second);
    }
    return value == q.gold_answer ? cfg.k : 0;
  }

  const TokenSeq prompt = task::encode_prefix(q, prefix_steps);
  int count = 0;
  for (int t = 0; t < cfg.k; ++t) {
    const TokenSeq toks =
        seqmodel::sample(*cfg.policy, prompt, cfg.temperature, cfg.max_len,
                         derive_seed(seed, {static_cast<std::uint64_t>(t)}));
    const task::ReasoningPath rollout = task::decode(toks);
    count += task::check_answer(q, rollout.final_answer) ? 1 : 0;
  }
  return count;
}

bool label_from_count(int count, int delta) { return count > delta; }

LabeledPath label_path(const SimConfig& cfg, const task::Question& q,
                       const task::ReasoningPath& path, std::uint64_t seed) {
  validate(cfg);
  if (path.m() < 1) throw std::invalid_argument("label_path: path must have at least one step");
  LabeledPath out;
  out.question_id = q.id;
  out.path = path;
  out.step_labels.reserve(static_cast<std::size_t>(path.m()));
  out.correct_counts.reserve(static_cast<std::size_t>(path.m()));
  for (int j = 0; j < path.m(); ++j) {
    const std::span<const std::string> prefix(path.steps.data(), static_cast<std::size_t>(j + 1));
    const int count =
        simulate_step(cfg, q, prefix, derive_seed(seed, {static_cast<std::uint64_t>(j)}));
    out.correct_counts.push_back(count);
    out.step_labels.push_back(label_from_count(count, cfg.delta) ? 1 : 0);
  }
  return out;
}

std::vector<LabeledPath> build_simulated_dataset(
    const SimConfig& cfg, std::span<const sampling::OutcomeLabeledPath> sampled,
    std::span<const task::Question> questions, double fraction, std::uint64_t seed,
    int n_threads) {
  validate(cfg);
  if (sampled.empty()) throw std::invalid_argument("build_simulated_dataset: empty input");
  if (fraction <= 0.0 || fraction > 1.0) {
    throw std::invalid_argument("build_simulated_dataset: fraction must lie in (0, 1]");
  }
  std::unordered_map<long long, const task::Question*> index;
  for (const task::Question& q : questions) index[q.id] = &q;

  const std::size_t n_labeled = static_cast<std::size_t>(
      std::ceil(fraction * static_cast<double>(sampled.size())));
  std::vector<std::size_t> order(sampled.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(derive_seed(seed, {0}));
  rng.shuffle(order);
  order.resize(n_labeled);

  std::vector<LabeledPath> out(n_labeled);
  parallel_for(n_labeled, n_threads, [&](std::size_t i) {
    const sampling::OutcomeLabeledPath& p = sampled[order[i]];
    const auto it = index.find(p.question_id);
    if (it == index.end()) {
      throw std::invalid_argument("build_simulated_dataset: unknown question id " +
                                  std::to_string(p.question_id));
    }
    out[i] = label_path(cfg, *it->second, p.path, derive_seed(seed, {1, path_content_seed(p)}));
  });
  return out;
}

void write_simulated_jsonl(const std::string& path, std::span<const LabeledPath> paths,
                           const SimConfig& cfg) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  for (const LabeledPath& p : paths) {
    const nlohmann::json j = {
        {"question_id", p.question_id}, {"steps", p.path.steps},
        {"labels", p.step_labels},      {"counts", p.correct_counts},
        {"K", cfg.k},                   {"delta", cfg.delta},
    };
    out << j.dump() << '\n';
  }
}

std::vector<LabeledPath> read_simulated_jsonl(const std::string& path, int* k, int* delta) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open for reading: " + path);
  std::vector<LabeledPath> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const nlohmann::json j = nlohmann::json::parse(line);
    LabeledPath p;
    p.question_id = j.at("question_id").get<long long>();
    p.path.steps = j.at("steps").get<std::vector<std::string>>();
    p.step_labels = j.at("labels").get<std::vector<int>>();
    p.correct_counts = j.at("counts").get<std::vector<int>>();
    if (k != nullptr) *k = j.at("K").get<int>();
    if (delta != nullptr) *delta = j.at("delta").get<int>();
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace sipf::simulate
