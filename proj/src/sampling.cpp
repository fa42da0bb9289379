#include "sipf/sampling.hpp"

#include "sipf/parallel.hpp"
#include "sipf/rng.hpp"

#include <nlohmann/json.hpp>

#include <chrono>
#include <cmath>
#include <fstream>
#include <stdexcept>
#include <unordered_set>

namespace sipf::sampling {
namespace {

void validate(const SampleConfig& cfg) {
  if (cfg.temperature <= 0.0) throw std::invalid_argument("sample config: temperature must be > 0");
  if (cfg.n_pos_target < 1 || cfg.n_neg_target < 1) {
    throw std::invalid_argument("sample config: targets must be >= 1");
  }
  if (cfg.halving != 0.5 && cfg.halving != 0.25) {
    throw std::invalid_argument("sample config: halving factor must be 1/2 or 1/4");
  }
  if (cfg.max_attempts < 1 || cfg.max_len < 1) {
    throw std::invalid_argument("sample config: max_attempts and max_len must be >= 1");
  }
}

std::string step_key(const std::vector<std::string>& steps) {
  std::string key;
  for (const auto& s : steps) {
    key += s;
    key.push_back('\x1f');
  }
  return key;
}

}  // namespace

SampleConfig targets_for_round(const SampleConfig& round0, int k) {
  if (k < 0) throw std::invalid_argument("round index must be >= 0");
  validate(round0);
  SampleConfig cfg = round0;
  int pos = round0.n_pos_target;
  int neg = round0.n_neg_target;
  for (int i = 0; i < k; ++i) {
    pos = std::max(1, static_cast<int>(std::ceil(pos * cfg.halving)));
    neg = std::max(1, static_cast<int>(std::ceil(neg * cfg.halving)));
  }
  cfg.n_pos_target = pos;
  cfg.n_neg_target = neg;
  cfg.round_index = k;
  return cfg;
}

std::vector<OutcomeLabeledPath> sample_paths(const seqmodel::PolicyParams& params,
                                             const task::Question& q, const SampleConfig& cfg,
                                             std::uint64_t seed, QuestionStats* stats) {
  validate(cfg);
  if (!params.theta.allFinite()) throw std::invalid_argument("sample_paths: non-finite policy");

  const auto start_time = std::chrono::steady_clock::now();
  QuestionStats st;
  st.question_id = q.id;
  std::vector<OutcomeLabeledPath> out;
  const int max_attempts = cfg.greedy ? 1 : cfg.max_attempts;

  for (int attempt = 0; attempt < max_attempts; ++attempt) {
    if (st.positives >= cfg.n_pos_target && st.negatives >= cfg.n_neg_target) break;
    const auto elapsed = std::chrono::duration_cast<std::chrono::milliseconds>(
                             std::chrono::steady_clock::now() - start_time)
                             .count();
    if (elapsed > cfg.time_budget_ms) {
      st.truncated_by_budget = true;
      break;
    }
    st.attempts += 1;
    TokenSeq toks =
        cfg.greedy
            ? seqmodel::greedy_decode(params, q.text_tokens, cfg.max_len)
            : seqmodel::sample(params, q.text_tokens, cfg.temperature, cfg.max_len,
                               derive_seed(seed, {static_cast<std::uint64_t>(q.id),
                                                  static_cast<std::uint64_t>(attempt)}));
    task::ReasoningPath path = task::decode(toks);
    if (path.m() < 1) continue;  // no dataset entry without at least one step
    const bool correct = task::check_answer(q, path.final_answer);
    if (correct && st.positives >= cfg.n_pos_target) continue;
    if (!correct && st.negatives >= cfg.n_neg_target) continue;
    (correct ? st.positives : st.negatives) += 1;
    out.push_back(OutcomeLabeledPath{q.id, std::move(path), correct, cfg.round_index,
                                     std::move(toks)});
  }
  st.underfilled = st.positives < cfg.n_pos_target || st.negatives < cfg.n_neg_target;
  if (stats != nullptr) *stats = st;
  return out;
}

std::vector<OutcomeLabeledPath> dedup_paths(std::span<const OutcomeLabeledPath> paths) {
  std::vector<OutcomeLabeledPath> out;
  std::unordered_set<std::string> seen;
  for (const OutcomeLabeledPath& p : paths) {
    if (seen.insert(std::to_string(p.question_id) + '\x1e' + step_key(p.path.steps)).second) {
      out.push_back(p);
    }
  }
  return out;
}

RoundCollection collect_round(const seqmodel::PolicyParams& params,
                              std::span<const task::Question> questions, const SampleConfig& cfg,
                              std::uint64_t seed, int n_threads) {
  validate(cfg);
  std::vector<std::vector<OutcomeLabeledPath>> per_question(questions.size());
  std::vector<QuestionStats> stats(questions.size());
  parallel_for(questions.size(), n_threads, [&](std::size_t i) {
    per_question[i] = dedup_paths(sample_paths(
        params, questions[i], cfg, derive_seed(seed, {static_cast<std::uint64_t>(i)}),
        &stats[i]));
  });
  RoundCollection out;
  out.stats = std::move(stats);
  for (auto& bucket : per_question) {
    for (auto& p : bucket) out.paths.push_back(std::move(p));
  }
  return out;
}

void write_sampled_jsonl(const std::string& path, std::span<const OutcomeLabeledPath> paths) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  for (const OutcomeLabeledPath& p : paths) {
    nlohmann::json j = {
        {"question_id", p.question_id},
        {"steps", p.path.steps},
        {"answer", nullptr},
        {"outcome_correct", p.outcome_correct},
        {"round", p.source_round},
        {"raw_tokens", p.raw_tokens},
    };
    if (p.path.final_answer.has_value()) j["answer"] = *p.path.final_answer;
    out << j.dump() << '\n';
  }
}

std::vector<OutcomeLabeledPath> read_sampled_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open for reading: " + path);
  std::vector<OutcomeLabeledPath> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const nlohmann::json j = nlohmann::json::parse(line);
    OutcomeLabeledPath p;
    p.question_id = j.at("question_id").get<long long>();
    p.path.steps = j.at("steps").get<std::vector<std::string>>();
    if (!j.at("answer").is_null()) p.path.final_answer = j.at("answer").get<long long>();
    p.outcome_correct = j.at("outcome_correct").get<bool>();
    p.source_round = j.at("round").get<int>();
    p.raw_tokens = j.at("raw_tokens").get<TokenSeq>();
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace sipf::sampling
