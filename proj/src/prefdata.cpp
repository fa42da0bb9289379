#include "sipf/prefdata.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <fstream>
#include <limits>
#include <stdexcept>

namespace sipf::prefdata {

std::vector<PreferencePair> build_pairs(std::span<const ScoredPath> scored, double eta,
                                        int max_pairs_per_question,
                                        [[maybe_unused]] std::uint64_t seed, int round) {
  if (eta < 0.0) throw std::invalid_argument("build_pairs: eta must be >= 0");
  if (max_pairs_per_question < 1) {
    throw std::invalid_argument("build_pairs: max_pairs_per_question must be >= 1");
  }

  // Group indices per question, keeping first-seen question order.
  std::vector<long long> question_order;
  std::map<long long, std::vector<std::size_t>> buckets;
  for (std::size_t i = 0; i < scored.size(); ++i) {
    auto [it, inserted] = buckets.try_emplace(scored[i].question_id);
    if (inserted) question_order.push_back(scored[i].question_id);
    it->second.push_back(i);
  }

  std::vector<PreferencePair> out;
  for (long long qid : question_order) {
    std::vector<std::size_t>& idx = buckets[qid];
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
      return scored[a].r > scored[b].r;  // ties keep first-seen order
    });
    std::size_t lo = 0;
    std::size_t hi = idx.size();
    int emitted = 0;
    while (lo + 1 < hi && emitted < max_pairs_per_question) {
      const ScoredPath& best = scored[idx[lo]];
      const ScoredPath& worst = scored[idx[hi - 1]];
      if (best.r - worst.r < eta) break;  // inner pairs only shrink the gap
      if (best.path.steps == worst.path.steps) break;
      out.push_back(PreferencePair{qid, best.path, worst.path, best.r, worst.r, eta, round});
      ++lo;
      --hi;
      ++emitted;
    }
  }
  return out;
}

PrefStats pref_stats(std::span<const PreferencePair> pairs) {
  PrefStats s;
  s.n_pairs = static_cast<long long>(pairs.size());
  if (pairs.empty()) return s;
  s.margin_min = std::numeric_limits<double>::infinity();
  s.margin_max = -std::numeric_limits<double>::infinity();
  double sum = 0.0;
  for (const PreferencePair& p : pairs) {
    const double margin = p.r_w - p.r_l;
    s.margin_min = std::min(s.margin_min, margin);
    s.margin_max = std::max(s.margin_max, margin);
    sum += margin;
    s.pairs_per_round[p.round] += 1;
    s.pairs_per_question[p.question_id] += 1;
  }
  s.margin_mean = sum / static_cast<double>(pairs.size());
  s.n_questions = static_cast<long long>(s.pairs_per_question.size());
  return s;
}

void write_pref_jsonl(const std::string& path, std::span<const PreferencePair> pairs) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  for (const PreferencePair& p : pairs) {
    const nlohmann::json j = {
        {"question_id", p.question_id},
        {"chosen_steps", p.chosen.steps},
        {"rejected_steps", p.rejected.steps},
        {"r_w", p.r_w},
        {"r_l", p.r_l},
        {"eta", p.eta},
        {"round", p.round},
    };
    out << j.dump() << '\n';
  }
}

std::vector<PreferencePair> read_pref_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open for reading: " + path);
  std::vector<PreferencePair> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const nlohmann::json j = nlohmann::json::parse(line);
    PreferencePair p;
    p.question_id = j.at("question_id").get<long long>();
    p.chosen.steps = j.at("chosen_steps").get<std::vector<std::string>>();
    p.rejected.steps = j.at("rejected_steps").get<std::vector<std::string>>();
    p.r_w = j.at("r_w").get<double>();
    p.r_l = j.at("r_l").get<double>();
    p.eta = j.at("eta").get<double>();
    p.round = j.at("round").get<int>();
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace sipf::prefdata
