#include "sipf/evalreport.hpp"

#include "sipf/parallel.hpp"

#include <nlohmann/json.hpp>

#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <stdexcept>

namespace sipf::evalreport {
namespace {

namespace fs = std::filesystem;

std::string fmt_double(double v) {
  if (std::isnan(v)) return "";
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);  // shortest round-trip form
  return std::string(buf, res.ptr);
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  for (char c : line) {
    if (c == ',') {
      cells.push_back(cell);
      cell.clear();
    } else {
      cell.push_back(c);
    }
  }
  cells.push_back(cell);
  return cells;
}

std::map<std::string, std::string> read_kv_file(const std::string& path) {
  std::map<std::string, std::string> kv;
  std::ifstream in(path);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) continue;
    std::string key = line.substr(0, eq);
    std::string value = line.substr(eq + 1);
    auto trim = [](std::string& s) {
      while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.erase(s.begin());
      while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.pop_back();
    };
    trim(key);
    trim(value);
    kv[key] = value;
  }
  return kv;
}

struct RunArtifacts {
  std::string dir;
  std::vector<MetricsRecord> metrics;
  std::map<std::string, std::string> config;
  bool has_reward_eval = false;
  std::vector<std::array<std::string, 3>> reward_rows;  // kind, accuracy, n_steps
};

void load_run(const fs::path& dir, std::vector<RunArtifacts>& runs,
              std::vector<std::string>& missing) {
  RunArtifacts run;
  run.dir = dir.string();
  const fs::path metrics = dir / "metrics.csv";
  if (fs::exists(metrics)) {
    run.metrics = read_metrics_csv(metrics.string());
  } else {
    missing.push_back(run.dir + ": metrics.csv missing");
  }
  const fs::path config = dir / "config.txt";
  if (fs::exists(config)) {
    run.config = read_kv_file(config.string());
  } else {
    missing.push_back(run.dir + ": config.txt missing");
  }
  const fs::path reward = dir / "reward_eval.csv";
  if (fs::exists(reward)) {
    run.has_reward_eval = true;
    std::ifstream in(reward.string());
    std::string line;
    std::getline(in, line);  // header
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto cells = split_csv_line(line);
      if (cells.size() == 3) run.reward_rows.push_back({cells[0], cells[1], cells[2]});
    }
  }
  if (!run.metrics.empty() || !run.config.empty() || run.has_reward_eval) {
    runs.push_back(std::move(run));
  }
}

}  // namespace

void write_metrics_csv(const std::string& path, std::span<const MetricsRecord> rows) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out << kMetricsHeader << '\n';
  for (const MetricsRecord& r : rows) {
    out << r.run_id << ',' << r.preset << ',' << r.round << ',' << r.epoch << ','
        << fmt_double(r.train_loss) << ',' << fmt_double(r.chosen_mean_prob) << ','
        << fmt_double(r.rejected_mean_prob) << ',' << fmt_double(r.test_accuracy) << ','
        << (r.dataset_size < 0 ? std::string() : std::to_string(r.dataset_size)) << ','
        << (r.pair_count < 0 ? std::string() : std::to_string(r.pair_count)) << ','
        << (r.wall_ms < 0 ? std::string() : std::to_string(r.wall_ms)) << ',' << r.seed << '\n';
  }
}

std::vector<MetricsRecord> read_metrics_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open for reading: " + path);
  std::string line;
  if (!std::getline(in, line)) return {};
  if (line != kMetricsHeader) throw std::runtime_error("metrics.csv: unexpected header in " + path);
  std::vector<MetricsRecord> rows;
  auto to_double = [](const std::string& s) {
    return s.empty() ? std::numeric_limits<double>::quiet_NaN() : std::stod(s);
  };
  auto to_count = [](const std::string& s) { return s.empty() ? -1LL : std::stoll(s); };
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != 12) throw std::runtime_error("metrics.csv: malformed row in " + path);
    MetricsRecord r;
    r.run_id = cells[0];
    r.preset = cells[1];
    r.round = std::stoi(cells[2]);
    r.epoch = std::stoi(cells[3]);
    r.train_loss = to_double(cells[4]);
    r.chosen_mean_prob = to_double(cells[5]);
    r.rejected_mean_prob = to_double(cells[6]);
    r.test_accuracy = to_double(cells[7]);
    r.dataset_size = to_count(cells[8]);
    r.pair_count = to_count(cells[9]);
    r.wall_ms = to_count(cells[10]);
    r.seed = std::stoull(cells[11]);
    rows.push_back(std::move(r));
  }
  return rows;
}

EvalResult eval_accuracy(const seqmodel::PolicyParams& params,
                         std::span<const task::Question> questions, int max_len, int n_threads) {
  return eval_accuracy(
      [&](const task::Question& q) {
        return task::decode(seqmodel::greedy_decode(params, q.text_tokens, max_len));
      },
      questions, n_threads);
}

EvalResult eval_accuracy(const std::function<task::ReasoningPath(const task::Question&)>& decoder,
                         std::span<const task::Question> questions, int n_threads) {
  EvalResult out;
  out.n_questions = static_cast<int>(questions.size());
  if (questions.empty()) return out;
  std::vector<int> correct(questions.size(), 0);
  std::vector<long long> valid(questions.size(), 0);
  std::vector<long long> emitted(questions.size(), 0);
  parallel_for(questions.size(), n_threads, [&](std::size_t i) {
    const task::ReasoningPath path = decoder(questions[i]);
    correct[i] = task::check_answer(questions[i], path.final_answer) ? 1 : 0;
    emitted[i] = path.m();
    for (int j = 0; j < path.m(); ++j) {
      const std::span<const std::string> prefix(path.steps.data(), static_cast<std::size_t>(j));
      valid[i] += task::check_step(questions[i], prefix, path.steps[static_cast<std::size_t>(j)]);
    }
  });
  long long hits = 0, valid_total = 0, emitted_total = 0;
  for (std::size_t i = 0; i < questions.size(); ++i) {
    hits += correct[i];
    valid_total += valid[i];
    emitted_total += emitted[i];
  }
  out.accuracy = static_cast<double>(hits) / static_cast<double>(questions.size());
  out.valid_step_fraction =
      emitted_total == 0 ? 0.0
                         : static_cast<double>(valid_total) / static_cast<double>(emitted_total);
  return out;
}

void write_report(const std::string& dir) {
  const fs::path root(dir);
  std::vector<RunArtifacts> runs;
  std::vector<std::string> missing;
  if (!fs::exists(root)) {
    missing.push_back(dir + ": directory missing");
  } else {
    if (fs::exists(root / "metrics.csv") || fs::exists(root / "config.txt")) {
      load_run(root, runs, missing);
    }
    std::vector<fs::path> children;
    for (const auto& entry : fs::directory_iterator(root)) {
      if (entry.is_directory() && entry.path().filename() != "report") {
        children.push_back(entry.path());
      }
    }
    std::sort(children.begin(), children.end());
    for (const fs::path& child : children) {
      if (fs::exists(child / "metrics.csv") || fs::exists(child / "config.txt")) {
        load_run(child, runs, missing);
      }
    }
  }
  if (runs.empty()) missing.push_back(dir + ": no run artifacts found");

  const fs::path report = root / "report";
  fs::create_directories(report);

  std::ofstream curve((report / "iteration_curve.csv").string());
  curve << "run_id,preset,seed,beta,round,test_accuracy\n";
  std::ofstream counts((report / "data_counts.csv").string());
  counts << "run_id,preset,seed,round,dataset_size,pair_count\n";
  std::ofstream sweep((report / "or_weight_sweep.csv").string());
  sweep << "beta,run_id,round,test_accuracy\n";
  std::ofstream reward_table((report / "reward_table.csv").string());
  reward_table << "run_id,kind,accuracy,n_steps\n";

  nlohmann::json summary;
  summary["schema"] = 1;
  summary["runs"] = nlohmann::json::array();

  // Track the OR-weight sweep outcome across runs that differ only in beta.
  std::map<std::string, std::pair<double, double>> best_by_beta;  // beta -> (final acc, rounds)

  for (const RunArtifacts& run : runs) {
    const std::string beta = run.config.count("beta") ? run.config.at("beta") : "";
    const std::string preset = run.config.count("preset") ? run.config.at("preset") : "";
    const std::string seed = run.config.count("seed") ? run.config.at("seed") : "0";
    std::string run_id = run.dir;
    double final_accuracy = std::numeric_limits<double>::quiet_NaN();
    int last_round = -1;
    for (const MetricsRecord& r : run.metrics) {
      run_id = r.run_id;
      if (!std::isnan(r.test_accuracy)) {
        curve << r.run_id << ',' << r.preset << ',' << r.seed << ',' << beta << ',' << r.round
              << ',' << fmt_double(r.test_accuracy) << '\n';
        if (!beta.empty()) {
          sweep << beta << ',' << r.run_id << ',' << r.round << ','
                << fmt_double(r.test_accuracy) << '\n';
        }
        if (r.round >= last_round) {
          last_round = r.round;
          final_accuracy = r.test_accuracy;
        }
      }
      if (r.dataset_size >= 0 || r.pair_count >= 0) {
        counts << r.run_id << ',' << r.preset << ',' << r.seed << ',' << r.round << ','
               << (r.dataset_size < 0 ? std::string() : std::to_string(r.dataset_size)) << ','
               << (r.pair_count < 0 ? std::string() : std::to_string(r.pair_count)) << '\n';
      }
    }
    for (const auto& row : run.reward_rows) {
      reward_table << run_id << ',' << row[0] << ',' << row[1] << ',' << row[2] << '\n';
    }
    nlohmann::json entry = {
        {"run_id", run_id},     {"dir", run.dir},
        {"preset", preset},     {"seed", seed},
        {"beta", beta},         {"rounds", last_round},
    };
    if (!std::isnan(final_accuracy)) entry["final_accuracy"] = final_accuracy;
    if (run.config.count("valid_step_fraction")) {
      entry["valid_step_fraction"] = run.config.at("valid_step_fraction");
    }
    summary["runs"].push_back(entry);
    if (!beta.empty() && !std::isnan(final_accuracy)) {
      auto& slot = best_by_beta[beta];
      if (final_accuracy > slot.first || slot.second == 0) {
        slot = {final_accuracy, 1.0};
      }
    }
  }

  if (best_by_beta.size() >= 2) {
    std::string best;
    double best_acc = -1.0;
    for (const auto& [beta, acc] : best_by_beta) {
      if (acc.first > best_acc) {
        best_acc = acc.first;
        best = beta;
      }
    }
    summary["or_weight_best"] = best;
    const bool ok = !best_by_beta.count("0.1") || best == "0.1" ||
                    best_by_beta.at("0.1").first >= best_acc;
    summary["or_weight_soft_check"] = ok ? "ok" : "violated";
    if (!ok) {
      std::cerr << "[warn] OR-weight sweep: best weight is " << best
                << ", not 0.1 (soft check only)\n";
    }
  }

  summary["missing"] = missing;
  std::ofstream sj((report / "summary.json").string());
  sj << summary.dump(2) << '\n';
}

}  // namespace sipf::evalreport
