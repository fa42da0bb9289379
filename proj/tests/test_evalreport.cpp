#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "sipf/evalreport.hpp"
#include "sipf/rng.hpp"
#include "sipf/task.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>

using namespace sipf;
using namespace sipf::evalreport;
namespace fs = std::filesystem;

namespace {

std::string tmp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / "sipf_report_tests" / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p.string();
}

std::string slurp(const std::string& path) {
  std::ifstream in(path);
  REQUIRE(in);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

MetricsRecord row(const std::string& id, int round, int epoch) {
  MetricsRecord r;
  r.run_id = id;
  r.preset = "sipf";
  r.round = round;
  r.epoch = epoch;
  r.seed = 7;
  return r;
}

}  // namespace

TEST_CASE("the oracle as a policy scores a perfect accuracy") {
  const auto qs = task::generate_dataset(3, 40, {2, 4}, task::Split::test);
  const EvalResult r = eval_accuracy([](const task::Question& q) { return task::oracle_solve(q); },
                                     qs, 2);
  CHECK(r.accuracy == 1.0);
  CHECK(r.valid_step_fraction == 1.0);
  CHECK(r.n_questions == 40);
}

TEST_CASE("an untrained policy scores (essentially) zero") {
  const auto qs = task::generate_dataset(4, 30, {2, 4}, task::Split::test);
  const seqmodel::ModelConfig c{8, 6, 16, task::TokenCodec::kVocabSize};
  seqmodel::PolicyParams uniform{c, Vector::Zero(seqmodel::param_count(c))};
  const EvalResult r = eval_accuracy(uniform, qs, 48, 2);
  CHECK(r.accuracy == 0.0);
}

TEST_CASE("accuracy is invariant to question order") {
  auto qs = task::generate_dataset(5, 30, {2, 4}, task::Split::test);
  const seqmodel::ModelConfig c{8, 6, 16, task::TokenCodec::kVocabSize};
  const seqmodel::PolicyParams p = seqmodel::init_params(c, 11);
  const EvalResult a = eval_accuracy(p, qs, 48, 2);
  Rng rng(1);
  rng.shuffle(qs);
  const EvalResult b = eval_accuracy(p, qs, 48, 1);
  CHECK(a.accuracy == b.accuracy);
  CHECK(a.valid_step_fraction == b.valid_step_fraction);
}

TEST_CASE("metrics CSV round-trips including empty cells") {
  std::vector<MetricsRecord> rows;
  MetricsRecord a = row("run1", 0, 1);
  a.train_loss = 1.25;
  rows.push_back(a);
  MetricsRecord b = row("run1", 1, 0);
  b.chosen_mean_prob = 0.125;
  b.rejected_mean_prob = 0.0625;
  rows.push_back(b);
  MetricsRecord c = row("run1", 1, 2);
  c.train_loss = 0.5;
  c.test_accuracy = 0.75;
  c.dataset_size = 123;
  c.pair_count = 45;
  c.wall_ms = 678;
  rows.push_back(c);

  const std::string path = tmp_dir("csv") + "/metrics.csv";
  write_metrics_csv(path, rows);
  const auto back = read_metrics_csv(path);
  REQUIRE(back.size() == 3);
  CHECK(std::isnan(back[0].test_accuracy));
  CHECK(back[0].dataset_size == -1);
  CHECK(back[0].train_loss == 1.25);
  CHECK(back[1].chosen_mean_prob == 0.125);
  CHECK(std::isnan(back[1].train_loss));
  CHECK(back[2].test_accuracy == 0.75);
  CHECK(back[2].dataset_size == 123);
  CHECK(back[2].pair_count == 45);
  CHECK(back[2].wall_ms == 678);
  CHECK(back[2].seed == 7);
}

TEST_CASE("report on an empty directory emits explicit missing markers") {
  const std::string dir = tmp_dir("empty");
  write_report(dir);
  const nlohmann::json summary = nlohmann::json::parse(slurp(dir + "/report/summary.json"));
  CHECK(summary.at("schema") == 1);
  CHECK(summary.at("runs").empty());
  CHECK(!summary.at("missing").empty());
  CHECK(fs::exists(dir + "/report/iteration_curve.csv"));
  CHECK(fs::exists(dir + "/report/data_counts.csv"));
  CHECK(fs::exists(dir + "/report/or_weight_sweep.csv"));
  CHECK(fs::exists(dir + "/report/reward_table.csv"));
}

TEST_CASE("report aggregates runs, sweeps, and reward tables") {
  const std::string dir = tmp_dir("agg");
  const std::vector<std::pair<std::string, double>> betas = {
      {"b001", 0.01}, {"b01", 0.1}, {"b1", 1.0}};
  for (std::size_t i = 0; i < betas.size(); ++i) {
    const fs::path rd = fs::path(dir) / betas[i].first;
    fs::create_directories(rd);
    std::ofstream cfg((rd / "config.txt").string());
    cfg << "preset = sipf\nseed = 1\nbeta = " << betas[i].second << "\n";
    cfg.close();
    std::vector<MetricsRecord> rows;
    MetricsRecord r0 = row(betas[i].first, 0, 3);
    r0.test_accuracy = 0.4;
    r0.dataset_size = 100;
    rows.push_back(r0);
    MetricsRecord r1 = row(betas[i].first, 1, 4);
    r1.test_accuracy = betas[i].second == 0.1 ? 0.9 : 0.6;  // 0.1 is best
    r1.dataset_size = 150;
    r1.pair_count = 40;
    rows.push_back(r1);
    write_metrics_csv((rd / "metrics.csv").string(), rows);
  }
  // one run also carries a reward-model evaluation table
  {
    std::ofstream reward((fs::path(dir) / "b01" / "reward_eval.csv").string());
    reward << "kind,accuracy,n_steps\nprm,0.93,1200\norm,0.81,1200\n";
  }
  write_report(dir);

  const nlohmann::json summary = nlohmann::json::parse(slurp(dir + "/report/summary.json"));
  CHECK(summary.at("runs").size() == 3);
  CHECK(summary.at("or_weight_best") == "0.1");
  CHECK(summary.at("or_weight_soft_check") == "ok");

  const std::string curve = slurp(dir + "/report/iteration_curve.csv");
  CHECK(curve.find("b001,sipf,7,0.01,1,0.6") != std::string::npos);
  CHECK(curve.find("b01,sipf,7,0.1,1,0.9") != std::string::npos);
  const std::string sweep = slurp(dir + "/report/or_weight_sweep.csv");
  CHECK(sweep.find("0.01,b001,1,0.6") != std::string::npos);
  CHECK(sweep.find("1,b1,1,0.6") != std::string::npos);
  const std::string rewards = slurp(dir + "/report/reward_table.csv");
  CHECK(rewards.find("b01,prm,0.93,1200") != std::string::npos);
  CHECK(rewards.find("b01,orm,0.81,1200") != std::string::npos);
  const std::string counts = slurp(dir + "/report/data_counts.csv");
  CHECK(counts.find("b1,sipf,7,1,150,40") != std::string::npos);
}
