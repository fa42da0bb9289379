#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "sipf/driver.hpp"
#include "sipf/rng.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <set>

using namespace sipf;
using namespace sipf::driver;
namespace fs = std::filesystem;

namespace {

std::string tmp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / "sipf_driver_tests" / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p.string();
}

/// Small but trainable configuration for fast end-to-end tests.
RunConfig tiny_config(const std::string& preset, const std::string& out) {
  RunConfig cfg = preset_config(preset);
  cfg.n_train = 24;
  cfg.n_test = 12;
  cfg.depth_min = 2;
  cfg.depth_max = 2;
  cfg.policy_window = 12;
  cfg.policy_embed = 6;
  cfg.policy_hidden = 24;
  cfg.verifier_window = 12;
  cfg.verifier_embed = 6;
  cfg.verifier_hidden = 24;
  cfg.sft_epochs = 6;
  cfg.align_epochs = 4;
  cfg.prm_epochs = 3;
  cfg.sft_batch = 8;
  cfg.align_batch = 8;
  cfg.prm_batch = 16;
  cfg.n_pos_target = 2;
  cfg.n_neg_target = 2;
  cfg.max_attempts = 6;
  cfg.max_len = 48;
  cfg.probe_pairs = 6;
  cfg.pair_cap = 2;
  cfg.n_iterations = 1;
  cfg.n_threads = 2;
  cfg.seed = 5;
  // tiny-scale rates: converge in a handful of epochs (reference runs stay on
  // the hyperparameter-table grid; tests are free to run hotter)
  cfg.sft_lr = 1e-3;
  cfg.prm_lr = 1e-3;
  cfg.lr = 1e-3;
  cfg.eta = 0.02;
  cfg.out_dir = out;
  cfg.run_id = preset + "-tiny";
  return cfg;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::set<std::string> dataset_keys(const std::string& jsonl_path) {
  std::set<std::string> keys;
  for (const auto& p : sampling::read_sampled_jsonl(jsonl_path)) {
    std::string key = std::to_string(p.question_id);
    for (const auto& s : p.path.steps) key += "|" + s;
    keys.insert(key);
  }
  return keys;
}

std::string metrics_without_wall(const std::string& csv_path) {
  std::ifstream in(csv_path);
  REQUIRE(in);
  std::string line, out;
  while (std::getline(in, line)) {
    // wall_ms is the 11th of 12 columns; blank it
    std::size_t start = 0;
    for (int c = 0; c < 10; ++c) start = line.find(',', start) + 1;
    const std::size_t end = line.find(',', start);
    out += line.substr(0, start) + line.substr(end) + "\n";
  }
  return out;
}

}  // namespace

TEST_CASE("presets resolve to the documented loop configurations") {
  const RunConfig star = preset_config("star");
  CHECK(star.objective == Objective::sft_only);
  CHECK(star.positives_only);
  CHECK(star.decode_for_collection == DecodeMode::greedy);
  CHECK(star.iterate);

  const RunConfig rft = preset_config("rft");
  CHECK(rft.objective == Objective::sft_only);
  CHECK(rft.decode_for_collection == DecodeMode::temperature);
  CHECK_FALSE(rft.iterate);
  CHECK(rft.n_iterations == 1);
  CHECK_FALSE(rft.prm_filter);
  CHECK(preset_config("prft").prm_filter);

  const RunConfig srf = preset_config("srf");
  CHECK(srf.objective == Objective::dpo);
  CHECK(srf.feedback == Feedback::outcome);
  CHECK_FALSE(srf.rpo_nll);
  CHECK(preset_config("psrf").prm_filter);
  CHECK(preset_config("rpo").rpo_nll);

  const RunConfig siof = preset_config("siof");
  CHECK(siof.objective == Objective::orpo);
  CHECK(siof.feedback == Feedback::outcome);
  const RunConfig sipf = preset_config("sipf");
  CHECK(sipf.objective == Objective::orpo);
  CHECK(sipf.feedback == Feedback::process);
  CHECK(sipf.restart_from_base);

  CHECK(preset_config("sft").n_iterations == 0);
  CHECK_THROWS_AS(preset_config("nope"), std::invalid_argument);
}

TEST_CASE("config files round-trip byte-identically") {
  RunConfig cfg = preset_config("siof");
  cfg.beta = 0.01;
  cfg.seed = 99;
  cfg.run_id = "roundtrip";
  const std::string dir = tmp_dir("config");
  const std::string a = dir + "/a.cfg";
  const std::string b = dir + "/b.cfg";
  write_config_file(a, cfg);
  const RunConfig back = read_config_file(a);
  write_config_file(b, back);
  CHECK(slurp(a) == slurp(b));
  CHECK(back.beta == cfg.beta);
  CHECK(back.objective == Objective::orpo);
  CHECK(back.feedback == Feedback::outcome);

  RunConfig probe = cfg;
  CHECK_THROWS_AS(apply_override(probe, "no_such_key", "1"), std::invalid_argument);
  CHECK_THROWS_AS(apply_override(probe, "objective", "ppo"), std::invalid_argument);
  apply_override(probe, "beta", "1");
  CHECK(probe.beta == 1.0);
}

TEST_CASE("tiny SIPF run: artifacts, union, uniqueness, restart hashes") {
  const std::string out = tmp_dir("sipf_e2e");
  Run run(tiny_config("sipf", out));
  const RunResult result = run.execute();

  CHECK(result.accuracy_by_round.size() == 2);
  CHECK(fs::exists(fs::path(out) / "config.txt"));
  CHECK(fs::exists(fs::path(out) / "metrics.csv"));
  CHECK(fs::exists(fs::path(out) / "run_summary.json"));
  CHECK(fs::exists(fs::path(out) / "checkpoints" / "base.ckpt"));
  CHECK(fs::exists(fs::path(out) / "checkpoints" / "policy_round_0.ckpt"));
  CHECK(fs::exists(fs::path(out) / "checkpoints" / "policy_round_1.ckpt"));
  CHECK(fs::exists(fs::path(out) / "checkpoints" / "verifier_round_1.ckpt"));
  CHECK(fs::exists(fs::path(out) / "data" / "train.jsonl"));
  CHECK(fs::exists(fs::path(out) / "data" / "probe_pairs.jsonl"));
  CHECK(fs::exists(fs::path(out) / "data" / "samples_round_1.jsonl"));
  CHECK(fs::exists(fs::path(out) / "data" / "dsim_round_1.jsonl"));
  CHECK(fs::exists(fs::path(out) / "data" / "scored_round_1.jsonl"));
  CHECK(fs::exists(fs::path(out) / "data" / "dpref_round_1.jsonl"));

  // D_1 contains D_0
  const auto d0 = dataset_keys((fs::path(out) / "data" / "dataset_round_0.jsonl").string());
  const auto d1 = dataset_keys((fs::path(out) / "data" / "dataset_round_1.jsonl").string());
  CHECK(d1.size() >= d0.size());
  for (const auto& k : d0) CHECK(d1.count(k) == 1);

  // metrics rows are unique on (run_id, round, epoch)
  const auto rows = evalreport::read_metrics_csv((fs::path(out) / "metrics.csv").string());
  std::set<std::tuple<std::string, int, int>> seen;
  for (const auto& r : rows) CHECK(seen.insert({r.run_id, r.round, r.epoch}).second);

  // every preference pair satisfies its stored margin
  const auto pairs =
      prefdata::read_pref_jsonl((fs::path(out) / "data" / "dpref_round_1.jsonl").string());
  REQUIRE(!pairs.empty());
  for (const auto& p : pairs) CHECK(p.r_w - p.r_l >= p.eta);

  // restart_from_base literally aligns from the base model
  const nlohmann::json summary =
      nlohmann::json::parse(slurp((fs::path(out) / "run_summary.json").string()));
  REQUIRE(summary.at("align_init_hashes").size() == 1);
  CHECK(summary.at("align_init_hashes")[0].get<std::uint64_t>() ==
        summary.at("base_hash").get<std::uint64_t>());
}

TEST_CASE("continuing alignment reads the previous round's policy") {
  const std::string out = tmp_dir("sipf_cont");
  RunConfig cfg = tiny_config("sipf", out);
  cfg.restart_from_base = false;
  cfg.n_iterations = 2;
  Run run(cfg);
  run.prepare();
  run.run_sft();
  const std::uint64_t m0_hash = seqmodel::params_hash(run.sft_params().theta);
  run.run_iteration();
  const std::uint64_t m1_hash = seqmodel::params_hash(run.state().policy.theta);
  run.run_iteration();
  CHECK(m0_hash != m1_hash);
  CHECK(run.state().k == 2);
  CHECK(run.state().dataset.size() >= run.train_questions().size());
}

TEST_CASE("replaying a run from its config reproduces artifacts bit-exactly") {
  const std::string out_a = tmp_dir("replay_a");
  const std::string out_b = tmp_dir("replay_b");
  RunConfig cfg = tiny_config("sipf", out_a);
  Run(cfg).execute();

  RunConfig replay = read_config_file(out_a + "/config.txt");
  replay.out_dir = out_b;
  Run(replay).execute();

  CHECK(metrics_without_wall(out_a + "/metrics.csv") ==
        metrics_without_wall(out_b + "/metrics.csv"));
  for (const char* ckpt : {"base.ckpt", "policy_round_0.ckpt", "policy_round_1.ckpt",
                           "verifier_round_1.ckpt"}) {
    CHECK(slurp(out_a + "/checkpoints/" + ckpt) == slurp(out_b + "/checkpoints/" + ckpt));
  }
  for (const char* data : {"dataset_round_1.jsonl", "dpref_round_1.jsonl", "dsim_round_1.jsonl",
                           "scored_round_1.jsonl", "probe_pairs.jsonl"}) {
    CHECK(slurp(out_a + "/data/" + data) == slurp(out_b + "/data/" + data));
  }
}

TEST_CASE("an unsatisfiable margin aborts the round as degenerate") {
  const std::string out = tmp_dir("degenerate");
  RunConfig cfg = tiny_config("sipf", out);
  cfg.eta = 5.0;  // no scored pair can reach this margin
  Run run(cfg);
  run.prepare();
  run.run_sft();
  CHECK_THROWS_WITH_AS(run.run_iteration(),
                       doctest::Contains("degenerate"), std::runtime_error);
}

TEST_CASE("outcome feedback needs no verifier and forces the unit margin") {
  const std::string out = tmp_dir("siof_e2e");
  RunConfig cfg = tiny_config("siof", out);
  Run run(cfg);
  const RunResult result = run.execute();
  CHECK(result.accuracy_by_round.size() == 2);
  CHECK_FALSE(fs::exists(fs::path(out) / "checkpoints" / "verifier_round_1.ckpt"));
  const auto pairs =
      prefdata::read_pref_jsonl((fs::path(out) / "data" / "dpref_round_1.jsonl").string());
  for (const auto& p : pairs) {
    CHECK(p.eta == 1.0);
    CHECK(p.r_w == 1.0);
    CHECK(p.r_l == 0.0);
  }
}

TEST_CASE("run_baseline wires presets end to end and rejects unknown names") {
  CHECK_THROWS_AS(run_baseline("unknown", 1), std::invalid_argument);
  const std::string out = tmp_dir("baseline_star");
  const RunResult r = run_baseline(
      "star", 5,
      {{"n_train", "16"}, {"n_test", "8"}, {"depth_max", "2"}, {"policy_window", "12"},
       {"policy_embed", "6"}, {"policy_hidden", "24"}, {"verifier_window", "12"},
       {"verifier_embed", "6"}, {"verifier_hidden", "24"}, {"sft_epochs", "4"},
       {"align_epochs", "3"}, {"n_iterations", "1"}, {"probe_pairs", "4"},
       {"max_attempts", "4"}, {"n_pos_target", "2"}, {"n_neg_target", "2"}},
      out);
  CHECK(r.accuracy_by_round.size() == 2);
  CHECK(fs::exists(fs::path(out) / "metrics.csv"));
}
