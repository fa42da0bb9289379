// Command-line front end for the self-iterative process feedback harness.

#include "sipf/driver.hpp"
#include "sipf/evalreport.hpp"
#include "sipf/prefdata.hpp"
#include "sipf/reward.hpp"
#include "sipf/rng.hpp"
#include "sipf/sampling.hpp"
#include "sipf/seqmodel.hpp"
#include "sipf/simulate.hpp"
#include "sipf/task.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <unordered_map>

namespace {

namespace fs = std::filesystem;
using namespace sipf;

struct CommonRunArgs {
  std::string preset = "sipf";
  std::string config_path;
  std::string out_dir;
  std::uint64_t seed = 1;
  int rounds = -1;
  std::vector<std::string> overrides;  // key=value
};

driver::RunConfig resolve_config(const CommonRunArgs& args) {
  driver::RunConfig cfg =
      args.config_path.empty() ? driver::preset_config(args.preset)
                               : driver::read_config_file(args.config_path);
  if (!args.config_path.empty() && args.preset != cfg.preset) {
    driver::apply_preset_semantics(cfg, args.preset);
  }
  cfg.seed = args.seed;
  if (args.rounds >= 0) cfg.n_iterations = args.rounds;
  for (const std::string& kv : args.overrides) {
    const std::size_t eq = kv.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("--set expects key=value");
    driver::apply_override(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  cfg.run_id = cfg.preset + "-s" + std::to_string(cfg.seed);
  cfg.out_dir = args.out_dir.empty() ? "runs/" + cfg.run_id : args.out_dir;
  return cfg;
}

void add_run_options(CLI::App* cmd, CommonRunArgs& args) {
  cmd->add_option("--preset", args.preset, "Baseline preset name");
  cmd->add_option("--config", args.config_path, "Key-value config file");
  cmd->add_option("--out", args.out_dir, "Run output directory");
  cmd->add_option("--seed", args.seed, "Run seed");
  cmd->add_option("--rounds", args.rounds, "Iteration count override");
  cmd->add_option("--set", args.overrides, "Config override key=value (repeatable)");
}

int do_run(const CommonRunArgs& args) {
  const driver::RunConfig cfg = resolve_config(args);
  driver::Run run(cfg);
  const driver::RunResult result = run.execute();
  std::cout << "run " << cfg.run_id << " finished\n";
  for (std::size_t k = 0; k < result.accuracy_by_round.size(); ++k) {
    std::cout << "  round " << k << " accuracy " << result.accuracy_by_round[k] << '\n';
  }
  std::cout << "  valid-step fraction " << result.valid_step_fraction << '\n';
  std::cout << "  artifacts: " << result.out_dir << '\n';
  return 0;
}

std::vector<task::Question> questions_for(const std::string& dataset_path) {
  return task::read_dataset_jsonl(dataset_path);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Self-iterative process feedback experiment harness"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic task datasets");
  std::uint64_t gen_seed = 42;
  int gen_train = 500, gen_test = 200, gen_depth_min = 2, gen_depth_max = 4;
  std::string gen_out = "data";
  gen->add_option("--seed", gen_seed);
  gen->add_option("--n-train", gen_train);
  gen->add_option("--n-test", gen_test);
  gen->add_option("--depth-min", gen_depth_min);
  gen->add_option("--depth-max", gen_depth_max);
  gen->add_option("--out", gen_out);

  // sft / iterate / baseline
  CommonRunArgs sft_args, iterate_args, baseline_args;
  auto* sft = app.add_subcommand("sft", "Supervised fine-tuning only");
  add_run_options(sft, sft_args);
  auto* iterate = app.add_subcommand("iterate", "Run a preset across iterations");
  add_run_options(iterate, iterate_args);
  auto* baseline = app.add_subcommand("baseline", "Run a named baseline preset");
  add_run_options(baseline, baseline_args);

  // simulate
  auto* sim = app.add_subcommand("simulate", "Label sampled paths by inference simulation");
  std::string sim_samples, sim_dataset, sim_out = "dsim.jsonl";
  int sim_k = 8, sim_delta = 4;
  double sim_fraction = 1.0;
  std::uint64_t sim_seed = 1;
  sim->add_option("--samples", sim_samples)->required();
  sim->add_option("--dataset", sim_dataset)->required();
  sim->add_option("--k", sim_k);
  sim->add_option("--delta", sim_delta);
  sim->add_option("--fraction", sim_fraction);
  sim->add_option("--seed", sim_seed);
  sim->add_option("--out", sim_out);

  // score
  auto* score = app.add_subcommand("score", "Score sampled paths with a trained verifier");
  std::string score_ckpt, score_samples, score_dataset, score_out = "scored.jsonl";
  score->add_option("--verifier", score_ckpt)->required();
  score->add_option("--samples", score_samples)->required();
  score->add_option("--dataset", score_dataset)->required();
  score->add_option("--out", score_out);

  // eval
  auto* eval = app.add_subcommand("eval", "Greedy-decoding accuracy of a checkpoint");
  std::string eval_ckpt, eval_dataset;
  int eval_max_len = 96;
  eval->add_option("--checkpoint", eval_ckpt)->required();
  eval->add_option("--dataset", eval_dataset)->required();
  eval->add_option("--max-len", eval_max_len);

  // report
  auto* report = app.add_subcommand("report", "Aggregate run artifacts into report files");
  std::string report_dir;
  report->add_option("--dir", report_dir)->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      fs::create_directories(gen_out);
      const auto train = task::generate_dataset(gen_seed, gen_train,
                                                {gen_depth_min, gen_depth_max}, task::Split::train);
      const auto test = task::generate_dataset(gen_seed, gen_test,
                                               {gen_depth_min, gen_depth_max}, task::Split::test);
      task::write_dataset_jsonl((fs::path(gen_out) / "train.jsonl").string(), train);
      task::write_dataset_jsonl((fs::path(gen_out) / "test.jsonl").string(), test);
      task::write_vocab_json((fs::path(gen_out) / "vocab.json").string());
      std::cout << "wrote " << train.size() << " train / " << test.size() << " test questions to "
                << gen_out << '\n';
      return 0;
    }
    if (sft->parsed()) {
      sft_args.preset = "sft";
      return do_run(sft_args);
    }
    if (iterate->parsed()) return do_run(iterate_args);
    if (baseline->parsed()) return do_run(baseline_args);

    if (sim->parsed()) {
      const auto questions = questions_for(sim_dataset);
      const auto samples = sampling::read_sampled_jsonl(sim_samples);
      simulate::SimConfig cfg;
      cfg.k = sim_k;
      cfg.delta = sim_delta;
      const auto labeled =
          simulate::build_simulated_dataset(cfg, samples, questions, sim_fraction, sim_seed, 2);
      simulate::write_simulated_jsonl(sim_out, labeled, cfg);
      std::cout << "labeled " << labeled.size() << " of " << samples.size() << " paths -> "
                << sim_out << '\n';
      return 0;
    }
    if (score->parsed()) {
      const auto questions = questions_for(score_dataset);
      std::unordered_map<long long, const task::Question*> index;
      for (const auto& q : questions) index[q.id] = &q;
      const auto samples = sampling::read_sampled_jsonl(score_samples);
      std::string kind;
      auto [cfg, theta] = seqmodel::load_checkpoint(score_ckpt, &kind);
      if (kind != "reward") throw std::runtime_error("not a verifier checkpoint: " + score_ckpt);
      const reward::RewardParams verifier{cfg, std::move(theta)};
      std::ofstream out(score_out);
      for (const auto& s : samples) {
        const auto it = index.find(s.question_id);
        if (it == index.end()) throw std::runtime_error("unknown question id in samples");
        const reward::PathScore ps = reward::score_path(verifier, *it->second, s.path);
        const nlohmann::json j = {{"question_id", s.question_id},
                                  {"steps", s.path.steps},
                                  {"step_scores", ps.step_scores},
                                  {"r", ps.r}};
        out << j.dump() << '\n';
      }
      std::cout << "scored " << samples.size() << " paths -> " << score_out << '\n';
      return 0;
    }
    if (eval->parsed()) {
      const auto questions = questions_for(eval_dataset);
      std::string kind;
      auto [cfg, theta] = seqmodel::load_checkpoint(eval_ckpt, &kind);
      if (kind != "policy") throw std::runtime_error("not a policy checkpoint: " + eval_ckpt);
      const seqmodel::PolicyParams params{cfg, std::move(theta)};
      const auto result = evalreport::eval_accuracy(params, questions, eval_max_len, 2);
      std::cout << "accuracy " << result.accuracy << " valid-step fraction "
                << result.valid_step_fraction << " over " << result.n_questions << " questions\n";
      return 0;
    }
    if (report->parsed()) {
      evalreport::write_report(report_dir);
      std::cout << "report written under " << report_dir << "/report\n";
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
