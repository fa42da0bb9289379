#include "sipf/driver.hpp"

#include "sipf/parallel.hpp"
#include "sipf/rng.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace sipf::driver {
namespace {

namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

// Seed stream tags; every derived stream hangs off (cfg.seed, tag, round).
enum : std::uint64_t { kBaseStream = 1, kSftStream, kProbeStream, kCollectStream,
                       kSimStream, kPrmStream, kAlignStream };

long long elapsed_ms(Clock::time_point t0) {
  return std::chrono::duration_cast<std::chrono::milliseconds>(Clock::now() - t0).count();
}

std::string dataset_key(long long question_id, const std::vector<std::string>& steps) {
  std::string key = std::to_string(question_id);
  key.push_back('\x1e');
  for (const auto& s : steps) {
    key += s;
    key.push_back('\x1f');
  }
  return key;
}

std::string fmt(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);  // shortest round-trip form
  return std::string(buf, res.ptr);
}

void write_scored_jsonl(const std::string& path,
                        std::span<const sampling::OutcomeLabeledPath> dataset,
                        std::span<const std::vector<double>> step_scores,
                        std::span<const double> r) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const nlohmann::json j = {
        {"question_id", dataset[i].question_id},
        {"steps", dataset[i].path.steps},
        {"step_scores", step_scores[i]},
        {"r", r[i]},
    };
    out << j.dump() << '\n';
  }
}

}  // namespace

std::string to_string(Feedback f) { return f == Feedback::process ? "process" : "outcome"; }
std::string to_string(Objective o) {
  switch (o) {
    case Objective::orpo: return "orpo";
    case Objective::dpo: return "dpo";
    case Objective::sft_only: return "sft_only";
  }
  return "?";
}
std::string to_string(DecodeMode d) {
  return d == DecodeMode::temperature ? "temperature" : "greedy";
}

seqmodel::ModelConfig policy_config(const RunConfig& cfg) {
  return seqmodel::ModelConfig{cfg.policy_window, cfg.policy_embed, cfg.policy_hidden,
                               task::TokenCodec::kVocabSize};
}

seqmodel::ModelConfig verifier_config(const RunConfig& cfg) {
  return seqmodel::ModelConfig{cfg.verifier_window, cfg.verifier_embed, cfg.verifier_hidden,
                               task::TokenCodec::kVocabSize};
}

sampling::SampleConfig sample_config(const RunConfig& cfg) {
  sampling::SampleConfig sc;
  sc.temperature = cfg.temperature;
  sc.n_pos_target = cfg.n_pos_target;
  sc.n_neg_target = cfg.n_neg_target;
  sc.halving = cfg.halving;
  sc.time_budget_ms = cfg.time_budget_ms;
  sc.max_attempts = cfg.max_attempts;
  sc.max_len = cfg.max_len;
  sc.greedy = cfg.decode_for_collection == DecodeMode::greedy;
  return sc;
}

simulate::SimConfig sim_config(const RunConfig& cfg, const seqmodel::PolicyParams* policy) {
  simulate::SimConfig sim;
  sim.k = cfg.sim_k;
  sim.delta = cfg.sim_delta;
  sim.temperature = cfg.sim_temperature;
  sim.simulator = cfg.sim_oracle ? simulate::Simulator::oracle : simulate::Simulator::policy;
  sim.policy = cfg.sim_oracle ? nullptr : policy;
  sim.max_len = cfg.max_len;
  return sim;
}

RunConfig preset_config(const std::string& name) {
  RunConfig cfg;
  cfg.preset = name;
  if (name == "sft") {
    cfg.iterate = false;
    cfg.n_iterations = 0;
    cfg.objective = Objective::sft_only;
  } else if (name == "star") {
    cfg.objective = Objective::sft_only;
    cfg.positives_only = true;
    cfg.decode_for_collection = DecodeMode::greedy;
    cfg.feedback = Feedback::outcome;
    cfg.iterate = true;
    cfg.n_iterations = 3;
  } else if (name == "rft") {
    cfg.objective = Objective::sft_only;
    cfg.positives_only = true;
    cfg.feedback = Feedback::outcome;
    cfg.iterate = false;
    cfg.n_iterations = 1;
  } else if (name == "prft") {
    cfg = preset_config("rft");
    cfg.preset = name;
    cfg.prm_filter = true;
  } else if (name == "srf") {
    cfg.objective = Objective::dpo;
    cfg.feedback = Feedback::outcome;
    cfg.iterate = false;
    cfg.n_iterations = 1;
  } else if (name == "psrf") {
    cfg = preset_config("srf");
    cfg.preset = name;
    cfg.prm_filter = true;
  } else if (name == "rpo") {
    cfg.objective = Objective::dpo;
    cfg.rpo_nll = true;
    cfg.feedback = Feedback::outcome;
    cfg.iterate = false;
    cfg.n_iterations = 1;
  } else if (name == "siof") {
    cfg.objective = Objective::orpo;
    cfg.feedback = Feedback::outcome;
    cfg.iterate = true;
    cfg.n_iterations = 3;
  } else if (name == "sipf") {
    cfg.objective = Objective::orpo;
    cfg.feedback = Feedback::process;
    cfg.iterate = true;
    cfg.n_iterations = 3;
  } else {
    throw std::invalid_argument("unknown preset: " + name);
  }
  return cfg;
}

void apply_preset_semantics(RunConfig& cfg, const std::string& name) {
  const RunConfig p = preset_config(name);
  cfg.preset = p.preset;
  cfg.n_iterations = p.n_iterations;
  cfg.feedback = p.feedback;
  cfg.objective = p.objective;
  cfg.iterate = p.iterate;
  cfg.decode_for_collection = p.decode_for_collection;
  cfg.positives_only = p.positives_only;
  cfg.prm_filter = p.prm_filter;
  cfg.rpo_nll = p.rpo_nll;
}

void apply_override(RunConfig& c, const std::string& key, const std::string& value) {
  auto as_bool = [&] {
    if (value == "true" || value == "1") return true;
    if (value == "false" || value == "0") return false;
    throw std::invalid_argument("config: boolean expected for " + key);
  };
  auto as_feedback = [&] {
    if (value == "process") return Feedback::process;
    if (value == "outcome") return Feedback::outcome;
    throw std::invalid_argument("config: feedback must be process|outcome");
  };
  auto as_objective = [&] {
    if (value == "orpo") return Objective::orpo;
    if (value == "dpo") return Objective::dpo;
    if (value == "sft_only") return Objective::sft_only;
    throw std::invalid_argument("config: objective must be orpo|dpo|sft_only");
  };
  auto as_decode = [&] {
    if (value == "temperature") return DecodeMode::temperature;
    if (value == "greedy") return DecodeMode::greedy;
    throw std::invalid_argument("config: decode_for_collection must be temperature|greedy");
  };

  if (key == "run_id") c.run_id = value;
  else if (key == "preset") c.preset = value;
  else if (key == "out_dir") c.out_dir = value;
  else if (key == "seed") c.seed = std::stoull(value);
  else if (key == "data_seed") c.data_seed = std::stoull(value);
  else if (key == "n_train") c.n_train = std::stoi(value);
  else if (key == "n_test") c.n_test = std::stoi(value);
  else if (key == "depth_min") c.depth_min = std::stoi(value);
  else if (key == "depth_max") c.depth_max = std::stoi(value);
  else if (key == "n_iterations") c.n_iterations = std::stoi(value);
  else if (key == "feedback") c.feedback = as_feedback();
  else if (key == "objective") c.objective = as_objective();
  else if (key == "iterate") c.iterate = as_bool();
  else if (key == "decode_for_collection") c.decode_for_collection = as_decode();
  else if (key == "restart_from_base") c.restart_from_base = as_bool();
  else if (key == "positives_only") c.positives_only = as_bool();
  else if (key == "prm_filter") c.prm_filter = as_bool();
  else if (key == "keep_threshold") c.keep_threshold = std::stod(value);
  else if (key == "retrain_verifier") c.retrain_verifier = as_bool();
  else if (key == "paper_literal_or") c.paper_literal_or = as_bool();
  else if (key == "rpo_nll") c.rpo_nll = as_bool();
  else if (key == "rpo_alpha") c.rpo_alpha = std::stod(value);
  else if (key == "beta") c.beta = std::stod(value);
  else if (key == "beta_dpo") c.beta_dpo = std::stod(value);
  else if (key == "eta") c.eta = std::stod(value);
  else if (key == "pair_cap") c.pair_cap = std::stoi(value);
  else if (key == "sim_k") c.sim_k = std::stoi(value);
  else if (key == "sim_delta") c.sim_delta = std::stoi(value);
  else if (key == "sim_temperature") c.sim_temperature = std::stod(value);
  else if (key == "sim_oracle") c.sim_oracle = as_bool();
  else if (key == "sim_fraction") c.sim_fraction = std::stod(value);
  else if (key == "temperature") c.temperature = std::stod(value);
  else if (key == "n_pos_target") c.n_pos_target = std::stoi(value);
  else if (key == "n_neg_target") c.n_neg_target = std::stoi(value);
  else if (key == "halving") c.halving = std::stod(value);
  else if (key == "max_attempts") c.max_attempts = std::stoi(value);
  else if (key == "time_budget_ms") c.time_budget_ms = std::stoll(value);
  else if (key == "max_len") c.max_len = std::stoi(value);
  else if (key == "policy_window") c.policy_window = std::stoi(value);
  else if (key == "policy_embed") c.policy_embed = std::stoi(value);
  else if (key == "policy_hidden") c.policy_hidden = std::stoi(value);
  else if (key == "verifier_window") c.verifier_window = std::stoi(value);
  else if (key == "verifier_embed") c.verifier_embed = std::stoi(value);
  else if (key == "verifier_hidden") c.verifier_hidden = std::stoi(value);
  else if (key == "lr") c.lr = std::stod(value);
  else if (key == "sft_lr") c.sft_lr = std::stod(value);
  else if (key == "prm_lr") c.prm_lr = std::stod(value);
  else if (key == "sft_epochs") c.sft_epochs = std::stoi(value);
  else if (key == "align_epochs") c.align_epochs = std::stoi(value);
  else if (key == "prm_epochs") c.prm_epochs = std::stoi(value);
  else if (key == "sft_batch") c.sft_batch = std::stoi(value);
  else if (key == "align_batch") c.align_batch = std::stoi(value);
  else if (key == "prm_batch") c.prm_batch = std::stoi(value);
  else if (key == "warmup_ratio") c.warmup_ratio = std::stod(value);
  else if (key == "max_grad_norm") c.max_grad_norm = std::stod(value);
  else if (key == "probe_pairs") c.probe_pairs = std::stoi(value);
  else if (key == "n_threads") c.n_threads = std::stoi(value);
  else throw std::invalid_argument("config: unknown key " + key);
}

RunConfig read_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config: " + path);
  // First pass finds the preset so its defaults apply before overrides.
  std::vector<std::pair<std::string, std::string>> entries;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::runtime_error("config: expected key = value, got: " + line);
    }
    auto trim = [](std::string s) {
      while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.erase(s.begin());
      while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.pop_back();
      return s;
    };
    entries.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  RunConfig cfg;
  for (const auto& [k, v] : entries) {
    if (k == "preset") cfg = preset_config(v);
  }
  for (const auto& [k, v] : entries) apply_override(cfg, k, v);
  return cfg;
}

void write_config_file(const std::string& path, const RunConfig& c) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out << "run_id = " << c.run_id << '\n';
  out << "preset = " << c.preset << '\n';
  out << "out_dir = " << c.out_dir << '\n';
  out << "seed = " << c.seed << '\n';
  out << "data_seed = " << c.data_seed << '\n';
  out << "n_train = " << c.n_train << '\n';
  out << "n_test = " << c.n_test << '\n';
  out << "depth_min = " << c.depth_min << '\n';
  out << "depth_max = " << c.depth_max << '\n';
  out << "n_iterations = " << c.n_iterations << '\n';
  out << "feedback = " << to_string(c.feedback) << '\n';
  out << "objective = " << to_string(c.objective) << '\n';
  out << "iterate = " << (c.iterate ? "true" : "false") << '\n';
  out << "decode_for_collection = " << to_string(c.decode_for_collection) << '\n';
  out << "restart_from_base = " << (c.restart_from_base ? "true" : "false") << '\n';
  out << "positives_only = " << (c.positives_only ? "true" : "false") << '\n';
  out << "prm_filter = " << (c.prm_filter ? "true" : "false") << '\n';
  out << "keep_threshold = " << fmt(c.keep_threshold) << '\n';
  out << "retrain_verifier = " << (c.retrain_verifier ? "true" : "false") << '\n';
  out << "paper_literal_or = " << (c.paper_literal_or ? "true" : "false") << '\n';
  out << "rpo_nll = " << (c.rpo_nll ? "true" : "false") << '\n';
  out << "rpo_alpha = " << fmt(c.rpo_alpha) << '\n';
  out << "beta = " << fmt(c.beta) << '\n';
  out << "beta_dpo = " << fmt(c.beta_dpo) << '\n';
  out << "eta = " << fmt(c.eta) << '\n';
  out << "pair_cap = " << c.pair_cap << '\n';
  out << "sim_k = " << c.sim_k << '\n';
  out << "sim_delta = " << c.sim_delta << '\n';
  out << "sim_temperature = " << fmt(c.sim_temperature) << '\n';
  out << "sim_oracle = " << (c.sim_oracle ? "true" : "false") << '\n';
  out << "sim_fraction = " << fmt(c.sim_fraction) << '\n';
  out << "temperature = " << fmt(c.temperature) << '\n';
  out << "n_pos_target = " << c.n_pos_target << '\n';
  out << "n_neg_target = " << c.n_neg_target << '\n';
  out << "halving = " << fmt(c.halving) << '\n';
  out << "max_attempts = " << c.max_attempts << '\n';
  out << "time_budget_ms = " << c.time_budget_ms << '\n';
  out << "max_len = " << c.max_len << '\n';
  out << "policy_window = " << c.policy_window << '\n';
  out << "policy_embed = " << c.policy_embed << '\n';
  out << "policy_hidden = " << c.policy_hidden << '\n';
  out << "verifier_window = " << c.verifier_window << '\n';
  out << "verifier_embed = " << c.verifier_embed << '\n';
  out << "verifier_hidden = " << c.verifier_hidden << '\n';
  out << "lr = " << fmt(c.lr) << '\n';
  out << "sft_lr = " << fmt(c.sft_lr) << '\n';
  out << "prm_lr = " << fmt(c.prm_lr) << '\n';
  out << "sft_epochs = " << c.sft_epochs << '\n';
  out << "align_epochs = " << c.align_epochs << '\n';
  out << "prm_epochs = " << c.prm_epochs << '\n';
  out << "sft_batch = " << c.sft_batch << '\n';
  out << "align_batch = " << c.align_batch << '\n';
  out << "prm_batch = " << c.prm_batch << '\n';
  out << "warmup_ratio = " << fmt(c.warmup_ratio) << '\n';
  out << "max_grad_norm = " << fmt(c.max_grad_norm) << '\n';
  out << "probe_pairs = " << c.probe_pairs << '\n';
  out << "n_threads = " << c.n_threads << '\n';
}

Run::Run(RunConfig cfg)
    : cfg_(std::move(cfg)),
      base_{policy_config(cfg_), Vector()},
      m0_{policy_config(cfg_), Vector()},
      state_{0, seqmodel::PolicyParams{policy_config(cfg_), Vector()}, std::nullopt, {}, {}} {
  if (!objectives::beta_in_sweep_set(cfg_.beta) && cfg_.beta != 0.0) {
    std::cerr << "[warn] beta " << cfg_.beta << " is outside the sweep set {0.01, 0.1, 1}\n";
  }
}

void Run::prepare() {
  if (prepared_) return;
  fs::create_directories(cfg_.out_dir);
  fs::create_directories(fs::path(cfg_.out_dir) / "data");
  fs::create_directories(fs::path(cfg_.out_dir) / "checkpoints");
  write_config_file((fs::path(cfg_.out_dir) / "config.txt").string(), cfg_);

  train_ = task::generate_dataset(cfg_.data_seed, cfg_.n_train,
                                  {cfg_.depth_min, cfg_.depth_max}, task::Split::train);
  test_ = task::generate_dataset(cfg_.data_seed, cfg_.n_test,
                                 {cfg_.depth_min, cfg_.depth_max}, task::Split::test);
  for (std::size_t i = 0; i < train_.size(); ++i) train_index_[train_[i].id] = i;
  const fs::path data = fs::path(cfg_.out_dir) / "data";
  task::write_dataset_jsonl((data / "train.jsonl").string(), train_);
  task::write_dataset_jsonl((data / "test.jsonl").string(), test_);
  task::write_vocab_json((data / "vocab.json").string());

  base_ = seqmodel::init_params(policy_config(cfg_), derive_seed(cfg_.seed, {kBaseStream}));
  seqmodel::save_checkpoint((fs::path(cfg_.out_dir) / "checkpoints" / "base.ckpt").string(),
                            base_.config, base_.theta, "policy");
  state_.policy = base_;
  state_.k = 0;

  // D_0: the gold dataset.
  std::vector<sampling::OutcomeLabeledPath> d0;
  d0.reserve(train_.size());
  for (const task::Question& q : train_) {
    d0.push_back(sampling::OutcomeLabeledPath{q.id, q.gold_path, true, 0,
                                              task::encode_path(q.gold_path)});
  }
  add_to_dataset(std::move(d0), nullptr);
  sampling::write_sampled_jsonl((data / "dataset_round_0.jsonl").string(), state_.dataset);
  prepared_ = true;
}

void Run::add_to_dataset(std::vector<sampling::OutcomeLabeledPath> paths,
                         std::vector<std::size_t>* added) {
  for (auto& p : paths) {
    const std::string key = dataset_key(p.question_id, p.path.steps);
    if (dataset_index_.count(key) != 0) continue;
    dataset_index_[key] = state_.dataset.size();
    if (added != nullptr) added->push_back(state_.dataset.size());
    state_.dataset.push_back(std::move(p));
  }
}

const sampling::OutcomeLabeledPath& Run::dataset_entry(
    long long question_id, const std::vector<std::string>& steps) const {
  const auto it = dataset_index_.find(dataset_key(question_id, steps));
  if (it == dataset_index_.end()) {
    throw std::runtime_error("dataset entry not found for question " +
                             std::to_string(question_id));
  }
  return state_.dataset[it->second];
}

const task::Question& Run::question_by_id(long long id) const {
  const auto it = train_index_.find(id);
  if (it == train_index_.end()) {
    throw std::runtime_error("unknown training question id " + std::to_string(id));
  }
  return train_[it->second];
}

Run::ProbeStats Run::probe_stats(const seqmodel::PolicyParams& params) const {
  if (probe_.empty()) return {};
  std::vector<double> chosen(probe_.size()), rejected(probe_.size());
  parallel_for(probe_.size(), cfg_.n_threads, [&](std::size_t i) {
    chosen[i] = std::exp(seqmodel::seq_logprob(params, probe_[i].prompt, probe_[i].chosen).mean);
    rejected[i] =
        std::exp(seqmodel::seq_logprob(params, probe_[i].prompt, probe_[i].rejected).mean);
  });
  ProbeStats out;
  out.chosen = std::accumulate(chosen.begin(), chosen.end(), 0.0) / chosen.size();
  out.rejected = std::accumulate(rejected.begin(), rejected.end(), 0.0) / rejected.size();
  return out;
}

void Run::build_probe_set() {
  probe_.clear();
  sampling::SampleConfig pc = sample_config(cfg_);
  pc.greedy = false;
  pc.n_pos_target = 1;
  pc.n_neg_target = 1;
  pc.max_attempts = 16;
  std::vector<std::vector<sampling::OutcomeLabeledPath>> sampled(train_.size());
  parallel_for(train_.size(), cfg_.n_threads, [&](std::size_t i) {
    if (static_cast<int>(i) >= 4 * cfg_.probe_pairs) return;  // bounded probe search
    sampled[i] = sampling::sample_paths(
        m0_, train_[i], pc, derive_seed(cfg_.seed, {kProbeStream, static_cast<std::uint64_t>(i)}),
        nullptr);
  });
  for (std::size_t i = 0; i < train_.size(); ++i) {
    if (static_cast<int>(probe_.size()) >= cfg_.probe_pairs) break;
    const sampling::OutcomeLabeledPath* pos = nullptr;
    const sampling::OutcomeLabeledPath* neg = nullptr;
    for (const auto& p : sampled[i]) {
      if (p.outcome_correct && pos == nullptr) pos = &p;
      if (!p.outcome_correct && neg == nullptr) neg = &p;
    }
    if (pos != nullptr && neg != nullptr) {
      probe_.push_back(objectives::TokenPair{train_[i].text_tokens, pos->raw_tokens,
                                             neg->raw_tokens});
    }
  }
  std::ofstream out((fs::path(cfg_.out_dir) / "data" / "probe_pairs.jsonl").string());
  for (const auto& p : probe_) {
    const nlohmann::json j = {
        {"prompt_tokens", p.prompt}, {"chosen_tokens", p.chosen}, {"rejected_tokens", p.rejected}};
    out << j.dump() << '\n';
  }
}

void Run::run_sft() {
  if (!prepared_) prepare();
  const auto t0 = Clock::now();
  std::vector<objectives::PromptCompletion> items;
  items.reserve(train_.size());
  for (const task::Question& q : train_) {
    items.push_back({q.text_tokens, task::encode_path(q.gold_path)});
  }

  seqmodel::PolicyParams policy = base_;
  seqmodel::AdamState adam = seqmodel::make_adam_state(policy.theta.size());
  Rng shuffle_rng(derive_seed(cfg_.seed, {kSftStream}));
  std::vector<std::size_t> order(items.size());
  std::iota(order.begin(), order.end(), 0);
  const long long batches =
      (static_cast<long long>(items.size()) + cfg_.sft_batch - 1) / cfg_.sft_batch;
  const long long total_updates = batches * cfg_.sft_epochs;
  long long update = 0;
  for (int epoch = 1; epoch <= cfg_.sft_epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    double loss_sum = 0.0;
    long long n = 0;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg_.sft_batch)) {
      const std::size_t stop =
          std::min(order.size(), start + static_cast<std::size_t>(cfg_.sft_batch));
      std::vector<objectives::PromptCompletion> batch;
      batch.reserve(stop - start);
      for (std::size_t i = start; i < stop; ++i) batch.push_back(items[order[i]]);
      objectives::LossGrad lg = objectives::sft_loss_grad(policy, batch);
      seqmodel::clip_grad_norm(lg.grad, cfg_.max_grad_norm);
      seqmodel::adam_step(policy.theta, lg.grad, adam,
                          seqmodel::warmup_lr(cfg_.sft_lr, update, total_updates,
                                              cfg_.warmup_ratio));
      loss_sum += lg.loss;
      ++n;
      ++update;
    }
    evalreport::MetricsRecord row;
    row.run_id = cfg_.run_id;
    row.preset = cfg_.preset;
    row.round = 0;
    row.epoch = epoch;
    row.train_loss = loss_sum / static_cast<double>(n);
    row.seed = cfg_.seed;
    metrics_.push_back(row);
  }

  m0_ = policy;
  state_.policy = m0_;
  seqmodel::save_checkpoint(
      (fs::path(cfg_.out_dir) / "checkpoints" / "policy_round_0.ckpt").string(), m0_.config,
      m0_.theta, "policy");
  build_probe_set();

  const evalreport::EvalResult eval =
      evalreport::eval_accuracy(m0_, test_, cfg_.max_len, cfg_.n_threads);
  result_.accuracy_by_round.assign(1, eval.accuracy);
  result_.valid_step_fraction = eval.valid_step_fraction;
  result_.dataset_sizes.assign(1, static_cast<long long>(state_.dataset.size()));
  result_.pair_counts.assign(1, 0);
  if (!metrics_.empty()) {
    metrics_.back().test_accuracy = eval.accuracy;
    metrics_.back().dataset_size = static_cast<long long>(state_.dataset.size());
    metrics_.back().wall_ms = elapsed_ms(t0);
  }
  std::cerr << "[" << cfg_.run_id << "] sft: epochs=" << cfg_.sft_epochs
            << " loss=" << (metrics_.empty() ? 0.0 : metrics_.back().train_loss)
            << " acc=" << eval.accuracy << " valid_steps=" << eval.valid_step_fraction
            << " probe=" << probe_.size() << " (" << elapsed_ms(t0) << " ms)\n";
  sft_done_ = true;
}

void Run::run_iteration() {
  if (!sft_done_) throw std::logic_error("run_iteration: SFT has not run");
  const auto t0 = Clock::now();
  const int k = state_.k + 1;

  // 1. Collect from M_{k-1}; round-k targets follow the halving schedule.
  sampling::SampleConfig scfg = sampling::targets_for_round(sample_config(cfg_), k - 1);
  scfg.round_index = k;
  sampling::RoundCollection collection =
      sampling::collect_round(state_.policy, train_, scfg,
                              derive_seed(cfg_.seed, {kCollectStream, static_cast<std::uint64_t>(k)}),
                              cfg_.n_threads);
  const std::size_t n_sampled = collection.paths.size();
  const fs::path data = fs::path(cfg_.out_dir) / "data";
  sampling::write_sampled_jsonl(
      (data / ("samples_round_" + std::to_string(k) + ".jsonl")).string(), collection.paths);

  // 2. Union into D_k.
  std::vector<std::size_t> added;
  add_to_dataset(std::move(collection.paths), &added);
  sampling::write_sampled_jsonl(
      (data / ("dataset_round_" + std::to_string(k) + ".jsonl")).string(), state_.dataset);

  // 3. Verifier (process feedback or reward filtering) and scores.
  const bool needs_verifier = cfg_.feedback == Feedback::process || cfg_.prm_filter;
  if (needs_verifier && !added.empty()) {
    std::vector<sampling::OutcomeLabeledPath> fresh;
    fresh.reserve(added.size());
    for (std::size_t idx : added) fresh.push_back(state_.dataset[idx]);
    std::vector<simulate::LabeledPath> labeled = simulate::build_simulated_dataset(
        sim_config(cfg_, &state_.policy), fresh, train_, cfg_.sim_fraction,
        derive_seed(cfg_.seed, {kSimStream, static_cast<std::uint64_t>(k)}), cfg_.n_threads);
    simulate::write_simulated_jsonl(
        (data / ("dsim_round_" + std::to_string(k) + ".jsonl")).string(), labeled,
        sim_config(cfg_, &state_.policy));
    for (auto& lp : labeled) state_.simulated.push_back(std::move(lp));
  }
  if (needs_verifier && (cfg_.retrain_verifier || !state_.verifier.has_value())) {
    if (state_.simulated.empty()) throw std::runtime_error("no simulated labels to train on");
    std::vector<reward::StepLabeledItem> items;
    items.reserve(state_.simulated.size());
    for (const simulate::LabeledPath& lp : state_.simulated) {
      items.push_back({&question_by_id(lp.question_id), &lp.path, &lp.step_labels});
    }
    reward::RewardTrainConfig tc;
    tc.epochs = cfg_.prm_epochs;
    tc.batch_size = cfg_.prm_batch;
    tc.lr = cfg_.prm_lr;
    tc.warmup_ratio = cfg_.warmup_ratio;
    tc.max_grad_norm = cfg_.max_grad_norm;
    state_.verifier = reward::train_prm(
        items, verifier_config(cfg_), tc,
        derive_seed(cfg_.seed, {kPrmStream, static_cast<std::uint64_t>(k)}), nullptr);
    seqmodel::save_checkpoint(
        (fs::path(cfg_.out_dir) / "checkpoints" / ("verifier_round_" + std::to_string(k) + ".ckpt"))
            .string(),
        state_.verifier->config, state_.verifier->theta, "reward");
  }

  const std::size_t n_entries = state_.dataset.size();
  std::vector<std::vector<double>> step_scores(n_entries);
  std::vector<double> verifier_r(n_entries, std::numeric_limits<double>::quiet_NaN());
  if (state_.verifier.has_value()) {
    parallel_for(n_entries, cfg_.n_threads, [&](std::size_t i) {
      const sampling::OutcomeLabeledPath& e = state_.dataset[i];
      const reward::PathScore s =
          reward::score_path(*state_.verifier, question_by_id(e.question_id), e.path);
      step_scores[i] = s.step_scores;
      verifier_r[i] = s.r;
    });
  }
  std::vector<double> pairing_r(n_entries);
  for (std::size_t i = 0; i < n_entries; ++i) {
    pairing_r[i] = cfg_.feedback == Feedback::process
                       ? verifier_r[i]
                       : (state_.dataset[i].outcome_correct ? 1.0 : 0.0);
  }
  write_scored_jsonl((data / ("scored_round_" + std::to_string(k) + ".jsonl")).string(),
                     state_.dataset, step_scores, pairing_r);

  // 4. Build the round's training data.
  auto kept = [&](std::size_t i) {
    if (!cfg_.prm_filter || !state_.dataset[i].outcome_correct) return true;
    return verifier_r[i] >= cfg_.keep_threshold;
  };

  std::vector<objectives::TokenPair> pairs;
  std::vector<objectives::PromptCompletion> items;
  long long pair_count = 0;
  if (cfg_.objective == Objective::sft_only) {
    for (std::size_t i = 0; i < n_entries; ++i) {
      const auto& e = state_.dataset[i];
      if (cfg_.positives_only && !e.outcome_correct) continue;
      if (!kept(i)) continue;
      items.push_back({question_by_id(e.question_id).text_tokens, e.raw_tokens});
    }
    if (items.empty()) throw std::runtime_error("degenerate round: no training items");
  } else {
    std::vector<prefdata::ScoredPath> scored;
    scored.reserve(n_entries);
    for (std::size_t i = 0; i < n_entries; ++i) {
      if (!kept(i)) continue;
      scored.push_back({state_.dataset[i].question_id, state_.dataset[i].path, pairing_r[i]});
    }
    const double eta = cfg_.feedback == Feedback::outcome ? 1.0 : cfg_.eta;
    std::vector<prefdata::PreferencePair> pref = prefdata::build_pairs(
        scored, eta, cfg_.pair_cap, derive_seed(cfg_.seed, {kAlignStream, 0, static_cast<std::uint64_t>(k)}),
        k);
    if (pref.empty()) {
      throw std::runtime_error("degenerate round " + std::to_string(k) +
                               ": empty preference dataset");
    }
    prefdata::write_pref_jsonl((data / ("dpref_round_" + std::to_string(k) + ".jsonl")).string(),
                               pref);
    pair_count = static_cast<long long>(pref.size());
    pairs.reserve(pref.size());
    for (const prefdata::PreferencePair& p : pref) {
      const auto& chosen = dataset_entry(p.question_id, p.chosen.steps);
      const auto& rejected = dataset_entry(p.question_id, p.rejected.steps);
      pairs.push_back({question_by_id(p.question_id).text_tokens, chosen.raw_tokens,
                       rejected.raw_tokens});
    }
  }

  // 5. Alignment. DPO anchors on the SFT model; ORPO/SFT-only start from the
  //    base model under the literal Algorithm-1 reading, or continue from
  //    M_{k-1} when restart_from_base is off.
  seqmodel::PolicyParams aligned =
      cfg_.objective == Objective::dpo ? m0_ : (cfg_.restart_from_base ? base_ : state_.policy);
  align_init_hashes_.push_back(seqmodel::params_hash(aligned.theta));

  seqmodel::AdamState adam = seqmodel::make_adam_state(aligned.theta.size());
  Rng shuffle_rng(derive_seed(cfg_.seed, {kAlignStream, static_cast<std::uint64_t>(k)}));
  const std::size_t n_items =
      cfg_.objective == Objective::sft_only ? items.size() : pairs.size();
  std::vector<std::size_t> order(n_items);
  std::iota(order.begin(), order.end(), 0);
  const long long batches =
      (static_cast<long long>(n_items) + cfg_.align_batch - 1) / cfg_.align_batch;
  const long long total_updates = batches * cfg_.align_epochs;
  long long update = 0;

  auto push_row = [&](int epoch, double loss, const ProbeStats& probe) {
    evalreport::MetricsRecord row;
    row.run_id = cfg_.run_id;
    row.preset = cfg_.preset;
    row.round = k;
    row.epoch = epoch;
    row.train_loss = loss;
    row.chosen_mean_prob = probe.chosen;
    row.rejected_mean_prob = probe.rejected;
    row.seed = cfg_.seed;
    metrics_.push_back(row);
  };
  push_row(0, std::numeric_limits<double>::quiet_NaN(), probe_stats(aligned));

  for (int epoch = 1; epoch <= cfg_.align_epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    double loss_sum = 0.0;
    long long n = 0;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg_.align_batch)) {
      const std::size_t stop =
          std::min(order.size(), start + static_cast<std::size_t>(cfg_.align_batch));
      double loss = 0.0;
      Vector grad;
      if (cfg_.objective == Objective::sft_only) {
        std::vector<objectives::PromptCompletion> batch;
        for (std::size_t i = start; i < stop; ++i) batch.push_back(items[order[i]]);
        objectives::LossGrad lg = objectives::sft_loss_grad(aligned, batch);
        loss = lg.loss;
        grad = std::move(lg.grad);
      } else {
        std::vector<objectives::TokenPair> batch;
        for (std::size_t i = start; i < stop; ++i) batch.push_back(pairs[order[i]]);
        if (cfg_.objective == Objective::orpo) {
          objectives::PairLossGrad lg =
              objectives::orpo_loss_grad(aligned, batch, cfg_.beta, cfg_.paper_literal_or);
          loss = lg.loss;
          grad = std::move(lg.grad);
        } else {
          objectives::PairLossGrad lg =
              objectives::dpo_loss_grad(aligned, m0_, batch, cfg_.beta_dpo);
          loss = lg.loss;
          grad = std::move(lg.grad);
          if (cfg_.rpo_nll) {
            std::vector<objectives::PromptCompletion> chosen;
            chosen.reserve(batch.size());
            for (const auto& p : batch) chosen.push_back({p.prompt, p.chosen});
            objectives::LossGrad nll = objectives::sft_loss_grad(aligned, chosen);
            loss += cfg_.rpo_alpha * nll.loss;
            grad += cfg_.rpo_alpha * nll.grad;
          }
        }
      }
      seqmodel::clip_grad_norm(grad, cfg_.max_grad_norm);
      seqmodel::adam_step(aligned.theta, grad, adam,
                          seqmodel::warmup_lr(cfg_.lr, update, total_updates, cfg_.warmup_ratio));
      loss_sum += loss;
      ++n;
      ++update;
    }
    push_row(epoch, loss_sum / static_cast<double>(n), probe_stats(aligned));
  }

  state_.policy = std::move(aligned);
  state_.k = k;
  seqmodel::save_checkpoint(
      (fs::path(cfg_.out_dir) / "checkpoints" / ("policy_round_" + std::to_string(k) + ".ckpt"))
          .string(),
      state_.policy.config, state_.policy.theta, "policy");

  const evalreport::EvalResult eval =
      evalreport::eval_accuracy(state_.policy, test_, cfg_.max_len, cfg_.n_threads);
  result_.accuracy_by_round.push_back(eval.accuracy);
  result_.valid_step_fraction = eval.valid_step_fraction;
  result_.dataset_sizes.push_back(static_cast<long long>(state_.dataset.size()));
  result_.pair_counts.push_back(pair_count);
  metrics_.back().test_accuracy = eval.accuracy;
  metrics_.back().dataset_size = static_cast<long long>(state_.dataset.size());
  metrics_.back().pair_count = pair_count;
  metrics_.back().wall_ms = elapsed_ms(t0);
  std::cerr << "[" << cfg_.run_id << "] round " << k << ": sampled=" << n_sampled
            << " new=" << added.size() << " dataset=" << state_.dataset.size()
            << " labeled=" << state_.simulated.size() << " pairs=" << pair_count
            << " items=" << items.size() << " acc=" << eval.accuracy << " ("
            << elapsed_ms(t0) << " ms)\n";
}

void Run::finalize() {
  evalreport::write_metrics_csv((fs::path(cfg_.out_dir) / "metrics.csv").string(), metrics_);
  result_.out_dir = cfg_.out_dir;
  result_.final_accuracy =
      result_.accuracy_by_round.empty() ? 0.0 : result_.accuracy_by_round.back();

  nlohmann::json summary;
  summary["schema"] = 1;
  summary["run_id"] = cfg_.run_id;
  summary["preset"] = cfg_.preset;
  summary["seed"] = cfg_.seed;
  summary["final_accuracy"] = result_.final_accuracy;
  summary["valid_step_fraction"] = result_.valid_step_fraction;
  summary["accuracy_by_round"] = result_.accuracy_by_round;
  summary["dataset_sizes"] = result_.dataset_sizes;
  summary["pair_counts"] = result_.pair_counts;
  summary["base_hash"] = seqmodel::params_hash(base_.theta);
  summary["sft_hash"] = seqmodel::params_hash(m0_.theta);
  summary["align_init_hashes"] = align_init_hashes_;
  summary["probe_pairs"] = probe_.size();
  std::ofstream out((fs::path(cfg_.out_dir) / "run_summary.json").string());
  out << summary.dump(2) << '\n';
}

RunResult Run::execute() {
  prepare();
  run_sft();
  const int rounds = cfg_.iterate ? cfg_.n_iterations : std::min(cfg_.n_iterations, 1);
  for (int k = 0; k < rounds; ++k) run_iteration();
  finalize();
  return result_;
}

RunResult run_baseline(const std::string& preset, std::uint64_t seed,
                       const std::vector<std::pair<std::string, std::string>>& overrides,
                       const std::string& out_dir) {
  RunConfig cfg = preset_config(preset);
  cfg.seed = seed;
  for (const auto& [k, v] : overrides) apply_override(cfg, k, v);
  cfg.run_id = cfg.preset + "-s" + std::to_string(cfg.seed);
  cfg.out_dir = out_dir.empty() ? "runs/" + cfg.run_id : out_dir;
  Run run(std::move(cfg));
  return run.execute();
}

}  // namespace sipf::driver
