#include "aftlab/experiments.hpp"

#include "aftlab/util.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <sstream>
#include <stdexcept>

namespace aftlab {

namespace fs = std::filesystem;
using json = nlohmann::json;

// --- config serialization ---------------------------------------------------------

json to_json(const LossSpec& spec) {
  return json{{"kind", to_string(spec.kind)},
              {"beta_boundary", spec.beta_boundary},
              {"rrhf_constraint", spec.rrhf_constraint},
              {"rrhf_scale", spec.rrhf_scale},
              {"pro_constraint", spec.pro_constraint},
              {"pro_use_tau", spec.pro_use_tau},
              {"dpo_beta", spec.dpo_beta},
              {"vft_weight", spec.vft_weight}};
}

LossSpec loss_spec_from_json(const json& j) {
  LossSpec s;
  s.kind = loss_kind_from_string(j.at("kind").get<std::string>());
  s.beta_boundary = j.value("beta_boundary", s.beta_boundary);
  s.rrhf_constraint = j.value("rrhf_constraint", s.rrhf_constraint);
  s.rrhf_scale = j.value("rrhf_scale", s.rrhf_scale);
  s.pro_constraint = j.value("pro_constraint", s.pro_constraint);
  s.pro_use_tau = j.value("pro_use_tau", s.pro_use_tau);
  s.dpo_beta = j.value("dpo_beta", s.dpo_beta);
  s.vft_weight = j.value("vft_weight", s.vft_weight);
  return s;
}

namespace {

json train_to_json(const TrainConfig& t) {
  json j{{"epochs", t.epochs},
         {"learning_rate", t.learning_rate},
         {"momentum", t.momentum},
         {"batch_size", t.batch_size},
         {"seed", t.seed},
         {"patience", t.patience}};
  if (t.grad_clip) j["grad_clip"] = *t.grad_clip;
  return j;
}

TrainConfig train_from_json(const json& j) {
  TrainConfig t;
  t.epochs = j.value("epochs", t.epochs);
  t.learning_rate = j.value("learning_rate", t.learning_rate);
  t.momentum = j.value("momentum", t.momentum);
  t.batch_size = j.value("batch_size", t.batch_size);
  t.seed = j.value("seed", t.seed);
  t.patience = j.value("patience", t.patience);
  if (j.contains("grad_clip")) t.grad_clip = j.at("grad_clip").get<double>();
  return t;
}

}  // namespace

json to_json(const ExperimentConfig& cfg) {
  json j;
  j["task"] = {{"modulus", cfg.task.modulus},
               {"min_steps", cfg.task.min_steps},
               {"max_steps", cfg.task.max_steps},
               {"n_train", cfg.n_train},
               {"n_valid", cfg.n_valid},
               {"n_test", cfg.n_test},
               {"seed", cfg.data_seed}};
  j["model"] = {{"layers", cfg.model.layers},
                {"hidden_dim", cfg.model.hidden_dim},
                {"heads", cfg.model.heads},
                {"context_len", cfg.model.context_len},
                {"seed", cfg.model.seed}};
  j["train"] = train_to_json(cfg.train);
  j["aft"] = train_to_json(cfg.aft);
  j["sampling"] = {{"k", cfg.sampling.k},
                   {"temperature", cfg.sampling.temperature},
                   {"max_len", cfg.sampling.max_len},
                   {"dedup", cfg.sampling.dedup},
                   {"seed", cfg.sampling.seed}};
  j["eval"] = {{"n_test_questions", cfg.eval.n_test_questions},
               {"n_probe_questions", cfg.eval.n_probe_questions},
               {"probe_budget", cfg.eval.probe_budget},
               {"max_len", cfg.eval.max_len}};
  j["n_valid_questions"] = cfg.n_valid_questions;
  j["n_train_questions"] = cfg.n_train_questions;
  j["n_align_questions"] = cfg.n_align_questions;
  json losses = json::array();
  for (const LossSpec& s : cfg.losses) losses.push_back(to_json(s));
  j["losses"] = std::move(losses);
  j["seeds"] = cfg.seeds;
  j["out_dir"] = cfg.out_dir;
  j["data_dir"] = cfg.data_dir;
  j["workers"] = cfg.workers;
  j["k_grid"] = cfg.k_grid;
  j["beta_grid"] = cfg.beta_grid;
  j["rrhf_scale_grid"] = cfg.rrhf_scale_grid;
  j["sc_paths"] = cfg.sc_paths;
  j["pilot_epochs"] = cfg.pilot_epochs;
  return j;
}

ExperimentConfig experiment_config_from_json(const json& j) {
  ExperimentConfig c;
  if (j.contains("task")) {
    const json& t = j.at("task");
    c.task.modulus = t.value("modulus", c.task.modulus);
    c.task.min_steps = t.value("min_steps", c.task.min_steps);
    c.task.max_steps = t.value("max_steps", c.task.max_steps);
    c.n_train = t.value("n_train", c.n_train);
    c.n_valid = t.value("n_valid", c.n_valid);
    c.n_test = t.value("n_test", c.n_test);
    c.data_seed = t.value("seed", c.data_seed);
  }
  if (j.contains("model")) {
    const json& m = j.at("model");
    c.model.layers = m.value("layers", c.model.layers);
    c.model.hidden_dim = m.value("hidden_dim", c.model.hidden_dim);
    c.model.heads = m.value("heads", c.model.heads);
    c.model.context_len = m.value("context_len", c.model.context_len);
    c.model.seed = m.value("seed", c.model.seed);
  }
  if (j.contains("train")) c.train = train_from_json(j.at("train"));
  if (j.contains("aft")) c.aft = train_from_json(j.at("aft"));
  if (j.contains("sampling")) {
    const json& s = j.at("sampling");
    c.sampling.k = s.value("k", c.sampling.k);
    c.sampling.temperature = s.value("temperature", c.sampling.temperature);
    c.sampling.max_len = s.value("max_len", c.sampling.max_len);
    c.sampling.dedup = s.value("dedup", c.sampling.dedup);
    c.sampling.seed = s.value("seed", c.sampling.seed);
  }
  if (j.contains("eval")) {
    const json& e = j.at("eval");
    c.eval.n_test_questions = e.value("n_test_questions", c.eval.n_test_questions);
    c.eval.n_probe_questions = e.value("n_probe_questions", c.eval.n_probe_questions);
    c.eval.probe_budget = e.value("probe_budget", c.eval.probe_budget);
    c.eval.max_len = e.value("max_len", c.eval.max_len);
  }
  c.n_valid_questions = j.value("n_valid_questions", c.n_valid_questions);
  c.n_train_questions = j.value("n_train_questions", c.n_train_questions);
  c.n_align_questions = j.value("n_align_questions", c.n_align_questions);
  if (j.contains("losses"))
    for (const json& s : j.at("losses")) c.losses.push_back(loss_spec_from_json(s));
  if (j.contains("seeds")) c.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  c.out_dir = j.value("out_dir", c.out_dir);
  c.data_dir = j.value("data_dir", c.data_dir);
  c.workers = j.value("workers", c.workers);
  if (j.contains("k_grid")) c.k_grid = j.at("k_grid").get<std::vector<int>>();
  if (j.contains("beta_grid")) c.beta_grid = j.at("beta_grid").get<std::vector<double>>();
  if (j.contains("rrhf_scale_grid"))
    c.rrhf_scale_grid = j.at("rrhf_scale_grid").get<std::vector<double>>();
  if (j.contains("sc_paths")) c.sc_paths = j.at("sc_paths").get<std::vector<int>>();
  if (j.contains("pilot_epochs")) c.pilot_epochs = j.at("pilot_epochs").get<std::vector<int>>();
  return c;
}

std::uint64_t ExperimentConfig::fingerprint() const { return fnv1a(to_json(*this).dump()); }

Aggregate aggregate(const std::vector<double>& values) {
  Aggregate a;
  a.n = static_cast<int>(values.size());
  if (a.n == 0) return a;
  for (double v : values) a.mean += v;
  a.mean /= a.n;
  if (a.n >= 2) {
    double ss = 0.0;
    for (double v : values) ss += (v - a.mean) * (v - a.mean);
    a.stddev = std::sqrt(ss / (a.n - 1));  // sample std, n-1 denominator
  }
  return a;
}

// --- dataset -----------------------------------------------------------------------

GenDataReport cmd_gen_data(const ExperimentConfig& cfg, bool force) {
  fs::create_directories(cfg.data_dir);
  GenDataReport rep;
  rep.train_path = cfg.data_dir + "/train.jsonl";
  rep.valid_path = cfg.data_dir + "/valid.jsonl";
  rep.test_path = cfg.data_dir + "/test.jsonl";
  for (const std::string& p : {rep.train_path, rep.valid_path, rep.test_path})
    if (!force && file_exists(p))
      throw std::runtime_error("refusing to overwrite existing dataset file " + p +
                               " (use --force)");
  DatasetSplits splits =
      generate_splits(cfg.task, cfg.n_train, cfg.n_valid, cfg.n_test, cfg.data_seed);
  write_file(rep.train_path, dataset_to_jsonl(splits.train, cfg.data_seed, "train"));
  write_file(rep.valid_path, dataset_to_jsonl(splits.valid, cfg.data_seed, "valid"));
  write_file(rep.test_path, dataset_to_jsonl(splits.test, cfg.data_seed, "test"));
  rep.n_train = static_cast<int>(splits.train.size());
  rep.n_valid = static_cast<int>(splits.valid.size());
  rep.n_test = static_cast<int>(splits.test.size());
  return rep;
}

DatasetSplits load_dataset(const ExperimentConfig& cfg) {
  std::string train_path = cfg.data_dir + "/train.jsonl";
  std::string valid_path = cfg.data_dir + "/valid.jsonl";
  std::string test_path = cfg.data_dir + "/test.jsonl";
  for (const std::string& p : {train_path, valid_path, test_path})
    if (!file_exists(p))
      throw std::runtime_error("dataset file missing: " + p + " (run gen-data first)");
  DatasetSplits out;
  out.train = dataset_from_jsonl(read_file(train_path), cfg.task.modulus);
  out.valid = dataset_from_jsonl(read_file(valid_path), cfg.task.modulus);
  out.test = dataset_from_jsonl(read_file(test_path), cfg.task.modulus);
  return out;
}

// --- runner ---------------------------------------------------------------------------

namespace {

std::string hex64(std::uint64_t v) {
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

enum class TrainKind { Base, Rft, Aft };

struct MethodRow {
  std::string label;
  TrainKind kind = TrainKind::Aft;
  LossSpec spec;
  bool ranking = false;
  int k_override = -1;  // <0: config k
};

json eval_report_to_json(const EvalReport& r) {
  json test_rows = json::array();
  for (const QuestionEval& q : r.test_rows)
    test_rows.push_back({{"question_index", q.question_index}, {"t_correct", q.t_correct}});
  json probe_rows = json::array();
  for (const ProbeEval& p : r.probe_rows)
    probe_rows.push_back({{"question_index", p.question_index},
                          {"pairs_correct", p.pairs_correct},
                          {"pairs_total", p.pairs_total},
                          {"pos_logp_sum", p.pos_logp_sum},
                          {"pos_tokens", p.pos_tokens},
                          {"pos_seq_ppl_sum", p.pos_seq_ppl_sum},
                          {"pos_sequences", p.pos_sequences}});
  return json{{"t_accuracy", r.t_accuracy},
              {"a_accuracy", r.a_accuracy},
              {"pos_ppl", r.pos_ppl},
              {"pos_ppl_token_pooled", r.pos_ppl_token_pooled},
              {"n_eval", r.n_eval},
              {"seed", r.seed},
              {"test_rows", std::move(test_rows)},
              {"probe_rows", std::move(probe_rows)}};
}

class Runner {
 public:
  Runner(const ExperimentConfig& cfg, const DatasetSplits& data, const std::string& experiment)
      : cfg_(cfg), experiment_(experiment) {
    workers_ = cfg.workers > 0 ? cfg.workers : default_workers();
    dir_ = cfg.out_dir + "/" + experiment;
    cache_dir_ = cfg.out_dir + "/cache";
    fs::create_directories(dir_ + "/cells");
    fs::create_directories(cache_dir_);

    auto take = [](const std::vector<Problem>& src, int n) {
      int m = std::min<int>(n, static_cast<int>(src.size()));
      return std::vector<Problem>(src.begin(), src.begin() + m);
    };
    train_q_ = take(data.train, cfg.n_train_questions);
    align_q_ = take(data.train, std::min(cfg.n_align_questions, cfg.n_train_questions));
    valid_q_ = take(data.valid, cfg.n_valid_questions);
    test_q_ = take(data.test, cfg.eval.n_test_questions);
    probe_q_ = take(data.train,
                    std::min(cfg.eval.n_probe_questions, static_cast<int>(align_q_.size())));

    dataset_fp_ = "train:" + git_blob_sha1(dataset_to_jsonl(data.train, cfg.data_seed, "train")) +
                  ",valid:" + git_blob_sha1(dataset_to_jsonl(data.valid, cfg.data_seed, "valid")) +
                  ",test:" + git_blob_sha1(dataset_to_jsonl(data.test, cfg.data_seed, "test"));
  }

  const std::string& dir() const { return dir_; }
  const std::string& dataset_fingerprint() const { return dataset_fp_; }
  int workers() const { return workers_; }
  const std::vector<Problem>& train_questions() const { return train_q_; }
  const std::vector<Problem>& align_questions() const { return align_q_; }
  const std::vector<Problem>& valid_questions() const { return valid_q_; }
  const std::vector<Problem>& test_questions() const { return test_q_; }
  const std::vector<Problem>& probe_questions() const { return probe_q_; }

  ModelConfig model_for(std::uint64_t seed) const {
    ModelConfig m = cfg_.model;
    m.seed = mix_seed(cfg_.model.seed, "run-model", seed);
    return m;
  }
  TrainConfig train_for(std::uint64_t seed, int workers = 1) const {
    TrainConfig t = cfg_.train;
    t.seed = mix_seed(cfg_.train.seed, "run-train", seed);
    t.workers = workers;
    return t;
  }
  TrainConfig aft_for(std::uint64_t seed, int workers = 1) const {
    TrainConfig t = cfg_.aft;
    t.seed = mix_seed(cfg_.aft.seed, "run-aft", seed);
    t.workers = workers;
    return t;
  }
  SamplingConfig sampling_for(std::uint64_t seed, int k_override = -1) const {
    SamplingConfig s = cfg_.sampling;
    if (k_override > 0) s.k = k_override;
    s.seed = mix_seed(cfg_.sampling.seed, "run-sampling", seed);
    return s;
  }
  ProbeConfig probe_for(std::uint64_t seed) const {
    ProbeConfig p;
    p.budget = cfg_.eval.probe_budget;
    p.temperature = cfg_.sampling.temperature;
    p.max_len = cfg_.eval.max_len;
    p.seed = mix_seed(cfg_.sampling.seed, "run-probe", seed);
    return p;
  }

  std::uint64_t vft_key(std::uint64_t seed) const {
    json j = {{"stage", "vft"},
              {"dataset", dataset_fp_},
              {"n_train_q", train_q_.size()},
              {"n_valid_q", valid_q_.size()},
              {"model", to_json(cfg_).at("model")},
              {"train", train_to_json(train_for(seed))},
              {"model_seed", model_for(seed).seed}};
    return fnv1a(j.dump());
  }

  // Trains (or loads) the step-1 checkpoint for one run seed.
  Checkpoint vft(std::uint64_t seed) {
    std::string path = cache_dir_ + "/vft_" + hex64(vft_key(seed)) + ".ckpt";
    return cached_checkpoint(path, [&] {
      return train_vft(train_q_, valid_q_, model_for(seed), train_for(seed, inner_workers()))
          .checkpoint;
    });
  }

  std::uint64_t feedback_key(std::uint64_t seed, bool ranking, int k_override) const {
    SamplingConfig s = sampling_for(seed, k_override);
    json j = {{"stage", "feedback"}, {"vft", vft_key(seed)},     {"ranking", ranking},
              {"n_align_q", align_q_.size()},
              {"k", s.k},            {"temperature", s.temperature}, {"max_len", s.max_len},
              {"dedup", s.dedup},    {"seed", s.seed}};
    return fnv1a(j.dump());
  }

  const FeedbackResult& feedback(std::uint64_t seed, bool ranking, int k_override = -1) {
    std::uint64_t key = feedback_key(seed, ranking, k_override);
    {
      std::lock_guard<std::mutex> lock(mu_);
      auto it = feedback_cache_.find(key);
      if (it != feedback_cache_.end()) return it->second;
    }
    std::string path = cache_dir_ + "/feedback_" + hex64(key) + ".jsonl";
    FeedbackResult fb;
    if (file_exists(path)) {
      fb = feedback_from_jsonl(read_file(path));
    } else {
      Checkpoint ckpt = vft(seed);
      fb = build_feedback(ckpt, align_q_, sampling_for(seed, k_override), ranking, inner_workers());
      write_file(path, feedback_to_jsonl(fb, ranking));
      write_file(cache_dir_ + "/feedback_" + hex64(key) + "_stats.json",
                 json{{"questions", fb.stats.questions},
                      {"samples", fb.stats.samples},
                      {"dedup_removed", fb.stats.dedup_removed},
                      {"truncated", fb.stats.truncated},
                      {"empty_pos", fb.stats.empty_pos},
                      {"empty_neg", fb.stats.empty_neg},
                      {"unusable", fb.stats.unusable}}
                     .dump(2));
    }
    std::lock_guard<std::mutex> lock(mu_);
    return feedback_cache_.emplace(key, std::move(fb)).first->second;
  }

  // Probe sets sampled once per seed from the VFT checkpoint, avoiding that
  // seed's training feedback; reused for every method of the seed.
  const ProbeSamples& probes(std::uint64_t seed, bool ranking, int k_override = -1) {
    std::uint64_t key = fnv1a(json{{"stage", "probes"},
                                   {"feedback", feedback_key(seed, ranking, k_override)},
                                   {"budget", cfg_.eval.probe_budget},
                                   {"n_probe_q", probe_q_.size()},
                                   {"seed", probe_for(seed).seed}}
                                  .dump());
    {
      std::lock_guard<std::mutex> lock(mu_);
      auto it = probe_cache_.find(key);
      if (it != probe_cache_.end()) return it->second;
    }
    const FeedbackResult& fb = feedback(seed, ranking, k_override);
    std::vector<FeedbackGroup> avoid(fb.groups.begin(),
                                     fb.groups.begin() + std::min(fb.groups.size(), probe_q_.size()));
    avoid.resize(probe_q_.size());
    for (std::size_t i = 0; i < avoid.size(); ++i) avoid[i].question_index = static_cast<int>(i);
    std::string path = cache_dir_ + "/probes_" + hex64(key) + ".json";
    ProbeSamples ps;
    if (file_exists(path)) {
      json j = json::parse(read_file(path));
      ps.excluded = j.at("excluded").get<int>();
      for (const json& s : j.at("sets")) {
        ProbeSet set;
        set.question_index = s.at("question_index").get<int>();
        for (const json& c : s.at("positives")) set.positives.push_back(c.get<TokenSeq>());
        for (const json& c : s.at("negatives")) set.negatives.push_back(c.get<TokenSeq>());
        ps.sets.push_back(std::move(set));
      }
    } else {
      Checkpoint ckpt = vft(seed);
      ps = sample_probe_sets(ckpt.params, probe_q_, probe_for(seed), &avoid, inner_workers());
      json sets = json::array();
      for (const ProbeSet& s : ps.sets)
        sets.push_back(
            {{"question_index", s.question_index}, {"positives", s.positives}, {"negatives", s.negatives}});
      write_file(path, json{{"excluded", ps.excluded}, {"sets", std::move(sets)}}.dump());
    }
    std::lock_guard<std::mutex> lock(mu_);
    return probe_cache_.emplace(key, std::move(ps)).first->second;
  }

  // Trains (or loads) the model a method row calls for.
  Checkpoint method_checkpoint(const MethodRow& row, std::uint64_t seed) {
    switch (row.kind) {
      case TrainKind::Base:
        return vft(seed);
      case TrainKind::Rft: {
        std::uint64_t key = fnv1a(json{{"stage", "rft"},
                                       {"feedback", feedback_key(seed, row.ranking, row.k_override)},
                                       {"train", train_to_json(train_for(seed))},
                                       {"model_seed", model_for(seed).seed}}
                                      .dump());
        std::string path = cache_dir_ + "/method_" + hex64(key) + ".ckpt";
        return cached_checkpoint(path, [&] {
          std::vector<FeedbackGroup> groups = padded_groups(seed, row);
          return train_rft(train_q_, valid_q_, groups, model_for(seed), train_for(seed)).checkpoint;
        });
      }
      case TrainKind::Aft: {
        std::uint64_t key = fnv1a(json{{"stage", "aft"},
                                       {"feedback", feedback_key(seed, row.ranking, row.k_override)},
                                       {"aft", train_to_json(aft_for(seed))},
                                       {"spec", to_json(row.spec)}}
                                      .dump());
        std::string path = cache_dir_ + "/method_" + hex64(key) + ".ckpt";
        return cached_checkpoint(path, [&] {
          // alignment continues on the sampled subset, as in the ranking
          // protocol: MLE term and alignment term over the same questions
          Checkpoint start = vft(seed);
          const FeedbackResult& fb = feedback(seed, row.ranking, row.k_override);
          return train_aft(start, align_q_, valid_q_, fb.groups, row.spec, aft_for(seed))
              .checkpoint;
        });
      }
    }
    throw std::logic_error("unhandled TrainKind");
  }

  // t/a/ppl metrics for a method cell, with the per-question detail written
  // next to the summary.
  std::map<std::string, double> evaluate(const MethodRow& row, std::uint64_t seed) {
    Checkpoint ckpt = method_checkpoint(row, seed);
    const ProbeSamples& ps = probes(seed, row.ranking, row.k_override);
    if (ps.sets.empty())
      throw std::runtime_error("no complete probe sets for seed " + std::to_string(seed));
    EvalReport rep = evaluate_model(ckpt.params, test_q_, probe_q_, ps.sets, cfg_.eval.max_len,
                                    seed, /*workers=*/1);
    write_file(dir_ + "/cells/" + sanitize(row.label) + "_s" + std::to_string(seed) + ".json",
               eval_report_to_json(rep).dump(2));
    return {{"t_accuracy", rep.t_accuracy},
            {"a_accuracy", rep.a_accuracy},
            {"pos_ppl", rep.pos_ppl},
            {"pos_ppl_token_pooled", rep.pos_ppl_token_pooled},
            {"probe_sets", static_cast<double>(ps.sets.size())},
            {"probe_excluded", static_cast<double>(ps.excluded)}};
  }

  static std::string sanitize(const std::string& label) {
    std::string out;
    for (char c : label)
      out += (std::isalnum(static_cast<unsigned char>(c)) || c == '.' || c == '-' || c == '_')
                 ? c
                 : '_';
    return out;
  }

 private:
  // alignment groups for the align prefix, flagged-empty groups elsewhere so
  // the MLE term keeps covering the whole training prefix
  std::vector<FeedbackGroup> padded_groups(std::uint64_t seed, const MethodRow& row) {
    const FeedbackResult& fb = feedback(seed, row.ranking, row.k_override);
    std::vector<FeedbackGroup> groups = fb.groups;
    groups.resize(train_q_.size());
    for (std::size_t i = 0; i < groups.size(); ++i)
      groups[i].question_index = static_cast<int>(i);
    return groups;
  }

  int inner_workers() const { return std::max(1, workers_ / std::max(1, active_seeds_)); }

  template <typename Fn>
  Checkpoint cached_checkpoint(const std::string& path, Fn&& train_fn) {
    {
      std::lock_guard<std::mutex> lock(ckpt_mu_);
      if (file_exists(path)) return load_checkpoint(path);
    }
    Checkpoint c = train_fn();
    std::lock_guard<std::mutex> lock(ckpt_mu_);
    if (!file_exists(path)) save_checkpoint(c, path);
    return c;
  }

  const ExperimentConfig& cfg_;
  std::string experiment_;
  std::string dir_, cache_dir_, dataset_fp_;
  int workers_ = 1;

 public:
  int active_seeds_ = 1;  // set by the experiment drivers for worker budgeting

 private:
  std::vector<Problem> train_q_, align_q_, valid_q_, test_q_, probe_q_;
  std::mutex mu_, ckpt_mu_;
  std::map<std::uint64_t, FeedbackResult> feedback_cache_;
  std::map<std::uint64_t, ProbeSamples> probe_cache_;
};

// --- method tables -------------------------------------------------------------------

LossSpec spec_of(LossKind kind) {
  LossSpec s;
  s.kind = kind;
  return s;
}

std::vector<MethodRow> method_rows_for(const std::string& experiment,
                                       const ExperimentConfig& cfg) {
  std::vector<MethodRow> rows;
  auto add = [&](std::string label, TrainKind kind, LossSpec spec, bool ranking,
                 int k_override = -1) {
    rows.push_back({std::move(label), kind, spec, ranking, k_override});
  };

  if (experiment == "main") {
    if (!cfg.losses.empty()) {
      for (const LossSpec& s : cfg.losses)
        add(s.label(), s.kind == LossKind::VFT ? TrainKind::Base : TrainKind::Aft, s,
            is_ranking_kind(s.kind));
      return rows;
    }
    add("VFT", TrainKind::Base, spec_of(LossKind::VFT), false);
    add("RFT", TrainKind::Rft, spec_of(LossKind::VFT), false);
    add("AFT-DC", TrainKind::Aft, spec_of(LossKind::AFT_DC), false);
    add("AFT-BC", TrainKind::Aft, spec_of(LossKind::AFT_BC), false);
    return rows;
  }
  if (experiment == "rank") {
    if (!cfg.losses.empty()) {
      for (const LossSpec& s : cfg.losses)
        add(s.label(), s.kind == LossKind::VFT ? TrainKind::Base : TrainKind::Aft, s, true);
      return rows;
    }
    add("VFT", TrainKind::Base, spec_of(LossKind::VFT), true);
    add("RFT", TrainKind::Rft, spec_of(LossKind::VFT), true);
    add("RRHF", TrainKind::Aft, spec_of(LossKind::RRHF), true);
    add("PRO", TrainKind::Aft, spec_of(LossKind::PRO), true);
    add("AFT-RBC", TrainKind::Aft, spec_of(LossKind::AFT_RBC), true);
    return rows;
  }
  if (experiment == "constraint") {
    add("VFT|without", TrainKind::Base, spec_of(LossKind::VFT), true);
    add("VFT|with", TrainKind::Base, spec_of(LossKind::VFT), true);
    LossSpec rrhf = spec_of(LossKind::RRHF);
    add("RRHF|without", TrainKind::Aft, rrhf, true);
    rrhf.rrhf_constraint = true;
    add("RRHF|with", TrainKind::Aft, rrhf, true);
    LossSpec pro = spec_of(LossKind::PRO);
    add("PRO|without", TrainKind::Aft, pro, true);
    pro.pro_constraint = true;
    add("PRO|with", TrainKind::Aft, pro, true);
    add("AFT|without", TrainKind::Aft, spec_of(LossKind::R_UNCONSTRAINED), true);
    add("AFT|with", TrainKind::Aft, spec_of(LossKind::AFT_RBC), true);
    return rows;
  }
  if (experiment == "k_sweep") {
    for (int k : cfg.k_grid) {
      if (k == 0)
        add("k=0", TrainKind::Base, spec_of(LossKind::VFT), false, -1);
      else
        add("k=" + std::to_string(k), TrainKind::Aft, spec_of(LossKind::AFT_BC), false, k);
    }
    return rows;
  }
  if (experiment == "beta_sweep") {
    for (double b : cfg.beta_grid) {
      LossSpec s = spec_of(LossKind::AFT_BC);
      s.beta_boundary = b;
      char label[32];
      std::snprintf(label, sizeof(label), "beta=%g", b);
      add(label, TrainKind::Aft, s, false);
    }
    return rows;
  }
  if (experiment == "rrhf_scale") {
    for (double sc : cfg.rrhf_scale_grid) {
      LossSpec s = spec_of(LossKind::RRHF);
      s.rrhf_scale = sc;
      char label[32];
      std::snprintf(label, sizeof(label), "scale=%g", sc);
      add(label, TrainKind::Aft, s, true);
    }
    return rows;
  }
  if (experiment == "pro_tau") {
    LossSpec p = spec_of(LossKind::PRO);
    add("PRO", TrainKind::Aft, p, true);
    p.pro_use_tau = false;
    add("PRO-tau", TrainKind::Aft, p, true);
    p.pro_use_tau = true;
    p.pro_constraint = true;
    add("PRO+DC", TrainKind::Aft, p, true);
    p.pro_use_tau = false;
    add("PRO-tau+DC", TrainKind::Aft, p, true);
    return rows;
  }
  if (experiment == "rdc_compare") {
    add("VFT", TrainKind::Base, spec_of(LossKind::VFT), true);
    add("AFT-RBC", TrainKind::Aft, spec_of(LossKind::AFT_RBC), true);
    add("RDC1", TrainKind::Aft, spec_of(LossKind::RDC1), true);
    add("RDC2", TrainKind::Aft, spec_of(LossKind::RDC2), true);
    add("R-UNCONSTRAINED", TrainKind::Aft, spec_of(LossKind::R_UNCONSTRAINED), true);
    return rows;
  }
  throw std::invalid_argument("experiment '" + experiment + "' has no method table");
}

// --- report writing --------------------------------------------------------------------

std::string csv_header_comment(const std::string& experiment, const ExperimentConfig& cfg,
                               const std::string& dataset_fp) {
  std::string out;
  out += "# aftlab experiment=" + experiment + "\n";
  out += "# config_hash=" + hex64(cfg.fingerprint()) + "\n";
  out += "# dataset_sha1=" + dataset_fp + "\n";
  return out;
}

void write_cells_csv(const ExperimentReport& rep, const ExperimentConfig& cfg,
                     const std::string& dataset_fp) {
  std::string out = csv_header_comment(rep.experiment, cfg, dataset_fp);
  out += "experiment,row,seed,metric,value,error\n";
  for (const std::string& row : rep.row_order) {
    for (const CellResult& c : rep.cells) {
      if (c.row != row) continue;
      if (!c.error.empty()) {
        std::string msg = c.error;
        for (char& ch : msg)
          if (ch == ',' || ch == '\n') ch = ';';
        out += rep.experiment + "," + row + "," + std::to_string(c.seed) + ",status,," + msg + "\n";
        continue;
      }
      for (const std::string& metric : rep.metric_order) {
        auto it = c.metrics.find(metric);
        if (it == c.metrics.end()) continue;
        out += rep.experiment + "," + row + "," + std::to_string(c.seed) + "," + metric + "," +
               fmt_double(it->second) + ",\n";
      }
    }
  }
  write_file(rep.dir + "/cells.csv", out);
}

void write_summary_csv(const ExperimentReport& rep, const ExperimentConfig& cfg,
                       const std::string& dataset_fp) {
  std::string out = csv_header_comment(rep.experiment, cfg, dataset_fp);
  out += "experiment,row,metric,mean,std,n\n";
  for (const std::string& row : rep.row_order) {
    for (const std::string& metric : rep.metric_order) {
      std::vector<double> vals;
      for (const CellResult& c : rep.cells)
        if (c.row == row && c.error.empty() && c.metrics.count(metric))
          vals.push_back(c.metrics.at(metric));
      if (vals.empty()) continue;
      Aggregate a = aggregate(vals);
      out += rep.experiment + "," + row + "," + metric + "," + fmt_double(a.mean) + "," +
             fmt_double(a.stddev) + "," + std::to_string(a.n) + "\n";
    }
  }
  write_file(rep.dir + "/summary.csv", out);
}

std::string render_tables(const ExperimentReport& rep) {
  std::ostringstream os;
  os << "== " << rep.experiment << " ==\n";
  // column widths
  std::size_t roww = 4;
  for (const std::string& r : rep.row_order) roww = std::max(roww, r.size());
  os << std::string(roww, ' ') << "  ";
  for (const std::string& m : rep.metric_order) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%22s", m.c_str());
    os << buf;
  }
  os << "\n";
  for (const std::string& row : rep.row_order) {
    os << row << std::string(roww - row.size(), ' ') << "  ";
    for (const std::string& metric : rep.metric_order) {
      std::vector<double> vals;
      int errors = 0;
      for (const CellResult& c : rep.cells) {
        if (c.row != row) continue;
        if (!c.error.empty()) {
          ++errors;
          continue;
        }
        if (c.metrics.count(metric)) vals.push_back(c.metrics.at(metric));
      }
      char buf[64];
      if (vals.empty()) {
        std::snprintf(buf, sizeof(buf), "%22s", errors ? "ERROR" : "-");
      } else {
        Aggregate a = aggregate(vals);
        std::string cell = fmt_double(a.mean, 4) + " +/- " + fmt_double(a.stddev, 4);
        std::snprintf(buf, sizeof(buf), "%22s", cell.c_str());
      }
      os << buf;
    }
    os << "\n";
  }
  return os.str();
}

void finalize_report(ExperimentReport& rep, const ExperimentConfig& cfg,
                     const std::string& dataset_fp) {
  write_cells_csv(rep, cfg, dataset_fp);
  write_summary_csv(rep, cfg, dataset_fp);
  std::string tables = csv_header_comment(rep.experiment, cfg, dataset_fp) + render_tables(rep);
  write_file(rep.dir + "/tables.txt", tables);
}

// --- experiment protocols ---------------------------------------------------------------

ExperimentReport run_method_table(Runner& runner, const ExperimentConfig& cfg,
                                  const std::string& experiment) {
  std::vector<MethodRow> rows = method_rows_for(experiment, cfg);
  ExperimentReport rep;
  rep.experiment = experiment;
  rep.dir = runner.dir();
  for (const MethodRow& r : rows) rep.row_order.push_back(r.label);
  rep.metric_order = {"t_accuracy", "a_accuracy", "pos_ppl", "pos_ppl_token_pooled",
                      "probe_sets", "probe_excluded"};

  // shared per-seed artifacts first, seeds in parallel
  runner.active_seeds_ = static_cast<int>(cfg.seeds.size());
  bool need_binary = false, need_ranking = false;
  for (const MethodRow& r : rows) (r.ranking ? need_ranking : need_binary) = true;
  parallel_for(cfg.seeds.size(), runner.workers(), [&](std::size_t si) {
    std::uint64_t seed = cfg.seeds[si];
    runner.vft(seed);
    for (const MethodRow& r : rows) {
      if (r.kind == TrainKind::Base) continue;
      runner.feedback(seed, r.ranking, r.k_override);
    }
    if (need_binary) runner.probes(seed, false);
    if (need_ranking) runner.probes(seed, true);
  });
  runner.active_seeds_ = 1;

  struct CellPlan {
    const MethodRow* row;
    std::uint64_t seed;
  };
  std::vector<CellPlan> plan;
  for (const MethodRow& r : rows)
    for (std::uint64_t seed : cfg.seeds) plan.push_back({&r, seed});
  std::vector<CellResult> results(plan.size());
  parallel_for(plan.size(), runner.workers(), [&](std::size_t i) {
    CellResult& out = results[i];
    out.row = plan[i].row->label;
    out.seed = plan[i].seed;
    try {
      out.metrics = runner.evaluate(*plan[i].row, plan[i].seed);
    } catch (const std::exception& e) {
      out.error = e.what();
    }
  });
  rep.cells = std::move(results);
  return rep;
}

ExperimentReport run_pilot_experiment(Runner& runner, const ExperimentConfig& cfg) {
  ExperimentReport rep;
  rep.experiment = "pilot";
  rep.dir = runner.dir();
  rep.metric_order = {"t_accuracy", "a_accuracy", "questions_complete", "questions_excluded",
                      "epochs"};
  for (int e : cfg.pilot_epochs) rep.row_order.push_back("epochs=" + std::to_string(e));
  rep.row_order.push_back("pearson");

  int max_epochs = 0;
  for (int e : cfg.pilot_epochs) max_epochs = std::max(max_epochs, e);

  std::vector<std::vector<CellResult>> per_seed(cfg.seeds.size());
  parallel_for(cfg.seeds.size(), std::min<int>(runner.workers(), static_cast<int>(cfg.seeds.size())),
               [&](std::size_t si) {
                 std::uint64_t seed = cfg.seeds[si];
                 TrainConfig tcfg = runner.train_for(seed);
                 tcfg.epochs = max_epochs;
                 tcfg.patience = 0;  // keep training through every snapshot epoch
                 VftResult vr = train_vft(runner.train_questions(), runner.valid_questions(),
                                          runner.model_for(seed), tcfg, cfg.pilot_epochs);
                 std::vector<double> ts, as;
                 for (std::size_t ci = 0; ci < vr.snapshots.size(); ++ci) {
                   CellResult cell;
                   cell.row = "epochs=" + std::to_string(cfg.pilot_epochs[ci]);
                   cell.seed = seed;
                   try {
                     ProbeConfig pc = runner.probe_for(seed);
                     PilotReport pr =
                         run_pilot(vr.snapshots[ci], runner.probe_questions(),
                                   runner.test_questions(), pc, cfg.eval.max_len, /*workers=*/1);
                     cell.metrics = {{"t_accuracy", pr.t_accuracy},
                                     {"a_accuracy", pr.a_accuracy},
                                     {"questions_complete", double(pr.questions_complete)},
                                     {"questions_excluded", double(pr.questions_excluded)},
                                     {"epochs", double(cfg.pilot_epochs[ci])}};
                     ts.push_back(pr.t_accuracy);
                     as.push_back(pr.a_accuracy);
                   } catch (const std::exception& e) {
                     cell.error = e.what();
                   }
                   per_seed[si].push_back(std::move(cell));
                 }
                 CellResult pe;
                 pe.row = "pearson";
                 pe.seed = seed;
                 try {
                   pe.metrics = {{"t_accuracy", pearson(ts, as)}};  // corr(T, A) over checkpoints
                 } catch (const std::exception& e) {
                   pe.error = e.what();
                 }
                 per_seed[si].push_back(std::move(pe));
               });
  for (auto& v : per_seed)
    for (CellResult& c : v) rep.cells.push_back(std::move(c));
  return rep;
}

ExperimentReport run_sc_curve(Runner& runner, const ExperimentConfig& cfg) {
  ExperimentReport rep;
  rep.experiment = "sc_curve";
  rep.dir = runner.dir();
  rep.metric_order = {"sc_accuracy", "abstained"};

  MethodRow vft_row{"VFT", TrainKind::Base, spec_of(LossKind::VFT), false, -1};
  MethodRow bc_row{"AFT-BC", TrainKind::Aft, spec_of(LossKind::AFT_BC), false, -1};
  std::vector<MethodRow> models = {vft_row, bc_row};
  for (const MethodRow& m : models)
    for (int p : cfg.sc_paths) rep.row_order.push_back(m.label + "@paths=" + std::to_string(p));

  runner.active_seeds_ = static_cast<int>(cfg.seeds.size());
  parallel_for(cfg.seeds.size(), runner.workers(), [&](std::size_t si) {
    runner.vft(cfg.seeds[si]);
    runner.feedback(cfg.seeds[si], false);
  });
  runner.active_seeds_ = 1;

  struct CellPlan {
    const MethodRow* row;
    int paths;
    std::uint64_t seed;
  };
  std::vector<CellPlan> plan;
  for (const MethodRow& m : models)
    for (int p : cfg.sc_paths)
      for (std::uint64_t seed : cfg.seeds) plan.push_back({&m, p, seed});

  std::vector<CellResult> results(plan.size());
  parallel_for(plan.size(), runner.workers(), [&](std::size_t i) {
    CellResult& out = results[i];
    out.row = plan[i].row->label + "@paths=" + std::to_string(plan[i].paths);
    out.seed = plan[i].seed;
    try {
      Checkpoint ckpt = runner.method_checkpoint(*plan[i].row, plan[i].seed);
      const std::vector<Problem>& test = runner.test_questions();
      long hits = 0, abstained = 0;
      for (std::size_t qi = 0; qi < test.size(); ++qi) {
        VoteOutcome v =
            self_consistency(ckpt.params, test[qi], plan[i].paths, cfg.sampling.temperature,
                             mix_seed(plan[i].seed, "sc-question", qi), cfg.eval.max_len);
        if (!v.answer) ++abstained;
        if (v.answer && *v.answer == test[qi].answer) ++hits;
      }
      out.metrics = {{"sc_accuracy", double(hits) / double(test.size())},
                     {"abstained", double(abstained)}};
    } catch (const std::exception& e) {
      out.error = e.what();
    }
  });
  rep.cells = std::move(results);
  return rep;
}

}  // namespace

const std::vector<std::string>& experiment_names() {
  static const std::vector<std::string> names = {"pilot",      "main",       "rank",
                                                 "constraint", "k_sweep",    "beta_sweep",
                                                 "rrhf_scale", "pro_tau",    "rdc_compare",
                                                 "sc_curve"};
  return names;
}

ExperimentReport cmd_run(const ExperimentConfig& cfg, const std::string& experiment,
                         const DatasetSplits& data) {
  const auto& names = experiment_names();
  if (std::find(names.begin(), names.end(), experiment) == names.end()) {
    std::string all;
    for (const std::string& n : names) all += (all.empty() ? "" : ", ") + n;
    throw std::invalid_argument("unknown experiment '" + experiment + "' (expected one of " + all +
                                ")");
  }
  Runner runner(cfg, data, experiment);
  write_file(runner.dir() + "/resolved_config.json",
             json{{"config", to_json(cfg)},
                  {"config_hash", cfg.fingerprint()},
                  {"dataset_sha1", runner.dataset_fingerprint()},
                  {"experiment", experiment}}
                 .dump(2));

  ExperimentReport rep;
  if (experiment == "pilot")
    rep = run_pilot_experiment(runner, cfg);
  else if (experiment == "sc_curve")
    rep = run_sc_curve(runner, cfg);
  else
    rep = run_method_table(runner, cfg, experiment);
  finalize_report(rep, cfg, runner.dataset_fingerprint());
  return rep;
}

void cmd_report(const std::string& run_dir) {
  std::string cells_path = run_dir + "/cells.csv";
  if (!file_exists(cells_path))
    throw std::runtime_error("run directory incomplete: expected " + cells_path +
                             " (and summary.csv, resolved_config.json) from a finished run");
  std::string content = read_file(cells_path);

  ExperimentReport rep;
  rep.dir = run_dir;
  std::istringstream ss(content);
  std::string line;
  std::string header_comments;
  bool saw_header = false;
  while (std::getline(ss, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      header_comments += line + "\n";
      continue;
    }
    if (!saw_header) {  // column header line
      saw_header = true;
      continue;
    }
    std::vector<std::string> fields;
    std::string field;
    std::istringstream ls(line);
    while (std::getline(ls, field, ',')) fields.push_back(field);
    while (fields.size() < 6) fields.push_back("");
    rep.experiment = fields[0];
    CellResult* cell = nullptr;
    for (CellResult& c : rep.cells)
      if (c.row == fields[1] && c.seed == std::stoull(fields[2])) cell = &c;
    if (!cell) {
      rep.cells.push_back({});
      cell = &rep.cells.back();
      cell->row = fields[1];
      cell->seed = std::stoull(fields[2]);
    }
    if (fields[3] == "status") {
      cell->error = fields[5];
    } else {
      cell->metrics[fields[3]] = std::stod(fields[4]);
      if (std::find(rep.metric_order.begin(), rep.metric_order.end(), fields[3]) ==
          rep.metric_order.end())
        rep.metric_order.push_back(fields[3]);
    }
    if (std::find(rep.row_order.begin(), rep.row_order.end(), fields[1]) == rep.row_order.end())
      rep.row_order.push_back(fields[1]);
  }

  // tidy long CSV (one observation per line) and the re-rendered tables
  std::string tidy = header_comments + "experiment,row,seed,metric,value\n";
  for (const std::string& row : rep.row_order)
    for (const CellResult& c : rep.cells) {
      if (c.row != row || !c.error.empty()) continue;
      for (const std::string& metric : rep.metric_order) {
        auto it = c.metrics.find(metric);
        if (it != c.metrics.end())
          tidy += rep.experiment + "," + row + "," + std::to_string(c.seed) + "," + metric + "," +
                  fmt_double(it->second) + "\n";
      }
    }
  write_file(run_dir + "/tidy_long.csv", tidy);
  write_file(run_dir + "/tables.txt", header_comments + render_tables(rep));
}

}  // namespace aftlab
