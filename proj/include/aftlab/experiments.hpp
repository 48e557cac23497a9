// Experiment grid runner: named experiment protocols over (method, seed)
// cells with seeded reproducibility, per-seed artifact caching, and CSV
// reports.
#pragma once

#include "aftlab/metrics.hpp"
#include "aftlab/pipeline.hpp"

#include <json.hpp>

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace aftlab {

struct EvalConfig {
  int n_test_questions = 300;   // prefix of the test split for task accuracy
  int n_probe_questions = 120;  // prefix of the align questions used for probe sets
  int probe_budget = 64;
  int max_len = 56;  // decode cap for evaluation and sampling
};

struct ExperimentConfig {
  TaskConfig task;
  int n_train = 5000;
  int n_valid = 400;
  int n_test = 1000;
  std::uint64_t data_seed = 7;
  int n_valid_questions = 200;  // prefix of the valid split used during training

  // The MLE stage trains on the first n_train_questions of the train split;
  // feedback groups (and the alignment terms) cover the first
  // n_align_questions of those, so the combined objective keeps full MLE
  // coverage while alignment focuses on the sampled subset.
  int n_train_questions = 2000;
  int n_align_questions = 400;

  ModelConfig model;
  TrainConfig train;  // MLE stage
  TrainConfig aft;    // alignment stage (fixed budget)
  SamplingConfig sampling;
  EvalConfig eval;

  std::vector<LossSpec> losses;  // optional override of an experiment's method list
  std::vector<std::uint64_t> seeds = {1, 2, 3};
  std::string out_dir = "runs/default";
  std::string data_dir = "data";
  int workers = 0;  // 0 = hardware concurrency

  std::vector<int> k_grid = {0, 2, 4, 8, 16};
  std::vector<double> beta_grid = {-0.4, -0.2, 0.0,  0.05, 0.1,  0.15, 0.2,
                                   0.25, 0.3,  0.35, 0.4,  0.45, 0.5};
  std::vector<double> rrhf_scale_grid = {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0};
  std::vector<int> sc_paths = {1, 2, 4, 8};
  std::vector<int> pilot_epochs = {1, 2, 3, 4, 6, 8};

  std::uint64_t fingerprint() const;  // over the serialized form
};

nlohmann::json to_json(const ExperimentConfig& cfg);
ExperimentConfig experiment_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const LossSpec& spec);
LossSpec loss_spec_from_json(const nlohmann::json& j);

// gen-data: writes train/valid/test JSONL into cfg.data_dir.
struct GenDataReport {
  int n_train = 0, n_valid = 0, n_test = 0;
  std::string train_path, valid_path, test_path;
};
GenDataReport cmd_gen_data(const ExperimentConfig& cfg, bool force);

// Loads the three splits written by cmd_gen_data; errors if missing.
DatasetSplits load_dataset(const ExperimentConfig& cfg);

const std::vector<std::string>& experiment_names();

// One (row, seed) measurement with its metric values; `error` is set when the
// cell aborted (other cells continue).
struct CellResult {
  std::string row;     // method label or sweep point
  std::uint64_t seed = 0;
  std::map<std::string, double> metrics;
  std::string error;
};

struct ExperimentReport {
  std::string experiment;
  std::vector<CellResult> cells;
  std::vector<std::string> row_order;
  std::vector<std::string> metric_order;
  std::string dir;  // <out_dir>/<experiment>
};

// Runs one named experiment end to end (dataset must exist) and writes
// resolved_config.json, cells.csv, summary.csv and tables.txt under
// <out_dir>/<experiment>/.
ExperimentReport cmd_run(const ExperimentConfig& cfg, const std::string& experiment,
                         const DatasetSplits& data);

// Re-derives plot-ready files (tidy_long.csv, tables.txt) from a completed
// run directory; errors list the files it expected.
void cmd_report(const std::string& run_dir);

// mean / sample std (n-1) over per-seed values.
struct Aggregate {
  double mean = 0.0;
  double stddev = 0.0;
  int n = 0;
};
Aggregate aggregate(const std::vector<double>& values);

}  // namespace aftlab
