// aftlab command line: dataset generation, experiment runs, report
// rendering, and the finite-difference gradient suite.
#include "aftlab/experiments.hpp"
#include "aftlab/gradcheck.hpp"
#include "aftlab/util.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <exception>
#include <string>

namespace {

using aftlab::ExperimentConfig;

ExperimentConfig load_config(const std::string& path, std::optional<std::uint64_t> seed_override,
                             const std::string& out_override) {
  ExperimentConfig cfg;
  if (!path.empty())
    cfg = aftlab::experiment_config_from_json(nlohmann::json::parse(aftlab::read_file(path)));
  if (seed_override) cfg.seeds = {*seed_override};
  if (!out_override.empty()) cfg.out_dir = out_override;
  return cfg;
}

int run_gen_data(const ExperimentConfig& cfg, bool force) {
  aftlab::GenDataReport rep = aftlab::cmd_gen_data(cfg, force);
  std::printf("wrote %s (%d), %s (%d), %s (%d)\n", rep.train_path.c_str(), rep.n_train,
              rep.valid_path.c_str(), rep.n_valid, rep.test_path.c_str(), rep.n_test);
  return 0;
}

int run_experiment(const ExperimentConfig& cfg, const std::string& name) {
  aftlab::DatasetSplits data = aftlab::load_dataset(cfg);
  aftlab::ExperimentReport rep = aftlab::cmd_run(cfg, name, data);
  int errors = 0;
  for (const aftlab::CellResult& c : rep.cells)
    if (!c.error.empty()) {
      ++errors;
      std::fprintf(stderr, "cell %s seed %llu failed: %s\n", c.row.c_str(),
                   static_cast<unsigned long long>(c.seed), c.error.c_str());
    }
  std::printf("experiment %s: %zu cells (%d failed) -> %s\n", name.c_str(), rep.cells.size(),
              errors, rep.dir.c_str());
  std::string tables = aftlab::read_file(rep.dir + "/tables.txt");
  std::fputs(tables.c_str(), stdout);
  return errors == 0 ? 0 : 1;
}

int run_grad_check(std::uint64_t seed, int instances) {
  aftlab::SuiteResult losses = aftlab::run_loss_fd_suite(instances, seed);
  int pass = 0;
  for (const aftlab::SuiteCase& c : losses.cases) pass += c.ok ? 1 : 0;
  std::printf("loss gradient suite: %d/%zu instances pass (max issue-free rel err %.3e) in %.2fs\n",
              pass, losses.cases.size(), 0.0, losses.seconds);
  for (const aftlab::SuiteCase& c : losses.cases)
    if (!c.ok)
      std::printf("  FAIL %s: max_rel=%.3e forward_gap=%.3e issues=%zu\n", c.name.c_str(),
                  c.fd.max_rel_err, c.forward_gap, c.fd.issues.size());
  aftlab::SuiteResult model = aftlab::run_model_fd_suite(seed);
  for (const aftlab::SuiteCase& c : model.cases)
    std::printf("model suite %s: %s (%ld entries, max rel err %.3e)\n", c.name.c_str(),
                c.ok ? "pass" : "FAIL", c.fd.entries, c.fd.max_rel_err);
  std::printf("model suite runtime: %.2fs\n", model.seconds);
  return losses.ok && model.ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"alignment fine-tuning laboratory"};
  app.require_subcommand(1);
  app.fallthrough();  // global flags may follow the subcommand

  std::string config_path;
  std::string out_override;
  std::optional<std::uint64_t> seed_override;
  bool force = false;
  app.add_option("--config", config_path, "experiment config JSON (defaults used when omitted)");
  app.add_option("--seed", seed_override, "replace the config's seed list with one seed");
  app.add_option("--out", out_override, "override the output directory");

  CLI::App* gen = app.add_subcommand("gen-data", "generate train/valid/test JSONL splits");
  gen->add_flag("--force", force, "overwrite existing dataset files");

  std::string experiment;
  CLI::App* run = app.add_subcommand("run", "run a named experiment");
  std::string names;
  for (const std::string& n : aftlab::experiment_names()) names += (names.empty() ? "" : ", ") + n;
  run->add_option("experiment", experiment, "one of: " + names)->required();

  std::string report_dir;
  CLI::App* report = app.add_subcommand("report", "re-render plot-ready files for a finished run");
  report->add_option("run_dir", report_dir, "experiment output directory")->required();

  CLI::App* grad = app.add_subcommand("grad-check", "finite-difference gradient suite");
  std::uint64_t grad_seed = 2024;
  int grad_instances = 20;
  grad->add_option("--suite-seed", grad_seed, "suite rng seed");
  grad->add_option("--instances", grad_instances, "random instances per loss");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return run_gen_data(load_config(config_path, seed_override, out_override), force);
    if (run->parsed())
      return run_experiment(load_config(config_path, seed_override, out_override), experiment);
    if (report->parsed()) {
      aftlab::cmd_report(report_dir);
      std::printf("wrote %s/tidy_long.csv and %s/tables.txt\n", report_dir.c_str(),
                  report_dir.c_str());
      return 0;
    }
    if (grad->parsed()) return run_grad_check(grad_seed, grad_instances);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
