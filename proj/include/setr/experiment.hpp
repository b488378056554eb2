// Experiment configuration and the end-to-end runner: arms x seeds x folds,
// with metric tables, plot data, checkpoints, and per-stage logs on disk.
#pragma once

#include "setr/harness.hpp"

#include <string>
#include <vector>

namespace setr {

struct ExperimentConfig {
  std::string mode = "pkd";  // pkd | direct | plain
  std::string data = "synthetic";  // "synthetic" or a dataset directory
  SyntheticSpec synth;
  SetrConfig model;
  DistillConfig distill;
  int k = 8;
  std::vector<double> fractions = {0.25, 0.5, 0.75, 1.0};
  std::vector<uint64_t> seeds = {1};
  int folds = 5;
  int max_folds = 0;  // 0 = run all folds
  bool stratified = true;
  double val_fraction = 0.2;  // of training patients, held out per stage

  void validate() const;
};

// key = value lines; '#' starts a comment. Unknown keys are rejected.
ExperimentConfig parse_experiment_config(const std::string& path);
ExperimentConfig parse_experiment_config_text(const std::string& text);

struct MetricRow {
  std::string arm;
  uint64_t seed = 0;
  int fold = 0;
  double fraction = 0.0;
  Metrics metrics;
};

struct ExperimentResult {
  std::vector<MetricRow> rows;
  std::vector<std::string> failures;  // "arm,seed,fold: message"
};

// Runs the listed arms for every (seed, fold) task. jobs > 1 distributes
// tasks over threads; outputs are identical for any job count because
// every task owns its RNG streams and rows are sorted before writing.
// Failures are recorded and remaining tasks continue.
ExperimentResult run_experiment(const ExperimentConfig& config,
                                const std::vector<std::string>& arms, const std::string& out_dir,
                                int jobs = 1);

}  // namespace setr
