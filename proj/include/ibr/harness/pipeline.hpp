#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "ibr/harness/config.hpp"
#include "ibr/harness/report.hpp"

namespace ibr {

/// Which stage families to run. Earlier stages a later one depends on run (or resume) first.
struct RunOptions {
  bool train = true;
  bool attack = true;
  bool probe = true;
  bool analyze = true;
  bool plot = true;
  std::ostream* log = nullptr;  // progress lines; nullptr keeps quiet
};

/// Bookkeeping for one completed stage, stored as <out>/stages/<name>.json.
struct StageManifest {
  std::string stage, hash;
  double seconds = 0;
  std::vector<std::string> outputs;  // relative to the output directory
  nlohmann::json result;
};

std::optional<StageManifest> read_manifest(const std::filesystem::path& out_dir, const std::string& stage);

// Training data and the test split for a config, in canonical order with train_limit applied.
// MNIST and CIFAR-10 come from data_dir or IBR_MNIST_DIR / IBR_CIFAR10_DIR.
struct ExperimentData {
  Dataset<float> train, test;
};
ExperimentData load_experiment_data(const ExperimentConfig& cfg);

// Runs train -> attack -> analyze -> plot, skipping stages whose manifest matches. Writes
// report.json, robustness.csv, norms.csv, samples/, models/, metrics/, stages/ and SVG plots
// under cfg.output_dir. Failures inside a stage surface as StageFailure.
ExperimentReport run_experiment(const ExperimentConfig& cfg, const RunOptions& options = {});

// Reads report.json from `dir` and writes the SVG charts next to it.
std::vector<std::filesystem::path> plot_report(const std::filesystem::path& dir);

// 0 success, 2 config error, 3 data error, 4 stage failure or anything else.
int exit_code_for(ErrorCode code);

// Build identifier embedded in reports.
std::string build_id();

}  // namespace ibr
