#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "ibr/core/tensor.hpp"
#include "ibr/metrics/metrics.hpp"

#include "json.hpp"

namespace ibr {

namespace fs = std::filesystem;

struct ModelSummary {
  std::string tier, objective;
  double beta = 0;
  double test_acc = 0;  // percent
  double bpp = 0;       // eval mode
  Index params = 0;
  Index encoder_params = 0;
};

struct ProbeSummary {
  std::string tier, objective;
  Index layer = 0;
  double mse = 0, psnr = 0;
};

struct ExperimentReport {
  std::string config_hash, build_id, dataset, precision;
  std::uint64_t master_seed = 0;
  std::map<std::string, std::string> stage_hashes;
  std::vector<ModelSummary> models;
  AggregateReport results;
  std::vector<ProbeSummary> probes;
  bool has_attacks = false;
};

nlohmann::json to_json(const ExperimentReport& report);
ExperimentReport report_from_json(const nlohmann::json& j);
ExperimentReport load_report(const fs::path& path);

// Fixed schemas, each preceded by a "# config_hash=<hash>" line.
//   robustness.csv: tier,objective,attack,clean_acc,adv_acc,drop
//   norms.csv: tier,objective,attack,l0_frac_mean,l2_mean,linf_mean,l0_frac_std,l2_std,linf_std,subset,count
std::string robustness_csv(const ExperimentReport& report);
std::string norms_csv(const ExperimentReport& report);

// report.json always; robustness.csv and norms.csv when attacks ran.
std::vector<fs::path> write_report_files(const ExperimentReport& report, const fs::path& dir);

// One grouped bar chart per metric ("l0_frac", "l2", "linf"): a group per attack and a bar per
// tier/objective, over all attacked samples. Throws EmptyReport without norm summaries.
std::string norm_chart_svg(const ExperimentReport& report, const std::string& metric);
std::vector<fs::path> emit_plots(const ExperimentReport& report, const fs::path& dir);

// id,label,target,pred_clean,pred_adv,success,l0_frac,l2,linf,iters
void write_samples_csv(const std::vector<SampleRecord>& records, const std::string& hash, const fs::path& path);
std::vector<SampleRecord> read_samples_csv(const fs::path& path, const std::string& tier, const std::string& objective,
                                           const std::string& attack);

// Clean and adversarial [C,H,W] images side by side as an 8-bit gray or RGB PNG.
void write_png_pair(const Tensor<float>& clean, const Tensor<float>& adversarial, const fs::path& path,
                    const std::string& hash);

// Text written atomically through a temporary sibling file.
void write_text(const fs::path& path, const std::string& text);
std::string read_text(const fs::path& path);

// "%.9g"
std::string format_real(double v);

}  // namespace ibr
