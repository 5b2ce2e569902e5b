#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "ibr/harness/pipeline.hpp"

namespace {

using nlohmann::json;

struct Flags {
  std::string config, out;
  std::optional<std::uint64_t> seed;
  std::optional<long> limit;
  std::string precision;
  bool quiet = false;
};

ibr::ExperimentConfig resolve(const Flags& f) {
  std::ifstream in(f.config);
  if (!in) throw ibr::Error(ibr::ErrorCode::config_error, "cannot open config " + f.config);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ibr::Error(ibr::ErrorCode::config_error, f.config + ": " + e.what());
  }
  if (!j.is_object()) throw ibr::Error(ibr::ErrorCode::config_error, "config must be a JSON object");
  if (f.seed) {
    j["master_seed"] = *f.seed;
    j["train"]["seed"] = *f.seed;
  }
  if (f.limit) j["sample_limit"] = *f.limit;
  if (!f.precision.empty()) j["precision"] = f.precision;
  if (!f.out.empty()) j["output_dir"] = f.out;
  return ibr::parse_config(j);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adversarial robustness experiments for bottleneck-injected classifiers"};
  app.require_subcommand(1);
  Flags flags;

  struct Command {
    const char* name;
    const char* help;
    ibr::RunOptions options;
  };
  const Command commands[] = {
      {"train", "Train every configured model", {true, false, false, false, false}},
      {"attack", "Train as needed, then run every configured attack", {true, true, false, false, false}},
      {"probe", "Train as needed, then fit layer reconstruction probes", {true, false, true, false, false}},
      {"analyze", "Aggregate completed stages into report.json, robustness.csv and norms.csv",
       {false, false, false, true, false}},
      {"run", "Full pipeline: train, attack, probe, analyze, plot", {true, true, true, true, true}},
  };
  for (const Command& c : commands) {
    CLI::App* sub = app.add_subcommand(c.name, c.help);
    sub->add_option("--config", flags.config, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
    sub->add_option("--out", flags.out, "Output directory (overrides output_dir)");
    sub->add_option("--seed", flags.seed, "Master and training seed");
    sub->add_option("--limit", flags.limit, "Attack the first N test samples")->check(CLI::PositiveNumber);
    sub->add_option("--precision", flags.precision, "Floating point precision")->check(CLI::IsMember({"f32", "f64"}));
    sub->add_flag("--quiet", flags.quiet, "Suppress progress output");
  }
  CLI::App* plot = app.add_subcommand("plot", "Write SVG norm charts from an existing report.json");
  plot->add_option("--out", flags.out, "Directory holding report.json")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (plot->parsed()) {
      for (const auto& p : ibr::plot_report(flags.out)) std::cout << p.string() << "\n";
      return 0;
    }
    for (const Command& c : commands) {
      if (!app.got_subcommand(c.name)) continue;
      const ibr::ExperimentConfig cfg = resolve(flags);
      ibr::RunOptions options = c.options;
      options.log = flags.quiet ? nullptr : &std::cerr;
      const ibr::ExperimentReport report = ibr::run_experiment(cfg, options);
      if (options.analyze) std::cout << (cfg.output_dir / "report.json").string() << "\n";
      (void)report;
    }
    return 0;
  } catch (const ibr::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return ibr::exit_code_for(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  }
}
