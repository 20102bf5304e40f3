// hardcon: run experiments from key = value configs and compare metric traces.

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "hardcon/experiment.hpp"

namespace {

int cmd_run(const std::string& config_path, const std::optional<std::string>& out_flag,
            const std::optional<std::uint64_t>& seed, bool full_scale) {
  hardcon::ExperimentConfig cfg;
  std::filesystem::path out;
  try {
    cfg = hardcon::load_config(config_path);
    if (seed) cfg.train.seed = *seed;
    if (full_scale) {
      if (cfg.kind != hardcon::ExperimentKind::spheres)
        throw hardcon::ConfigError(0, "--full-scale", "only applies to spheres experiments");
      cfg.dim = 1'000'000;
    }
    out = hardcon::resolve_out_dir(cfg, config_path, out_flag);
    return hardcon::run_experiment(cfg, out, std::cerr);
  } catch (const hardcon::ConfigError& e) {
    std::cerr << "config error: " << config_path << ": " << e.what() << '\n';
    return hardcon::kExitConfig;
  } catch (const hardcon::NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return hardcon::kExitNumerical;
  }
}

int cmd_compare(const std::string& a, const std::string& b) {
  try {
    const auto ta = hardcon::read_metrics_csv(a);
    const auto tb = hardcon::read_metrics_csv(b);
    std::cout << hardcon::to_json(hardcon::compare_traces(ta.rows, tb.rows)).dump(2) << '\n';
    return hardcon::kExitOk;
  } catch (const std::exception& e) {
    std::cerr << "compare: " << e.what() << '\n';
    return hardcon::kExitConfig;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hard and soft constrained training experiments"};
  app.require_subcommand(1);

  std::optional<std::string> out_dir;
  std::optional<std::uint64_t> seed;
  bool full_scale = false;
  std::string config_path;
  auto* run = app.add_subcommand("run", "Run the experiment described by a config file");
  run->add_option("config", config_path, "key = value config file")->required();
  run->add_option("--out-dir", out_dir,
                  std::string("Output directory (default: $") + hardcon::kOutRootEnv + "/<config name> or runs/<config name>)");
  run->add_option("--seed", seed, "Override the config seed");
  run->add_flag("--full-scale", full_scale, "Spheres at d = 1e6");

  std::string report_a, report_b;
  auto* compare = app.add_subcommand("compare", "Paired statistics of two metrics.csv files");
  compare->add_option("a", report_a, "first metrics.csv")->required();
  compare->add_option("b", report_b, "second metrics.csv")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : hardcon::kExitConfig;
  }

  if (*run) return cmd_run(config_path, out_dir, seed, full_scale);
  return cmd_compare(report_a, report_b);
}
