#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "blo/cli.hpp"

namespace {

using namespace blo::cli;

void apply_overrides(ExperimentConfig& cfg, const std::optional<std::uint64_t>& seed, const std::string& out) {
  if (seed) {
    cfg.problem.seed = *seed;
    cfg.outer.seed = *seed;
  }
  if (!out.empty()) cfg.output_dir = out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bilevel optimization solvers and benchmarks"};
  app.require_subcommand(1);

  std::string config_path, out_dir, problem_name;
  std::optional<std::uint64_t> seed;
  std::vector<double> theta;
  int jobs = 1;

  auto* list = app.add_subcommand("list-problems", "List registered problems and their parameters");

  auto* check = app.add_subcommand("check-grad", "Compare every applicable engine with finite differences");
  check->add_option("--config", config_path, "Experiment config (JSON)");
  check->add_option("--problem", problem_name, "Problem name (instead of --config)");
  check->add_option("--theta", theta, "Point to check (default: problem start plus two perturbations)");
  check->add_option("--seed", seed, "Overrides problem and outer seeds");

  auto* runc = app.add_subcommand("run", "Run an experiment and write its reports");
  runc->add_option("--config", config_path, "Experiment config (JSON)")->required();
  runc->add_option("--out", out_dir, "Output directory (default: config, then $BLO_OUTPUT_DIR, then blo-out)");
  runc->add_option("--seed", seed, "Overrides problem and outer seeds");

  auto* bench = app.add_subcommand("bench", "Run a problems x variants grid");
  bench->add_option("--config", config_path, "Bench config (JSON)")->required();
  bench->add_option("--out", out_dir, "Output directory");
  bench->add_option("--seed", seed, "Overrides the base outer seed");
  bench->add_option("--jobs", jobs, "Worker threads")->check(CLI::PositiveNumber);

  auto* show = app.add_subcommand("config", "Print a config in canonical form");
  show->add_option("--config", config_path, "Experiment config (JSON)")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? exit_ok : exit_config_error;
  }

  try {
    if (list->parsed()) {
      cmd_list_problems(std::cout);
      return exit_ok;
    }
    if (check->parsed()) {
      ExperimentConfig cfg;
      if (!config_path.empty()) {
        cfg = load_config(config_path);
      } else if (!problem_name.empty()) {
        cfg.problem.name = problem_name;
      } else {
        std::cerr << "check-grad needs --config or --problem\n";
        return exit_config_error;
      }
      if (!theta.empty()) cfg.outer.theta0 = Eigen::Map<const blo::Vector<double>>(theta.data(), Eigen::Index(theta.size()));
      apply_overrides(cfg, seed, "");
      return cmd_check_grad(cfg, std::cout);
    }
    if (runc->parsed()) {
      ExperimentConfig cfg = load_config(config_path);
      apply_overrides(cfg, seed, out_dir);
      return cmd_run(cfg, std::cout);
    }
    if (bench->parsed()) {
      BenchConfig cfg = load_bench(config_path);
      if (!out_dir.empty()) cfg.output_dir = out_dir;
      if (seed) cfg.seed = *seed;
      return cmd_bench(cfg, jobs, std::cout);
    }
    if (show->parsed()) {
      std::cout << serialize_config(load_config(config_path));
      return exit_ok;
    }
  } catch (const blo::ConfigurationError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return exit_config_error;
  } catch (const blo::ArgumentError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return exit_config_error;
  } catch (const blo::InvalidSetError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return exit_config_error;
  } catch (const std::exception& e) {
    std::cerr << "runtime failure: " << e.what() << "\n";
    return exit_runtime_failure;
  }
  return exit_ok;
}
