#pragma once

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "blo/blo.hpp"
#include "blo/testbed.hpp"

namespace blo::cli {

inline constexpr int exit_ok = 0;
inline constexpr int exit_check_failed = 1;
inline constexpr int exit_config_error = 2;
inline constexpr int exit_runtime_failure = 3;

/// Environment variable naming the default output directory.
inline constexpr const char* output_dir_env = "BLO_OUTPUT_DIR";

enum class Emit { csv, json, both };

/// One experiment: a problem, an outer configuration and a repeat count.
///
/// Stepsizes stored as 0 mean "derive from the problem" (serialized as
/// "auto"): GU beta, loop beta and NeumannSum/NeumannProduct L use
/// the problem's safe lower stepsize. A missing theta0 uses the problem's
/// suggested start. Repeat i runs with problem seed problem.seed + i and
/// outer seed outer.seed + i.
struct ExperimentConfig {
  testbed::ProblemSpec problem;
  OuterConfig<double> outer;
  Index repeats = 1;
  std::string output_dir;  // empty: $BLO_OUTPUT_DIR, then "blo-out"
  Emit emit = Emit::both;
  /// Record wall-clock times. Off by default so that outputs are byte-stable.
  bool timing = false;
};

/// JSON text -> config. Throws ConfigurationError on malformed input.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::string& path);
/// Canonical JSON; parse_config(serialize_config(c)) == c.
std::string serialize_config(const ExperimentConfig& cfg);
bool operator==(const ExperimentConfig& a, const ExperimentConfig& b);

/// Fills "auto" stepsizes and theta0 from a constructed problem.
OuterConfig<double> resolve(const OuterConfig<double>& outer, const testbed::TestProblem& tp);

/// Output directory after applying the environment default.
std::string output_directory(const ExperimentConfig& cfg);

// ---- list-problems ----------------------------------------------------

void cmd_list_problems(std::ostream& out);

// ---- check-grad -------------------------------------------------------

struct CheckGradOptions {
  double threshold = 1e-4;  // relative error for IF, GU and analytic engines
  Index neumann_terms = 2000;
  Index product_terms = 100;
  Index product_draws = 400;
  double z_limit = 4;  // NeumannProduct: max per-coordinate |mean - target| / SE
  double fd_step = 1e-5;
  double kink_step = 1e-4;
  Index gu_steps = 500;
};

enum class CheckStatus { pass, fail, error, skipped };
const char* to_string(CheckStatus s);

struct CheckRow {
  Index point = 0;
  std::string engine;
  CheckStatus status = CheckStatus::skipped;
  double error = 0;  // relative error, or z-score for the statistical test
  double threshold = 0;
  std::string message;
};

struct CheckGradReport {
  std::vector<CheckRow> rows;
  std::vector<std::string> warnings;
  int exit_code() const;
};

/// Compares every applicable engine with finite differences at each point.
/// Points where one-sided differences disagree are reported as kinks and
/// skipped with a warning.
CheckGradReport check_grad(const testbed::TestProblem& tp, const std::vector<Vector<double>>& points,
                           const CheckGradOptions& opt = {});
/// Points to probe for a config: theta0 if given, else the problem start
/// plus two seeded perturbations.
std::vector<Vector<double>> check_points(const ExperimentConfig& cfg, const testbed::TestProblem& tp);
int cmd_check_grad(const ExperimentConfig& cfg, std::ostream& out);

// ---- run ----------------------------------------------------------------

/// Writes report.csv and run_<i>.json per the config. Returns an exit code.
int cmd_run(const ExperimentConfig& cfg, std::ostream& log);

/// Aggregate CSV text for a set of reports (columns documented in README).
std::string trace_csv(const std::vector<RunReport<double>>& reports, bool timing);
std::string report_json(const RunReport<double>& report, const ExperimentConfig& cfg, Index repeat);

// ---- bench --------------------------------------------------------------

struct BenchVariant {
  std::string label;
  std::string outer_patch;  // JSON merge patch applied to the base outer config
};

struct BenchConfig {
  std::vector<testbed::ProblemSpec> problems;
  std::vector<BenchVariant> variants;
  std::string base_outer;  // JSON object
  Index repeats = 1;
  std::string output_dir;
  bool timing = false;
  /// Replaces every variant's outer seed when set (the --seed flag).
  std::optional<std::uint64_t> seed;
};

BenchConfig parse_bench(const std::string& text);
BenchConfig load_bench(const std::string& path);

struct BenchRow {
  std::string problem;
  std::string variant;
  Index repeat = 0;
  std::uint64_t seed = 0;
  std::string status;  // tol-met | budget | failure | skipped
  std::string note;
  Index iterations = 0;
  double objective = 0;
  double stationarity = 0;
  std::optional<double> exact_stationarity;
  OracleCounters counters;
  double wall_time = 0;
};

/// Runs the problems x variants grid on `jobs` threads; rows come back in grid order.
std::vector<BenchRow> run_bench(const BenchConfig& cfg, int jobs);
std::string bench_csv(const std::vector<BenchRow>& rows, bool timing);
int cmd_bench(const BenchConfig& cfg, int jobs, std::ostream& log);

}  // namespace blo::cli
