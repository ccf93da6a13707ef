#include <atomic>
#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <ostream>
#include <random>
#include <sstream>
#include <thread>

#include "blo/cli.hpp"
#include "json_io.hpp"

namespace blo::cli {

using nlohmann::json;
using testbed::TestProblem;
using testbed::Vec;

namespace {

std::string g17(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

std::string fixed(double x, int digits) {
  std::ostringstream s;
  s << std::scientific << std::setprecision(digits) << x;
  return s.str();
}

void prepare_output_dir(const std::string& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory '" + dir + "': " + ec.message());
  const fs::path probe = fs::path(dir) / ".blo-write-probe";
  {
    std::ofstream out(probe);
    if (!out) throw IoError("output directory '" + dir + "' is not writable");
  }
  fs::remove(probe, ec);
}

void write_file(const std::filesystem::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << content;
  if (!out) throw IoError("write to '" + path.string() + "' failed");
}

json counters_json(const OracleCounters& c) {
  return {{"upper_grads", c.upper_grads}, {"lower_grads", c.lower_grads}, {"hvps", c.hvps},
          {"jvps", c.jvps},               {"projections", c.projections}, {"values", c.values}};
}

testbed::ProblemSpec repeat_spec(const testbed::ProblemSpec& spec, Index repeat) {
  testbed::ProblemSpec s = spec;
  s.seed += static_cast<std::uint64_t>(repeat);
  return s;
}

Vec lower_solution(Oracle<double>& oracle, const TestProblem& tp, const Vec& theta,
                   std::vector<std::string>& warnings) {
  const auto& p = tp.problem;
  if (p.solution_map) return p.solution_map->map(theta);
  try {
    return solve_to_tolerance<double>(oracle, theta, Vec::Zero(p.dim_phi), 1e-12, 1000000, tp.lower_beta).phi;
  } catch (const NotConverged<double>& e) {
    warnings.push_back(std::string("lower solve: ") + e.what());
    return e.best();
  }
}

}  // namespace

// ---- list-problems --------------------------------------------------------

void cmd_list_problems(std::ostream& out) {
  const auto& reg = testbed::registry();
  std::size_t width = 4;
  for (const auto& info : reg) width = std::max(width, info.name.size());
  out << std::left << std::setw(static_cast<int>(width) + 2) << "name" << std::setw(13) << "closed-form"
      << "parameters (defaults)\n";
  for (const auto& info : reg) {
    std::string params;
    for (const auto& p : info.params) {
      if (!params.empty()) params += ", ";
      params += p.name + "=" + g17(p.default_value.at(0));
    }
    if (params.empty()) params = "-";
    out << std::left << std::setw(static_cast<int>(width) + 2) << info.name << std::setw(13)
        << (info.closed_form ? "yes" : "no") << params << "\n";
    out << std::string(width + 2, ' ') << "  " << info.summary << "\n";
  }
  out << reg.size() << " problems\n";
}

// ---- check-grad -------------------------------------------------------------

const char* to_string(CheckStatus s) {
  switch (s) {
    case CheckStatus::pass: return "pass";
    case CheckStatus::fail: return "FAIL";
    case CheckStatus::error: return "ERROR";
    case CheckStatus::skipped: return "skipped";
  }
  return "?";
}

int CheckGradReport::exit_code() const {
  for (const auto& r : rows) {
    if (r.status == CheckStatus::fail || r.status == CheckStatus::error) return exit_check_failed;
  }
  return exit_ok;
}

namespace {

double relative(const Vec& g, const Vec& ref) { return (g - ref).norm() / std::max(ref.norm(), 1e-6); }

CheckRow compare(Index point, std::string engine, const Vec& g, const Vec& ref, double threshold) {
  CheckRow row;
  row.point = point;
  row.engine = std::move(engine);
  row.error = relative(g, ref);
  row.threshold = threshold;
  row.status = row.error <= threshold ? CheckStatus::pass : CheckStatus::fail;
  return row;
}

}  // namespace

CheckGradReport check_grad(const TestProblem& tp, const std::vector<Vec>& points, const CheckGradOptions& opt) {
  CheckGradReport report;
  const auto& p = tp.problem;
  const double L = 1 / tp.lower_beta;
  for (std::size_t k = 0; k < points.size(); ++k) {
    const Index at = static_cast<Index>(k);
    const Vec theta = p.upper_set.project(points[k]);
    if (!tp.smooth) {
      const testbed::OneSided os = testbed::one_sided_hypergrad(tp, theta, opt.kink_step, 0);
      const double gap = (os.right - os.left).norm();
      if (gap > 1e-2 * (1 + os.right.norm())) {
        report.warnings.push_back("point " + std::to_string(at) +
                                  ": one-sided differences disagree by " + fixed(gap, 3) +
                                  "; the hypergradient does not exist here (kink), engines skipped");
        CheckRow row;
        row.point = at;
        row.engine = "all";
        row.message = "kink";
        report.rows.push_back(row);
        continue;
      }
    }
    testbed::FdOptions fd;
    fd.h = opt.fd_step;
    fd.lower_tol = 1e-13;
    const Vec ref = testbed::finite_diff_hypergrad(tp, theta, fd);

    auto guarded = [&](const std::string& engine, auto&& body) {
      try {
        body();
      } catch (const Error& e) {
        CheckRow row;
        row.point = at;
        row.engine = engine;
        row.status = CheckStatus::error;
        row.message = e.what();
        report.rows.push_back(row);
      }
    };

    for (const std::string& kind : tp.engines) {
      if (kind == "if") {
        guarded("if/cg", [&] {
          Oracle<double> o(p);
          const Vec phi = lower_solution(o, tp, theta, report.warnings);
          report.rows.push_back(
              compare(at, "if/cg", hypergrad_if(o, theta, phi, IhvpBackend<double>{backends::Cg<double>{}}).grad,
                      ref, opt.threshold));
        });
        guarded("if/neumann_sum", [&] {
          Oracle<double> o(p);
          const Vec phi = lower_solution(o, tp, theta, report.warnings);
          const auto est = hypergrad_if(o, theta, phi, IhvpBackend<double>{backends::NeumannSum<double>{opt.neumann_terms, L}});
          report.rows.push_back(compare(at, "if/neumann_sum", est.grad, ref, opt.threshold));
        });
        guarded("if/neumann_product", [&] {
          Oracle<double> o(p);
          const Vec phi = lower_solution(o, tp, theta, report.warnings);
          // The randomized product is unbiased for the (terms-1)-term sum.
          const Vec target =
              hypergrad_if(o, theta, phi, IhvpBackend<double>{backends::NeumannSum<double>{opt.product_terms - 1, L}}).grad;
          Vec mean = Vec::Zero(theta.size()), sq = Vec::Zero(theta.size());
          for (Index d = 0; d < opt.product_draws; ++d) {
            const backends::NeumannProduct<double> b{opt.product_terms, L, mix_seed(0x5eed, static_cast<std::uint64_t>(d))};
            const Vec g = hypergrad_if(o, theta, phi, IhvpBackend<double>{b}).grad;
            mean += g;
            sq += g.cwiseAbs2();
          }
          const double n = double(opt.product_draws);
          mean /= n;
          const Vec se = ((sq / n - mean.cwiseAbs2()).cwiseMax(0.0) / (n - 1)).cwiseSqrt();
          double z = 0;
          for (Index i = 0; i < mean.size(); ++i) {
            const double diff = std::abs(mean[i] - target[i]);
            const double floor = 1e-12 * (1 + std::abs(target[i]));
            z = std::max(z, se[i] > floor ? diff / se[i] : (diff <= floor ? 0.0 : INFINITY));
          }
          CheckRow row;
          row.point = at;
          row.engine = "if/neumann_product";
          row.error = z;
          row.threshold = opt.z_limit;
          row.status = z <= opt.z_limit ? CheckStatus::pass : CheckStatus::fail;
          row.message = "z-score of the mean against the " + std::to_string(opt.product_terms - 1) + "-term sum";
          report.rows.push_back(row);
        });
      } else if (kind == "if_constrained") {
        guarded("if_constrained/cg", [&] {
          Oracle<double> o(p);
          const Vec phi = lower_solution(o, tp, theta, report.warnings);
          const auto est = hypergrad_if_constrained(o, theta, phi, IhvpBackend<double>{backends::Cg<double>{}});
          report.rows.push_back(compare(at, "if_constrained/cg", est.grad, ref, opt.threshold));
        });
      } else if (kind == "gu") {
        // Unrolled engines differentiate the K-step objective; compare with its differences.
        const Vec phi0 = Vec::Zero(p.dim_phi);
        Vec unrolled_ref;
        guarded("gu", [&] {
          unrolled_ref = testbed::finite_diff_unrolled(p, theta, phi0, opt.gu_steps, tp.lower_beta, opt.fd_step);
        });
        if (unrolled_ref.size() == 0) continue;
        for (UnrollMode mode : {UnrollMode::fgu, UnrollMode::bgu}) {
          const std::string label = std::string("gu/") + to_string(mode);
          guarded(label, [&] {
            Oracle<double> o(p);
            UnrollPlan<double> plan;
            plan.mode = mode;
            plan.trajectory = solve_gd<double>(o, theta, phi0, opt.gu_steps, tp.lower_beta);
            auto row = compare(at, label, hypergrad_unroll(o, theta, plan).grad, unrolled_ref, opt.threshold);
            row.message = "K = " + std::to_string(opt.gu_steps);
            report.rows.push_back(row);
          });
        }
      } else if (kind == "analytic") {
        guarded("analytic", [&] {
          Oracle<double> o(p);
          report.rows.push_back(compare(at, "analytic", hypergrad_analytic(o, theta).grad, ref, opt.threshold));
        });
      } else {
        CheckRow row;
        row.point = at;
        row.engine = kind;
        row.message = "no pointwise hypergradient";
        report.rows.push_back(row);
      }
    }
  }
  return report;
}

std::vector<Vec> check_points(const ExperimentConfig& cfg, const TestProblem& tp) {
  if (cfg.outer.theta0) return {*cfg.outer.theta0};
  std::vector<Vec> pts{tp.theta0};
  for (std::uint64_t k = 1; k <= 2; ++k) {
    std::mt19937_64 rng(mix_seed(cfg.outer.seed, k));
    std::normal_distribution<double> normal(0.0, 0.25);
    Vec t = tp.theta0;
    for (Index i = 0; i < t.size(); ++i) t[i] += normal(rng);
    pts.push_back(tp.problem.upper_set.project(t));
  }
  return pts;
}

int cmd_check_grad(const ExperimentConfig& cfg, std::ostream& out) {
  const TestProblem tp = testbed::make_problem(cfg.problem);
  const CheckGradReport report = check_grad(tp, check_points(cfg, tp));
  out << std::left << std::setw(7) << "point" << std::setw(22) << "engine" << std::setw(9) << "status"
      << std::setw(12) << "error" << std::setw(12) << "threshold" << "note\n";
  for (const auto& r : report.rows) {
    const bool measured = r.status == CheckStatus::pass || r.status == CheckStatus::fail;
    out << std::left << std::setw(7) << r.point << std::setw(22) << r.engine << std::setw(9) << to_string(r.status)
        << std::setw(12) << (measured ? fixed(r.error, 2) : "-") << std::setw(12)
        << (measured ? fixed(r.threshold, 1) : "-") << r.message << "\n";
  }
  for (const auto& w : report.warnings) out << "warning: " << w << "\n";
  const int code = report.exit_code();
  out << (code == exit_ok ? "check-grad passed" : "check-grad FAILED") << "\n";
  return code;
}

// ---- run ----------------------------------------------------------------------

std::string trace_csv(const std::vector<RunReport<double>>& reports, bool timing) {
  std::string csv = "repeat,iter,objective,stationarity,upper_grads,lower_grads,hvps,jvps,wall_time\n";
  for (std::size_t r = 0; r < reports.size(); ++r) {
    const auto& rep = reports[r];
    for (std::size_t t = 0; t < rep.size(); ++t) {
      const OracleCounters& c = rep.counters_trace[t];
      csv += std::to_string(r) + "," + std::to_string(t) + "," + g17(rep.objective_trace[t]) + "," +
             g17(rep.stationarity_trace[t]) + "," + std::to_string(c.upper_grads) + "," +
             std::to_string(c.lower_grads) + "," + std::to_string(c.hvps) + "," + std::to_string(c.jvps) + "," +
             g17(timing ? rep.time_trace[t] : 0.0) + "\n";
    }
  }
  return csv;
}

std::string report_json(const RunReport<double>& rep, const ExperimentConfig& cfg, Index repeat) {
  json warnings = json::array();
  for (const auto& w : rep.warnings) warnings.push_back(w);
  const json j = {
      {"repeat", repeat},
      {"seed", rep.seed},
      {"problem", detail::problem_json(repeat_spec(cfg.problem, repeat))},
      {"engine", detail::engine_json(cfg.outer.engine)},
      {"termination", to_string(rep.termination)},
      {"failure_reason", rep.failure_reason},
      {"iterations", rep.iterations},
      {"final_objective", rep.objective_trace.empty() ? json(nullptr) : json(rep.objective_trace.back())},
      {"final_stationarity", rep.stationarity_trace.empty() ? json(nullptr) : json(rep.stationarity_trace.back())},
      {"final_violation", rep.violation_trace.empty() ? json(nullptr) : json(rep.violation_trace.back())},
      {"theta_final", detail::vector_json(rep.theta_final)},
      {"phi_final", detail::vector_json(rep.phi_final)},
      {"counters", counters_json(rep.counters)},
      {"engine_counters", counters_json(rep.engine_counters)},
      {"driver_counters", counters_json(rep.driver_counters)},
      {"warnings", warnings},
      {"wall_time", cfg.timing ? rep.wall_time : 0.0}};
  return j.dump(2) + "\n";
}

int cmd_run(const ExperimentConfig& cfg, std::ostream& log) {
  const std::string dir = output_directory(cfg);
  prepare_output_dir(dir);

  // Build and validate every repeat before any compute.
  std::vector<TestProblem> problems;
  std::vector<OuterConfig<double>> outers;
  for (Index i = 0; i < cfg.repeats; ++i) {
    problems.push_back(testbed::make_problem(repeat_spec(cfg.problem, i)));
    OuterConfig<double> outer = resolve(cfg.outer, problems.back());
    outer.seed = cfg.outer.seed + static_cast<std::uint64_t>(i);
    check_config(problems.back().problem, outer);
    outers.push_back(std::move(outer));
  }

  std::vector<RunReport<double>> reports;
  bool failed = false;
  for (Index i = 0; i < cfg.repeats; ++i) {
    reports.push_back(run(problems[static_cast<std::size_t>(i)].problem, outers[static_cast<std::size_t>(i)]));
    const auto& rep = reports.back();
    log << "repeat " << i << " seed " << rep.seed << ": " << to_string(rep.termination) << " after "
        << rep.iterations << " iterations";
    if (!rep.stationarity_trace.empty()) log << ", stationarity " << fixed(rep.stationarity_trace.back(), 3);
    if (rep.termination == Termination::failure) {
      log << " (" << rep.failure_reason << ")";
      failed = true;
    }
    log << "\n";
  }

  namespace fs = std::filesystem;
  if (cfg.emit != Emit::json) write_file(fs::path(dir) / "report.csv", trace_csv(reports, cfg.timing));
  if (cfg.emit != Emit::csv) {
    for (std::size_t i = 0; i < reports.size(); ++i) {
      char name[32];
      std::snprintf(name, sizeof name, "run_%03zu.json", i);
      write_file(fs::path(dir) / name, report_json(reports[i], cfg, static_cast<Index>(i)));
    }
  }
  log << "wrote " << dir << "\n";
  return failed ? exit_runtime_failure : exit_ok;
}

// ---- bench ------------------------------------------------------------------

namespace {

struct Cell {
  std::size_t problem = 0;
  std::size_t variant = 0;
  Index repeat = 0;
  TestProblem tp;
  OuterConfig<double> outer;
  bool skip = false;
  std::string note;
};

}  // namespace

std::vector<BenchRow> run_bench(const BenchConfig& cfg, int jobs) {
  const json base = json::parse(cfg.base_outer);
  std::vector<Cell> cells;
  for (std::size_t p = 0; p < cfg.problems.size(); ++p) {
    for (std::size_t v = 0; v < cfg.variants.size(); ++v) {
      json merged = base;
      merged.merge_patch(json::parse(cfg.variants[v].outer_patch));
      OuterConfig<double> outer = detail::parse_outer(merged);
      if (cfg.seed) outer.seed = *cfg.seed;
      for (Index r = 0; r < cfg.repeats; ++r) {
        Cell c;
        c.problem = p;
        c.variant = v;
        c.repeat = r;
        c.tp = testbed::make_problem(repeat_spec(cfg.problems[p], r));
        c.outer = resolve(outer, c.tp);
        c.outer.seed = outer.seed + static_cast<std::uint64_t>(r);
        const std::string kind = engine_name(c.outer.engine);
        const std::string why = incompatibility(c.tp.problem, c.outer.engine, c.outer.stochastic.index() != 0);
        if (!c.tp.supports(kind) || !why.empty()) {
          c.skip = true;
          c.note = why.empty() ? "engine not applicable to this problem" : why;
        } else {
          check_config(c.tp.problem, c.outer);
        }
        cells.push_back(std::move(c));
      }
    }
  }

  std::vector<BenchRow> rows(cells.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= cells.size()) return;
      const Cell& c = cells[i];
      BenchRow& row = rows[i];
      row.problem = cfg.problems[c.problem].name;
      row.variant = cfg.variants[c.variant].label;
      row.repeat = c.repeat;
      row.seed = c.outer.seed;
      if (c.skip) {
        row.status = "skipped";
        row.note = c.note;
        continue;
      }
      try {
        const RunReport<double> rep = run(c.tp.problem, c.outer);
        row.status = to_string(rep.termination);
        row.note = rep.failure_reason;
        row.iterations = rep.iterations;
        if (!rep.objective_trace.empty()) row.objective = rep.objective_trace.back();
        if (!rep.stationarity_trace.empty()) row.stationarity = rep.stationarity_trace.back();
        if (c.tp.hypergrad) {
          row.exact_stationarity =
              stationarity(rep.theta_final, c.tp.hypergrad(rep.theta_final), c.tp.problem.upper_set, c.outer.alpha);
        }
        row.counters = rep.counters;
        row.wall_time = rep.wall_time;
      } catch (const std::exception& e) {
        row.status = "failure";
        row.note = e.what();
      }
    }
  };
  const int n = std::max(1, jobs);
  std::vector<std::thread> pool;
  for (int t = 1; t < n; ++t) pool.emplace_back(worker);
  worker();
  for (auto& th : pool) th.join();
  return rows;
}

std::string bench_csv(const std::vector<BenchRow>& rows, bool timing) {
  std::string csv =
      "problem,variant,repeat,seed,status,iterations,final_objective,final_stationarity,exact_stationarity,"
      "upper_grads,lower_grads,hvps,jvps,wall_time\n";
  for (const auto& r : rows) {
    if (r.status == "skipped") continue;
    csv += r.problem + "," + r.variant + "," + std::to_string(r.repeat) + "," + std::to_string(r.seed) + "," +
           r.status + "," + std::to_string(r.iterations) + "," + g17(r.objective) + "," + g17(r.stationarity) + "," +
           (r.exact_stationarity ? g17(*r.exact_stationarity) : "") + "," + std::to_string(r.counters.upper_grads) +
           "," + std::to_string(r.counters.lower_grads) + "," + std::to_string(r.counters.hvps) + "," +
           std::to_string(r.counters.jvps) + "," + g17(timing ? r.wall_time : 0.0) + "\n";
  }
  return csv;
}

int cmd_bench(const BenchConfig& cfg, int jobs, std::ostream& log) {
  ExperimentConfig probe;
  probe.output_dir = cfg.output_dir;
  const std::string dir = output_directory(probe);
  prepare_output_dir(dir);
  const std::vector<BenchRow> rows = run_bench(cfg, jobs);
  bool failed = false;
  for (const auto& r : rows) {
    if (r.status == "skipped" && r.repeat == 0) {
      log << "skip " << r.problem << " x " << r.variant << ": " << r.note << "\n";
    }
    if (r.status == "failure") {
      failed = true;
      log << "failure " << r.problem << " x " << r.variant << " repeat " << r.repeat << ": " << r.note << "\n";
    }
  }
  write_file(std::filesystem::path(dir) / "bench.csv", bench_csv(rows, cfg.timing));
  log << "wrote " << dir << "/bench.csv\n";
  return failed ? exit_runtime_failure : exit_ok;
}

}  // namespace blo::cli
