#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "helpers.hpp"
#include "blo/cli.hpp"

using namespace blo;
using namespace blo::cli;
using namespace blo::test;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("blo-unit-" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::size_t count_lines(const std::string& s) { return std::size_t(std::count(s.begin(), s.end(), '\n')); }

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("config round-trips through its canonical form") {
    const char* texts[] = {
        R"({"problem": "quad_bilevel"})",
        R"({"problem": {"name": "coreset", "params": {"N": 30}, "seed": 4},
            "outer": {"engine": {"kind": "if", "backend": {"kind": "neumann_sum", "terms": 40, "L": "auto"}},
                      "alpha": 0.3, "T": 12, "loop": {"kind": "single", "steps": 3, "beta": "auto"}},
            "repeats": 2, "emit": "csv"})",
        R"({"problem": "quad_finite_sum",
            "outer": {"engine": {"kind": "gu", "mode": "tgu", "K": 10, "tau": 3, "beta": 0.1},
                      "stochastic": {"kind": "momentum_vr", "a": 0.2, "batch_upper": 4, "batch_lower": 4},
                      "theta0": [0, 1, 2, 3, 4]}})",
        R"({"problem": "ns_blo_toy", "outer": {"engine": {"kind": "vf", "mu1": 1e-4, "outer_rounds": 3}}})",
    };
    for (const char* t : texts) {
      CAPTURE(t);
      const ExperimentConfig cfg = parse_config(t);
      const std::string canon = serialize_config(cfg);
      CHECK(parse_config(canon) == cfg);
      CHECK(serialize_config(parse_config(canon)) == canon);
    }
  }

  TEST_CASE("malformed configs raise ConfigurationError") {
    CHECK_THROWS_AS(parse_config("{"), ConfigurationError);
    CHECK_THROWS_AS(parse_config(R"({"problem": "quad_bilevel", "typo": 1})"), ConfigurationError);
    CHECK_THROWS_AS(parse_config(R"({"problem": "quad_bilevel", "outer": {"engine": {"kind": "nope"}}})"),
                    ConfigurationError);
    CHECK_THROWS_AS(parse_config(R"({"problem": "quad_bilevel", "repeats": 0})"), ConfigurationError);
    CHECK_THROWS_AS(load_config("/nonexistent/blo.json"), Error);
  }

  TEST_CASE("list-problems shows the registry") {
    std::ostringstream out;
    cmd_list_problems(out);
    const std::string s = out.str();
    CHECK(s.find("quad_bilevel") != std::string::npos);
    CHECK(s.find("example2") != std::string::npos);
    CHECK(testbed::registry().size() >= 9);
  }

  TEST_CASE("check-grad passes on the quadratic") {
    ExperimentConfig cfg;
    cfg.problem.name = "quad_bilevel";
    std::ostringstream out;
    CHECK(cmd_check_grad(cfg, out) == exit_ok);
    CHECK(out.str().find("FAIL") == std::string::npos);
  }

  TEST_CASE("check-grad flags the Example 2 kink and still exits 0") {
    ExperimentConfig cfg;
    cfg.problem.name = "example2";
    cfg.outer.theta0 = Vec::Constant(1, 0.5);
    std::ostringstream out;
    CHECK(cmd_check_grad(cfg, out) == exit_ok);
    CHECK(out.str().find("kink") != std::string::npos);
  }

  TEST_CASE("check-grad catches a wrong oracle") {
    auto tp = testbed::make_quad_bilevel({});
    const auto honest = tp.problem.upper_grad_phi;
    tp.problem.upper_grad_phi = [honest](const Vec& t, const Vec& p, Batch b) { return Vec(2 * honest(t, p, b)); };
    const auto report = check_grad(tp, {tp.theta0});
    CHECK(report.exit_code() != exit_ok);
  }

  TEST_CASE("run writes one row per outer iteration and distinct seeds per repeat") {
    const fs::path dir = scratch_dir("run");
    ExperimentConfig cfg = parse_config(R"({"problem": "quad_bilevel", "outer": {"T": 7}, "repeats": 3})");
    cfg.output_dir = dir.string();
    std::ostringstream log;
    REQUIRE(cmd_run(cfg, log) == exit_ok);
    const std::string csv = slurp(dir / "report.csv");
    CHECK(count_lines(csv) == 1 + 3 * 7);
    const std::string j0 = slurp(dir / "run_000.json"), j1 = slurp(dir / "run_001.json");
    CHECK(!j0.empty());
    CHECK(j0 != j1);
    fs::remove_all(dir);
  }

  TEST_CASE("run is byte-reproducible") {
    ExperimentConfig cfg = parse_config(
        R"({"problem": "quad_finite_sum", "outer": {"T": 20, "stochastic": {"kind": "sgd", "batch_upper": 4, "batch_lower": 4}}, "repeats": 2})");
    std::ostringstream log;
    std::string first;
    for (int i = 0; i < 2; ++i) {
      const fs::path dir = scratch_dir("repro" + std::to_string(i));
      cfg.output_dir = dir.string();
      REQUIRE(cmd_run(cfg, log) == exit_ok);
      const std::string bytes = slurp(dir / "report.csv") + slurp(dir / "run_000.json") + slurp(dir / "run_001.json");
      if (i == 0) first = bytes;
      else CHECK(bytes == first);
      fs::remove_all(dir);
    }
  }

  TEST_CASE("unwritable output directory raises IoError") {
    const fs::path blocker = scratch_dir("blocker");
    std::ofstream(blocker) << "not a directory";
    ExperimentConfig cfg;
    cfg.problem.name = "quad_bilevel";
    cfg.output_dir = (blocker / "sub").string();
    std::ostringstream log;
    CHECK_THROWS_AS(cmd_run(cfg, log), IoError);
    fs::remove_all(blocker);
  }

  TEST_CASE("output directory falls back to the environment") {
    ExperimentConfig cfg;
    ::setenv(output_dir_env, "/tmp/from-env", 1);
    CHECK(output_directory(cfg) == "/tmp/from-env");
    cfg.output_dir = "explicit";
    CHECK(output_directory(cfg) == "explicit");
    ::unsetenv(output_dir_env);
    cfg.output_dir.clear();
    CHECK(output_directory(cfg) == "blo-out");
  }

  TEST_CASE("bench skips engines a problem does not permit") {
    const BenchConfig cfg = parse_bench(R"({
      "problems": ["quad_bilevel", "example1", "ns_blo_toy"],
      "variants": [{"label": "vf", "outer": {"engine": {"kind": "vf"}}},
                   {"label": "if-cg", "outer": {"engine": {"kind": "if"}}}],
      "outer": {"T": 5}
    })");
    const auto rows = run_bench(cfg, 2);
    REQUIRE(rows.size() == 6);
    for (const auto& r : rows) {
      CAPTURE(r.problem);
      CAPTURE(r.variant);
      const bool runnable = (r.problem == "quad_bilevel") || (r.problem == "ns_blo_toy" && r.variant == "vf");
      CHECK((r.status == "skipped") == !runnable);
    }
    const std::string csv = bench_csv(rows, false);
    CHECK(count_lines(csv) == 1 + 3);
  }

  TEST_CASE("bench: IF-CG and BGU both reach stationarity on the quadratic") {
    const BenchConfig cfg = parse_bench(R"({
      "problems": ["quad_bilevel"],
      "variants": [{"label": "if-cg", "outer": {"engine": {"kind": "if"}}},
                   {"label": "bgu", "outer": {"engine": {"kind": "gu", "mode": "bgu", "K": 60}}}],
      "outer": {"alpha": 0.5, "T": 200}
    })");
    for (const auto& r : run_bench(cfg, 2)) {
      CAPTURE(r.variant);
      REQUIRE(r.exact_stationarity.has_value());
      CHECK(*r.exact_stationarity <= 1e-6);
    }
  }

  TEST_CASE("bench: momentum-VR is at least as stationary as SGD on most paired seeds") {
    const BenchConfig cfg = parse_bench(R"({
      "problems": [{"name": "quad_finite_sum", "seed": 0}],
      "variants": [{"label": "sgd", "outer": {"T": 400, "stochastic": {"kind": "sgd", "batch_upper": 4, "batch_lower": 4}}},
                   {"label": "vr", "outer": {"T": 200, "stochastic": {"kind": "momentum_vr", "a": 0.1, "batch_upper": 4, "batch_lower": 4}}}],
      "outer": {"alpha": 0.1},
      "repeats": 10
    })");
    const auto rows = run_bench(cfg, 4);
    REQUIRE(rows.size() == 20);
    int wins = 0;
    for (Index i = 0; i < 10; ++i) {
      const auto& sgd = rows[std::size_t(i)];
      const auto& vr = rows[std::size_t(10 + i)];
      REQUIRE(sgd.variant == "sgd");
      REQUIRE(vr.variant == "vr");
      CHECK(vr.counters.gradients() <= sgd.counters.gradients());
      if (*vr.exact_stationarity <= *sgd.exact_stationarity) ++wins;
    }
    CHECK(wins >= 6);
  }

  TEST_CASE("bench rejects invalid variants up front") {
    CHECK_THROWS_AS(parse_bench(R"({"problems": ["quad_bilevel"], "variants": [{"label": "x", "outer": {"alpha": -1}}]})"),
                    ConfigurationError);
    CHECK_THROWS_AS(parse_bench(R"({"problems": [], "variants": [{"label": "x"}]})"), ConfigurationError);
  }
}
