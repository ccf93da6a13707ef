#include <doctest.h>

#include "helpers.hpp"
#include "blo/testbed.hpp"

using namespace blo;
using namespace blo::test;

TEST_SUITE("driver") {
  TEST_CASE("IF-CG double loop converges to theta* on the quadratic") {
    const auto tp = testbed::make_quad_bilevel({});
    OuterConfig<double> cfg;
    cfg.alpha = 0.5;
    cfg.T = 2000;
    cfg.stationarity_tol = 1e-20;
    const auto r = run(tp.problem, cfg);
    CHECK(r.termination == Termination::tol_met);
    CHECK((r.theta_final - *tp.theta_star).norm() <= 1e-8);
    CHECK(r.size() == r.objective_trace.size());
    CHECK(r.counters == r.engine_counters + r.driver_counters);
  }

  TEST_CASE("objective decreases along a small-step run") {
    const auto tp = testbed::make_quad_bilevel({});
    OuterConfig<double> cfg;
    cfg.alpha = 0.1;
    cfg.T = 50;
    const auto r = run(tp.problem, cfg);
    for (std::size_t t = 1; t < r.size(); ++t) CHECK(r.objective_trace[t] <= r.objective_trace[t - 1] + 1e-12);
  }

  TEST_CASE("runs are deterministic for a fixed seed") {
    const auto tp = testbed::make_quad_finite_sum(32, 3, 3, 1, 1, 0);
    OuterConfig<double> cfg;
    cfg.T = 40;
    cfg.seed = 5;
    cfg.stochastic = stochastic::MomentumVr<double>{0.2, 4, 4, true};
    const auto a = run(tp.problem, cfg);
    const auto b = run(tp.problem, cfg);
    CHECK(a.theta_trace == b.theta_trace);
    cfg.seed = 6;
    CHECK(run(tp.problem, cfg).theta_final != a.theta_final);
  }

  TEST_CASE("full-batch SGD reproduces the deterministic trace") {
    const auto tp = testbed::make_quad_finite_sum(16, 3, 3, 1, 1, 0);
    OuterConfig<double> cfg;
    cfg.T = 30;
    const auto det = run(tp.problem, cfg);
    cfg.stochastic = stochastic::Sgd{16, 16};
    const auto sto = run(tp.problem, cfg);
    CHECK(det.theta_trace == sto.theta_trace);
    CHECK(det.objective_trace == sto.objective_trace);
  }

  TEST_CASE("single loop with GU warm start makes progress") {
    const auto tp = testbed::make_quad_bilevel({});
    OuterConfig<double> cfg;
    cfg.engine = engines::Gu<double>{UnrollMode::bgu, 5, tp.lower_beta, 0, true};
    cfg.loop = loops::Single<double>{5, tp.lower_beta};
    cfg.alpha = 0.3;
    cfg.T = 300;
    const auto r = run(tp.problem, cfg);
    CHECK((r.theta_final - *tp.theta_star).norm() < 0.1 * (tp.theta0 - *tp.theta_star).norm());
  }

  TEST_CASE("incompatible engines are refused with a reason") {
    const auto quad = testbed::make_quad_bilevel({});
    const auto ex2 = testbed::make_example2();
    const auto ex1 = testbed::make_example1();
    CHECK(incompatibility(quad.problem, Engine<double>{engines::IfConstrained<double>{}}) != "");
    CHECK(incompatibility(ex2.problem, Engine<double>{engines::If<double>{}}) != "");
    CHECK(incompatibility(ex2.problem, Engine<double>{engines::Gu<double>{}}) != "");
    CHECK(incompatibility(ex1.problem, Engine<double>{engines::If<double>{}}) != "");
    CHECK(incompatibility(ex1.problem, Engine<double>{engines::Analytic{}}) == "");
    CHECK(incompatibility(quad.problem, Engine<double>{engines::Vf<double>{}}, true) != "");
    CHECK(incompatibility(quad.problem, Engine<double>{engines::Gu<double>{}}) == "");
  }

  TEST_CASE("check_config rejects invalid settings") {
    const auto tp = testbed::make_quad_bilevel({});
    OuterConfig<double> cfg;
    cfg.alpha = 0;
    CHECK_THROWS_AS(check_config(tp.problem, cfg), ConfigurationError);
    cfg = {};
    cfg.theta0 = Vec::Zero(3);
    CHECK_THROWS_AS(check_config(tp.problem, cfg), ConfigurationError);
    cfg = {};
    cfg.stochastic = stochastic::Sgd{4, 4};
    CHECK_THROWS_AS(check_config(tp.problem, cfg), ConfigurationError);
    cfg = {};
    cfg.engine = engines::If<double>{backends::NeumannSum<double>{5, -1}};
    CHECK_THROWS_AS(check_config(tp.problem, cfg), ConfigurationError);
  }

  TEST_CASE("stationarity uses the projected-gradient mapping on constrained sets") {
    const auto set = ConstraintSet<double>::box(1, 0, 1);
    CHECK(stationarity<double>(Vec::Zero(1), Vec::Ones(1), set, 0.5) == 0);
    CHECK(stationarity<double>(Vec::Zero(1), Vec::Constant(1, -1), set, 0.5) == doctest::Approx(1));
    CHECK(stationarity<double>(Vec::Zero(1), Vec::Constant(1, 3), ConstraintSet<double>::unconstrained(), 0.5) ==
          doctest::Approx(9));
  }

  TEST_CASE("engine failure is recorded in the termination") {
    auto tp = testbed::make_quad_bilevel({});
    tp.problem.lower_hvp_phiphi = [](const Vec&, const Vec&, const Vec& v, Batch) { return Vec(-v); };
    OuterConfig<double> cfg;
    cfg.T = 5;
    const auto r = run(tp.problem, cfg);
    CHECK(r.termination == Termination::failure);
    CHECK(!r.failure_reason.empty());
  }

  TEST_CASE("VF engine runs through the driver") {
    const auto tp = testbed::make_ns_blo_toy();
    OuterConfig<double> cfg;
    cfg.engine = engines::Vf<double>{};
    const auto r = run(tp.problem, cfg);
    CHECK(std::abs(r.theta_final[0]) <= 1e-2);
    CHECK(std::abs(r.phi_final[1] - 1) <= 1e-2);
  }
}
