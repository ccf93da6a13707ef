#include <doctest.h>

#include "helpers.hpp"
#include "blo/testbed.hpp"

using namespace blo;
using namespace blo::test;
using testbed::TestProblem;

namespace {

Vec lower_solution(const TestProblem& tp, const Vec& theta) {
  if (tp.problem.solution_map) return tp.problem.solution_map->map(theta);
  Oracle<double> o(tp.problem);
  return solve_to_tolerance<double>(o, theta, Vec::Zero(tp.problem.dim_phi), 1e-13, 1000000, tp.lower_beta).phi;
}

}  // namespace

TEST_SUITE("hypergrad") {
  TEST_CASE("closed-form hypergradients agree with finite differences") {
    testbed::FdOptions fd;
    fd.lower_tol = 1e-13;
    for (const auto& info : testbed::registry()) {
      const TestProblem tp = testbed::make_problem({info.name, {}, 0});
      if (!tp.hypergrad) continue;
      for (std::uint64_t k = 0; k < 3; ++k) {
        CAPTURE(info.name);
        CAPTURE(k);
        const Vec theta = tp.problem.upper_set.project(tp.theta0 + gaussian(tp.problem.dim_theta, 40 + k, 0.2));
        if (info.name == "example2" && std::abs(theta[0] - 0.5) < 1e-3) continue;
        const Vec ref = testbed::finite_diff_hypergrad(tp, theta, fd);
        CHECK((tp.hypergrad(theta) - ref).norm() <= 1e-5 * std::max(1.0, ref.norm()));
      }
    }
  }

  TEST_CASE("IF with CG matches the closed form on unconstrained problems") {
    for (const char* name : {"quad_bilevel", "mmo_quadratic", "coreset", "bip_toy"}) {
      CAPTURE(name);
      const TestProblem tp = testbed::make_problem({name, {}, 1});
      Oracle<double> o(tp.problem);
      const Vec phi = lower_solution(tp, tp.theta0);
      const auto est = hypergrad_if(o, tp.theta0, phi, IhvpBackend<double>{backends::Cg<double>{}});
      CHECK(rel(est.grad, tp.hypergrad(tp.theta0)) <= 1e-8);
      CHECK(est.backend_tag.find("cg") != std::string::npos);
    }
  }

  TEST_CASE("constrained IF matches the closed form and reports the active set") {
    for (const char* name : {"constrained_qp", "reweight_simplex", "example2"}) {
      CAPTURE(name);
      const TestProblem tp = testbed::make_problem({name, {}, 2});
      Oracle<double> o(tp.problem);
      const Vec theta = name == std::string("example2") ? Vec::Constant(1, 0.3) : tp.theta0;
      const Vec phi = lower_solution(tp, theta);
      const auto est = hypergrad_if_constrained(o, theta, phi, IhvpBackend<double>{backends::Cg<double>{}});
      testbed::FdOptions fd;
      fd.lower_tol = 1e-13;
      const Vec ref = tp.hypergrad ? tp.hypergrad(theta) : testbed::finite_diff_hypergrad(tp, theta, fd);
      CHECK(rel(est.grad, ref) <= 1e-6);
      CHECK(est.active_set.has_value());
    }
  }

  TEST_CASE("IF refuses constrained or coupled lower levels") {
    const TestProblem ex2 = testbed::make_example2();
    Oracle<double> o2(ex2.problem);
    CHECK_THROWS_AS(hypergrad_if<double>(o2, Vec::Constant(1, 0.2), Vec::Constant(1, 0.5),
                                 IhvpBackend<double>{backends::Cg<double>{}}),
                    ArgumentError);
    const TestProblem ex1 = testbed::make_example1();
    Oracle<double> o1(ex1.problem);
    CHECK_THROWS_AS(hypergrad_if<double>(o1, Vec::Ones(1), Vec::Ones(1), IhvpBackend<double>{backends::Cg<double>{}}),
                    Error);
  }

  TEST_CASE("FGU, streaming FGU and BGU agree for every K") {
    const TestProblem tp = testbed::make_quad_bilevel({});
    for (Index K : {0, 1, 3, 25}) {
      CAPTURE(K);
      Oracle<double> o(tp.problem);
      const auto traj = solve_gd<double>(o, tp.theta0, Vec::Zero(10), K, tp.lower_beta * 0.5);
      const Vec f = hypergrad_fgu(o, tp.theta0, traj).grad;
      const Vec b = hypergrad_bgu(o, tp.theta0, traj).grad;
      const Vec s = hypergrad_fgu_streaming(o, tp.theta0, Vec::Zero(10), K, tp.lower_beta * 0.5).grad;
      CHECK((f - b).norm() <= 1e-12 * std::max(1.0, b.norm()));
      CHECK((s - b).norm() <= 1e-12 * std::max(1.0, b.norm()));
    }
  }

  TEST_CASE("BGU is the exact gradient of the unrolled objective") {
    const TestProblem tp = testbed::make_quad_bilevel({});
    Oracle<double> o(tp.problem);
    const Index K = 7;
    const double beta = 0.2;
    const auto traj = solve_gd<double>(o, tp.theta0, Vec::Zero(10), K, beta);
    const Vec fd = testbed::finite_diff_unrolled(tp.problem, tp.theta0, Vec::Zero(10), K, beta);
    CHECK(rel(hypergrad_bgu(o, tp.theta0, traj).grad, fd) <= 1e-7);
  }

  TEST_CASE("TGU with tau = K is BGU and tau = 0 keeps only the direct term") {
    const TestProblem tp = testbed::make_quad_bilevel({});
    Oracle<double> o(tp.problem);
    const auto traj = solve_gd<double>(o, tp.theta0, Vec::Zero(10), 10, 0.2);
    CHECK(hypergrad_tgu(o, tp.theta0, traj, 10).grad == hypergrad_bgu(o, tp.theta0, traj).grad);
    CHECK(rel(hypergrad_tgu(o, tp.theta0, traj, 0).grad, o.upper_grad_theta(tp.theta0, traj.back())) <= 1e-15);
  }

  TEST_CASE("BGU spends exactly K HVPs and K JVPs") {
    const TestProblem tp = testbed::make_quad_bilevel({});
    for (Index K : {1, 4, 30}) {
      Oracle<double> o(tp.problem);
      const auto traj = solve_gd<double>(o, tp.theta0, Vec::Zero(10), K, 0.2);
      const auto est = hypergrad_bgu(o, tp.theta0, traj);
      CHECK(est.counters_delta.hvps == std::uint64_t(K));
      CHECK(est.counters_delta.jvps == std::uint64_t(K));
    }
  }

  TEST_CASE("unrolling refuses sign-gd trajectories and sign-gd-free refuses gd") {
    const TestProblem tp = testbed::make_quad_bilevel({});
    Oracle<double> o(tp.problem);
    const auto sign = solve_signgd<double>(o, tp.theta0, Vec::Zero(10), 5, 0.01);
    const auto gd = solve_gd<double>(o, tp.theta0, Vec::Zero(10), 5, 0.2);
    CHECK_THROWS(hypergrad_bgu(o, tp.theta0, sign));
    CHECK_THROWS_AS(hypergrad_signgd_free(o, tp.theta0, gd), UnsupportedMap);
  }

  TEST_CASE("analytic engine reproduces Example 2 at both sides of the kink") {
    const TestProblem tp = testbed::make_example2();
    Oracle<double> o(tp.problem);
    CHECK(hypergrad_analytic<double>(o, Vec::Constant(1, 0.25)).grad[0] == doctest::Approx(1));
    CHECK(hypergrad_analytic<double>(o, Vec::Constant(1, 0.75)).grad[0] == doctest::Approx(2));
  }
}
