#include "blo/lower.hpp"
#include "blo/testbed.hpp"

namespace blo::testbed {

namespace {

Vec solve_lower(const TestProblem& tp, const Vec& theta, const Vec& phi0, const FdOptions& opt) {
  const Problem& p = tp.problem;
  if (p.solution_map) return p.solution_map->map(theta);
  Oracle<double> oracle(p);
  const double beta = opt.beta > 0 ? opt.beta : tp.lower_beta;
  try {
    return solve_to_tolerance(oracle, theta, phi0, opt.lower_tol, opt.max_iters, beta).phi;
  } catch (const NotConverged<double>& e) {
    return e.best();
  }
}

double value_at(const TestProblem& tp, const Vec& theta, const Vec& phi0, const FdOptions& opt) {
  const Vec phi = solve_lower(tp, theta, phi0, opt);
  return tp.problem.upper_value(theta, phi, {});
}

}  // namespace

double reduced_objective(const TestProblem& tp, const Vec& theta, const FdOptions& opt) {
  return value_at(tp, theta, Vec::Zero(tp.problem.dim_phi), opt);
}

Vec finite_diff_hypergrad(const TestProblem& tp, const Vec& theta, const FdOptions& opt) {
  // Warm-start the shifted solves at the centre solution so their errors correlate.
  const Vec centre = solve_lower(tp, theta, Vec::Zero(tp.problem.dim_phi), opt);
  Vec grad(theta.size());
  for (Index i = 0; i < theta.size(); ++i) {
    Vec tp_plus = theta, tp_minus = theta;
    tp_plus[i] += opt.h;
    tp_minus[i] -= opt.h;
    grad[i] = (value_at(tp, tp_plus, centre, opt) - value_at(tp, tp_minus, centre, opt)) / (2 * opt.h);
  }
  return grad;
}

OneSided one_sided_hypergrad(const TestProblem& tp, const Vec& theta, double h, double gap,
                             const FdOptions& opt) {
  const Vec centre = solve_lower(tp, theta, Vec::Zero(tp.problem.dim_phi), opt);
  const double f0 = tp.problem.upper_value(theta, centre, {});
  OneSided out;
  out.left.resize(theta.size());
  out.right.resize(theta.size());
  for (Index i = 0; i < theta.size(); ++i) {
    Vec up = theta, down = theta;
    up[i] += h;
    down[i] -= h;
    out.right[i] = (value_at(tp, up, centre, opt) - f0) / h;
    out.left[i] = (f0 - value_at(tp, down, centre, opt)) / h;
  }
  out.kink = (out.right - out.left).lpNorm<Eigen::Infinity>() > gap;
  return out;
}

Vec finite_diff_unrolled(const Problem& problem, const Vec& theta, const Vec& phi0, Index K,
                         double beta, double h) {
  auto value = [&](const Vec& th) {
    Oracle<double> oracle(problem);
    const auto traj = solve_gd(oracle, th, phi0, K, beta);
    return problem.upper_value(th, traj.back(), {});
  };
  Vec grad(theta.size());
  for (Index i = 0; i < theta.size(); ++i) {
    Vec up = theta, down = theta;
    up[i] += h;
    down[i] -= h;
    grad[i] = (value(up) - value(down)) / (2 * h);
  }
  return grad;
}

}  // namespace blo::testbed
