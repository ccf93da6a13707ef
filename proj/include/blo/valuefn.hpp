#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <optional>
#include <string>

#include <Eigen/Eigenvalues>

#include "blo/lower.hpp"
#include "blo/report.hpp"

namespace blo {

/// Penalty-based value-function settings.
template <typename Scalar>
struct VfConfig {
  Scalar mu1 = Scalar(1e-6);
  Scalar mu2 = 0;
  Scalar rho0 = 1;
  Scalar rho_growth = 10;
  Scalar inner_tol = Scalar(1e-10);
  Index outer_rounds = 8;
  Scalar inner_step = Scalar(0.5);
  Index inner_max_iters = 100000;
  Scalar joint_step = 1;
  Index joint_iters = 2000;
  Scalar joint_tol = Scalar(1e-14);
};

template <typename Scalar>
void validate(const VfConfig<Scalar>& cfg) {
  if (cfg.mu1 < 0) throw ArgumentError("mu1 must be >= 0");
  if (cfg.mu2 < 0) throw ArgumentError("mu2 must be >= 0");
  if (cfg.rho0 < 0) throw ArgumentError("penalty_rho must be >= 0");
  if (!(cfg.rho_growth > 1)) throw ArgumentError("rho_growth must be > 1");
  if (!(cfg.inner_tol > 0)) throw ArgumentError("inner_tol must be > 0");
  if (cfg.outer_rounds < 1) throw ArgumentError("outer_rounds must be >= 1");
  if (!(cfg.inner_step > 0) || !(cfg.joint_step > 0)) throw ArgumentError("steps must be > 0");
  if (cfg.joint_iters < 1 || cfg.inner_max_iters < 0) throw ArgumentError("iteration budgets must be positive");
}

template <typename Scalar>
struct ValueFnResult {
  Scalar g_star_mu = 0;
  Vector<Scalar> phi_hat;
  Vector<Scalar> grad_theta;
  Index inner_iterations = 0;
};

/// Smoothed value function g*_mu(theta) = min_{phi in C} g + (mu1/2)||phi||^2 + mu2,
/// its minimizer, and the Danskin gradient grad_theta g(theta, phi_hat).
template <typename Scalar>
ValueFnResult<Scalar> value_fn(Oracle<Scalar>& oracle, const Vector<Scalar>& theta,
                               const VfConfig<Scalar>& cfg,
                               const std::optional<Vector<Scalar>>& warm_start = std::nullopt) {
  validate(cfg);
  const auto& problem = oracle.problem();
  const bool constrained = !problem.lower_set.is_unconstrained();
  Vector<Scalar> phi0 = warm_start ? *warm_start : Vector<Scalar>::Zero(problem.dim_phi);
  if (constrained) phi0 = oracle.project_lower(phi0);

  const LowerSolve<Scalar> solve = detail::projected_descent<Scalar>(
      [&](const Vector<Scalar>& phi) {
        Vector<Scalar> g = oracle.lower_grad_phi(theta, phi);
        if (cfg.mu1 != 0) g += cfg.mu1 * phi;
        return g;
      },
      [&](const Vector<Scalar>& phi) { return oracle.project_lower(phi); }, constrained,
      std::move(phi0), cfg.inner_tol, cfg.inner_max_iters, cfg.inner_step);

  if (cfg.mu1 == 0) {
    // Without the regularizer the minimizer is unique only if H is nonsingular.
    const Index n = problem.dim_phi;
    Matrix<Scalar> H(n, n);
    Vector<Scalar> e = Vector<Scalar>::Zero(n);
    for (Index i = 0; i < n; ++i) {
      e[i] = 1;
      H.col(i) = oracle.hvp(theta, solve.phi, e);
      e[i] = 0;
    }
    const Matrix<Scalar> Hs = (H + H.transpose()) / 2;
    const Vector<Scalar> eig = Eigen::SelfAdjointEigenSolver<Matrix<Scalar>>(Hs, Eigen::EigenvaluesOnly).eigenvalues();
    const Scalar scale = std::max<Scalar>(1, std::abs(eig[n - 1]));
    if (eig[0] <= Scalar(1e-10) * scale) {
      throw NonUniqueSolution("lower problem has a singular Hessian at theta; set mu1 > 0 to "
                              "make the value-function gradient well defined");
    }
  }

  ValueFnResult<Scalar> out;
  out.phi_hat = solve.phi;
  out.inner_iterations = solve.iterations;
  out.g_star_mu = oracle.lower_value(theta, out.phi_hat) +
                  cfg.mu1 / 2 * out.phi_hat.squaredNorm() + cfg.mu2;
  out.grad_theta = oracle.lower_grad_theta(theta, out.phi_hat);
  return out;
}

template <typename Scalar>
struct PenaltyValue {
  Scalar value = 0;
  Scalar upper = 0;
  Scalar violation = 0;
  Vector<Scalar> grad_theta;
  Vector<Scalar> grad_phi;
  ValueFnResult<Scalar> vf;
};

/// f + (rho/2) max(0, g - g*_mu)^2 and its gradients in (theta, phi).
template <typename Scalar>
PenaltyValue<Scalar> penalty_objective(Oracle<Scalar>& oracle, const Vector<Scalar>& theta,
                                       const Vector<Scalar>& phi, Scalar rho,
                                       const VfConfig<Scalar>& cfg,
                                       const std::optional<Vector<Scalar>>& warm_start = std::nullopt) {
  PenaltyValue<Scalar> out;
  out.vf = value_fn(oracle, theta, cfg, warm_start);
  out.upper = oracle.upper_value(theta, phi);
  out.violation = std::max<Scalar>(0, oracle.lower_value(theta, phi) - out.vf.g_star_mu);
  out.value = out.upper + rho / 2 * out.violation * out.violation;
  out.grad_theta = oracle.upper_grad_theta(theta, phi);
  out.grad_phi = oracle.upper_grad_phi(theta, phi);
  if (rho != 0 && out.violation > 0) {
    const Scalar w = rho * out.violation;
    out.grad_theta += w * (oracle.lower_grad_theta(theta, phi) - out.vf.grad_theta);
    out.grad_phi += w * oracle.lower_grad_phi(theta, phi);
  }
  return out;
}

/// Penalty method on the value-function reformulation: per round, projected
/// gradient descent with backtracking on (theta, phi), then rho *= rho_growth.
template <typename Scalar>
RunReport<Scalar> solve_vf(Oracle<Scalar>& oracle, const StartVector<Scalar>& theta0,
                           const StartVector<Scalar>& phi0, const VfConfig<Scalar>& cfg) {
  validate(cfg);
  const auto& problem = oracle.problem();
  if (problem.coupled_lower) throw UnsupportedMap("coupled lower constraint: use the analytic engine");
  if (theta0.size() != problem.dim_theta || phi0.size() != problem.dim_phi) {
    throw ArgumentError("initial point has wrong dimension");
  }
  const auto clock_start = std::chrono::steady_clock::now();
  const OracleCounters start = oracle.counters();
  RunReport<Scalar> report;

  Vector<Scalar> theta = oracle.project_upper(theta0);
  Vector<Scalar> phi = oracle.project_lower(phi0);
  Scalar rho = cfg.rho0;
  Scalar step = cfg.joint_step;
  std::optional<Vector<Scalar>> warm;

  auto mapping_sq = [&](const PenaltyValue<Scalar>& p, Scalar s) {
    const Vector<Scalar> tn = oracle.project_upper(Vector<Scalar>(theta - s * p.grad_theta));
    const Vector<Scalar> pn = oracle.project_lower(Vector<Scalar>(phi - s * p.grad_phi));
    return ((theta - tn).squaredNorm() + (phi - pn).squaredNorm()) / (s * s);
  };

  for (Index round = 0; round < cfg.outer_rounds; ++round) {
    PenaltyValue<Scalar> current = penalty_objective(oracle, theta, phi, rho, cfg, warm);
    warm = current.vf.phi_hat;
    for (Index it = 0; it < cfg.joint_iters; ++it) {
      if (!std::isfinite(current.value)) {
        throw NumericalFailure("non-finite penalty objective", static_cast<std::size_t>(round));
      }
      if (mapping_sq(current, cfg.joint_step) <= cfg.joint_tol) break;
      ++report.iterations;
      for (;;) {
        const Vector<Scalar> tn = oracle.project_upper(Vector<Scalar>(theta - step * current.grad_theta));
        const Vector<Scalar> pn = oracle.project_lower(Vector<Scalar>(phi - step * current.grad_phi));
        PenaltyValue<Scalar> trial = penalty_objective(oracle, tn, pn, rho, cfg, warm);
        const Scalar model = current.value + current.grad_theta.dot(tn - theta) +
                             current.grad_phi.dot(pn - phi) +
                             ((tn - theta).squaredNorm() + (pn - phi).squaredNorm()) / (2 * step);
        if (std::isfinite(trial.value) && trial.value <= model) {
          theta = tn;
          phi = pn;
          warm = trial.vf.phi_hat;
          current = std::move(trial);
          step = std::min(cfg.joint_step, step * 2);
          break;
        }
        step /= 2;
        if (step < std::numeric_limits<Scalar>::min()) {
          throw NumericalFailure("penalty line search collapsed", static_cast<std::size_t>(round));
        }
      }
    }
    if (!std::isfinite(current.value)) {
      throw NumericalFailure("non-finite penalty objective", static_cast<std::size_t>(round));
    }
    report.theta_trace.push_back(theta);
    report.objective_trace.push_back(current.upper);
    report.stationarity_trace.push_back(mapping_sq(current, cfg.joint_step));
    report.violation_trace.push_back(current.violation);
    report.counters_trace.push_back(oracle.counters() - start);
    report.time_trace.push_back(
        std::chrono::duration<double>(std::chrono::steady_clock::now() - clock_start).count());
    rho *= cfg.rho_growth;
  }

  report.theta_final = theta;
  report.phi_final = phi;
  report.counters = oracle.counters() - start;
  report.engine_counters = report.counters;
  report.wall_time =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - clock_start).count();
  report.termination = Termination::budget;
  return report;
}

}  // namespace blo
