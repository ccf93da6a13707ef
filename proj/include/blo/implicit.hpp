#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "blo/estimate.hpp"
#include "blo/ihvp.hpp"

namespace blo {

inline constexpr double default_active_tolerance = 1e-7;

namespace detail {

/// HVP and WoodFisher gradient samples bound to (theta, phi) through the oracle.
template <typename Scalar>
IhvpOperator<Scalar> bind_operator(Oracle<Scalar>& oracle, const Vector<Scalar>& theta,
                                   const Vector<Scalar>& phi) {
  IhvpOperator<Scalar> op;
  op.hvp = [&oracle, theta, phi](const Vector<Scalar>& v) { return oracle.hvp(theta, phi, v); };
  op.fisher_sample = [&oracle, theta, phi](Index k) -> Vector<Scalar> {
    const Index n = oracle.problem().num_samples;
    if (n == 0) return oracle.lower_grad_phi(theta, phi);
    const Batch batch = oracle.lower_batch();
    Index sample = batch.empty() ? k % n : batch[static_cast<std::size_t>(k) % batch.size()];
    const Index one[1] = {sample};
    return oracle.lower_grad_phi(theta, phi, Batch(one));
  };
  return op;
}

template <typename Scalar>
HypergradEstimate<Scalar> if_core(Oracle<Scalar>& oracle, const Vector<Scalar>& theta,
                                  const Vector<Scalar>& phi, const IhvpBackend<Scalar>& backend) {
  const OracleCounters start = oracle.counters();
  HypergradEstimate<Scalar> est;
  est.backend_tag = backend_tag(backend);

  const Vector<Scalar> ft = oracle.upper_grad_theta(theta, phi);
  const Vector<Scalar> fp = oracle.upper_grad_phi(theta, phi);
  const IhvpResult<Scalar> solve = ihvp(backend, bind_operator(oracle, theta, phi), fp);
  require_finite_grad(solve.x, "ihvp solution");
  est.grad = ft - oracle.cross_jvp(theta, phi, solve.x);
  require_finite_grad(est.grad, "hypergradient");

  est.linear_solve_residual = solve.diagnostics.residual;
  est.linear_solve_iters = solve.diagnostics.iterations;
  est.divergence_warning = solve.diagnostics.divergence_warning;
  est.counters_delta = oracle.counters() - start;
  return est;
}

}  // namespace detail

/// Implicit-function hypergradient for an unconstrained lower level:
///   grad_theta f - grad^2_thetaphi g * H^{-1} grad_phi f.
template <typename Scalar>
HypergradEstimate<Scalar> hypergrad_if(Oracle<Scalar>& oracle, const Vector<Scalar>& theta,
                                       const Vector<Scalar>& phi,
                                       const IhvpBackend<Scalar>& backend) {
  const auto& problem = oracle.problem();
  if (!problem.lower_set.is_unconstrained()) {
    throw ArgumentError("hypergrad_if needs an unconstrained lower level; use hypergrad_if_constrained");
  }
  if (problem.coupled_lower) throw UnsupportedMap("coupled lower constraint: use the analytic engine");
  return detail::if_core(oracle, theta, phi, backend);
}

/// Rows i with |a_i' phi - b_i| <= tau.
template <typename Scalar>
std::vector<Index> active_set(const Matrix<Scalar>& A, const Vector<Scalar>& b,
                              const Vector<Scalar>& phi, Scalar tau) {
  std::vector<Index> rows;
  if (A.rows() == 0) return rows;
  const Vector<Scalar> slack = A * phi - b;
  for (Index i = 0; i < A.rows(); ++i) {
    if (std::abs(slack[i]) <= tau) rows.push_back(i);
  }
  return rows;
}

/// Implicit hypergradient for a polyhedral lower set A phi <= b, differentiating
/// the KKT system restricted to the active rows:
///   P = H^{-1} - H^{-1} Abar' (Abar H^{-1} Abar')^{-1} Abar H^{-1},
///   df/dtheta = grad_theta f - grad^2_thetaphi g * P grad_phi f.
/// Uses 1 + r ihvp calls for r active rows.
template <typename Scalar>
HypergradEstimate<Scalar> hypergrad_if_constrained(Oracle<Scalar>& oracle,
                                                   const Vector<Scalar>& theta,
                                                   const Vector<Scalar>& phi,
                                                   const IhvpBackend<Scalar>& backend,
                                                   Scalar tau_act = Scalar(default_active_tolerance)) {
  const auto& problem = oracle.problem();
  if (problem.coupled_lower) throw UnsupportedMap("coupled lower constraint: use the analytic engine");
  if (problem.lower_set.is_unconstrained()) {
    auto est = hypergrad_if(oracle, theta, phi, backend);
    est.active_set = std::vector<Index>{};
    return est;
  }
  const auto [A, b] = problem.lower_set.as_linear_inequality(problem.dim_phi);
  const std::vector<Index> touching = active_set<Scalar>(A, b, phi, tau_act);
  if (touching.empty()) {
    auto est = detail::if_core(oracle, theta, phi, backend);
    est.active_set = touching;
    return est;
  }

  // A pair of rows (a, b) and (-a, -b) is one equality constraint.
  std::vector<Index> rows;
  std::vector<bool> equality;
  for (Index i : touching) {
    bool merged = false;
    for (std::size_t k = 0; k < rows.size(); ++k) {
      const Index j = rows[k];
      if ((A.row(i) + A.row(j)).cwiseAbs().maxCoeff() == 0 && b[i] + b[j] == 0) {
        equality[k] = true;
        merged = true;
        break;
      }
    }
    if (!merged) {
      rows.push_back(i);
      equality.push_back(false);
    }
  }
  const Index r = static_cast<Index>(rows.size());
  Matrix<Scalar> Abar(r, problem.dim_phi);
  for (Index k = 0; k < r; ++k) Abar.row(k) = A.row(rows[static_cast<std::size_t>(k)]);

  const OracleCounters start = oracle.counters();
  HypergradEstimate<Scalar> est;
  est.backend_tag = backend_tag(backend);
  est.active_set = touching;

  // Multipliers from grad_phi g + Abar' lambda = 0; a vanishing multiplier on
  // an inequality row means the row is only weakly active.
  const Vector<Scalar> gp = oracle.lower_grad_phi(theta, phi);
  const Vector<Scalar> lambda =
      Abar.transpose().completeOrthogonalDecomposition().solve(Vector<Scalar>(-gp));
  for (Index k = 0; k < r; ++k) {
    if (!equality[static_cast<std::size_t>(k)] && lambda[k] <= tau_act) {
      throw DegenerateActiveSet("constraint row " + std::to_string(rows[static_cast<std::size_t>(k)]) +
                                " is weakly active (multiplier " + std::to_string(lambda[k]) +
                                "); the solution map is not differentiable here");
    }
  }

  const IhvpOperator<Scalar> op = detail::bind_operator(oracle, theta, phi);
  const Vector<Scalar> ft = oracle.upper_grad_theta(theta, phi);
  const Vector<Scalar> fp = oracle.upper_grad_phi(theta, phi);
  IhvpResult<Scalar> solve = ihvp(backend, op, fp);
  const Vector<Scalar> w = solve.x;
  est.linear_solve_iters = solve.diagnostics.iterations;
  est.divergence_warning = solve.diagnostics.divergence_warning;
  Scalar worst_residual = solve.diagnostics.residual.value_or(0);

  Matrix<Scalar> Y(problem.dim_phi, r);
  for (Index k = 0; k < r; ++k) {
    IhvpResult<Scalar> col = ihvp(backend, op, Vector<Scalar>(Abar.row(k).transpose()));
    Y.col(k) = col.x;
    est.linear_solve_iters += col.diagnostics.iterations;
    est.divergence_warning = est.divergence_warning || col.diagnostics.divergence_warning;
    worst_residual = std::max(worst_residual, col.diagnostics.residual.value_or(0));
  }
  if (solve.diagnostics.residual) est.linear_solve_residual = worst_residual;

  const Matrix<Scalar> S = Abar * Y;
  Eigen::FullPivLU<Matrix<Scalar>> lu(S);
  lu.setThreshold(Scalar(1e-10));
  if (lu.rank() < r) {
    throw DegenerateActiveSet("active rows are linearly dependent (rank " +
                              std::to_string(lu.rank()) + " < " + std::to_string(r) + ")");
  }
  const Vector<Scalar> u = w - Y * lu.solve(Vector<Scalar>(Abar * w));
  detail::require_finite_grad(u, "constrained adjoint");
  est.grad = ft - oracle.cross_jvp(theta, phi, u);
  detail::require_finite_grad(est.grad, "hypergradient");
  est.counters_delta = oracle.counters() - start;
  return est;
}

/// Exact hypergradient through a supplied solution map.
template <typename Scalar>
HypergradEstimate<Scalar> hypergrad_analytic(Oracle<Scalar>& oracle, const Vector<Scalar>& theta) {
  const auto& problem = oracle.problem();
  if (!problem.solution_map) throw UnsupportedMap("problem has no analytic solution map");
  const OracleCounters start = oracle.counters();
  const Vector<Scalar> phi = problem.solution_map->map(theta);
  HypergradEstimate<Scalar> est;
  est.backend_tag = "analytic";
  est.grad = oracle.upper_grad_theta(theta, phi) +
             problem.solution_map->vjp(theta, oracle.upper_grad_phi(theta, phi));
  detail::require_finite_grad(est.grad, "hypergradient");
  est.counters_delta = oracle.counters() - start;
  return est;
}

}  // namespace blo
