#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "blo/core.hpp"

namespace blo {

enum class LowerMethod { gd, projected_gd, sign_gd };

inline const char* to_string(LowerMethod m) {
  switch (m) {
    case LowerMethod::gd: return "gd";
    case LowerMethod::projected_gd: return "projected-gd";
    case LowerMethod::sign_gd: return "sign-gd";
  }
  return "?";
}

/// Scalars a stored trajectory may hold before solvers refuse.
inline constexpr std::size_t default_trajectory_cap = 10'000'000;

/// Iterates phi_0..phi_K of a fixed-step lower solver.
template <typename Scalar>
struct LowerTrajectory {
  std::vector<Vector<Scalar>> iterates;
  Scalar stepsize = 0;
  LowerMethod method = LowerMethod::gd;
  Vector<Scalar> theta_snapshot;

  Index steps() const { return static_cast<Index>(iterates.size()) - 1; }
  const Vector<Scalar>& back() const { return iterates.back(); }
};

template <typename Scalar>
struct LowerSolve {
  Vector<Scalar> phi;
  Index iterations = 0;
  Scalar measure = 0;
};

namespace detail {

template <typename Scalar>
void require_finite(const Vector<Scalar>& v, const char* what, Index step) {
  if (!v.allFinite()) {
    throw NumericalFailure(std::string("non-finite ") + what, static_cast<std::size_t>(step));
  }
}

template <typename Scalar>
Vector<Scalar> sign_of(const Vector<Scalar>& g) {
  return g.unaryExpr([](Scalar x) { return Scalar((x > 0) - (x < 0)); });
}

/// One application of the lower map q(theta, .) for the given method.
template <typename Scalar>
Vector<Scalar> lower_step(Oracle<Scalar>& oracle, const Vector<Scalar>& theta,
                          const Vector<Scalar>& phi, Scalar beta, LowerMethod method, Index step) {
  const Vector<Scalar> g = oracle.lower_grad_phi(theta, phi);
  require_finite(g, "lower gradient", step);
  switch (method) {
    case LowerMethod::gd: return phi - beta * g;
    case LowerMethod::projected_gd: return oracle.project_lower(phi - beta * g);
    case LowerMethod::sign_gd: return phi - beta * sign_of(g);
  }
  return phi;
}

template <typename Scalar>
LowerTrajectory<Scalar> run_trajectory(Oracle<Scalar>& oracle, const Vector<Scalar>& theta,
                                       const StartVector<Scalar>& phi0, Index K, Scalar beta,
                                       LowerMethod method, std::size_t cap) {
  if (K < 0) throw ArgumentError("number of lower steps must be >= 0");
  if (!(beta > 0)) throw ArgumentError("lower stepsize must be positive");
  if (phi0.size() != oracle.dim_phi()) throw ArgumentError("phi0 has wrong dimension");
  const auto need = static_cast<std::size_t>(K + 1) * static_cast<std::size_t>(phi0.size());
  if (need > cap) {
    throw MemoryCapExceeded("trajectory needs " + std::to_string(need) +
                            " scalars (cap " + std::to_string(cap) +
                            "); use forward-mode unrolling, which streams the iterates");
  }
  LowerTrajectory<Scalar> traj;
  traj.stepsize = beta;
  traj.method = method;
  traj.theta_snapshot = theta;
  traj.iterates.reserve(static_cast<std::size_t>(K + 1));
  traj.iterates.push_back(phi0);
  for (Index k = 1; k <= K; ++k) {
    traj.iterates.push_back(lower_step(oracle, theta, traj.iterates.back(), beta, method, k));
  }
  return traj;
}

/// Projected descent on a generic gradient until the gradient mapping
/// ||(x - P(x - beta g))/beta|| (or ||g|| without projection) drops to `tol`.
/// One gradient per iteration; iteration count excludes the final check.
template <typename Scalar, typename GradFn, typename ProjectFn>
LowerSolve<Scalar> projected_descent(GradFn&& grad, ProjectFn&& project, bool constrained,
                                     Vector<Scalar> x, Scalar tol, Index max_iters, Scalar beta) {
  if (!(beta > 0)) throw ArgumentError("stepsize must be positive");
  if (max_iters < 0) throw ArgumentError("max_iters must be >= 0");
  Vector<Scalar> best = x;
  Scalar best_measure = std::numeric_limits<Scalar>::infinity();
  for (Index k = 0;; ++k) {
    const Vector<Scalar> g = grad(x);
    require_finite(g, "gradient", k);
    Vector<Scalar> next;
    Scalar measure;
    if (constrained) {
      next = project(Vector<Scalar>(x - beta * g));
      measure = (x - next).norm() / beta;
    } else {
      next = x - beta * g;
      measure = g.norm();
    }
    if (measure < best_measure) {
      best_measure = measure;
      best = x;
    }
    if (measure <= tol) return {std::move(x), k, measure};
    if (k == max_iters) {
      throw NotConverged<Scalar>("lower solve stopped after " + std::to_string(max_iters) +
                                     " iterations with stationarity " + std::to_string(measure),
                                 best, k, best_measure);
    }
    x = std::move(next);
  }
}

}  // namespace detail

/// K steps of phi <- phi - beta * grad_phi g(theta, phi).
template <typename Scalar>
LowerTrajectory<Scalar> solve_gd(Oracle<Scalar>& oracle, const Vector<Scalar>& theta,
                                 const StartVector<Scalar>& phi0, Index K, Scalar beta,
                                 std::size_t cap = default_trajectory_cap) {
  return detail::run_trajectory(oracle, theta, phi0, K, beta, LowerMethod::gd, cap);
}

/// As solve_gd with a projection onto the lower set after each step.
template <typename Scalar>
LowerTrajectory<Scalar> solve_projected_gd(Oracle<Scalar>& oracle, const Vector<Scalar>& theta,
                                           const StartVector<Scalar>& phi0, Index K, Scalar beta,
                                           std::size_t cap = default_trajectory_cap) {
  return detail::run_trajectory(oracle, theta, phi0, K, beta, LowerMethod::projected_gd, cap);
}

/// phi <- phi - beta * sign(grad), with sign(0) = 0.
template <typename Scalar>
LowerTrajectory<Scalar> solve_signgd(Oracle<Scalar>& oracle, const Vector<Scalar>& theta,
                                     const StartVector<Scalar>& phi0, Index K, Scalar beta,
                                     std::size_t cap = default_trajectory_cap) {
  return detail::run_trajectory(oracle, theta, phi0, K, beta, LowerMethod::sign_gd, cap);
}

/// Rebuilds a trajectory from its recorded inputs.
template <typename Scalar>
LowerTrajectory<Scalar> replay(Oracle<Scalar>& oracle, const LowerTrajectory<Scalar>& traj,
                               std::size_t cap = default_trajectory_cap) {
  return detail::run_trajectory(oracle, traj.theta_snapshot, traj.iterates.front(), traj.steps(),
                                traj.stepsize, traj.method, cap);
}

/// Gradient (or projected-gradient) descent until stationarity <= tol.
/// Throws NotConverged carrying the best iterate when max_iters runs out.
template <typename Scalar>
LowerSolve<Scalar> solve_to_tolerance(Oracle<Scalar>& oracle, const Vector<Scalar>& theta,
                                      const StartVector<Scalar>& phi0, Scalar tol, Index max_iters,
                                      Scalar beta) {
  if (phi0.size() != oracle.dim_phi()) throw ArgumentError("phi0 has wrong dimension");
  const bool constrained = !oracle.problem().lower_set.is_unconstrained();
  return detail::projected_descent<Scalar>(
      [&](const Vector<Scalar>& phi) { return oracle.lower_grad_phi(theta, phi); },
      [&](const Vector<Scalar>& phi) { return oracle.project_lower(phi); }, constrained,
      constrained ? oracle.project_lower(phi0) : phi0, tol, max_iters, beta);
}

}  // namespace blo
