#pragma once

#include <cstddef>
#include <functional>
#include <string>

#include "blo/estimate.hpp"
#include "blo/lower.hpp"

namespace blo {

enum class UnrollMode { fgu, bgu, tgu, signgd_free };

inline const char* to_string(UnrollMode m) {
  switch (m) {
    case UnrollMode::fgu: return "fgu";
    case UnrollMode::bgu: return "bgu";
    case UnrollMode::tgu: return "tgu";
    case UnrollMode::signgd_free: return "signgd_free";
  }
  return "?";
}

/// Scalars of the forward-mode Jacobian Z (m x n) allowed before refusing.
inline constexpr std::size_t default_forward_cap = 10'000'000;

/// Jacobians of one gd step phi_k = phi_{k-1} - beta grad_phi g(theta, phi_{k-1}):
///   A_k = I - beta H(phi_{k-1}) (symmetric, n x n),
///   B_k = -beta grad^2_phitheta g (n x m), exposed through its transpose.
template <typename Scalar>
struct StepJacobians {
  std::function<Vector<Scalar>(const Vector<Scalar>&)> apply_A;
  std::function<Vector<Scalar>(const Vector<Scalar>&)> apply_Bt;
};

template <typename Scalar>
StepJacobians<Scalar> step_jacobians(Oracle<Scalar>& oracle, const Vector<Scalar>& theta,
                                     const Vector<Scalar>& phi_prev, Scalar beta) {
  StepJacobians<Scalar> J;
  J.apply_A = [&oracle, theta, phi_prev, beta](const Vector<Scalar>& v) -> Vector<Scalar> {
    return v - beta * oracle.hvp(theta, phi_prev, v);
  };
  J.apply_Bt = [&oracle, theta, phi_prev, beta](const Vector<Scalar>& d) -> Vector<Scalar> {
    return -beta * oracle.cross_jvp(theta, phi_prev, d);
  };
  return J;
}

namespace detail {

template <typename Scalar>
void require_gd_trajectory(const Oracle<Scalar>& oracle, const LowerTrajectory<Scalar>& traj) {
  if (traj.method != LowerMethod::gd) {
    throw UnsupportedMap(std::string("cannot differentiate a ") + to_string(traj.method) +
                         " trajectory by unrolling; only plain gd is smooth");
  }
  if (oracle.problem().coupled_lower) {
    throw UnsupportedMap("coupled lower constraint: use the analytic engine");
  }
  if (traj.iterates.empty()) throw IncompleteTrajectory("trajectory has no iterates");
  for (const auto& phi : traj.iterates) {
    if (phi.size() != oracle.dim_phi()) throw IncompleteTrajectory("trajectory iterate missing");
  }
}

/// Forward recursion Z_k^T = Z_{k-1}^T A_k + B_k^T, with n HVPs and n JVPs per step.
template <typename Scalar>
Matrix<Scalar> forward_step(Oracle<Scalar>& oracle, const Vector<Scalar>& theta,
                            const Vector<Scalar>& phi_prev, Scalar beta, const Matrix<Scalar>& Zt) {
  const Index n = oracle.dim_phi();
  const StepJacobians<Scalar> J = step_jacobians(oracle, theta, phi_prev, beta);
  Matrix<Scalar> A(n, n);
  Matrix<Scalar> Bt(oracle.dim_theta(), n);
  Vector<Scalar> e = Vector<Scalar>::Zero(n);
  for (Index i = 0; i < n; ++i) {
    e[i] = 1;
    A.col(i) = J.apply_A(e);
    Bt.col(i) = J.apply_Bt(e);
    e[i] = 0;
  }
  return Zt * A + Bt;
}

template <typename Scalar>
void check_forward_cap(const Oracle<Scalar>& oracle, std::size_t cap) {
  const auto need = static_cast<std::size_t>(oracle.dim_theta()) *
                    static_cast<std::size_t>(oracle.dim_phi());
  if (need > cap) {
    throw MemoryCapExceeded("forward-mode Jacobian needs " + std::to_string(need) +
                            " scalars (cap " + std::to_string(cap) + "); use reverse mode (bgu)");
  }
}

template <typename Scalar>
HypergradEstimate<Scalar> reverse(Oracle<Scalar>& oracle, const Vector<Scalar>& theta,
                                  const LowerTrajectory<Scalar>& traj, Index tau,
                                  const char* tag) {
  require_gd_trajectory(oracle, traj);
  const Index K = traj.steps();
  if (tau < 0 || tau > K) {
    throw ArgumentError("truncation must satisfy 0 <= tau <= K (tau = " + std::to_string(tau) +
                        ", K = " + std::to_string(K) + ")");
  }
  const OracleCounters start = oracle.counters();
  const Scalar beta = traj.stepsize;
  const Vector<Scalar>& phiK = traj.back();
  Vector<Scalar> c = oracle.upper_grad_theta(theta, phiK);
  Vector<Scalar> d = oracle.upper_grad_phi(theta, phiK);
  for (Index k = K; k > K - tau; --k) {
    const Vector<Scalar>& prev = traj.iterates[static_cast<std::size_t>(k - 1)];
    c -= beta * oracle.cross_jvp(theta, prev, d);
    d -= beta * oracle.hvp(theta, prev, d);
  }
  HypergradEstimate<Scalar> est;
  est.backend_tag = tag;
  est.grad = std::move(c);
  require_finite_grad(est.grad, "hypergradient");
  est.counters_delta = oracle.counters() - start;
  return est;
}

}  // namespace detail

/// Forward-mode unrolled hypergradient over a stored gd trajectory.
template <typename Scalar>
HypergradEstimate<Scalar> hypergrad_fgu(Oracle<Scalar>& oracle, const Vector<Scalar>& theta,
                                        const LowerTrajectory<Scalar>& traj,
                                        std::size_t cap = default_forward_cap) {
  detail::require_gd_trajectory(oracle, traj);
  detail::check_forward_cap(oracle, cap);
  const OracleCounters start = oracle.counters();
  Matrix<Scalar> Zt = Matrix<Scalar>::Zero(oracle.dim_theta(), oracle.dim_phi());
  for (Index k = 1; k <= traj.steps(); ++k) {
    Zt = detail::forward_step(oracle, theta, traj.iterates[static_cast<std::size_t>(k - 1)],
                              traj.stepsize, Zt);
  }
  const Vector<Scalar>& phiK = traj.back();
  HypergradEstimate<Scalar> est;
  est.backend_tag = "fgu";
  est.grad = oracle.upper_grad_theta(theta, phiK) + Zt * oracle.upper_grad_phi(theta, phiK);
  detail::require_finite_grad(est.grad, "hypergradient");
  est.counters_delta = oracle.counters() - start;
  return est;
}

/// Forward-mode unrolling that runs the gd solver alongside and keeps only
/// the current iterate, for horizons too long to store.
template <typename Scalar>
HypergradEstimate<Scalar> hypergrad_fgu_streaming(Oracle<Scalar>& oracle,
                                                  const Vector<Scalar>& theta,
                                                  const StartVector<Scalar>& phi0, Index K, Scalar beta,
                                                  std::size_t cap = default_forward_cap) {
  if (K < 0) throw ArgumentError("number of lower steps must be >= 0");
  if (!(beta > 0)) throw ArgumentError("lower stepsize must be positive");
  if (oracle.problem().coupled_lower) throw UnsupportedMap("coupled lower constraint: use the analytic engine");
  detail::check_forward_cap(oracle, cap);
  const OracleCounters start = oracle.counters();
  Matrix<Scalar> Zt = Matrix<Scalar>::Zero(oracle.dim_theta(), oracle.dim_phi());
  Vector<Scalar> phi = phi0;
  for (Index k = 1; k <= K; ++k) {
    Zt = detail::forward_step(oracle, theta, phi, beta, Zt);
    phi = detail::lower_step(oracle, theta, phi, beta, LowerMethod::gd, k);
  }
  HypergradEstimate<Scalar> est;
  est.backend_tag = "fgu";
  est.grad = oracle.upper_grad_theta(theta, phi) + Zt * oracle.upper_grad_phi(theta, phi);
  detail::require_finite_grad(est.grad, "hypergradient");
  est.counters_delta = oracle.counters() - start;
  return est;
}

/// Reverse-mode unrolled hypergradient: K HVPs and K cross-JVPs.
template <typename Scalar>
HypergradEstimate<Scalar> hypergrad_bgu(Oracle<Scalar>& oracle, const Vector<Scalar>& theta,
                                        const LowerTrajectory<Scalar>& traj) {
  return detail::reverse(oracle, theta, traj, traj.steps(), "bgu");
}

/// Reverse recursion over the last tau steps only; earlier steps are treated
/// as independent of theta.
template <typename Scalar>
HypergradEstimate<Scalar> hypergrad_tgu(Oracle<Scalar>& oracle, const Vector<Scalar>& theta,
                                        const LowerTrajectory<Scalar>& traj, Index tau) {
  return detail::reverse(oracle, theta, traj, tau, "tgu");
}

/// Sign-gd iterates have zero Jacobian almost everywhere, so the hypergradient
/// is the partial gradient at phi_K.
template <typename Scalar>
HypergradEstimate<Scalar> hypergrad_signgd_free(Oracle<Scalar>& oracle,
                                                const Vector<Scalar>& theta,
                                                const LowerTrajectory<Scalar>& traj) {
  if (traj.method != LowerMethod::sign_gd) {
    throw UnsupportedMap(std::string("IG-free unrolling needs a sign-gd trajectory, got ") +
                         to_string(traj.method));
  }
  if (traj.iterates.empty()) throw IncompleteTrajectory("trajectory has no iterates");
  const OracleCounters start = oracle.counters();
  HypergradEstimate<Scalar> est;
  est.backend_tag = "signgd_free";
  est.grad = oracle.upper_grad_theta(theta, traj.back());
  detail::require_finite_grad(est.grad, "hypergradient");
  est.counters_delta = oracle.counters() - start;
  return est;
}

/// A recorded trajectory plus how to differentiate it.
template <typename Scalar>
struct UnrollPlan {
  UnrollMode mode = UnrollMode::bgu;
  Index tau = 0;
  LowerTrajectory<Scalar> trajectory;
};

template <typename Scalar>
HypergradEstimate<Scalar> hypergrad_unroll(Oracle<Scalar>& oracle, const Vector<Scalar>& theta,
                                           const UnrollPlan<Scalar>& plan) {
  switch (plan.mode) {
    case UnrollMode::fgu: return hypergrad_fgu(oracle, theta, plan.trajectory);
    case UnrollMode::bgu: return hypergrad_bgu(oracle, theta, plan.trajectory);
    case UnrollMode::tgu: return hypergrad_tgu(oracle, theta, plan.trajectory, plan.tau);
    case UnrollMode::signgd_free: return hypergrad_signgd_free(oracle, theta, plan.trajectory);
  }
  throw ArgumentError("unknown unroll mode");
}

}  // namespace blo
