#pragma once

#include <optional>
#include <string>
#include <vector>

#include "blo/core.hpp"

namespace blo {

/// Hypergradient df/dtheta with solver diagnostics.
template <typename Scalar>
struct HypergradEstimate {
  Vector<Scalar> grad;
  std::string backend_tag;
  std::optional<Scalar> linear_solve_residual;
  Index linear_solve_iters = 0;
  std::optional<std::vector<Index>> active_set;
  OracleCounters counters_delta;
  bool divergence_warning = false;
};

namespace detail {

template <typename Scalar>
void require_finite_grad(const Vector<Scalar>& g, const char* what) {
  if (!g.allFinite()) throw NumericalFailure(std::string("non-finite ") + what, 0);
}

}  // namespace detail

}  // namespace blo
