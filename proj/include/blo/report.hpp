#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "blo/core.hpp"

namespace blo {

enum class Termination { tol_met, budget, failure };

inline const char* to_string(Termination t) {
  switch (t) {
    case Termination::tol_met: return "tol-met";
    case Termination::budget: return "budget";
    case Termination::failure: return "failure";
  }
  return "?";
}

/// Outer-loop trace. Entry t describes the iterate before update t.
template <typename Scalar>
struct RunReport {
  std::vector<Vector<Scalar>> theta_trace;
  std::vector<Scalar> objective_trace;
  std::vector<Scalar> stationarity_trace;
  /// Cumulative oracle counts and elapsed seconds at each trace entry.
  std::vector<OracleCounters> counters_trace;
  std::vector<double> time_trace;
  /// Per-round constraint violation max(0, g - g*_mu); value-function runs only.
  std::vector<Scalar> violation_trace;

  OracleCounters counters;
  OracleCounters engine_counters;
  OracleCounters driver_counters;

  std::uint64_t seed = 0;
  double wall_time = 0;
  Termination termination = Termination::budget;
  std::string failure_reason;
  std::vector<std::string> warnings;

  Vector<Scalar> theta_final;
  Vector<Scalar> phi_final;
  Index iterations = 0;

  std::size_t size() const { return theta_trace.size(); }
};

}  // namespace blo
