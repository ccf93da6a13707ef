#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>

#include <Eigen/Core>

namespace blo {

/// Base class of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ArgumentError : public Error {
 public:
  using Error::Error;
};

class InvalidSetError : public Error {
 public:
  using Error::Error;
};

class ConfigurationError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Non-finite value met while iterating; carries the step (or round) index.
class NumericalFailure : public Error {
 public:
  NumericalFailure(const std::string& what, std::size_t step)
      : Error(what + " (step " + std::to_string(step) + ")"), step_(step) {}
  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

/// Iteration budget exhausted before the requested tolerance was met.
/// The best iterate seen is kept so callers can continue with a warning.
template <typename Scalar>
class NotConverged : public Error {
 public:
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  NotConverged(const std::string& what, Vector best, Eigen::Index iterations,
               Scalar best_measure)
      : Error(what),
        best_(std::move(best)),
        iterations_(iterations),
        best_measure_(best_measure) {}
  const Vector& best() const noexcept { return best_; }
  Eigen::Index iterations() const noexcept { return iterations_; }
  Scalar best_measure() const noexcept { return best_measure_; }

 private:
  Vector best_;
  Eigen::Index iterations_;
  Scalar best_measure_;
};

class IndefiniteHessian : public Error {
 public:
  using Error::Error;
};

class DegenerateActiveSet : public Error {
 public:
  using Error::Error;
};

class UnsupportedMap : public Error {
 public:
  using Error::Error;
};

class IncompleteTrajectory : public Error {
 public:
  using Error::Error;
};

class MemoryCapExceeded : public Error {
 public:
  using Error::Error;
};

class NonUniqueSolution : public Error {
 public:
  using Error::Error;
};

}  // namespace blo
