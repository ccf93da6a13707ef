#pragma once

#include <span>
#include <type_traits>

#include <Eigen/Core>

namespace blo {

using Index = Eigen::Index;

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

/// Starting points are taken through this alias so that Eigen expressions
/// such as Vector<double>::Zero(n) convert without blocking deduction.
template <typename Scalar>
using StartVector = std::type_identity_t<Vector<Scalar>>;

/// Sample indices of a finite-sum objective. Empty means "all samples".
using Batch = std::span<const Index>;

}  // namespace blo
