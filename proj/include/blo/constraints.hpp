#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "blo/errors.hpp"
#include "blo/types.hpp"

namespace blo {

/// Absolute tolerance for set-membership checks.
template <typename Scalar>
constexpr Scalar feasibility_tolerance() {
  if constexpr (std::is_same_v<Scalar, float>) {
    return Scalar(1e-5);
  } else {
    return Scalar(1e-12);
  }
}

enum class SetKind { unconstrained, box, linear_inequality, simplex, budget_box };

inline const char* to_string(SetKind kind) {
  switch (kind) {
    case SetKind::unconstrained: return "unconstrained";
    case SetKind::box: return "box";
    case SetKind::linear_inequality: return "linear_inequality";
    case SetKind::simplex: return "simplex";
    case SetKind::budget_box: return "budget_box";
  }
  return "?";
}

namespace sets {

struct Unconstrained {};

template <typename Scalar>
struct Box {
  Vector<Scalar> lo;
  Vector<Scalar> hi;
};

/// {x : A x <= b}
template <typename Scalar>
struct LinearInequality {
  Matrix<Scalar> A;
  Vector<Scalar> b;
};

/// {x >= 0, sum(x) = radius}
template <typename Scalar>
struct Simplex {
  Scalar radius;
};

/// {0 <= x <= cap, sum(x) <= budget}
template <typename Scalar>
struct BudgetBox {
  Vector<Scalar> cap;
  Scalar budget;
};

}  // namespace sets

namespace detail {

/// Sorting-based Euclidean projection onto {y >= 0, sum(y) = radius}.
template <typename Scalar>
Vector<Scalar> project_simplex(const Vector<Scalar>& x, Scalar radius) {
  const Index n = x.size();
  std::vector<Scalar> u(x.data(), x.data() + n);
  std::sort(u.begin(), u.end(), std::greater<Scalar>());
  Scalar cumulative = 0;
  Scalar tau = 0;
  for (Index j = 0; j < n; ++j) {
    cumulative += u[j];
    const Scalar candidate = (cumulative - radius) / Scalar(j + 1);
    if (u[j] - candidate > 0) tau = candidate;
  }
  return (x.array() - tau).max(Scalar(0)).matrix();
}

/// Projection onto {0 <= y <= cap, sum(y) <= budget} by bisection on the shift.
template <typename Scalar>
Vector<Scalar> project_budget_box(const Vector<Scalar>& x, const Vector<Scalar>& cap,
                                  Scalar budget) {
  auto clipped = [&](Scalar shift) {
    return (x.array() - shift).max(Scalar(0)).min(cap.array()).matrix().eval();
  };
  Vector<Scalar> y = clipped(0);
  if (y.sum() <= budget) return y;
  Scalar lo = 0;
  Scalar hi = x.maxCoeff();
  for (int it = 0; it < 200 && hi - lo > std::numeric_limits<Scalar>::epsilon() *
                                                  std::max(Scalar(1), std::abs(hi));
       ++it) {
    const Scalar mid = lo + (hi - lo) / 2;
    if (clipped(mid).sum() > budget) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return clipped(hi);
}

/// Projection onto {y : A y <= b} via Hildreth's dual coordinate ascent,
/// followed by an exact equality-constrained solve on the detected active rows.
template <typename Scalar>
Vector<Scalar> project_polyhedron(const Matrix<Scalar>& A, const Vector<Scalar>& b,
                                  const Vector<Scalar>& x) {
  const Scalar tol = feasibility_tolerance<Scalar>();
  if (A.rows() == 0 || ((A * x - b).array() <= tol).all()) return x;

  const Index r = A.rows();
  const Vector<Scalar> row_norms = A.rowwise().squaredNorm();
  Vector<Scalar> mu = Vector<Scalar>::Zero(r);
  Vector<Scalar> y = x;
  const Scalar scale = std::max<Scalar>(Scalar(1), x.cwiseAbs().maxCoeff());

  auto polish = [&](const Vector<Scalar>& multipliers, Vector<Scalar>& out) {
    std::vector<Index> active;
    for (Index i = 0; i < r; ++i) {
      if (multipliers[i] > 0) active.push_back(i);
    }
    if (active.empty()) return false;
    Matrix<Scalar> As(static_cast<Index>(active.size()), A.cols());
    Vector<Scalar> bs(static_cast<Index>(active.size()));
    for (std::size_t k = 0; k < active.size(); ++k) {
      As.row(static_cast<Index>(k)) = A.row(active[k]);
      bs[static_cast<Index>(k)] = b[active[k]];
    }
    const Matrix<Scalar> gram = As * As.transpose();
    const Vector<Scalar> nu = gram.completeOrthogonalDecomposition().solve(As * x - bs);
    if ((nu.array() < -tol * scale).any()) return false;
    Vector<Scalar> candidate = x - As.transpose() * nu;
    if (((A * candidate - b).array() > tol).any()) return false;
    out = std::move(candidate);
    return true;
  };

  for (int sweep = 0; sweep < 20000; ++sweep) {
    Scalar largest_change = 0;
    for (Index i = 0; i < r; ++i) {
      if (row_norms[i] == 0) continue;
      const Scalar residual = (A.row(i).dot(y) - b[i]) / row_norms[i];
      const Scalar updated = std::max(Scalar(0), mu[i] + residual);
      const Scalar delta = updated - mu[i];
      if (delta != 0) {
        y -= delta * A.row(i).transpose();
        mu[i] = updated;
        largest_change = std::max(largest_change, std::abs(delta) * std::sqrt(row_norms[i]));
      }
    }
    if (sweep % 8 == 7 || largest_change <= tol * scale) {
      Vector<Scalar> exact;
      if (polish(mu, exact)) return exact;
      if (largest_change == 0 && ((A * y - b).array() <= tol).all()) return y;
    }
  }
  if (((A * y - b).array() > tol).any()) {
    throw NumericalFailure("polyhedral projection did not reach feasibility", 0);
  }
  return y;
}

}  // namespace detail

/// Algebraic description of a feasible region with Euclidean projection.
template <typename Scalar>
class ConstraintSet {
 public:
  using VectorType = Vector<Scalar>;
  using MatrixType = Matrix<Scalar>;
  using Variant = std::variant<sets::Unconstrained, sets::Box<Scalar>,
                               sets::LinearInequality<Scalar>, sets::Simplex<Scalar>,
                               sets::BudgetBox<Scalar>>;

  ConstraintSet() : variant_(sets::Unconstrained{}) {}

  static ConstraintSet unconstrained() { return ConstraintSet(); }

  static ConstraintSet box(VectorType lo, VectorType hi) {
    if (lo.size() != hi.size()) throw ArgumentError("box bounds differ in dimension");
    if ((lo.array() > hi.array()).any()) throw InvalidSetError("box requires lo <= hi");
    return ConstraintSet(sets::Box<Scalar>{std::move(lo), std::move(hi)});
  }

  static ConstraintSet box(Index dim, Scalar lo, Scalar hi) {
    return box(VectorType::Constant(dim, lo), VectorType::Constant(dim, hi));
  }

  static ConstraintSet linear_inequality(MatrixType A, VectorType b) {
    if (A.rows() != b.size()) {
      throw InvalidSetError("linear inequality requires rows(A) == size(b)");
    }
    return ConstraintSet(sets::LinearInequality<Scalar>{std::move(A), std::move(b)});
  }

  static ConstraintSet simplex(Scalar radius) {
    if (!(radius > 0)) throw InvalidSetError("simplex radius must be positive");
    return ConstraintSet(sets::Simplex<Scalar>{radius});
  }

  static ConstraintSet budget_box(VectorType cap, Scalar budget) {
    if ((cap.array() < 0).any()) throw InvalidSetError("budget box caps must be >= 0");
    if (!(budget >= 0)) throw InvalidSetError("budget must be >= 0");
    return ConstraintSet(sets::BudgetBox<Scalar>{std::move(cap), budget});
  }

  SetKind kind() const { return static_cast<SetKind>(variant_.index()); }
  bool is_unconstrained() const { return kind() == SetKind::unconstrained; }
  const Variant& variant() const { return variant_; }

  /// Dimension the set is defined on, or -1 when any dimension is accepted.
  Index dimension() const {
    return std::visit(
        [](const auto& s) -> Index {
          using T = std::decay_t<decltype(s)>;
          if constexpr (std::is_same_v<T, sets::Box<Scalar>>) {
            return s.lo.size();
          } else if constexpr (std::is_same_v<T, sets::LinearInequality<Scalar>>) {
            return s.A.cols();
          } else if constexpr (std::is_same_v<T, sets::BudgetBox<Scalar>>) {
            return s.cap.size();
          } else {
            return -1;
          }
        },
        variant_);
  }

  VectorType project(const VectorType& x) const {
    check_dimension(x);
    return std::visit(
        [&](const auto& s) -> VectorType {
          using T = std::decay_t<decltype(s)>;
          if constexpr (std::is_same_v<T, sets::Unconstrained>) {
            return x;
          } else if constexpr (std::is_same_v<T, sets::Box<Scalar>>) {
            return x.cwiseMax(s.lo).cwiseMin(s.hi);
          } else if constexpr (std::is_same_v<T, sets::LinearInequality<Scalar>>) {
            return detail::project_polyhedron<Scalar>(s.A, s.b, x);
          } else if constexpr (std::is_same_v<T, sets::Simplex<Scalar>>) {
            return detail::project_simplex<Scalar>(x, s.radius);
          } else {
            return detail::project_budget_box<Scalar>(x, s.cap, s.budget);
          }
        },
        variant_);
  }

  bool contains(const VectorType& x, Scalar tol = feasibility_tolerance<Scalar>()) const {
    check_dimension(x);
    return std::visit(
        [&](const auto& s) -> bool {
          using T = std::decay_t<decltype(s)>;
          if constexpr (std::is_same_v<T, sets::Unconstrained>) {
            return x.allFinite();
          } else if constexpr (std::is_same_v<T, sets::Box<Scalar>>) {
            return ((x - s.lo).array() >= -tol).all() && ((s.hi - x).array() >= -tol).all();
          } else if constexpr (std::is_same_v<T, sets::LinearInequality<Scalar>>) {
            return s.A.rows() == 0 || ((s.A * x - s.b).array() <= tol).all();
          } else if constexpr (std::is_same_v<T, sets::Simplex<Scalar>>) {
            return (x.array() >= -tol).all() && std::abs(x.sum() - s.radius) <= tol * std::max<Scalar>(1, Scalar(x.size()));
          } else {
            return (x.array() >= -tol).all() && ((s.cap - x).array() >= -tol).all() &&
                   x.sum() <= s.budget + tol;
          }
        },
        variant_);
  }

  /// Rewrites polyhedral sets as A x <= b. Box rows are ordered lower bounds
  /// first (-x_i <= -lo_i) then upper bounds; the simplex equality becomes the
  /// pair (1'x <= r, -1'x <= -r).
  std::pair<MatrixType, VectorType> as_linear_inequality(Index dim) const {
    return std::visit(
        [&](const auto& s) -> std::pair<MatrixType, VectorType> {
          using T = std::decay_t<decltype(s)>;
          if constexpr (std::is_same_v<T, sets::Unconstrained>) {
            return {MatrixType(0, dim), VectorType(0)};
          } else if constexpr (std::is_same_v<T, sets::Box<Scalar>>) {
            const Index n = s.lo.size();
            MatrixType A(2 * n, n);
            A << -MatrixType::Identity(n, n), MatrixType::Identity(n, n);
            VectorType b(2 * n);
            b << -s.lo, s.hi;
            return {A, b};
          } else if constexpr (std::is_same_v<T, sets::LinearInequality<Scalar>>) {
            return {s.A, s.b};
          } else if constexpr (std::is_same_v<T, sets::Simplex<Scalar>>) {
            MatrixType A(dim + 2, dim);
            A << -MatrixType::Identity(dim, dim), MatrixType::Ones(1, dim),
                -MatrixType::Ones(1, dim);
            VectorType b(dim + 2);
            b << VectorType::Zero(dim), s.radius, -s.radius;
            return {A, b};
          } else {
            const Index n = s.cap.size();
            MatrixType A(2 * n + 1, n);
            A << -MatrixType::Identity(n, n), MatrixType::Identity(n, n),
                MatrixType::Ones(1, n);
            VectorType b(2 * n + 1);
            b << VectorType::Zero(n), s.cap, s.budget;
            return {A, b};
          }
        },
        variant_);
  }

 private:
  template <typename S>
  explicit ConstraintSet(S s) : variant_(std::move(s)) {}

  void check_dimension(const VectorType& x) const {
    const Index d = dimension();
    if (d >= 0 && d != x.size()) {
      throw ArgumentError("vector of size " + std::to_string(x.size()) +
                          " does not match set dimension " + std::to_string(d));
    }
  }

  Variant variant_;
};

template <typename Scalar>
Vector<Scalar> project(const ConstraintSet<Scalar>& set, const Vector<Scalar>& x) {
  return set.project(x);
}

}  // namespace blo
