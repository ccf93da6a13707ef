#include <doctest.h>

#include "helpers.hpp"

using namespace blo;
using namespace blo::test;

namespace {

// Projection characterization: <x - P(x), y - P(x)> <= 0 for every feasible y.
void check_obtuse(const ConstraintSet<double>& set, const Vec& x, const std::vector<Vec>& feasible) {
  const Vec p = set.project(x);
  CHECK(set.contains(p, 1e-9));
  for (const Vec& y : feasible) CHECK((x - p).dot(y - p) <= 1e-9);
}

std::vector<Vec> feasible_samples(const ConstraintSet<double>& set, Index n, std::uint64_t seed) {
  std::vector<Vec> out;
  for (std::uint64_t k = 0; k < 20; ++k) out.push_back(set.project(gaussian(n, seed + k, 3)));
  return out;
}

}  // namespace

TEST_SUITE("constraints") {
  TEST_CASE("unconstrained projection is the identity") {
    const auto set = ConstraintSet<double>::unconstrained();
    const Vec x = gaussian(4, 1);
    CHECK(set.project(x) == x);
    CHECK(set.is_unconstrained());
  }

  TEST_CASE("box projection clips coordinates") {
    const auto set = ConstraintSet<double>::box(3, -1, 2);
    Vec x(3);
    x << -5, 0.5, 7;
    const Vec p = set.project(x);
    CHECK(p[0] == -1);
    CHECK(p[1] == 0.5);
    CHECK(p[2] == 2);
  }

  TEST_CASE("box with lo > hi is rejected") {
    CHECK_THROWS_AS(ConstraintSet<double>::box(2, 1, 0), InvalidSetError);
  }

  TEST_CASE("simplex projection lands on the simplex") {
    const auto set = ConstraintSet<double>::simplex(1);
    for (std::uint64_t s = 0; s < 10; ++s) {
      const Vec p = set.project(gaussian(6, s, 2));
      CHECK(p.minCoeff() >= 0);
      CHECK(p.sum() == doctest::Approx(1).epsilon(1e-12));
    }
  }

  TEST_CASE("budget box respects caps and budget") {
    const auto set = ConstraintSet<double>::budget_box(Vec::Ones(8), 3);
    for (std::uint64_t s = 0; s < 10; ++s) {
      const Vec p = set.project(gaussian(8, s, 2) + Vec::Constant(8, 0.5));
      CHECK(p.minCoeff() >= 0);
      CHECK(p.maxCoeff() <= 1);
      CHECK(p.sum() <= 3 + 1e-9);
    }
    CHECK_THROWS_AS(ConstraintSet<double>::budget_box(Vec::Ones(2), -1), InvalidSetError);
  }

  TEST_CASE("projections satisfy the obtuse-angle property") {
    const std::vector<ConstraintSet<double>> sets = {
        ConstraintSet<double>::box(5, -0.5, 0.5), ConstraintSet<double>::simplex(2),
        ConstraintSet<double>::budget_box(Vec::Ones(5), 2),
        ConstraintSet<double>::linear_inequality(gaussian(15, 9).reshaped(3, 5), Vec::Ones(3))};
    for (std::size_t i = 0; i < sets.size(); ++i) {
      CAPTURE(i);
      const auto feasible = feasible_samples(sets[i], 5, 100 * i);
      for (std::uint64_t s = 0; s < 5; ++s) check_obtuse(sets[i], gaussian(5, 1000 + s, 3), feasible);
    }
  }

  TEST_CASE("projection is idempotent") {
    const auto set = ConstraintSet<double>::linear_inequality(gaussian(12, 4).reshaped(3, 4), Vec::Ones(3));
    for (std::uint64_t s = 0; s < 10; ++s) {
      const Vec p = set.project(gaussian(4, s, 4));
      CHECK((set.project(p) - p).norm() <= 1e-9);
    }
  }

  TEST_CASE("polyhedron projection of an interior point is the point") {
    const auto set = ConstraintSet<double>::linear_inequality(Mat::Identity(3, 3), Vec::Ones(3));
    const Vec x = Vec::Constant(3, 0.25);
    CHECK((set.project(x) - x).norm() <= 1e-14);
  }

  TEST_CASE("linear inequality rejects mismatched shapes") {
    CHECK_THROWS_AS(ConstraintSet<double>::linear_inequality(Mat::Identity(3, 3), Vec::Ones(2)),
                    InvalidSetError);
  }
}
