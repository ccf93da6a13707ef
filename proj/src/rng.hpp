#pragma once

#include <random>

#include "blo/testbed.hpp"

namespace blo::testbed {

inline Mat gaussian_matrix(std::mt19937_64& rng, Index rows, Index cols) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Mat out(rows, cols);
  // Column-major fill so results do not depend on Eigen's evaluation order.
  for (Index j = 0; j < cols; ++j) {
    for (Index i = 0; i < rows; ++i) out(i, j) = normal(rng);
  }
  return out;
}

inline Vec gaussian_vector(std::mt19937_64& rng, Index n) {
  return gaussian_matrix(rng, n, 1);
}

inline double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

}  // namespace blo::testbed
