#pragma once

#include <random>

#include "blo/blo.hpp"

namespace blo::test {

using Vec = Vector<double>;
using Mat = Matrix<double>;

inline Vec gaussian(Index n, std::uint64_t seed, double scale = 1) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0, scale);
  Vec v(n);
  for (Index i = 0; i < n; ++i) v[i] = g(rng);
  return v;
}

inline Mat spd(Index n, std::uint64_t seed, double shift = 1) {
  Mat A(n, n);
  for (Index j = 0; j < n; ++j) A.col(j) = gaussian(n, seed * 131 + std::uint64_t(j));
  return A * A.transpose() / double(n) + shift * Mat::Identity(n, n);
}

inline double rel(const Vec& a, const Vec& b) { return (a - b).norm() / std::max(b.norm(), 1e-300); }

}  // namespace blo::test
