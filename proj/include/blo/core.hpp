#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "blo/constraints.hpp"
#include "blo/errors.hpp"
#include "blo/types.hpp"

namespace blo {

/// Oracle accounting. `values` counts objective evaluations (f or g).
struct OracleCounters {
  std::uint64_t upper_grads = 0;
  std::uint64_t lower_grads = 0;
  std::uint64_t hvps = 0;
  std::uint64_t jvps = 0;
  std::uint64_t projections = 0;
  std::uint64_t values = 0;

  std::uint64_t gradients() const { return upper_grads + lower_grads; }
  std::uint64_t total() const { return gradients() + hvps + jvps + projections + values; }

  OracleCounters& operator+=(const OracleCounters& o) {
    upper_grads += o.upper_grads;
    lower_grads += o.lower_grads;
    hvps += o.hvps;
    jvps += o.jvps;
    projections += o.projections;
    values += o.values;
    return *this;
  }
  friend OracleCounters operator+(OracleCounters a, const OracleCounters& b) { return a += b; }
  friend OracleCounters operator-(const OracleCounters& a, const OracleCounters& b) {
    return {a.upper_grads - b.upper_grads, a.lower_grads - b.lower_grads, a.hvps - b.hvps,
            a.jvps - b.jvps, a.projections - b.projections, a.values - b.values};
  }
  friend bool operator==(const OracleCounters&, const OracleCounters&) = default;
};

/// Analytic lower-level solution map phi*(theta) and its vector-Jacobian product
/// v -> (dphi*/dtheta)^T v.
template <typename Scalar>
struct SolutionMap {
  std::function<Vector<Scalar>(const Vector<Scalar>&)> map;
  std::function<Vector<Scalar>(const Vector<Scalar>&, const Vector<Scalar>&)> vjp;
};

/// Oracle bundle of a bilevel problem
///   min_theta f(theta, phi*(theta))  s.t. phi*(theta) in argmin_{phi in C} g(theta, phi).
/// Every oracle takes a batch of sample indices; deterministic problems ignore it.
template <typename Scalar>
struct BilevelProblem {
  using VectorType = Vector<Scalar>;
  using ValueFn = std::function<Scalar(const VectorType&, const VectorType&, Batch)>;
  using GradFn = std::function<VectorType(const VectorType&, const VectorType&, Batch)>;
  using ProductFn =
      std::function<VectorType(const VectorType&, const VectorType&, const VectorType&, Batch)>;

  std::string name;
  Index dim_theta = 0;
  Index dim_phi = 0;

  ValueFn upper_value;
  GradFn upper_grad_theta;
  GradFn upper_grad_phi;
  ValueFn lower_value;
  GradFn lower_grad_phi;
  /// d g / d theta; only the value-function engine needs it.
  GradFn lower_grad_theta;
  /// (theta, phi, v) -> grad^2_phiphi g * v
  ProductFn lower_hvp_phiphi;
  /// (theta, phi, v) -> grad^2_thetaphi g * v, an m-vector
  ProductFn lower_cross_jvp;

  ConstraintSet<Scalar> upper_set;
  ConstraintSet<Scalar> lower_set;
  Index num_samples = 0;

  std::optional<SolutionMap<Scalar>> solution_map;
  /// The lower constraint couples theta and phi and is only encoded through
  /// `solution_map`; generic engines must refuse such problems.
  bool coupled_lower = false;

  bool is_stochastic() const { return num_samples > 0; }
};

/// Mean of `per_sample(i)` over a batch, accumulated in index order.
/// An empty batch means every index 0..n-1, so the full batch written out
/// explicitly produces the same bits.
template <typename Fn>
auto batch_mean(Index n, Batch batch, Fn&& per_sample) {
  using Result = std::decay_t<decltype(per_sample(Index{0}))>;
  const Index count = batch.empty() ? n : static_cast<Index>(batch.size());
  if (count == 0) throw ArgumentError("batch_mean over zero samples");
  auto index_at = [&](Index k) { return batch.empty() ? k : batch[static_cast<std::size_t>(k)]; };
  Result acc = per_sample(index_at(0));
  for (Index k = 1; k < count; ++k) acc += per_sample(index_at(k));
  if constexpr (std::is_arithmetic_v<Result>) {
    return acc / static_cast<Result>(count);
  } else {
    using S = typename Result::Scalar;
    return Result(acc / static_cast<S>(count));
  }
}

/// Checked, counted view of a problem with the current upper/lower batches.
/// Every call increments exactly one counter.
template <typename Scalar>
class Oracle {
 public:
  using VectorType = Vector<Scalar>;

  explicit Oracle(const BilevelProblem<Scalar>& problem) : problem_(&problem) {}

  const BilevelProblem<Scalar>& problem() const { return *problem_; }
  Index dim_theta() const { return problem_->dim_theta; }
  Index dim_phi() const { return problem_->dim_phi; }

  const OracleCounters& counters() const { return counters_; }
  OracleCounters& counters() { return counters_; }

  void set_batches(std::vector<Index> upper, std::vector<Index> lower) {
    upper_batch_ = std::move(upper);
    lower_batch_ = std::move(lower);
  }
  void clear_batches() { set_batches({}, {}); }
  Batch upper_batch() const { return upper_batch_; }
  Batch lower_batch() const { return lower_batch_; }

  Scalar upper_value(const VectorType& theta, const VectorType& phi) {
    ++counters_.values;
    return problem_->upper_value(theta, phi, upper_batch());
  }
  VectorType upper_grad_theta(const VectorType& theta, const VectorType& phi) {
    ++counters_.upper_grads;
    return problem_->upper_grad_theta(theta, phi, upper_batch());
  }
  VectorType upper_grad_phi(const VectorType& theta, const VectorType& phi) {
    ++counters_.upper_grads;
    return problem_->upper_grad_phi(theta, phi, upper_batch());
  }
  Scalar lower_value(const VectorType& theta, const VectorType& phi) {
    ++counters_.values;
    return problem_->lower_value(theta, phi, lower_batch());
  }
  VectorType lower_grad_phi(const VectorType& theta, const VectorType& phi) {
    ++counters_.lower_grads;
    return problem_->lower_grad_phi(theta, phi, lower_batch());
  }
  VectorType lower_grad_phi(const VectorType& theta, const VectorType& phi, Batch batch) {
    ++counters_.lower_grads;
    return problem_->lower_grad_phi(theta, phi, batch);
  }
  VectorType lower_grad_theta(const VectorType& theta, const VectorType& phi) {
    if (!problem_->lower_grad_theta) {
      throw UnsupportedMap("problem '" + problem_->name + "' has no lower theta-gradient oracle");
    }
    ++counters_.lower_grads;
    return problem_->lower_grad_theta(theta, phi, lower_batch());
  }
  VectorType hvp(const VectorType& theta, const VectorType& phi, const VectorType& v) {
    ++counters_.hvps;
    return problem_->lower_hvp_phiphi(theta, phi, v, lower_batch());
  }
  VectorType cross_jvp(const VectorType& theta, const VectorType& phi, const VectorType& v) {
    ++counters_.jvps;
    return problem_->lower_cross_jvp(theta, phi, v, lower_batch());
  }
  VectorType project_upper(const VectorType& theta) {
    if (problem_->upper_set.is_unconstrained()) return theta;
    ++counters_.projections;
    return problem_->upper_set.project(theta);
  }
  VectorType project_lower(const VectorType& phi) {
    if (problem_->lower_set.is_unconstrained()) return phi;
    ++counters_.projections;
    return problem_->lower_set.project(phi);
  }

 private:
  const BilevelProblem<Scalar>* problem_;
  OracleCounters counters_;
  std::vector<Index> upper_batch_;
  std::vector<Index> lower_batch_;
};

/// Indices drawn without replacement; fully determined by `rng_seed`.
struct SampleBatch {
  std::vector<Index> indices;
  std::uint64_t rng_seed = 0;
};

/// splitmix64 finalizer, used to derive independent stream seeds.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

/// Partial Fisher-Yates draw of `size` distinct indices from [0, n), sorted.
/// size >= n yields every index.
inline SampleBatch sample_batch(Index n, Index size, std::uint64_t seed) {
  if (n <= 0) throw ArgumentError("sampling requires a finite-sum problem (N > 0)");
  if (size <= 0) throw ArgumentError("batch size must be positive");
  SampleBatch out;
  out.rng_seed = seed;
  std::vector<Index> pool(static_cast<std::size_t>(n));
  std::iota(pool.begin(), pool.end(), Index{0});
  if (size < n) {
    std::mt19937_64 rng(seed);
    for (Index k = 0; k < size; ++k) {
      std::uniform_int_distribution<Index> pick(k, n - 1);
      std::swap(pool[static_cast<std::size_t>(k)], pool[static_cast<std::size_t>(pick(rng))]);
    }
    pool.resize(static_cast<std::size_t>(size));
    std::sort(pool.begin(), pool.end());
  }
  out.indices = std::move(pool);
  return out;
}

enum class GradientKind { upper_theta, upper_phi, lower_phi };

/// Mean of per-sample gradients over `batch`.
template <typename Scalar>
Vector<Scalar> batch_gradients(const BilevelProblem<Scalar>& problem, const Vector<Scalar>& theta,
                               const Vector<Scalar>& phi, const SampleBatch& batch,
                               GradientKind which) {
  if (problem.num_samples <= 0) throw ArgumentError("batch_gradients needs N > 0");
  if (batch.indices.empty()) throw ArgumentError("empty batch");
  for (Index i : batch.indices) {
    if (i < 0 || i >= problem.num_samples) {
      throw ArgumentError("batch index " + std::to_string(i) + " out of range");
    }
  }
  const Batch b(batch.indices);
  switch (which) {
    case GradientKind::upper_theta: return problem.upper_grad_theta(theta, phi, b);
    case GradientKind::upper_phi: return problem.upper_grad_phi(theta, phi, b);
    case GradientKind::lower_phi: return problem.lower_grad_phi(theta, phi, b);
  }
  throw ArgumentError("unknown gradient kind");
}

}  // namespace blo
