#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "blo/errors.hpp"
#include "blo/types.hpp"

namespace blo {

namespace backends {

template <typename Scalar>
struct Cg {
  Index max_iter = 1000;
  Scalar residual_tol = Scalar(1e-12);
};

/// (1/L) sum_{i=0}^{K} (I - H/L)^i
template <typename Scalar>
struct NeumannSum {
  Index terms = 50;
  Scalar L = 1;
};

/// (K/L) prod_{i=1}^{k} (I - H/L) with k uniform in {0..K-1}.
template <typename Scalar>
struct NeumannProduct {
  Index terms = 50;
  Scalar L = 1;
  std::uint64_t seed = 0;
};

/// Fisher surrogate gamma I + (1/r) sum g_k g_k^T. rank = 0 selects the
/// one-shot form gamma I + v v^T.
template <typename Scalar>
struct WoodFisher {
  Scalar gamma = 1;
  Index rank = 0;
};

/// H approximated by lambda I.
template <typename Scalar>
struct HessianFree {
  Scalar lambda = 1;
};

}  // namespace backends

template <typename Scalar>
using IhvpBackend =
    std::variant<backends::Cg<Scalar>, backends::NeumannSum<Scalar>,
                 backends::NeumannProduct<Scalar>, backends::WoodFisher<Scalar>,
                 backends::HessianFree<Scalar>>;

template <typename Scalar>
std::string backend_tag(const IhvpBackend<Scalar>& b) {
  return std::visit(
      [](const auto& x) -> std::string {
        using T = std::decay_t<decltype(x)>;
        if constexpr (std::is_same_v<T, backends::Cg<Scalar>>) return "cg";
        else if constexpr (std::is_same_v<T, backends::NeumannSum<Scalar>>) return "neumann_sum";
        else if constexpr (std::is_same_v<T, backends::NeumannProduct<Scalar>>) return "neumann_product";
        else if constexpr (std::is_same_v<T, backends::WoodFisher<Scalar>>) return "woodfisher";
        else return "hessian_free";
      },
      b);
}

template <typename Scalar>
void validate(const IhvpBackend<Scalar>& b) {
  std::visit(
      [](const auto& x) {
        using T = std::decay_t<decltype(x)>;
        if constexpr (std::is_same_v<T, backends::Cg<Scalar>>) {
          if (x.max_iter < 1) throw ArgumentError("cg max_iter must be >= 1");
          if (!(x.residual_tol > 0)) throw ArgumentError("cg residual_tol must be > 0");
        } else if constexpr (std::is_same_v<T, backends::NeumannSum<Scalar>> ||
                             std::is_same_v<T, backends::NeumannProduct<Scalar>>) {
          if (x.terms < 0) throw ArgumentError("neumann terms must be >= 0");
          if (!(x.L > 0)) throw ArgumentError("neumann L must be > 0");
          if constexpr (std::is_same_v<T, backends::NeumannProduct<Scalar>>) {
            if (x.terms < 1) throw ArgumentError("neumann product needs K >= 1");
          }
        } else if constexpr (std::is_same_v<T, backends::WoodFisher<Scalar>>) {
          if (!(x.gamma > 0)) throw ArgumentError("woodfisher gamma must be > 0");
          if (x.rank < 0) throw ArgumentError("woodfisher rank must be >= 0");
        } else {
          if (!(x.lambda > 0)) throw ArgumentError("hessian-free lambda must be > 0");
        }
      },
      b);
}

template <typename Scalar>
struct IhvpDiagnostics {
  std::optional<Scalar> residual;
  Index iterations = 0;
  bool divergence_warning = false;
};

template <typename Scalar>
struct IhvpResult {
  Vector<Scalar> x;
  IhvpDiagnostics<Scalar> diagnostics;
};

/// Operator access for an IHVP solve. `fisher_sample(k)` returns the k-th
/// gradient used by WoodFisher (k = 0 for the one-shot form).
template <typename Scalar>
struct IhvpOperator {
  std::function<Vector<Scalar>(const Vector<Scalar>&)> hvp;
  std::function<Vector<Scalar>(Index)> fisher_sample;
};

namespace detail {

template <typename Scalar>
IhvpResult<Scalar> conjugate_gradient(const backends::Cg<Scalar>& cfg,
                                      const IhvpOperator<Scalar>& op, const Vector<Scalar>& rhs) {
  IhvpResult<Scalar> out;
  Vector<Scalar> x = Vector<Scalar>::Zero(rhs.size());
  Vector<Scalar> r = rhs;
  Vector<Scalar> p = r;
  Scalar rr = r.squaredNorm();
  Index it = 0;
  while (std::sqrt(rr) > cfg.residual_tol && it < cfg.max_iter) {
    const Vector<Scalar> hp = op.hvp(p);
    const Scalar curvature = p.dot(hp);
    if (!(curvature > 0)) {
      throw IndefiniteHessian("non-positive curvature p'Hp = " + std::to_string(curvature) +
                              " at CG iteration " + std::to_string(it));
    }
    const Scalar step = rr / curvature;
    x += step * p;
    r -= step * hp;
    const Scalar rr_next = r.squaredNorm();
    p = r + (rr_next / rr) * p;
    rr = rr_next;
    ++it;
  }
  out.x = std::move(x);
  out.diagnostics.residual = std::sqrt(rr);
  out.diagnostics.iterations = it;
  return out;
}

template <typename Scalar>
IhvpResult<Scalar> neumann_sum(const backends::NeumannSum<Scalar>& cfg,
                               const IhvpOperator<Scalar>& op, const Vector<Scalar>& rhs) {
  IhvpResult<Scalar> out;
  Vector<Scalar> term = rhs / cfg.L;
  Vector<Scalar> sum = term;
  Scalar previous = term.norm();
  for (Index i = 1; i <= cfg.terms; ++i) {
    term -= op.hvp(term) / cfg.L;
    sum += term;
    const Scalar norm = term.norm();
    if (norm > previous * (1 + Scalar(1e-12)) && norm > 0) out.diagnostics.divergence_warning = true;
    previous = norm;
  }
  out.x = std::move(sum);
  out.diagnostics.iterations = cfg.terms;
  return out;
}

template <typename Scalar>
IhvpResult<Scalar> neumann_product(const backends::NeumannProduct<Scalar>& cfg,
                                   const IhvpOperator<Scalar>& op, const Vector<Scalar>& rhs) {
  IhvpResult<Scalar> out;
  std::mt19937_64 rng(cfg.seed);
  std::uniform_int_distribution<Index> pick(0, cfg.terms - 1);
  const Index k = pick(rng);
  Vector<Scalar> v = rhs;
  Scalar previous = v.norm();
  for (Index i = 1; i <= k; ++i) {
    v -= op.hvp(v) / cfg.L;
    const Scalar norm = v.norm();
    if (norm > previous * (1 + Scalar(1e-12)) && norm > 0) out.diagnostics.divergence_warning = true;
    previous = norm;
  }
  out.x = (Scalar(cfg.terms) / cfg.L) * v;
  out.diagnostics.iterations = k;
  return out;
}

template <typename Scalar>
IhvpResult<Scalar> woodfisher(const backends::WoodFisher<Scalar>& cfg,
                              const IhvpOperator<Scalar>& op, const Vector<Scalar>& rhs) {
  if (!op.fisher_sample) throw ArgumentError("woodfisher backend needs gradient samples");
  IhvpResult<Scalar> out;
  const Scalar gamma = cfg.gamma;
  if (cfg.rank == 0) {
    const Vector<Scalar> v = op.fisher_sample(0);
    out.x = rhs / gamma - v * (v.dot(rhs) / (gamma * (gamma + v.squaredNorm())));
    out.diagnostics.iterations = 1;
    return out;
  }
  // H_k^{-1} = H_{k-1}^{-1} - u_k u_k^T / (r + g_k^T u_k), u_k = H_{k-1}^{-1} g_k,
  // for H_r = gamma I + (1/r) sum_k g_k g_k^T.
  const Scalar r = Scalar(cfg.rank);
  std::vector<Vector<Scalar>> u;
  std::vector<Scalar> denom;
  auto apply = [&](const Vector<Scalar>& y) {
    Vector<Scalar> z = y / gamma;
    for (std::size_t j = 0; j < u.size(); ++j) z -= u[j] * (u[j].dot(y) / denom[j]);
    return z;
  };
  for (Index k = 0; k < cfg.rank; ++k) {
    const Vector<Scalar> g = op.fisher_sample(k);
    Vector<Scalar> uk = apply(g);
    denom.push_back(r + g.dot(uk));
    u.push_back(std::move(uk));
  }
  out.x = apply(rhs);
  out.diagnostics.iterations = cfg.rank;
  return out;
}

}  // namespace detail

/// Approximates H^{-1} rhs with the chosen backend.
template <typename Scalar>
IhvpResult<Scalar> ihvp(const IhvpBackend<Scalar>& backend, const IhvpOperator<Scalar>& op,
                        const Vector<Scalar>& rhs) {
  validate(backend);
  return std::visit(
      [&](const auto& b) -> IhvpResult<Scalar> {
        using T = std::decay_t<decltype(b)>;
        if constexpr (std::is_same_v<T, backends::Cg<Scalar>>) {
          return detail::conjugate_gradient(b, op, rhs);
        } else if constexpr (std::is_same_v<T, backends::NeumannSum<Scalar>>) {
          return detail::neumann_sum(b, op, rhs);
        } else if constexpr (std::is_same_v<T, backends::NeumannProduct<Scalar>>) {
          return detail::neumann_product(b, op, rhs);
        } else if constexpr (std::is_same_v<T, backends::WoodFisher<Scalar>>) {
          return detail::woodfisher(b, op, rhs);
        } else {
          return {rhs / b.lambda, {}};
        }
      },
      backend);
}

/// Convenience overload for a bare HVP closure.
template <typename Scalar, typename Hvp>
  requires(!std::is_same_v<std::decay_t<Hvp>, IhvpOperator<Scalar>>)
IhvpResult<Scalar> ihvp(const IhvpBackend<Scalar>& backend, Hvp&& hvp, const Vector<Scalar>& rhs) {
  IhvpOperator<Scalar> op;
  op.hvp = std::forward<Hvp>(hvp);
  return ihvp(backend, op, rhs);
}

}  // namespace blo
