#pragma once

#include <chrono>
#include <cstdint>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "blo/implicit.hpp"
#include "blo/lower.hpp"
#include "blo/report.hpp"
#include "blo/unroll.hpp"
#include "blo/valuefn.hpp"

namespace blo {

namespace engines {

template <typename Scalar>
struct If {
  IhvpBackend<Scalar> backend = backends::Cg<Scalar>{};
};

template <typename Scalar>
struct IfConstrained {
  IhvpBackend<Scalar> backend = backends::Cg<Scalar>{};
  Scalar tau_act = Scalar(default_active_tolerance);
};

/// Unrolls K lower steps from phi0 (or from the previous phi_K when
/// warm_start is set) at every outer iteration.
template <typename Scalar>
struct Gu {
  UnrollMode mode = UnrollMode::bgu;
  Index K = 10;
  Scalar beta = Scalar(0.1);
  Index tau = 0;
  bool warm_start = false;
};

template <typename Scalar>
struct Vf {
  VfConfig<Scalar> cfg;
};

struct Analytic {};

}  // namespace engines

template <typename Scalar>
using Engine = std::variant<engines::If<Scalar>, engines::IfConstrained<Scalar>,
                            engines::Gu<Scalar>, engines::Vf<Scalar>, engines::Analytic>;

namespace loops {

/// Lower level solved to `tol` every outer iteration (warm-started).
template <typename Scalar>
struct Double {
  Scalar tol = Scalar(1e-10);
  Index max_iters = 100000;
  Scalar beta = Scalar(0.5);
};

/// Exactly `steps` lower updates per outer iteration, warm-started.
template <typename Scalar>
struct Single {
  Index steps = 1;
  Scalar beta = Scalar(0.5);
};

}  // namespace loops

template <typename Scalar>
using LoopMode = std::variant<loops::Double<Scalar>, loops::Single<Scalar>>;

namespace stochastic {

struct Sgd {
  Index batch_upper = 8;
  Index batch_lower = 8;
};

/// STORM-style recursion d_t = g_t + (1 - a)(d_{t-1} - g(theta_{t-1})), both
/// gradients on the same batch. `lower_vr` applies the same recursion to
/// single-loop lower updates.
template <typename Scalar>
struct MomentumVr {
  Scalar a = Scalar(0.1);
  Index batch_upper = 8;
  Index batch_lower = 8;
  bool lower_vr = true;
};

}  // namespace stochastic

template <typename Scalar>
using StochasticMode = std::variant<std::monostate, stochastic::Sgd, stochastic::MomentumVr<Scalar>>;

template <typename Scalar>
struct OuterConfig {
  Engine<Scalar> engine = engines::If<Scalar>{};
  Scalar alpha = Scalar(0.1);
  Index T = 100;
  LoopMode<Scalar> loop = loops::Double<Scalar>{};
  StochasticMode<Scalar> stochastic = std::monostate{};
  std::uint64_t seed = 0;
  Scalar stationarity_tol = 0;
  std::optional<Vector<Scalar>> theta0;
  std::optional<Vector<Scalar>> phi0;
};

template <typename Scalar>
const char* engine_name(const Engine<Scalar>& e) {
  switch (e.index()) {
    case 0: return "if";
    case 1: return "if_constrained";
    case 2: return "gu";
    case 3: return "vf";
    default: return "analytic";
  }
}

/// Squared gradient norm, or squared gradient mapping on a constrained set.
template <typename Scalar>
Scalar stationarity(const Vector<Scalar>& theta, const Vector<Scalar>& grad,
                    const ConstraintSet<Scalar>& upper_set, Scalar alpha) {
  if (upper_set.is_unconstrained()) return grad.squaredNorm();
  const Vector<Scalar> next = upper_set.project(Vector<Scalar>(theta - alpha * grad));
  return ((theta - next) / alpha).squaredNorm();
}

/// Reason an engine cannot run on a problem, or empty when it can.
template <typename Scalar>
std::string incompatibility(const BilevelProblem<Scalar>& problem, const Engine<Scalar>& engine,
                            bool stochastic_run = false) {
  const bool lower_free = problem.lower_set.is_unconstrained();
  if (std::holds_alternative<engines::Analytic>(engine)) {
    return problem.solution_map ? "" : "problem has no analytic solution map";
  }
  if (problem.coupled_lower) {
    return "lower constraint couples theta and phi; only the analytic engine applies";
  }
  if (std::holds_alternative<engines::If<Scalar>>(engine) && !lower_free) {
    return "if engine needs an unconstrained lower level; use if_constrained";
  }
  if (std::holds_alternative<engines::IfConstrained<Scalar>>(engine) && lower_free) {
    return "if_constrained engine needs a constrained lower level";
  }
  if (const auto* gu = std::get_if<engines::Gu<Scalar>>(&engine)) {
    if (!lower_free) return "unrolling needs an unconstrained lower level";
    if (gu->K < 0) return "gu K must be >= 0";
    if (!(gu->beta > 0)) return "gu beta must be > 0";
    if (gu->mode == UnrollMode::tgu && (gu->tau < 0 || gu->tau > gu->K)) {
      return "tgu needs 0 <= tau <= K";
    }
  }
  if (std::holds_alternative<engines::Vf<Scalar>>(engine)) {
    if (!problem.lower_grad_theta) return "problem has no lower theta-gradient oracle";
    if (stochastic_run) return "value-function engine is deterministic only";
  }
  return "";
}

template <typename Scalar>
void check_config(const BilevelProblem<Scalar>& problem, const OuterConfig<Scalar>& cfg) {
  const bool stochastic_run = cfg.stochastic.index() != 0;
  if (const std::string why = incompatibility(problem, cfg.engine, stochastic_run); !why.empty()) {
    throw ConfigurationError(why);
  }
  if (!(cfg.alpha > 0)) throw ConfigurationError("alpha must be > 0");
  if (cfg.T < 1) throw ConfigurationError("T must be >= 1");
  if (cfg.theta0 && cfg.theta0->size() != problem.dim_theta) throw ConfigurationError("theta0 has wrong dimension");
  if (cfg.phi0 && cfg.phi0->size() != problem.dim_phi) throw ConfigurationError("phi0 has wrong dimension");
  if (const auto* d = std::get_if<loops::Double<Scalar>>(&cfg.loop)) {
    if (!(d->tol > 0) || d->max_iters < 0 || !(d->beta > 0)) throw ConfigurationError("invalid double-loop settings");
  } else {
    const auto& s = std::get<loops::Single<Scalar>>(cfg.loop);
    if (s.steps < 0 || !(s.beta > 0)) throw ConfigurationError("invalid single-loop settings");
  }
  if (const auto* vr = std::get_if<stochastic::MomentumVr<Scalar>>(&cfg.stochastic)) {
    if (!(vr->a > 0 && vr->a <= 1)) throw ConfigurationError("momentum weight a must lie in (0, 1]");
  }
  if (stochastic_run) {
    if (problem.num_samples <= 0) throw ConfigurationError("stochastic run needs a finite-sum problem");
    const Index bu = std::visit([](const auto& s) -> Index {
      if constexpr (std::is_same_v<std::decay_t<decltype(s)>, std::monostate>) return 1;
      else return std::min(s.batch_upper, s.batch_lower);
    }, cfg.stochastic);
    if (bu < 1) throw ConfigurationError("batch sizes must be >= 1");
  }
  if (const auto* vf = std::get_if<engines::Vf<Scalar>>(&cfg.engine)) {
    try {
      validate(vf->cfg);
    } catch (const ArgumentError& e) {
      throw ConfigurationError(e.what());
    }
  }
  const IhvpBackend<Scalar>* backend = nullptr;
  if (const auto* e = std::get_if<engines::If<Scalar>>(&cfg.engine)) backend = &e->backend;
  if (const auto* e = std::get_if<engines::IfConstrained<Scalar>>(&cfg.engine)) backend = &e->backend;
  if (backend) {
    try {
      validate(*backend);
    } catch (const ArgumentError& e) {
      throw ConfigurationError(e.what());
    }
  }
}

namespace detail {

template <typename Scalar>
class OuterLoop {
 public:
  OuterLoop(const BilevelProblem<Scalar>& problem, const OuterConfig<Scalar>& cfg)
      : problem_(problem), cfg_(cfg), engine_(problem), driver_(problem) {}

  RunReport<Scalar> run() {
    const auto clock_start = std::chrono::steady_clock::now();
    RunReport<Scalar> report;
    report.seed = cfg_.seed;

    Vector<Scalar> theta = cfg_.theta0 ? *cfg_.theta0 : Vector<Scalar>::Zero(problem_.dim_theta);
    theta = driver_.project_upper(theta);
    phi0_ = cfg_.phi0 ? *cfg_.phi0 : Vector<Scalar>::Zero(problem_.dim_phi);
    phi0_ = driver_.project_lower(phi0_);

    if (const auto* vf = std::get_if<engines::Vf<Scalar>>(&cfg_.engine)) {
      report = solve_vf(engine_, theta, phi0_, vf->cfg);
      report.seed = cfg_.seed;
      report.engine_counters = engine_.counters();
      report.driver_counters = driver_.counters();
      report.counters = report.engine_counters + report.driver_counters;
      return report;
    }

    Vector<Scalar> phi = phi0_;
    Vector<Scalar> theta_prev;
    Vector<Scalar> phi_prev;
    Vector<Scalar> direction;
    const auto* vr = std::get_if<stochastic::MomentumVr<Scalar>>(&cfg_.stochastic);

    try {
      for (Index t = 0; t < cfg_.T; ++t) {
        draw_batches(t);
        phi = lower_update(theta, phi, t, report);
        const HypergradEstimate<Scalar> est = estimate(theta, phi, t);
        const Scalar objective = driver_.upper_value(theta, phi);
        report.engine_counters += est.counters_delta;
        if (est.divergence_warning) warn(report, "neumann series diverging at iteration " + std::to_string(t));

        const Scalar measure = stationarity_counted(theta, est.grad);
        report.theta_trace.push_back(theta);
        report.objective_trace.push_back(objective);
        report.stationarity_trace.push_back(measure);
        report.counters_trace.push_back(engine_.counters() + driver_.counters());
        report.time_trace.push_back(
            std::chrono::duration<double>(std::chrono::steady_clock::now() - clock_start).count());
        report.iterations = t + 1;

        if (measure <= cfg_.stationarity_tol) {
          report.termination = Termination::tol_met;
          break;
        }

        if (vr && t > 0) {
          Vector<Scalar> phi_at_prev = previous_lower_point(theta_prev, phi_prev, report);
          const HypergradEstimate<Scalar> old = estimate(theta_prev, phi_at_prev, t);
          report.engine_counters += old.counters_delta;
          direction = est.grad + (1 - vr->a) * (direction - old.grad);
        } else {
          direction = est.grad;
        }
        if (!direction.allFinite()) throw NumericalFailure("non-finite update direction", static_cast<std::size_t>(t));
        theta_prev = theta;
        phi_prev = phi;
        theta = driver_.project_upper(Vector<Scalar>(theta - cfg_.alpha * direction));
      }
    } catch (const Error& e) {
      report.termination = Termination::failure;
      report.failure_reason = e.what();
    }

    report.theta_final = theta;
    report.phi_final = phi;
    report.driver_counters = driver_.counters();
    report.counters = engine_.counters() + driver_.counters();
    report.wall_time =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - clock_start).count();
    return report;
  }

 private:
  bool stochastic_run() const { return cfg_.stochastic.index() != 0; }

  void draw_batches(Index t) {
    if (!stochastic_run()) return;
    const auto [bu, bl] = std::visit(
        [](const auto& s) -> std::pair<Index, Index> {
          if constexpr (std::is_same_v<std::decay_t<decltype(s)>, std::monostate>) return {0, 0};
          else return {s.batch_upper, s.batch_lower};
        },
        cfg_.stochastic);
    const auto tt = static_cast<std::uint64_t>(t);
    SampleBatch upper = sample_batch(problem_.num_samples, bu, mix_seed(cfg_.seed, 2 * tt));
    SampleBatch lower = sample_batch(problem_.num_samples, bl, mix_seed(cfg_.seed, 2 * tt + 1));
    engine_.set_batches(upper.indices, lower.indices);
    driver_.set_batches({}, std::move(lower.indices));
  }

  static void warn(RunReport<Scalar>& report, std::string message) {
    constexpr std::size_t max_warnings = 100;
    if (report.warnings.size() < max_warnings) report.warnings.push_back(std::move(message));
  }

  Vector<Scalar> solve_double(const Vector<Scalar>& theta, const Vector<Scalar>& phi,
                              const loops::Double<Scalar>& d, Index t, RunReport<Scalar>& report) {
    try {
      return solve_to_tolerance(driver_, theta, phi, d.tol, d.max_iters, d.beta).phi;
    } catch (const NotConverged<Scalar>& e) {
      warn(report, "iteration " + std::to_string(t) + ": " + e.what() + "; continuing with best iterate");
      return e.best();
    }
  }

  Vector<Scalar> lower_update(const Vector<Scalar>& theta, const Vector<Scalar>& phi, Index t,
                              RunReport<Scalar>& report) {
    if (std::holds_alternative<engines::Analytic>(cfg_.engine)) return problem_.solution_map->map(theta);
    if (std::holds_alternative<engines::Gu<Scalar>>(cfg_.engine)) return phi;  // the engine unrolls
    if (const auto* d = std::get_if<loops::Double<Scalar>>(&cfg_.loop)) {
      return solve_double(theta, phi, *d, t, report);
    }
    const auto& s = std::get<loops::Single<Scalar>>(cfg_.loop);
    const auto* vr = std::get_if<stochastic::MomentumVr<Scalar>>(&cfg_.stochastic);
    Vector<Scalar> x = phi;
    for (Index k = 0; k < s.steps; ++k) {
      const Vector<Scalar> g = driver_.lower_grad_phi(theta, x);
      if (vr && vr->lower_vr && lower_prev_) {
        const Vector<Scalar> g_old = driver_.lower_grad_phi(lower_prev_->first, lower_prev_->second);
        lower_dir_ = g + (1 - vr->a) * (lower_dir_ - g_old);
      } else {
        lower_dir_ = g;
      }
      if (!lower_dir_.allFinite()) throw NumericalFailure("non-finite lower direction", static_cast<std::size_t>(t));
      lower_prev_ = std::make_pair(theta, x);
      x = driver_.project_lower(Vector<Scalar>(x - s.beta * lower_dir_));
    }
    return x;
  }

  /// Lower point paired with theta_{t-1} for the momentum correction.
  Vector<Scalar> previous_lower_point(const Vector<Scalar>& theta_prev, const Vector<Scalar>& phi_prev,
                                      RunReport<Scalar>& report) {
    if (const auto* d = std::get_if<loops::Double<Scalar>>(&cfg_.loop)) {
      if (std::holds_alternative<engines::If<Scalar>>(cfg_.engine) ||
          std::holds_alternative<engines::IfConstrained<Scalar>>(cfg_.engine)) {
        return solve_double(theta_prev, phi_prev, *d, -1, report);
      }
    }
    return phi_prev;
  }

  IhvpBackend<Scalar> seeded(IhvpBackend<Scalar> backend, Index t) const {
    if (auto* np = std::get_if<backends::NeumannProduct<Scalar>>(&backend)) {
      np->seed = mix_seed(np->seed ^ cfg_.seed, static_cast<std::uint64_t>(t));
    }
    return backend;
  }

  /// Engine hypergradient at (theta, phi). Unrolling engines replace phi by phi_K.
  HypergradEstimate<Scalar> estimate(const Vector<Scalar>& theta, Vector<Scalar>& phi, Index t) {
    return std::visit(
        [&](const auto& e) -> HypergradEstimate<Scalar> {
          using E = std::decay_t<decltype(e)>;
          if constexpr (std::is_same_v<E, engines::If<Scalar>>) {
            return hypergrad_if(engine_, theta, phi, seeded(e.backend, t));
          } else if constexpr (std::is_same_v<E, engines::IfConstrained<Scalar>>) {
            return hypergrad_if_constrained(engine_, theta, phi, seeded(e.backend, t), e.tau_act);
          } else if constexpr (std::is_same_v<E, engines::Gu<Scalar>>) {
            return unrolled(e, theta, phi);
          } else if constexpr (std::is_same_v<E, engines::Analytic>) {
            return hypergrad_analytic(engine_, theta);
          } else {
            throw ConfigurationError("value-function engine has no per-iteration estimate");
          }
        },
        cfg_.engine);
  }

  /// Builds the trajectory on the engine oracle so its lower gradients are
  /// part of the engine's cost.
  HypergradEstimate<Scalar> unrolled(const engines::Gu<Scalar>& e, const Vector<Scalar>& theta,
                                     Vector<Scalar>& phi) {
    const OracleCounters start = engine_.counters();
    const Vector<Scalar> from = e.warm_start ? phi : phi0_;
    UnrollPlan<Scalar> plan;
    plan.mode = e.mode;
    plan.tau = e.tau;
    plan.trajectory = e.mode == UnrollMode::signgd_free ? solve_signgd(engine_, theta, from, e.K, e.beta)
                                                        : solve_gd(engine_, theta, from, e.K, e.beta);
    HypergradEstimate<Scalar> est = hypergrad_unroll(engine_, theta, plan);
    est.counters_delta = engine_.counters() - start;
    phi = plan.trajectory.back();
    return est;
  }

  Scalar stationarity_counted(const Vector<Scalar>& theta, const Vector<Scalar>& grad) {
    if (problem_.upper_set.is_unconstrained()) return grad.squaredNorm();
    const Vector<Scalar> next = driver_.project_upper(Vector<Scalar>(theta - cfg_.alpha * grad));
    return ((theta - next) / cfg_.alpha).squaredNorm();
  }

  const BilevelProblem<Scalar>& problem_;
  const OuterConfig<Scalar>& cfg_;
  Oracle<Scalar> engine_;
  Oracle<Scalar> driver_;
  Vector<Scalar> phi0_;
  Vector<Scalar> lower_dir_;
  std::optional<std::pair<Vector<Scalar>, Vector<Scalar>>> lower_prev_;
};

}  // namespace detail

/// Deterministic outer loop (full-batch oracles).
template <typename Scalar>
RunReport<Scalar> run_deterministic(const BilevelProblem<Scalar>& problem, OuterConfig<Scalar> cfg) {
  cfg.stochastic = std::monostate{};
  check_config(problem, cfg);
  return detail::OuterLoop<Scalar>(problem, cfg).run();
}

/// Stochastic outer loop: SGD or momentum variance reduction on sampled batches.
template <typename Scalar>
RunReport<Scalar> run_stochastic(const BilevelProblem<Scalar>& problem, const OuterConfig<Scalar>& cfg) {
  if (cfg.stochastic.index() == 0) throw ConfigurationError("run_stochastic needs sgd or momentum_vr settings");
  check_config(problem, cfg);
  return detail::OuterLoop<Scalar>(problem, cfg).run();
}

template <typename Scalar>
RunReport<Scalar> run(const BilevelProblem<Scalar>& problem, const OuterConfig<Scalar>& cfg) {
  return cfg.stochastic.index() == 0 ? run_deterministic(problem, cfg) : run_stochastic(problem, cfg);
}

}  // namespace blo
