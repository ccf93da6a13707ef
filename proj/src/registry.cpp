#include <cmath>
#include <set>

#include "blo/testbed.hpp"

namespace blo::testbed {

namespace {

using Params = std::map<std::string, std::vector<double>>;

double scalar(const Params& p, const std::string& key) {
  const auto& v = p.at(key);
  if (v.size() != 1) throw ConfigurationError("parameter '" + key + "' must be a scalar");
  return v[0];
}

Index integer(const Params& p, const std::string& key, Index min_value) {
  const double v = scalar(p, key);
  if (v != std::floor(v) || v < double(min_value)) {
    throw ConfigurationError("parameter '" + key + "' must be an integer >= " + std::to_string(min_value));
  }
  return static_cast<Index>(v);
}

bool flag(const Params& p, const std::string& key) {
  const double v = scalar(p, key);
  if (v != 0 && v != 1) throw ConfigurationError("parameter '" + key + "' must be 0 or 1");
  return v == 1;
}

ParamInfo param(std::string name, double value, std::string help) {
  return {std::move(name), {value}, std::move(help)};
}

std::vector<ProblemInfo> build_registry() {
  std::vector<ProblemInfo> r;
  r.push_back({"quad_bilevel",
               "ridge-regularized quadratic lower level, quadratic upper level",
               {param("m", 10, "upper dimension"), param("n", 10, "lower dimension"),
                param("lambda", 1, "lower ridge weight"),
                param("curvature_spread", 0, "lower curvature diag(1 .. 1+spread)")},
               true,
               [](const ProblemSpec& s) {
                 QuadOptions o;
                 o.m = integer(s.params, "m", 1);
                 o.n = integer(s.params, "n", 1);
                 o.lambda = scalar(s.params, "lambda");
                 o.curvature_spread = scalar(s.params, "curvature_spread");
                 o.seed = s.seed;
                 return make_quad_bilevel(o);
               }});
  r.push_back({"quad_finite_sum",
               "finite-sum quadratic bilevel problem for the stochastic drivers",
               {param("samples", 64, "number of samples N"), param("m", 5, "upper dimension"),
                param("n", 5, "lower dimension"), param("lambda", 1, "lower ridge weight"),
                param("noise", 1, "per-sample spread")},
               true,
               [](const ProblemSpec& s) {
                 return make_quad_finite_sum(integer(s.params, "samples", 1), integer(s.params, "m", 1),
                                             integer(s.params, "n", 1), scalar(s.params, "lambda"),
                                             scalar(s.params, "noise"), s.seed);
               }});
  r.push_back({"example1", "coupled constraint phi = theta with a min-max structure", {}, true,
               [](const ProblemSpec&) { return make_example1(); }});
  r.push_back({"example2", "box-constrained lower level whose solution map has a kink at 1/2", {}, true,
               [](const ProblemSpec&) { return make_example2(); }});
  r.push_back({"mmo_quadratic", "min-max quadratic with g = -f",
               {param("m", 4, "upper dimension"), param("n", 4, "lower dimension"),
                param("mu", 1, "lower concavity")},
               true,
               [](const ProblemSpec& s) {
                 return make_mmo_quadratic(integer(s.params, "m", 1), integer(s.params, "n", 1),
                                           scalar(s.params, "mu"), s.seed);
               }});
  r.push_back({"ns_blo_toy", "lower level with a free coordinate (non-unique solution set)", {}, false,
               [](const ProblemSpec&) { return make_ns_blo_toy(); }});
  r.push_back({"constrained_qp", "strongly convex QP lower level over a polyhedron",
               {param("m", 3, "upper dimension"), param("n", 4, "lower dimension"),
                param("rows", 3, "inequality rows")},
               true,
               [](const ProblemSpec& s) {
                 return make_constrained_qp(integer(s.params, "m", 1), integer(s.params, "n", 1),
                                            integer(s.params, "rows", 1), s.seed)
                     .test;
               }});
  r.push_back({"coreset", "sample weights for weighted ridge regression under a budget",
               {param("N", 40, "training samples"), param("d", 5, "features"),
                param("k", 20, "weight budget"), param("corrupt_frac", 0.2, "label-corrupted fraction"),
                param("ridge", 0.1, "lower ridge weight")},
               true,
               [](const ProblemSpec& s) {
                 return make_coreset(integer(s.params, "N", 2), integer(s.params, "d", 1),
                                     scalar(s.params, "k"), scalar(s.params, "corrupt_frac"), s.seed,
                                     scalar(s.params, "ridge"))
                     .test;
               }});
  r.push_back({"reweight_simplex", "simplex reweighting of per-sample rates",
               {param("samples", 8, "samples"), param("m", 3, "upper dimension"),
                param("gamma", 1, "lower regularizer")},
               true,
               [](const ProblemSpec& s) {
                 return make_reweight_simplex(integer(s.params, "samples", 1), integer(s.params, "m", 1),
                                              scalar(s.params, "gamma"), s.seed)
                     .test;
               }});
  r.push_back({"maml_sinusoid", "meta-learned initialization for sinusoid regression tasks",
               {param("tasks", 10, "training tasks"), param("shots", 10, "points per task"),
                param("K", 1, "adaptation steps"), param("task_step", 0.1, "adaptation stepsize")},
               false,
               [](const ProblemSpec& s) {
                 return make_maml_sinusoid(integer(s.params, "tasks", 1), integer(s.params, "shots", 1),
                                           integer(s.params, "K", 0), s.seed, scalar(s.params, "task_step"))
                     .test;
               }});
  r.push_back({"fastbat_toy", "adversarial training of logistic regression with a linearized attack",
               {param("N", 24, "samples"), param("d", 5, "features"), param("epsilon", 0.5, "attack budget"),
                param("gamma", 0.05, "attack regularizer"), param("eta", 0.5, "non-robust signal")},
               false,
               [](const ProblemSpec& s) {
                 return make_fastbat_toy(integer(s.params, "N", 1), integer(s.params, "d", 2),
                                         scalar(s.params, "epsilon"), scalar(s.params, "gamma"), s.seed,
                                         scalar(s.params, "eta"))
                     .test;
               }});
  r.push_back({"bip_toy", "pruning mask over bilinear weights",
               {param("n", 8, "weights"), param("gamma", 1, "lower regularizer"),
                param("quadratic", 0, "1: quadratic training loss")},
               true,
               [](const ProblemSpec& s) {
                 return make_bip_toy(integer(s.params, "n", 1), scalar(s.params, "gamma"), s.seed,
                                     flag(s.params, "quadratic"))
                     .test;
               }});
  r.push_back({"irm_consensus", "invariant representation with per-environment heads",
               {param("E", 5, "environments"), param("d", 3, "features (feature 0 invariant)"),
                param("penalty", 1, "invariance penalty"), param("samples_per_env", 200, "samples per environment")},
               false,
               [](const ProblemSpec& s) {
                 return make_irm_consensus(integer(s.params, "E", 1), integer(s.params, "d", 2), s.seed,
                                           scalar(s.params, "penalty"), integer(s.params, "samples_per_env", 2))
                     .test;
               }});
  return r;
}

}  // namespace

const std::vector<ProblemInfo>& registry() {
  static const std::vector<ProblemInfo> r = build_registry();
  return r;
}

const ProblemInfo& find_problem(const std::string& name) {
  for (const auto& info : registry()) {
    if (info.name == name) return info;
  }
  throw ConfigurationError("unknown problem '" + name + "'");
}

TestProblem make_problem(const ProblemSpec& spec) {
  const ProblemInfo& info = find_problem(spec.name);
  ProblemSpec full = spec;
  std::set<std::string> known;
  for (const auto& p : info.params) {
    known.insert(p.name);
    full.params.try_emplace(p.name, p.default_value);
  }
  for (const auto& [key, value] : spec.params) {
    if (!known.contains(key)) throw ConfigurationError("problem '" + spec.name + "' has no parameter '" + key + "'");
  }
  try {
    return info.build(full);
  } catch (const ArgumentError& e) {
    throw ConfigurationError(e.what());
  } catch (const InvalidSetError& e) {
    throw ConfigurationError(e.what());
  }
}

}  // namespace blo::testbed
