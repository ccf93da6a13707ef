#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "blo/cli.hpp"
#include "json_io.hpp"

namespace blo::cli {

using nlohmann::json;
using testbed::Vec;

namespace detail {

void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigurationError(where + " must be an object");
  std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [key, value] : j.items()) {
    if (!ok.contains(key)) throw ConfigurationError("unknown key '" + key + "' in " + where);
  }
}

double number(const json& j, const std::string& key, double fallback) {
  if (!j.contains(key)) return fallback;
  const json& v = j.at(key);
  if (!v.is_number()) throw ConfigurationError("'" + key + "' must be a number");
  return v.get<double>();
}

/// Number or "auto" (stored as 0).
double auto_number(const json& j, const std::string& key) {
  if (!j.contains(key)) return 0;
  const json& v = j.at(key);
  if (v.is_string() && v.get<std::string>() == "auto") return 0;
  if (!v.is_number()) throw ConfigurationError("'" + key + "' must be a number or \"auto\"");
  const double x = v.get<double>();
  if (!(x > 0)) throw ConfigurationError("'" + key + "' must be > 0 or \"auto\"");
  return x;
}

json auto_value(double x) { return x == 0 ? json("auto") : json(x); }

Index integer(const json& j, const std::string& key, Index fallback) {
  if (!j.contains(key)) return fallback;
  const json& v = j.at(key);
  if (!v.is_number_integer()) throw ConfigurationError("'" + key + "' must be an integer");
  return v.get<Index>();
}

std::uint64_t seed(const json& j, const std::string& key, std::uint64_t fallback) {
  if (!j.contains(key)) return fallback;
  const json& v = j.at(key);
  if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0)) {
    throw ConfigurationError("'" + key + "' must be a non-negative integer");
  }
  return v.get<std::uint64_t>();
}

bool boolean(const json& j, const std::string& key, bool fallback) {
  if (!j.contains(key)) return fallback;
  if (!j.at(key).is_boolean()) throw ConfigurationError("'" + key + "' must be true or false");
  return j.at(key).get<bool>();
}

std::string text(const json& j, const std::string& key, const std::string& fallback) {
  if (!j.contains(key)) return fallback;
  if (!j.at(key).is_string()) throw ConfigurationError("'" + key + "' must be a string");
  return j.at(key).get<std::string>();
}

Vec vector(const json& v, const std::string& key) {
  if (v.is_number()) return Vec::Constant(1, v.get<double>());
  if (!v.is_array()) throw ConfigurationError("'" + key + "' must be a number or an array of numbers");
  Vec out(static_cast<Index>(v.size()));
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!v[i].is_number()) throw ConfigurationError("'" + key + "' must contain numbers only");
    out[static_cast<Index>(i)] = v[i].get<double>();
  }
  return out;
}

json vector_json(const Vec& v) {
  json a = json::array();
  for (Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
  return a;
}

// ---- problem ------------------------------------------------------------

testbed::ProblemSpec parse_problem(const json& j) {
  if (j.is_string()) return {j.get<std::string>(), {}, 0};
  check_keys(j, {"name", "params", "seed"}, "problem");
  testbed::ProblemSpec spec;
  spec.name = text(j, "name", "");
  if (spec.name.empty()) throw ConfigurationError("problem.name is required");
  spec.seed = seed(j, "seed", 0);
  if (j.contains("params")) {
    if (!j.at("params").is_object()) throw ConfigurationError("problem.params must be an object");
    for (const auto& [key, value] : j.at("params").items()) {
      const Vec v = vector(value, key);
      spec.params[key] = std::vector<double>(v.data(), v.data() + v.size());
    }
  }
  return spec;
}

json problem_json(const testbed::ProblemSpec& spec) {
  json params = json::object();
  for (const auto& [key, value] : spec.params) {
    if (value.size() == 1) {
      params[key] = value[0];
    } else {
      params[key] = json(value);
    }
  }
  return {{"name", spec.name}, {"params", params}, {"seed", spec.seed}};
}

// ---- engines ----------------------------------------------------------------

IhvpBackend<double> parse_backend(const json& j) {
  const std::string kind = text(j, "kind", "cg");
  if (kind == "cg") {
    check_keys(j, {"kind", "max_iter", "residual_tol"}, "backend");
    backends::Cg<double> b;
    b.max_iter = integer(j, "max_iter", b.max_iter);
    b.residual_tol = number(j, "residual_tol", b.residual_tol);
    return b;
  }
  if (kind == "neumann_sum") {
    check_keys(j, {"kind", "terms", "L"}, "backend");
    return backends::NeumannSum<double>{integer(j, "terms", 50), auto_number(j, "L")};
  }
  if (kind == "neumann_product") {
    check_keys(j, {"kind", "terms", "L", "seed"}, "backend");
    return backends::NeumannProduct<double>{integer(j, "terms", 50), auto_number(j, "L"), seed(j, "seed", 0)};
  }
  if (kind == "woodfisher") {
    check_keys(j, {"kind", "gamma", "rank"}, "backend");
    return backends::WoodFisher<double>{number(j, "gamma", 1), integer(j, "rank", 0)};
  }
  if (kind == "hessian_free") {
    check_keys(j, {"kind", "lambda"}, "backend");
    return backends::HessianFree<double>{number(j, "lambda", 1)};
  }
  throw ConfigurationError("unknown backend kind '" + kind + "'");
}

json backend_json(const IhvpBackend<double>& backend) {
  return std::visit(
      [](const auto& b) -> json {
        using B = std::decay_t<decltype(b)>;
        if constexpr (std::is_same_v<B, backends::Cg<double>>) {
          return {{"kind", "cg"}, {"max_iter", b.max_iter}, {"residual_tol", b.residual_tol}};
        } else if constexpr (std::is_same_v<B, backends::NeumannSum<double>>) {
          return {{"kind", "neumann_sum"}, {"terms", b.terms}, {"L", auto_value(b.L)}};
        } else if constexpr (std::is_same_v<B, backends::NeumannProduct<double>>) {
          return {{"kind", "neumann_product"}, {"terms", b.terms}, {"L", auto_value(b.L)}, {"seed", b.seed}};
        } else if constexpr (std::is_same_v<B, backends::WoodFisher<double>>) {
          return {{"kind", "woodfisher"}, {"gamma", b.gamma}, {"rank", b.rank}};
        } else {
          return {{"kind", "hessian_free"}, {"lambda", b.lambda}};
        }
      },
      backend);
}

UnrollMode parse_mode(const std::string& s) {
  for (UnrollMode m : {UnrollMode::fgu, UnrollMode::bgu, UnrollMode::tgu, UnrollMode::signgd_free}) {
    if (s == to_string(m)) return m;
  }
  throw ConfigurationError("unknown unroll mode '" + s + "'");
}

VfConfig<double> parse_vf(const json& j) {
  check_keys(j, {"kind", "mu1", "mu2", "rho0", "rho_growth", "inner_tol", "outer_rounds", "inner_step",
                 "inner_max_iters", "joint_step", "joint_iters", "joint_tol"},
             "engine");
  VfConfig<double> c;
  c.mu1 = number(j, "mu1", c.mu1);
  c.mu2 = number(j, "mu2", c.mu2);
  c.rho0 = number(j, "rho0", c.rho0);
  c.rho_growth = number(j, "rho_growth", c.rho_growth);
  c.inner_tol = number(j, "inner_tol", c.inner_tol);
  c.outer_rounds = integer(j, "outer_rounds", c.outer_rounds);
  c.inner_step = auto_number(j, "inner_step");
  c.inner_max_iters = integer(j, "inner_max_iters", c.inner_max_iters);
  c.joint_step = number(j, "joint_step", c.joint_step);
  c.joint_iters = integer(j, "joint_iters", c.joint_iters);
  c.joint_tol = number(j, "joint_tol", c.joint_tol);
  return c;
}

json vf_json(const VfConfig<double>& c) {
  return {{"kind", "vf"},
          {"mu1", c.mu1},
          {"mu2", c.mu2},
          {"rho0", c.rho0},
          {"rho_growth", c.rho_growth},
          {"inner_tol", c.inner_tol},
          {"outer_rounds", c.outer_rounds},
          {"inner_step", auto_value(c.inner_step)},
          {"inner_max_iters", c.inner_max_iters},
          {"joint_step", c.joint_step},
          {"joint_iters", c.joint_iters},
          {"joint_tol", c.joint_tol}};
}

Engine<double> parse_engine(const json& j) {
  if (j.is_string()) return parse_engine(json{{"kind", j.get<std::string>()}});
  const std::string kind = text(j, "kind", "");
  if (kind == "if") {
    check_keys(j, {"kind", "backend"}, "engine");
    return engines::If<double>{j.contains("backend") ? parse_backend(j.at("backend")) : backends::Cg<double>{}};
  }
  if (kind == "if_constrained") {
    check_keys(j, {"kind", "backend", "tau_act"}, "engine");
    return engines::IfConstrained<double>{
        j.contains("backend") ? parse_backend(j.at("backend")) : backends::Cg<double>{},
        number(j, "tau_act", default_active_tolerance)};
  }
  if (kind == "gu") {
    check_keys(j, {"kind", "mode", "K", "beta", "tau", "warm_start"}, "engine");
    engines::Gu<double> e;
    e.mode = parse_mode(text(j, "mode", "bgu"));
    e.K = integer(j, "K", e.K);
    e.beta = auto_number(j, "beta");
    e.tau = integer(j, "tau", 0);
    e.warm_start = boolean(j, "warm_start", false);
    return e;
  }
  if (kind == "vf") return engines::Vf<double>{parse_vf(j)};
  if (kind == "analytic") {
    check_keys(j, {"kind"}, "engine");
    return engines::Analytic{};
  }
  throw ConfigurationError("unknown engine kind '" + kind + "'");
}

json engine_json(const Engine<double>& engine) {
  return std::visit(
      [](const auto& e) -> json {
        using E = std::decay_t<decltype(e)>;
        if constexpr (std::is_same_v<E, engines::If<double>>) {
          return {{"kind", "if"}, {"backend", backend_json(e.backend)}};
        } else if constexpr (std::is_same_v<E, engines::IfConstrained<double>>) {
          return {{"kind", "if_constrained"}, {"backend", backend_json(e.backend)}, {"tau_act", e.tau_act}};
        } else if constexpr (std::is_same_v<E, engines::Gu<double>>) {
          return {{"kind", "gu"},       {"mode", to_string(e.mode)}, {"K", e.K},
                  {"beta", auto_value(e.beta)}, {"tau", e.tau}, {"warm_start", e.warm_start}};
        } else if constexpr (std::is_same_v<E, engines::Vf<double>>) {
          return vf_json(e.cfg);
        } else {
          return {{"kind", "analytic"}};
        }
      },
      engine);
}

LoopMode<double> parse_loop(const json& j) {
  const std::string kind = text(j, "kind", "double");
  if (kind == "double") {
    check_keys(j, {"kind", "tol", "max_iters", "beta"}, "loop");
    loops::Double<double> d;
    d.tol = number(j, "tol", d.tol);
    d.max_iters = integer(j, "max_iters", d.max_iters);
    d.beta = auto_number(j, "beta");
    return d;
  }
  if (kind == "single") {
    check_keys(j, {"kind", "steps", "beta"}, "loop");
    return loops::Single<double>{integer(j, "steps", 1), auto_number(j, "beta")};
  }
  throw ConfigurationError("unknown loop kind '" + kind + "'");
}

json loop_json(const LoopMode<double>& loop) {
  if (const auto* d = std::get_if<loops::Double<double>>(&loop)) {
    return {{"kind", "double"}, {"tol", d->tol}, {"max_iters", d->max_iters}, {"beta", auto_value(d->beta)}};
  }
  const auto& s = std::get<loops::Single<double>>(loop);
  return {{"kind", "single"}, {"steps", s.steps}, {"beta", auto_value(s.beta)}};
}

StochasticMode<double> parse_stochastic(const json& j) {
  const std::string kind = text(j, "kind", "none");
  if (kind == "none") {
    check_keys(j, {"kind"}, "stochastic");
    return std::monostate{};
  }
  if (kind == "sgd") {
    check_keys(j, {"kind", "batch_upper", "batch_lower"}, "stochastic");
    return stochastic::Sgd{integer(j, "batch_upper", 8), integer(j, "batch_lower", 8)};
  }
  if (kind == "momentum_vr") {
    check_keys(j, {"kind", "a", "batch_upper", "batch_lower", "lower_vr"}, "stochastic");
    return stochastic::MomentumVr<double>{number(j, "a", 0.1), integer(j, "batch_upper", 8),
                                          integer(j, "batch_lower", 8), boolean(j, "lower_vr", true)};
  }
  throw ConfigurationError("unknown stochastic kind '" + kind + "'");
}

json stochastic_json(const StochasticMode<double>& s) {
  if (const auto* g = std::get_if<stochastic::Sgd>(&s)) {
    return {{"kind", "sgd"}, {"batch_upper", g->batch_upper}, {"batch_lower", g->batch_lower}};
  }
  if (const auto* v = std::get_if<stochastic::MomentumVr<double>>(&s)) {
    return {{"kind", "momentum_vr"},
            {"a", v->a},
            {"batch_upper", v->batch_upper},
            {"batch_lower", v->batch_lower},
            {"lower_vr", v->lower_vr}};
  }
  return {{"kind", "none"}};
}

OuterConfig<double> parse_outer(const json& j) {
  check_keys(j, {"engine", "alpha", "T", "loop", "stochastic", "seed", "stationarity_tol", "theta0", "phi0"},
             "outer");
  OuterConfig<double> c;
  if (j.contains("engine")) c.engine = parse_engine(j.at("engine"));
  c.alpha = number(j, "alpha", c.alpha);
  c.T = integer(j, "T", c.T);
  if (!(c.alpha > 0)) throw ConfigurationError("alpha must be > 0");
  if (c.T < 1) throw ConfigurationError("T must be >= 1");
  c.loop = j.contains("loop") ? parse_loop(j.at("loop")) : parse_loop(json::object());
  if (j.contains("stochastic")) c.stochastic = parse_stochastic(j.at("stochastic"));
  c.seed = seed(j, "seed", 0);
  c.stationarity_tol = number(j, "stationarity_tol", 0);
  if (j.contains("theta0") && !j.at("theta0").is_null()) c.theta0 = vector(j.at("theta0"), "theta0");
  if (j.contains("phi0") && !j.at("phi0").is_null()) c.phi0 = vector(j.at("phi0"), "phi0");
  return c;
}

json outer_json(const OuterConfig<double>& c) {
  return {{"engine", engine_json(c.engine)},
          {"alpha", c.alpha},
          {"T", c.T},
          {"loop", loop_json(c.loop)},
          {"stochastic", stochastic_json(c.stochastic)},
          {"seed", c.seed},
          {"stationarity_tol", c.stationarity_tol},
          {"theta0", c.theta0 ? vector_json(*c.theta0) : json(nullptr)},
          {"phi0", c.phi0 ? vector_json(*c.phi0) : json(nullptr)}};
}

json parse_text(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigurationError(std::string("config is not valid JSON: ") + e.what());
  }
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigurationError("cannot read config file '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace detail

ExperimentConfig parse_config(const std::string& text) {
  using namespace detail;
  const json j = parse_text(text);
  check_keys(j, {"problem", "outer", "repeats", "output_dir", "emit", "timing"}, "config");
  if (!j.contains("problem")) throw ConfigurationError("config needs a 'problem'");
  ExperimentConfig cfg;
  try {
    cfg.problem = parse_problem(j.at("problem"));
    cfg.outer = j.contains("outer") ? parse_outer(j.at("outer")) : parse_outer(json::object());
    cfg.repeats = integer(j, "repeats", 1);
    cfg.output_dir = detail::text(j, "output_dir", "");
    const std::string emit = detail::text(j, "emit", "both");
    if (emit == "csv") cfg.emit = Emit::csv;
    else if (emit == "json") cfg.emit = Emit::json;
    else if (emit == "both") cfg.emit = Emit::both;
    else throw ConfigurationError("emit must be csv, json or both");
    cfg.timing = boolean(j, "timing", false);
  } catch (const json::exception& e) {
    throw ConfigurationError(std::string("malformed config: ") + e.what());
  }
  if (cfg.repeats < 1) throw ConfigurationError("repeats must be >= 1");
  return cfg;
}

ExperimentConfig load_config(const std::string& path) { return parse_config(detail::read_file(path)); }

std::string serialize_config(const ExperimentConfig& cfg) {
  using namespace detail;
  const char* emit = cfg.emit == Emit::csv ? "csv" : cfg.emit == Emit::json ? "json" : "both";
  const json j = {{"problem", problem_json(cfg.problem)},
                  {"outer", outer_json(cfg.outer)},
                  {"repeats", cfg.repeats},
                  {"output_dir", cfg.output_dir},
                  {"emit", emit},
                  {"timing", cfg.timing}};
  return j.dump(2) + "\n";
}

bool operator==(const ExperimentConfig& a, const ExperimentConfig& b) {
  return serialize_config(a) == serialize_config(b);
}

OuterConfig<double> resolve(const OuterConfig<double>& outer, const testbed::TestProblem& tp) {
  OuterConfig<double> c = outer;
  const double beta = tp.lower_beta;
  if (auto* gu = std::get_if<engines::Gu<double>>(&c.engine); gu && gu->beta == 0) gu->beta = beta;
  if (auto* vf = std::get_if<engines::Vf<double>>(&c.engine); vf && vf->cfg.inner_step == 0) vf->cfg.inner_step = beta;
  auto fix_backend = [&](IhvpBackend<double>& b) {
    if (auto* ns = std::get_if<backends::NeumannSum<double>>(&b); ns && ns->L == 0) ns->L = 1 / beta;
    if (auto* np = std::get_if<backends::NeumannProduct<double>>(&b); np && np->L == 0) np->L = 1 / beta;
  };
  if (auto* e = std::get_if<engines::If<double>>(&c.engine)) fix_backend(e->backend);
  if (auto* e = std::get_if<engines::IfConstrained<double>>(&c.engine)) fix_backend(e->backend);
  if (auto* d = std::get_if<loops::Double<double>>(&c.loop); d && d->beta == 0) d->beta = beta;
  if (auto* s = std::get_if<loops::Single<double>>(&c.loop); s && s->beta == 0) s->beta = beta;
  if (!c.theta0 && tp.theta0.size() == tp.problem.dim_theta) c.theta0 = tp.theta0;
  return c;
}

std::string output_directory(const ExperimentConfig& cfg) {
  if (!cfg.output_dir.empty()) return cfg.output_dir;
  if (const char* env = std::getenv(output_dir_env); env && *env) return env;
  return "blo-out";
}

BenchConfig parse_bench(const std::string& text) {
  using namespace detail;
  const json j = parse_text(text);
  check_keys(j, {"problems", "variants", "outer", "repeats", "output_dir", "timing"}, "bench config");
  BenchConfig cfg;
  try {
    if (!j.contains("problems") || !j.at("problems").is_array() || j.at("problems").empty()) {
      throw ConfigurationError("bench config needs a non-empty 'problems' array");
    }
    for (const json& p : j.at("problems")) cfg.problems.push_back(parse_problem(p));
    if (!j.contains("variants") || !j.at("variants").is_array() || j.at("variants").empty()) {
      throw ConfigurationError("bench config needs a non-empty 'variants' array");
    }
    const json base = j.contains("outer") ? j.at("outer") : json::object();
    parse_outer(base);
    cfg.base_outer = base.dump();
    for (const json& v : j.at("variants")) {
      check_keys(v, {"label", "outer"}, "variant");
      BenchVariant bv;
      bv.label = detail::text(v, "label", "");
      if (bv.label.empty()) throw ConfigurationError("every variant needs a label");
      bv.outer_patch = (v.contains("outer") ? v.at("outer") : json::object()).dump();
      json merged = base;
      merged.merge_patch(json::parse(bv.outer_patch));
      parse_outer(merged);
      cfg.variants.push_back(std::move(bv));
    }
    cfg.repeats = integer(j, "repeats", 1);
    cfg.output_dir = detail::text(j, "output_dir", "");
    cfg.timing = boolean(j, "timing", false);
  } catch (const json::exception& e) {
    throw ConfigurationError(std::string("malformed bench config: ") + e.what());
  }
  if (cfg.repeats < 1) throw ConfigurationError("repeats must be >= 1");
  return cfg;
}

BenchConfig load_bench(const std::string& path) { return parse_bench(detail::read_file(path)); }

}  // namespace blo::cli
