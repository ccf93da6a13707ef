// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// nonzero if any fails.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "blo/blo.hpp"
#include "blo/cli.hpp"
#include "blo/testbed.hpp"

using namespace blo;
using namespace blo::testbed;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double rel_err(const Vec& a, const Vec& b) { return (a - b).norm() / std::max(b.norm(), 1e-300); }

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

Vec solve_lower(const TestProblem& tp, const Vec& theta, double tol) {
  Oracle<double> o(tp.problem);
  return solve_to_tolerance<double>(o, theta, Vec::Zero(tp.problem.dim_phi), tol, 1000000, tp.lower_beta).phi;
}

Vec random_theta(Index m, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0, 1);
  Vec t(m);
  for (Index i = 0; i < m; ++i) t[i] = n(rng);
  return t;
}

// 1. Every engine matches the closed-form hypergradient on the quadratic testbed.
Outcome hypergradient_correctness() {
  double worst = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    QuadOptions q;
    q.seed = seed;
    const TestProblem tp = make_quad_bilevel(q);
    const Vec theta = random_theta(10, 100 + seed);
    const Vec exact = tp.hypergrad(theta);
    const Vec phi = solve_lower(tp, theta, 1e-10);
    Oracle<double> o(tp.problem);
    const double L = 1.0 / tp.lower_beta;
    worst = std::max(worst, rel_err(hypergrad_if(o, theta, phi, IhvpBackend<double>{backends::Cg<double>{}}).grad, exact));
    worst = std::max(worst, rel_err(hypergrad_if(o, theta, phi, IhvpBackend<double>{backends::NeumannSum<double>{200, L}}).grad, exact));
    const auto traj = solve_gd<double>(o, theta, Vec::Zero(10), 50, tp.lower_beta);
    worst = std::max(worst, rel_err(hypergrad_fgu(o, theta, traj).grad, exact));
    worst = std::max(worst, rel_err(hypergrad_bgu(o, theta, traj).grad, exact));
  }
  return {worst <= 1e-6, "max relative error " + fmt("%.2e", worst)};
}

std::vector<std::string> smooth_unrolled_problems() {
  std::vector<std::string> names;
  for (const auto& info : registry()) {
    const TestProblem tp = make_problem({info.name, {}, 0});
    if (tp.smooth && tp.problem.lower_set.is_unconstrained() && !tp.problem.coupled_lower) {
      names.push_back(info.name);
    }
  }
  return names;
}

// 2. Forward and reverse unrolling agree on every smooth problem.
Outcome forward_reverse_agreement() {
  double worst = 0;
  std::string names;
  for (const std::string& name : smooth_unrolled_problems()) {
    names += (names.empty() ? "" : ",") + name;
    const TestProblem tp = make_problem({name, {}, 3});
    const Vec theta = tp.problem.upper_set.project(Vec(tp.theta0 + 0.1 * random_theta(tp.problem.dim_theta, 7)));
    for (Index K : {1, 5, 50}) {
      Oracle<double> o(tp.problem);
      const auto traj = solve_gd<double>(o, theta, Vec::Zero(tp.problem.dim_phi), K, tp.lower_beta);
      worst = std::max(worst, rel_err(hypergrad_fgu(o, theta, traj).grad, hypergrad_bgu(o, theta, traj).grad));
    }
  }
  return {worst <= 1e-10, "max relative gap " + fmt("%.2e", worst) + " over " + names};
}

// 3. Reverse unrolling converges to the implicit hypergradient as K grows.
Outcome unroll_limit() {
  const TestProblem tp = make_quad_bilevel({});
  const Vec theta = random_theta(10, 11);
  Oracle<double> o(tp.problem);
  const Vec phi = solve_lower(tp, theta, 1e-13);
  const Vec ref = hypergrad_if(o, theta, phi, IhvpBackend<double>{backends::Cg<double>{}}).grad;
  // beta below 1/L so that a finite horizon leaves a visible truncation error.
  const double beta = 0.1;
  auto gap = [&](Index K) {
    const auto traj = solve_gd<double>(o, theta, Vec::Zero(10), K, beta);
    return (hypergrad_bgu(o, theta, traj).grad - ref).norm();
  };
  const double g10 = gap(10), g500 = gap(500);
  return {g500 <= 1e-5 && g500 < g10, "gap K=10 " + fmt("%.2e", g10) + ", K=500 " + fmt("%.2e", g500)};
}

// 4. Example 2: piecewise solution map, one-sided hypergradients, kink.
Outcome example2_checks() {
  const TestProblem tp = make_example2();
  double map_err = 0;
  for (double t : {0.1, 0.25, 0.4, 0.6, 0.75, 0.9}) {
    Vec theta(1);
    theta << t;
    Oracle<double> o(tp.problem);
    const Vec phi = solve_to_tolerance<double>(o, theta, Vec::Constant(1, 1.0), 1e-12, 100000, tp.lower_beta).phi;
    const double expected_phi = std::clamp(t, 0.5, 1.0);
    map_err = std::max(map_err, std::abs(phi[0] - expected_phi));
    map_err = std::max(map_err, std::abs(tp.problem.upper_value(theta, phi, {}) - (t + expected_phi)));
  }
  double ig_err = 0;
  for (auto [t, expected] : {std::pair{0.25, 1.0}, {0.4, 1.0}, {0.6, 2.0}, {0.75, 2.0}}) {
    Vec theta(1);
    theta << t;
    Oracle<double> o(tp.problem);
    const Vec phi = solve_to_tolerance<double>(o, theta, Vec::Constant(1, 1.0), 1e-12, 100000, tp.lower_beta).phi;
    const auto est = hypergrad_if_constrained(o, theta, phi, IhvpBackend<double>{backends::Cg<double>{}});
    ig_err = std::max(ig_err, std::abs(est.grad[0] - expected));
  }
  const OneSided os = one_sided_hypergrad(tp, Vec::Constant(1, 0.5), 1e-4, 0.5);
  const double jump = std::abs(os.right[0] - os.left[0]);
  const bool ok = map_err <= 1e-9 && ig_err <= 1e-8 && jump >= 0.5 && os.kink;
  return {ok, "map error " + fmt("%.1e", map_err) + ", hypergradient error " + fmt("%.1e", ig_err) +
                  ", one-sided jump " + fmt("%.3f", jump)};
}

// 5. Example 1: reduced objective and projected gd to the boundary.
Outcome example1_checks() {
  const TestProblem tp = make_example1();
  double err = 0;
  for (int i = 0; i < 20; ++i) {
    const double t = -1.0 + 2.0 * i / 19.0;
    Vec theta(1);
    theta << t;
    const Vec phi = tp.problem.solution_map->map(theta);
    err = std::max(err, std::abs(tp.problem.upper_value(theta, phi, {}) + t * t));
  }
  double worst_final = 0;
  for (double t0 : {-0.9, -0.5, -0.1, -1e-3, 1e-3, 0.1, 0.5, 0.9}) {
    OuterConfig<double> cfg;
    cfg.engine = engines::Analytic{};
    cfg.alpha = 0.1;
    cfg.T = 200;
    cfg.theta0 = Vec::Constant(1, t0);
    const auto rep = run(tp.problem, cfg);
    const Vec phi = tp.problem.solution_map->map(rep.theta_final);
    worst_final = std::max(worst_final, std::abs(tp.problem.upper_value(rep.theta_final, phi, {}) + 1.0));
  }
  return {err <= 1e-12 && worst_final <= 1e-12,
          "reduced-value error " + fmt("%.1e", err) + ", distance of final value to -1 " + fmt("%.1e", worst_final)};
}

Mat random_spd(std::mt19937_64& rng, Index n, double lo, double hi) {
  std::normal_distribution<double> g(0, 1);
  std::uniform_real_distribution<double> u(lo, hi);
  Mat G(n, n);
  for (Index j = 0; j < n; ++j)
    for (Index i = 0; i < n; ++i) G(i, j) = g(rng);
  const Mat Q = Eigen::HouseholderQR<Mat>(G).householderQ();
  Vec lam(n);
  for (Index i = 0; i < n; ++i) lam[i] = u(rng);
  return Q * lam.asDiagonal() * Q.transpose();
}

// 6. Neumann series: monotone truncation error; the randomized product is unbiased.
Outcome neumann_checks() {
  std::mt19937_64 rng(2024);
  std::normal_distribution<double> g(0, 1);
  bool monotone = true;
  for (int s = 0; s < 10; ++s) {
    const Mat H = random_spd(rng, 8, 0.2, 3.0);
    Vec b(8);
    for (auto& v : b) v = g(rng);
    const Vec exact = H.ldlt().solve(b);
    auto hvp = [&](const Vec& v) -> Vec { return H * v; };
    double prev = std::numeric_limits<double>::infinity();
    for (Index K = 0; K <= 60; ++K) {
      const double e = (ihvp<double>(backends::NeumannSum<double>{K, 3.0}, hvp, b).x - exact).norm();
      // Allow round-off once the error has reached machine precision.
      if (e > prev * (1 + 1e-12) + 1e-14 * exact.norm()) monotone = false;
      prev = e;
    }
  }
  const Mat H = random_spd(rng, 6, 0.5, 2.0);
  Vec b(6);
  for (auto& v : b) v = g(rng);
  auto hvp = [&](const Vec& v) -> Vec { return H * v; };
  const Index K = 20;
  const double L = 2.0;
  const int draws = 10000;
  Vec mean = Vec::Zero(6), sq = Vec::Zero(6);
  for (int i = 0; i < draws; ++i) {
    const Vec x = ihvp<double>(backends::NeumannProduct<double>{K, L, mix_seed(99, std::uint64_t(i))}, hvp, b).x;
    mean += x;
    sq += x.cwiseAbs2();
  }
  mean /= draws;
  const Vec se = ((sq / draws - mean.cwiseAbs2()) / (draws - 1)).cwiseSqrt();
  // E[(K/L) prod_{i<k}(I - H/L)] over k uniform in {0..K-1} is the (K-1)-term sum.
  const Vec target = ihvp<double>(backends::NeumannSum<double>{K - 1, L}, hvp, b).x;
  const double z = ((mean - target).cwiseAbs().cwiseQuotient(se)).maxCoeff();
  return {monotone && z <= 3.0, std::string(monotone ? "monotone" : "NOT monotone") +
                                    ", max |mean - sum| / SE " + fmt("%.2f", z)};
}

// 7. One-shot WoodFisher equals dense inversion of gamma I + v v'.
Outcome woodfisher_checks() {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> g(0, 1);
  std::uniform_real_distribution<double> u(0.1, 5.0);
  double worst = 0;
  for (int t = 0; t < 100; ++t) {
    const Index n = 1 + t % 12;
    Vec v(n), rhs(n);
    for (auto& x : v) x = g(rng);
    for (auto& x : rhs) x = g(rng);
    const double gamma = u(rng);
    IhvpOperator<double> op;
    op.hvp = [](const Vec& x) { return x; };
    op.fisher_sample = [&](Index) { return v; };
    const Vec x = ihvp<double>(backends::WoodFisher<double>{gamma, 0}, op, rhs).x;
    const Mat M = gamma * Mat::Identity(n, n) + v * v.transpose();
    worst = std::max(worst, rel_err(x, M.inverse() * rhs));
  }
  return {worst <= 1e-10, "max relative error " + fmt("%.2e", worst)};
}

// 8. Value-function method on the quadratic testbed and the non-singleton toy.
Outcome value_function_checks() {
  const TestProblem quad = make_quad_bilevel({});
  Oracle<double> oq(quad.problem);
  const auto rq = solve_vf(oq, quad.theta0, Vec::Zero(quad.problem.dim_phi), VfConfig<double>{});
  const double dist = (rq.theta_final - *quad.theta_star).norm();
  const double viol = rq.violation_trace.back();

  const TestProblem ns = make_ns_blo_toy();
  Oracle<double> on(ns.problem);
  const auto rn = solve_vf(on, ns.theta0, Vec::Zero(ns.problem.dim_phi), VfConfig<double>{});
  const double phi2 = rn.phi_final[1];
  const double theta = rn.theta_final[0];

  const bool pass = dist <= 1e-2 && viol <= 1e-4 && std::abs(phi2 - 1) <= 1e-2 && std::abs(theta) <= 1e-2;
  return {pass, "quad |theta - theta*| " + fmt("%.2e", dist) + ", violation " + fmt("%.2e", viol) +
                    "; toy phi2 " + fmt("%.4f", phi2) + ", theta " + fmt("%.2e", theta)};
}

// 9. Stochastic drivers on the finite-sum quadratic.
Outcome stochastic_checks() {
  const TestProblem tp = make_quad_finite_sum(64, 5, 5, 1.0, 1.0, 0);
  OuterConfig<double> base;
  base.alpha = 0.1;
  base.T = 400;
  base.theta0 = tp.theta0;

  const auto det = run(tp.problem, base);
  auto full_cfg = base;
  full_cfg.stochastic = stochastic::Sgd{64, 64};
  const auto full = run(tp.problem, full_cfg);
  bool identical = det.size() == full.size();
  for (std::size_t i = 0; identical && i < det.size(); ++i) {
    identical = det.theta_trace[i] == full.theta_trace[i] && det.objective_trace[i] == full.objective_trace[i] &&
                det.stationarity_trace[i] == full.stationarity_trace[i];
  }

  // Mean exact stationarity over the last quarter of the iterates.
  auto tail_stationarity = [&](const RunReport<double>& r) {
    const std::size_t n = r.size(), from = n - n / 4;
    double acc = 0;
    for (std::size_t i = from; i < n; ++i) acc += tp.hypergrad(r.theta_trace[i]).squaredNorm();
    return acc / double(n - from);
  };
  int wins = 0;
  bool budget_ok = true;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto sgd = base;
    sgd.seed = seed;
    sgd.stochastic = stochastic::Sgd{4, 4};
    auto vr = base;
    vr.seed = seed;
    vr.T = base.T / 2;  // two batch gradients per step
    vr.stochastic = stochastic::MomentumVr<double>{0.1, 4, 4, true};
    const auto r_sgd = run(tp.problem, sgd);
    const auto r_vr = run(tp.problem, vr);
    budget_ok = budget_ok && r_vr.counters.gradients() <= r_sgd.counters.gradients();
    if (tail_stationarity(r_vr) <= tail_stationarity(r_sgd)) ++wins;
  }
  return {identical && budget_ok && wins >= 15,
          std::string("full batch ") + (identical ? "identical" : "differs") + "; momentum-VR wins " +
              std::to_string(wins) + "/20" + (budget_ok ? "" : ", over gradient budget")};
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double coreset_ratio(std::uint64_t seed) {
  const Coreset cs = make_coreset(40, 5, 20, 0.2, seed);
  OuterConfig<double> c;
  c.alpha = 10;
  c.T = 100;
  c.theta0 = cs.test.theta0;
  c.loop = loops::Double<double>{1e-10, 100000, cs.test.lower_beta};
  const auto r = run(cs.test.problem, c);
  double clean = 0, bad = 0;
  int nc = 0, nb = 0;
  for (std::size_t i = 0; i < cs.corrupted.size(); ++i) {
    if (cs.corrupted[i]) {
      bad += r.theta_final[Index(i)];
      ++nb;
    } else {
      clean += r.theta_final[Index(i)];
      ++nc;
    }
  }
  return (clean / nc) / std::max(bad / nb, 1e-12);
}

double maml_fraction(std::uint64_t seed) {
  const Maml m = make_maml_sinusoid(10, 10, 1, seed);
  OuterConfig<double> c;
  c.alpha = 0.2;
  c.T = 100;
  c.theta0 = m.test.theta0;
  c.engine = engines::Gu<double>{UnrollMode::bgu, 1, m.test.lower_beta, 0, false};
  const auto r = run(m.test.problem, c);
  const Vec random_init = random_theta(5, mix_seed(seed, 777));
  int wins = 0;
  const int held_out = 20;
  for (int h = 0; h < held_out; ++h) {
    const auto task = Maml::sample_task(mix_seed(seed, 10000 + h), 10, 10);
    const double learned = Maml::loss(Maml::adapt(r.theta_final, task, 1, m.task_step), task.x_val, task.y_val);
    const double baseline = Maml::loss(Maml::adapt(random_init, task, 1, m.task_step), task.x_val, task.y_val);
    if (learned < baseline) ++wins;
  }
  return double(wins) / held_out;
}

double fastbat_gap(std::uint64_t seed) {
  const double eps = 0.5;
  const BatData data = make_bat_data(24, 5, 0.5, seed);
  const BatData test = make_bat_data(1000, 5, 0.5, mix_seed(seed, 55));
  const FastBat adv = make_fastbat_from(data, eps, 0.05);
  const FastBat plain = make_fastbat_from(data, 0.0, 0.05);
  OuterConfig<double> c;
  c.alpha = 0.5;
  c.T = 100;
  c.theta0 = adv.test.theta0;
  c.loop = loops::Double<double>{1e-10, 1000, adv.test.lower_beta};
  c.engine = engines::IfConstrained<double>{backends::Cg<double>{}, 1e-10};
  const auto ra = run(adv.test.problem, c);
  if (ra.termination == Termination::failure) throw std::runtime_error("fast-bat run failed: " + ra.failure_reason);
  auto cp = c;
  cp.engine = engines::Analytic{};
  const auto rp = run(plain.test.problem, cp);
  return robust_accuracy(ra.theta_final, test, eps) - robust_accuracy(rp.theta_final, test, eps);
}

// HF-IF against the diagonal implicit-gradient formula, several masks.
double bip_error(std::uint64_t seed) {
  const double gamma = 2;
  const Bip bip = make_bip_toy(8, gamma, seed);
  Oracle<double> o(bip.test.problem);
  double worst = 0;
  for (std::uint64_t k = 0; k < 3; ++k) {
    const Vec mask = bip.test.problem.upper_set.project(random_theta(8, mix_seed(seed, k)).cwiseAbs() * 0.3);
    const Vec phi = bip.test.phi_star(mask);
    const Vec hf = hypergrad_if(o, mask, phi, IhvpBackend<double>{backends::HessianFree<double>{gamma}}).grad;
    const Vec formula = o.upper_grad_theta(mask, phi) + bip.diagonal_ig(mask, phi).cwiseProduct(o.upper_grad_phi(mask, phi));
    worst = std::max(worst, (hf - formula).norm() / std::max(formula.norm(), 1.0));
  }
  return worst;
}

double irm_margin(std::uint64_t seed) {
  const Irm irm = make_irm_consensus(5, 3, seed, 10);
  OuterConfig<double> c;
  c.alpha = 0.01;
  c.T = 500;
  c.theta0 = irm.test.theta0;
  c.phi0 = Vec::Ones(5);
  c.engine = engines::Gu<double>{UnrollMode::bgu, 10, irm.test.lower_beta, 0, false};
  const auto r = run(irm.test.problem, c);
  return std::abs(r.theta_final[0]) - r.theta_final.tail(2).cwiseAbs().maxCoeff();
}

// 10. Application kernels, medians over 20 seeds.
Outcome application_checks() {
  std::vector<double> ratio, frac, gap, margin;
  double bip = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    ratio.push_back(coreset_ratio(seed));
    frac.push_back(maml_fraction(seed));
    gap.push_back(fastbat_gap(seed));
    margin.push_back(irm_margin(seed));
    if (seed < 5) bip = std::max(bip, bip_error(seed));
  }
  const double r = median(ratio), f = median(frac), g = median(gap), m = median(margin);
  const bool pass = r >= 2 && f >= 0.8 && g > 0 && bip <= 1e-10 && m > 0;
  return {pass, "coreset ratio " + fmt("%.2f", r) + ", maml " + fmt("%.2f", f) + ", fast-bat gap " +
                    fmt("%+.3f", g) + ", bip " + fmt("%.1e", bip) + ", irm margin " + fmt("%.3f", m)};
}

std::string read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// 11. CLI reproducibility and the reverse-mode oracle budget.
Outcome reproducibility_checks() {
  namespace fs = std::filesystem;
  const fs::path root = fs::temp_directory_path() / "blo-acceptance";
  fs::remove_all(root);
  cli::ExperimentConfig cfg = cli::parse_config(R"({
    "problem": {"name": "quad_bilevel", "seed": 3},
    "outer": {"engine": {"kind": "gu", "mode": "bgu", "K": 20}, "alpha": 0.5, "T": 30},
    "repeats": 3
  })");
  std::ostringstream log;
  bool same = true;
  std::vector<std::string> first;
  for (int pass = 0; pass < 2; ++pass) {
    cfg.output_dir = (root / ("run" + std::to_string(pass))).string();
    if (cli::cmd_run(cfg, log) != cli::exit_ok) return {false, "cmd_run failed: " + log.str()};
    std::vector<std::string> files = {"report.csv", "run_000.json", "run_001.json", "run_002.json"};
    for (std::size_t i = 0; i < files.size(); ++i) {
      const std::string bytes = read_bytes(fs::path(cfg.output_dir) / files[i]);
      if (pass == 0) {
        first.push_back(bytes);
      } else {
        same = same && !bytes.empty() && bytes == first[i];
      }
    }
  }
  fs::remove_all(root);

  bool counts = true;
  const TestProblem tp = make_quad_bilevel({});
  for (Index K : {1, 7, 40}) {
    Oracle<double> o(tp.problem);
    const auto traj = solve_gd<double>(o, tp.theta0, Vec::Zero(tp.problem.dim_phi), K, tp.lower_beta);
    const auto est = hypergrad_bgu(o, tp.theta0, traj);
    counts = counts && est.counters_delta.hvps == std::uint64_t(K) && est.counters_delta.jvps == std::uint64_t(K);
  }
  return {same && counts, std::string("outputs ") + (same ? "byte-identical" : "differ") + ", BGU oracle counts " +
                              (counts ? "K HVPs + K JVPs" : "wrong")};
}

struct Criterion {
  const char* name;
  double budget_seconds;
  std::function<Outcome()> check;
};

}  // namespace

int main() {
  const std::vector<Criterion> criteria = {
      {"C1 hypergradient correctness (IF-CG, NeumannSum, FGU, BGU)", 5, hypergradient_correctness},
      {"C2 FGU equals BGU on smooth problems", 10, forward_reverse_agreement},
      {"C3 BGU approaches IF as K grows", 5, unroll_limit},
      {"C4 Example 2 map, one-sided hypergradients, kink", 5, example2_checks},
      {"C5 Example 1 reduced objective and projected gd", 1, example1_checks},
      {"C6 Neumann truncation and unbiasedness", 30, neumann_checks},
      {"C7 WoodFisher one-shot inverse", 2, woodfisher_checks},
      {"C8 value-function method", 20, value_function_checks},
      {"C9 stochastic drivers", 60, stochastic_checks},
      {"C10 application kernels", 300, application_checks},
      {"C11 reproducible CLI outputs and BGU oracle budget", 30, reproducibility_checks},
  };
  int failures = 0;
  for (const auto& c : criteria) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome out;
    try {
      out = c.check();
    } catch (const std::exception& e) {
      out = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_time = secs <= c.budget_seconds;
    const bool pass = out.pass && in_time;
    if (!pass) ++failures;
    std::printf("%s  %s  (%s; %.2fs of %.0fs)%s\n", pass ? "PASS" : "FAIL", c.name, out.detail.c_str(), secs,
                c.budget_seconds, in_time ? "" : " over time budget");
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
