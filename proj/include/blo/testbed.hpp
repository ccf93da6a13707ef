#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "blo/core.hpp"

namespace blo::testbed {

using Vec = Vector<double>;
using Mat = Matrix<double>;
using Problem = BilevelProblem<double>;

/// Named problem with scalar-or-vector parameters. Scalars are length-1 vectors.
struct ProblemSpec {
  std::string name;
  std::map<std::string, std::vector<double>> params;
  std::uint64_t seed = 0;

  friend bool operator==(const ProblemSpec&, const ProblemSpec&) = default;
};

/// A constructed problem plus what is known about it in closed form.
struct TestProblem {
  Problem problem;
  /// Stepsize safe for gd on the lower level (<= 1/L).
  double lower_beta = 0.1;
  /// Suggested outer start.
  Vec theta0;
  std::function<Vec(const Vec&)> phi_star;
  std::function<Vec(const Vec&)> hypergrad;
  std::optional<Vec> theta_star;
  /// Engine kinds that apply: "if", "if_constrained", "gu", "vf", "analytic".
  std::vector<std::string> engines;
  bool smooth = true;

  bool supports(const std::string& engine) const;
};

struct ParamInfo {
  std::string name;
  std::vector<double> default_value;
  std::string help;
};

struct ProblemInfo {
  std::string name;
  std::string summary;
  std::vector<ParamInfo> params;
  bool closed_form = false;
  std::function<TestProblem(const ProblemSpec&)> build;
};

/// All registered problems, in listing order.
const std::vector<ProblemInfo>& registry();
const ProblemInfo& find_problem(const std::string& name);
/// Fills defaults, rejects unknown names or parameters, builds the problem.
TestProblem make_problem(const ProblemSpec& spec);

// ---- analytic problems -------------------------------------------------

struct QuadOptions {
  Index m = 10;
  Index n = 10;
  double lambda = 1;
  std::uint64_t seed = 0;
  /// Lower curvature D = diag(1 .. 1 + spread); 0 gives the isotropic case.
  double curvature_spread = 0;
  /// W = I (requires m == n) instead of Gaussian.
  bool identity_w = false;
  double offset_scale = 1;
  double target_scale = 1;
};

/// g = 1/2 (phi - W theta - c)' D (phi - W theta - c) + lambda/2 ||phi||^2,
/// f = 1/2 ||phi - phi_target||^2 + 1/2 ||theta||^2.
TestProblem make_quad_bilevel(const QuadOptions& opt);

/// Finite-sum version: per-sample offsets c_i, targets and upper anchors a_i.
TestProblem make_quad_finite_sum(Index num_samples, Index m, Index n, double lambda,
                                 double noise, std::uint64_t seed);

/// f = theta^2 - theta phi - phi^2 = -g with the coupled constraint theta = phi.
TestProblem make_example1();

/// min_{theta in [0,1]} theta + phi*(theta), phi* = argmin_{1/2 <= phi <= 1} (theta - phi)^2.
TestProblem make_example2();

/// g = -f with f = 1/2||theta||^2 + theta' B phi - mu/2 ||phi||^2.
TestProblem make_mmo_quadratic(Index m, Index n, double mu, std::uint64_t seed);

/// g = (phi_1 - theta)^2 leaves phi_2 free; f = (phi_2 - 1)^2 + theta^2.
TestProblem make_ns_blo_toy();

/// Strongly convex QP lower level over A phi <= b with one planted active row.
struct ConstrainedQp {
  TestProblem test;
  Mat Q, P, A;
  Vec q, b, target;
  Vec theta_ref;
  Index planted_row = 0;
  /// Exact solution by enumerating active sets.
  Vec solve(const Vec& theta) const;
};
ConstrainedQp make_constrained_qp(Index m, Index n, Index rows, std::uint64_t seed);

// ---- application kernels -----------------------------------------------

struct Coreset {
  TestProblem test;
  Mat X_train, X_val;
  Vec y_train, y_val;
  std::vector<bool> corrupted;
  double ridge = 0.1;
  double budget = 0;
};
/// Weighted ridge regression (lower) with a validation loss (upper) over
/// sample weights in {0 <= w <= 1, sum w <= k}.
Coreset make_coreset(Index N, Index d, double k, double corrupt_frac, std::uint64_t seed,
                     double ridge = 0.1);

struct Reweight {
  TestProblem test;
  Vec rate_base, curvature, target;
  Mat features;
  double gamma = 1;
  double kappa = 0.1;
  /// R_i(theta) = r_i - b_i/2 (theta'h_i - p_i)^2
  Vec rates(const Vec& theta) const;
};
/// Lower level picks simplex weights favouring low-rate samples,
/// lambda* = P_simplex(-R(theta)/gamma); upper maximizes the weighted rate.
Reweight make_reweight_simplex(Index samples, Index m, double gamma, std::uint64_t seed);
/// Reweighting instance with explicit per-sample data (m = feature dimension).
Reweight make_reweight_from(Vec rate_base, Vec curvature, Mat features, Vec target, double gamma,
                            double kappa);

struct SinusoidTask {
  double amplitude = 1;
  double phase = 0;
  Vec x_train, y_train, x_val, y_val;
};

struct Maml {
  TestProblem test;
  std::vector<SinusoidTask> tasks;
  Index shots = 10;
  Index K = 1;
  double task_step = 0.1;
  /// Basis [sin x, cos x, sin 2x, cos 2x, 1].
  static Vec basis(double x);
  static Mat design(const Vec& x);
  static double loss(const Vec& w, const Vec& x, const Vec& y);
  static Vec loss_grad(const Vec& w, const Vec& x, const Vec& y);
  /// `steps` gd steps of size `step` on the task's training points.
  static Vec adapt(const Vec& init, const SinusoidTask& task, Index steps, double step);
  static SinusoidTask sample_task(std::uint64_t seed, Index shots, Index queries);
};
/// Tasks are the finite-sum dimension; phi stacks per-task offsets delta_i,
/// task model = theta + delta_i, delta_i starts at 0. With the full batch the
/// lower gradient in delta_i carries 1/N, so the GU stepsize is task_step * N.
Maml make_maml_sinusoid(Index tasks, Index shots, Index K, std::uint64_t seed, double task_step = 0.1);

struct FastBat {
  TestProblem test;
  Mat X;
  Vec y;
  double epsilon = 0;
  double gamma = 0.05;
  double ridge = 1e-3;
  /// Closed-form linearized attack P_box(grad_x loss / gamma) at delta_0 = 0.
  Vec attack(const Vec& theta) const;
};
struct BatData {
  Mat X;
  Vec y;
};
/// Robust feature x_0 = 2y (flipped with prob 0.05), non-robust x_j ~ N(eta y, 1).
BatData make_bat_data(Index N, Index d, double eta, std::uint64_t seed);
FastBat make_fastbat_toy(Index N, Index d, double epsilon, double gamma, std::uint64_t seed,
                         double eta = 0.5);
FastBat make_fastbat_from(BatData data, double epsilon, double gamma);
/// Accuracy of sign(theta'x') where x' = x - eps * y * sign(theta) (one-step l_inf attack).
double robust_accuracy(const Vec& theta, const BatData& data, double epsilon);

struct Bip {
  TestProblem test;
  Vec a, z_target, z_val;
  double gamma = 1;
  bool quadratic = false;
  /// -(1/gamma) grad_z loss_tr(m .* phi), as a vector holding the diagonal.
  Vec diagonal_ig(const Vec& mask, const Vec& phi) const;
};
/// Mask m in {0 <= m <= 1, sum m <= k} (upper), weights phi (lower).
/// Linear training loss <a, m.*phi> by default; `quadratic` uses 1/2||m.*phi - z*||^2.
Bip make_bip_toy(Index n, double gamma, std::uint64_t seed, bool quadratic = false);

struct Irm {
  TestProblem test;
  std::vector<Mat> sigma;  // per-environment second moments E[x x']
  std::vector<Vec> cross;  // E[x y]
  std::vector<double> y2;  // E[y^2]
  double penalty = 1;
  Index invariant_feature = 0;
};
/// Linear representation theta (feature 0 invariant, others spurious with
/// environment-dependent correlation), one scalar head per environment.
/// The upper loss evaluates the consensus head mean(phi).
Irm make_irm_consensus(Index E, Index d, std::uint64_t seed, double penalty = 1,
                       Index samples_per_env = 200);
/// Consensus projection: every block replaced by the block mean.
Vec consensus_project(const Vec& heads, Index E);

// ---- finite differences ------------------------------------------------

struct FdOptions {
  double h = 1e-5;
  double lower_tol = 1e-10;
  Index max_iters = 200000;
  double beta = 0;  // 0: use the problem's lower_beta
};

/// theta -> f(theta, phi~(theta)) with phi~ solved to lower_tol (or the analytic map).
double reduced_objective(const TestProblem& tp, const Vec& theta, const FdOptions& opt = {});
/// Central differences of the reduced objective; 2m lower solves.
Vec finite_diff_hypergrad(const TestProblem& tp, const Vec& theta, const FdOptions& opt = {});

struct OneSided {
  Vec left;
  Vec right;
  bool kink = false;
};
/// Backward and forward differences; `kink` when they disagree by more than `gap`.
OneSided one_sided_hypergrad(const TestProblem& tp, const Vec& theta, double h, double gap,
                             const FdOptions& opt = {});

/// Central differences of theta -> f(theta, phi_K(theta)) for K gd steps from phi0.
Vec finite_diff_unrolled(const Problem& problem, const Vec& theta, const Vec& phi0, Index K,
                         double beta, double h = 1e-5);

}  // namespace blo::testbed
