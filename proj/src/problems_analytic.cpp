#include <algorithm>
#include <cmath>
#include <memory>
#include <random>

#include <Eigen/Dense>

#include "blo/testbed.hpp"
#include "rng.hpp"

namespace blo::testbed {

bool TestProblem::supports(const std::string& engine) const {
  return std::find(engines.begin(), engines.end(), engine) != engines.end();
}

namespace {

struct QuadData {
  Mat W;
  Vec d;  // diagonal lower curvature
  Vec c, target;
  double lambda;
};

}  // namespace

TestProblem make_quad_bilevel(const QuadOptions& opt) {
  if (opt.m < 1 || opt.n < 1) throw ArgumentError("quad_bilevel needs m, n >= 1");
  if (!(opt.lambda >= 0)) throw ArgumentError("quad_bilevel needs lambda >= 0");
  if (opt.curvature_spread < 0) throw ArgumentError("curvature_spread must be >= 0");
  std::mt19937_64 rng(opt.seed);
  auto data = std::make_shared<QuadData>();
  if (opt.identity_w) {
    if (opt.m != opt.n) throw ArgumentError("identity W needs m == n");
    data->W = Mat::Identity(opt.n, opt.m);
  } else {
    data->W = gaussian_matrix(rng, opt.n, opt.m) / std::sqrt(double(opt.m));
  }
  data->c = opt.offset_scale * gaussian_vector(rng, opt.n);
  data->target = opt.target_scale * gaussian_vector(rng, opt.n);
  data->d = Vec::Ones(opt.n);
  if (opt.n > 1) {
    for (Index i = 0; i < opt.n; ++i) data->d[i] += opt.curvature_spread * double(i) / double(opt.n - 1);
  }
  data->lambda = opt.lambda;

  TestProblem tp;
  Problem& p = tp.problem;
  p.name = "quad_bilevel";
  p.dim_theta = opt.m;
  p.dim_phi = opt.n;
  auto residual = [data](const Vec& th, const Vec& ph) -> Vec { return ph - data->W * th - data->c; };
  p.upper_value = [data](const Vec& th, const Vec& ph, Batch) {
    return 0.5 * (ph - data->target).squaredNorm() + 0.5 * th.squaredNorm();
  };
  p.upper_grad_theta = [](const Vec& th, const Vec&, Batch) -> Vec { return th; };
  p.upper_grad_phi = [data](const Vec&, const Vec& ph, Batch) -> Vec { return ph - data->target; };
  p.lower_value = [data, residual](const Vec& th, const Vec& ph, Batch) {
    const Vec r = residual(th, ph);
    return 0.5 * r.dot(data->d.cwiseProduct(r)) + 0.5 * data->lambda * ph.squaredNorm();
  };
  p.lower_grad_phi = [data, residual](const Vec& th, const Vec& ph, Batch) -> Vec {
    return data->d.cwiseProduct(residual(th, ph)) + data->lambda * ph;
  };
  p.lower_grad_theta = [data, residual](const Vec& th, const Vec& ph, Batch) -> Vec {
    return -data->W.transpose() * data->d.cwiseProduct(residual(th, ph));
  };
  p.lower_hvp_phiphi = [data](const Vec&, const Vec&, const Vec& v, Batch) -> Vec {
    return data->d.cwiseProduct(v) + data->lambda * v;
  };
  p.lower_cross_jvp = [data](const Vec&, const Vec&, const Vec& v, Batch) -> Vec {
    return -data->W.transpose() * data->d.cwiseProduct(v);
  };

  const Vec hdiag = data->d.array() + data->lambda;
  const Vec gain = data->d.cwiseQuotient(hdiag);  // (D + lambda)^{-1} D
  tp.phi_star = [data, gain](const Vec& th) -> Vec {
    return gain.cwiseProduct(data->W * th + data->c);
  };
  tp.hypergrad = [data, gain](const Vec& th) -> Vec {
    const Vec phi = gain.cwiseProduct(data->W * th + data->c);
    return th + data->W.transpose() * gain.cwiseProduct(phi - data->target);
  };
  const Mat M = gain.asDiagonal() * data->W;
  const Vec m0 = gain.cwiseProduct(data->c);
  const Mat normal = Mat::Identity(opt.m, opt.m) + M.transpose() * M;
  tp.theta_star = Vec(normal.ldlt().solve(-M.transpose() * (m0 - data->target)));
  tp.lower_beta = 1.0 / hdiag.maxCoeff();
  tp.theta0 = Vec::Ones(opt.m);
  tp.engines = {"if", "gu", "vf"};
  return tp;
}

namespace {

struct FiniteSumData {
  Mat W;
  Mat c;       // n x N lower offsets
  Mat target;  // n x N upper targets
  Mat anchor;  // m x N upper anchors
  double lambda;
  Index N;
};

}  // namespace

TestProblem make_quad_finite_sum(Index num_samples, Index m, Index n, double lambda, double noise,
                                 std::uint64_t seed) {
  if (num_samples < 1 || m < 1 || n < 1) throw ArgumentError("quad_finite_sum needs N, m, n >= 1");
  std::mt19937_64 rng(seed);
  auto data = std::make_shared<FiniteSumData>();
  data->W = gaussian_matrix(rng, n, m) / std::sqrt(double(m));
  const Vec c_mean = gaussian_vector(rng, n);
  const Vec t_mean = gaussian_vector(rng, n);
  const Vec a_mean = gaussian_vector(rng, m);
  data->c = c_mean.replicate(1, num_samples) + noise * gaussian_matrix(rng, n, num_samples);
  data->target = t_mean.replicate(1, num_samples) + noise * gaussian_matrix(rng, n, num_samples);
  data->anchor = a_mean.replicate(1, num_samples) + noise * gaussian_matrix(rng, m, num_samples);
  data->lambda = lambda;
  data->N = num_samples;

  TestProblem tp;
  Problem& p = tp.problem;
  p.name = "quad_finite_sum";
  p.dim_theta = m;
  p.dim_phi = n;
  p.num_samples = num_samples;
  const Index N = num_samples;
  p.upper_value = [data, N](const Vec& th, const Vec& ph, Batch b) {
    return batch_mean(N, b, [&](Index i) {
      return 0.5 * (ph - data->target.col(i)).squaredNorm() + 0.5 * (th - data->anchor.col(i)).squaredNorm();
    });
  };
  p.upper_grad_theta = [data, N](const Vec& th, const Vec&, Batch b) -> Vec {
    return batch_mean(N, b, [&](Index i) -> Vec { return th - data->anchor.col(i); });
  };
  p.upper_grad_phi = [data, N](const Vec&, const Vec& ph, Batch b) -> Vec {
    return batch_mean(N, b, [&](Index i) -> Vec { return ph - data->target.col(i); });
  };
  p.lower_value = [data, N](const Vec& th, const Vec& ph, Batch b) {
    return batch_mean(N, b, [&](Index i) {
      return 0.5 * (ph - data->W * th - data->c.col(i)).squaredNorm() + 0.5 * data->lambda * ph.squaredNorm();
    });
  };
  p.lower_grad_phi = [data, N](const Vec& th, const Vec& ph, Batch b) -> Vec {
    return batch_mean(N, b, [&](Index i) -> Vec {
      return ph - data->W * th - data->c.col(i) + data->lambda * ph;
    });
  };
  p.lower_grad_theta = [data, N](const Vec& th, const Vec& ph, Batch b) -> Vec {
    return batch_mean(N, b, [&](Index i) -> Vec {
      return -data->W.transpose() * (ph - data->W * th - data->c.col(i));
    });
  };
  p.lower_hvp_phiphi = [data](const Vec&, const Vec&, const Vec& v, Batch) -> Vec {
    return (1 + data->lambda) * v;
  };
  p.lower_cross_jvp = [data](const Vec&, const Vec&, const Vec& v, Batch) -> Vec {
    return -data->W.transpose() * v;
  };

  const Vec c_bar = data->c.rowwise().mean();
  const Vec t_bar = data->target.rowwise().mean();
  const Vec a_bar = data->anchor.rowwise().mean();
  const double s = 1.0 / (1 + lambda);
  tp.phi_star = [data, c_bar, s](const Vec& th) -> Vec { return s * (data->W * th + c_bar); };
  tp.hypergrad = [data, c_bar, t_bar, a_bar, s](const Vec& th) -> Vec {
    const Vec phi = s * (data->W * th + c_bar);
    return th - a_bar + s * data->W.transpose() * (phi - t_bar);
  };
  const Mat M = s * data->W;
  const Mat normal = Mat::Identity(m, m) + M.transpose() * M;
  tp.theta_star = Vec(normal.ldlt().solve(a_bar - M.transpose() * (s * c_bar - t_bar)));
  tp.lower_beta = 1.0 / (1 + lambda);
  tp.theta0 = Vec::Zero(m);
  tp.engines = {"if", "gu", "vf"};
  return tp;
}

TestProblem make_example1() {
  TestProblem tp;
  Problem& p = tp.problem;
  p.name = "example1";
  p.dim_theta = 1;
  p.dim_phi = 1;
  // f = theta^2 - theta phi - phi^2, g = -f.
  p.upper_value = [](const Vec& th, const Vec& ph, Batch) {
    return th[0] * th[0] - th[0] * ph[0] - ph[0] * ph[0];
  };
  p.upper_grad_theta = [](const Vec& th, const Vec& ph, Batch) -> Vec {
    return Vec::Constant(1, 2 * th[0] - ph[0]);
  };
  p.upper_grad_phi = [](const Vec& th, const Vec& ph, Batch) -> Vec {
    return Vec::Constant(1, -th[0] - 2 * ph[0]);
  };
  p.lower_value = [](const Vec& th, const Vec& ph, Batch) {
    return -(th[0] * th[0] - th[0] * ph[0] - ph[0] * ph[0]);
  };
  p.lower_grad_phi = [](const Vec& th, const Vec& ph, Batch) -> Vec {
    return Vec::Constant(1, th[0] + 2 * ph[0]);
  };
  p.lower_grad_theta = [](const Vec& th, const Vec& ph, Batch) -> Vec {
    return Vec::Constant(1, -2 * th[0] + ph[0]);
  };
  p.lower_hvp_phiphi = [](const Vec&, const Vec&, const Vec& v, Batch) -> Vec { return 2 * v; };
  p.lower_cross_jvp = [](const Vec&, const Vec&, const Vec& v, Batch) -> Vec { return v; };
  p.upper_set = ConstraintSet<double>::box(1, -1, 1);
  p.lower_set = ConstraintSet<double>::box(1, -1, 1);
  p.coupled_lower = true;
  p.solution_map = SolutionMap<double>{[](const Vec& th) -> Vec { return th; },
                                       [](const Vec&, const Vec& v) -> Vec { return v; }};
  tp.phi_star = [](const Vec& th) -> Vec { return th; };
  tp.hypergrad = [](const Vec& th) -> Vec { return -2 * th; };
  tp.lower_beta = 0.5;
  tp.theta0 = Vec::Constant(1, 0.1);
  tp.engines = {"analytic"};
  return tp;
}

TestProblem make_example2() {
  TestProblem tp;
  Problem& p = tp.problem;
  p.name = "example2";
  p.dim_theta = 1;
  p.dim_phi = 1;
  p.upper_value = [](const Vec& th, const Vec& ph, Batch) { return th[0] + ph[0]; };
  p.upper_grad_theta = [](const Vec&, const Vec&, Batch) -> Vec { return Vec::Ones(1); };
  p.upper_grad_phi = [](const Vec&, const Vec&, Batch) -> Vec { return Vec::Ones(1); };
  p.lower_value = [](const Vec& th, const Vec& ph, Batch) {
    return (th[0] - ph[0]) * (th[0] - ph[0]);
  };
  p.lower_grad_phi = [](const Vec& th, const Vec& ph, Batch) -> Vec {
    return Vec::Constant(1, 2 * (ph[0] - th[0]));
  };
  p.lower_grad_theta = [](const Vec& th, const Vec& ph, Batch) -> Vec {
    return Vec::Constant(1, 2 * (th[0] - ph[0]));
  };
  p.lower_hvp_phiphi = [](const Vec&, const Vec&, const Vec& v, Batch) -> Vec { return 2 * v; };
  p.lower_cross_jvp = [](const Vec&, const Vec&, const Vec& v, Batch) -> Vec { return -2 * v; };
  p.upper_set = ConstraintSet<double>::box(1, 0, 1);
  p.lower_set = ConstraintSet<double>::box(1, 0.5, 1);
  auto map = [](const Vec& th) -> Vec { return Vec::Constant(1, std::clamp(th[0], 0.5, 1.0)); };
  p.solution_map = SolutionMap<double>{
      map, [](const Vec& th, const Vec& v) -> Vec {
        return (th[0] > 0.5 && th[0] < 1.0) ? v : Vec::Zero(1);
      }};
  tp.phi_star = map;
  tp.hypergrad = [](const Vec& th) -> Vec {
    return Vec::Constant(1, (th[0] > 0.5 && th[0] < 1.0) ? 2.0 : 1.0);
  };
  tp.lower_beta = 0.25;
  tp.theta0 = Vec::Constant(1, 0.75);
  tp.engines = {"if_constrained", "vf", "analytic"};
  tp.smooth = false;
  return tp;
}

TestProblem make_mmo_quadratic(Index m, Index n, double mu, std::uint64_t seed) {
  if (!(mu > 0)) throw ArgumentError("mmo_quadratic needs mu > 0");
  std::mt19937_64 rng(seed);
  auto B = std::make_shared<Mat>(gaussian_matrix(rng, m, n) / std::sqrt(double(n)));
  TestProblem tp;
  Problem& p = tp.problem;
  p.name = "mmo_quadratic";
  p.dim_theta = m;
  p.dim_phi = n;
  auto f = [B, mu](const Vec& th, const Vec& ph) {
    return 0.5 * th.squaredNorm() + th.dot(*B * ph) - 0.5 * mu * ph.squaredNorm();
  };
  p.upper_value = [f](const Vec& th, const Vec& ph, Batch) { return f(th, ph); };
  p.upper_grad_theta = [B](const Vec& th, const Vec& ph, Batch) -> Vec { return th + *B * ph; };
  p.upper_grad_phi = [B, mu](const Vec& th, const Vec& ph, Batch) -> Vec {
    return B->transpose() * th - mu * ph;
  };
  p.lower_value = [f](const Vec& th, const Vec& ph, Batch) { return -f(th, ph); };
  p.lower_grad_phi = [B, mu](const Vec& th, const Vec& ph, Batch) -> Vec {
    return mu * ph - B->transpose() * th;
  };
  p.lower_grad_theta = [B](const Vec& th, const Vec& ph, Batch) -> Vec { return -th - *B * ph; };
  p.lower_hvp_phiphi = [mu](const Vec&, const Vec&, const Vec& v, Batch) -> Vec { return mu * v; };
  p.lower_cross_jvp = [B](const Vec&, const Vec&, const Vec& v, Batch) -> Vec { return -(*B * v); };
  tp.phi_star = [B, mu](const Vec& th) -> Vec { return B->transpose() * th / mu; };
  tp.hypergrad = [B, mu](const Vec& th) -> Vec { return th + *B * (B->transpose() * th) / mu; };
  tp.theta_star = Vec::Zero(m);
  tp.lower_beta = 1.0 / mu;
  tp.theta0 = Vec::Ones(m);
  tp.engines = {"if", "gu", "vf"};
  return tp;
}

TestProblem make_ns_blo_toy() {
  TestProblem tp;
  Problem& p = tp.problem;
  p.name = "ns_blo_toy";
  p.dim_theta = 1;
  p.dim_phi = 2;
  p.upper_value = [](const Vec& th, const Vec& ph, Batch) {
    return (ph[1] - 1) * (ph[1] - 1) + th[0] * th[0];
  };
  p.upper_grad_theta = [](const Vec& th, const Vec&, Batch) -> Vec { return Vec::Constant(1, 2 * th[0]); };
  p.upper_grad_phi = [](const Vec&, const Vec& ph, Batch) -> Vec {
    Vec g(2);
    g << 0, 2 * (ph[1] - 1);
    return g;
  };
  p.lower_value = [](const Vec& th, const Vec& ph, Batch) {
    return (ph[0] - th[0]) * (ph[0] - th[0]);
  };
  p.lower_grad_phi = [](const Vec& th, const Vec& ph, Batch) -> Vec {
    Vec g(2);
    g << 2 * (ph[0] - th[0]), 0;
    return g;
  };
  p.lower_grad_theta = [](const Vec& th, const Vec& ph, Batch) -> Vec {
    return Vec::Constant(1, 2 * (th[0] - ph[0]));
  };
  p.lower_hvp_phiphi = [](const Vec&, const Vec&, const Vec& v, Batch) -> Vec {
    Vec h(2);
    h << 2 * v[0], 0;
    return h;
  };
  p.lower_cross_jvp = [](const Vec&, const Vec&, const Vec& v, Batch) -> Vec {
    return Vec::Constant(1, -2 * v[0]);
  };
  tp.theta_star = Vec::Zero(1);
  tp.lower_beta = 0.5;
  tp.theta0 = Vec::Constant(1, 1.0);
  tp.engines = {"vf"};
  tp.smooth = false;
  return tp;
}

Vec ConstrainedQp::solve(const Vec& theta) const {
  const Vec lin = P * theta + q;
  const Index r = A.rows();
  Vec best;
  double best_value = std::numeric_limits<double>::infinity();
  for (unsigned mask = 0; mask < (1u << r); ++mask) {
    std::vector<Index> act;
    for (Index i = 0; i < r; ++i) {
      if (mask & (1u << i)) act.push_back(i);
    }
    const Index k = static_cast<Index>(act.size());
    const Index n = Q.rows();
    Mat K = Mat::Zero(n + k, n + k);
    Vec rhs(n + k);
    K.topLeftCorner(n, n) = Q;
    rhs.head(n) = lin;
    for (Index j = 0; j < k; ++j) {
      K.block(0, n + j, n, 1) = A.row(act[j]).transpose();
      K.block(n + j, 0, 1, n) = A.row(act[j]);
      rhs[n + j] = b[act[j]];
    }
    Eigen::FullPivLU<Mat> lu(K);
    if (lu.rank() < n + k) continue;
    const Vec sol = lu.solve(rhs);
    const Vec phi = sol.head(n);
    if ((sol.tail(k).array() < -1e-12).any()) continue;
    if (((A * phi - b).array() > 1e-10).any()) continue;
    const double value = 0.5 * phi.dot(Q * phi) - phi.dot(lin);
    if (value < best_value) {
      best_value = value;
      best = phi;
    }
  }
  if (best.size() == 0) throw NumericalFailure("no KKT point found for the planted QP", 0);
  return best;
}

ConstrainedQp make_constrained_qp(Index m, Index n, Index rows, std::uint64_t seed) {
  if (rows < 1 || rows > 12) throw ArgumentError("constrained_qp supports 1..12 rows");
  std::mt19937_64 rng(seed);
  ConstrainedQp out;
  const Mat G = gaussian_matrix(rng, n, n);
  out.Q = G * G.transpose() / double(n) + Mat::Identity(n, n);
  out.P = gaussian_matrix(rng, n, m) / std::sqrt(double(m));
  out.q = gaussian_vector(rng, n);
  out.target = gaussian_vector(rng, n);
  out.theta_ref = gaussian_vector(rng, m) * 0.5;
  out.A = gaussian_matrix(rng, rows, n);
  for (Index i = 0; i < rows; ++i) out.A.row(i).normalize();
  const Vec free_min = out.Q.ldlt().solve(out.P * out.theta_ref + out.q);
  out.b = out.A * free_min + Vec::Ones(rows) * 2.0;
  out.planted_row = 0;
  out.b[0] = out.A.row(0).dot(free_min) - 0.5;

  auto shared = std::make_shared<ConstrainedQp>(out);
  TestProblem& tp = out.test;
  Problem& p = tp.problem;
  p.name = "constrained_qp";
  p.dim_theta = m;
  p.dim_phi = n;
  p.upper_value = [shared](const Vec& th, const Vec& ph, Batch) {
    return 0.5 * (ph - shared->target).squaredNorm() + 0.5 * th.squaredNorm();
  };
  p.upper_grad_theta = [](const Vec& th, const Vec&, Batch) -> Vec { return th; };
  p.upper_grad_phi = [shared](const Vec&, const Vec& ph, Batch) -> Vec { return ph - shared->target; };
  p.lower_value = [shared](const Vec& th, const Vec& ph, Batch) {
    return 0.5 * ph.dot(shared->Q * ph) - ph.dot(shared->P * th + shared->q);
  };
  p.lower_grad_phi = [shared](const Vec& th, const Vec& ph, Batch) -> Vec {
    return shared->Q * ph - shared->P * th - shared->q;
  };
  p.lower_grad_theta = [shared](const Vec&, const Vec& ph, Batch) -> Vec {
    return -shared->P.transpose() * ph;
  };
  p.lower_hvp_phiphi = [shared](const Vec&, const Vec&, const Vec& v, Batch) -> Vec { return shared->Q * v; };
  p.lower_cross_jvp = [shared](const Vec&, const Vec&, const Vec& v, Batch) -> Vec {
    return -shared->P.transpose() * v;
  };
  p.lower_set = ConstraintSet<double>::linear_inequality(out.A, out.b);
  tp.phi_star = [shared](const Vec& th) -> Vec { return shared->solve(th); };
  const Eigen::SelfAdjointEigenSolver<Mat> eig(out.Q, Eigen::EigenvaluesOnly);
  tp.lower_beta = 1.0 / eig.eigenvalues().maxCoeff();
  tp.theta0 = out.theta_ref;
  tp.engines = {"if_constrained", "vf"};
  return out;
}

}  // namespace blo::testbed
