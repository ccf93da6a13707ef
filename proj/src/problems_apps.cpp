#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>
#include <random>

#include <Eigen/Dense>

#include "blo/testbed.hpp"
#include "rng.hpp"

namespace blo::testbed {

namespace {

double sigmoid(double z) {
  return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
}

double log1p_exp(double z) {
  return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
}

Index batch_count(Index n, Batch b) { return b.empty() ? n : static_cast<Index>(b.size()); }
Index batch_at(Batch b, Index k) { return b.empty() ? k : b[static_cast<std::size_t>(k)]; }

}  // namespace

// ---- coreset ------------------------------------------------------------

Coreset make_coreset(Index N, Index d, double k, double corrupt_frac, std::uint64_t seed, double ridge) {
  if (N < 2 || d < 1) throw ArgumentError("coreset needs N >= 2, d >= 1");
  if (!(k > 0) || k > double(N)) throw ArgumentError("coreset budget must lie in (0, N]");
  if (corrupt_frac < 0 || corrupt_frac >= 1) throw ArgumentError("corrupt_frac must lie in [0, 1)");
  if (!(ridge > 0)) throw ArgumentError("coreset ridge must be > 0");
  std::mt19937_64 rng(seed);
  Coreset out;
  out.ridge = ridge;
  out.budget = k;
  const Vec w_true = gaussian_vector(rng, d);
  out.X_train = gaussian_matrix(rng, N, d);
  out.X_val = gaussian_matrix(rng, N, d);
  out.y_train = out.X_train * w_true + 0.1 * gaussian_vector(rng, N);
  out.y_val = out.X_val * w_true + 0.1 * gaussian_vector(rng, N);
  std::vector<Index> order(static_cast<std::size_t>(N));
  for (Index i = 0; i < N; ++i) order[static_cast<std::size_t>(i)] = i;
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_bad = static_cast<Index>(std::llround(corrupt_frac * double(N)));
  out.corrupted.assign(static_cast<std::size_t>(N), false);
  for (Index j = 0; j < n_bad; ++j) {
    const Index i = order[static_cast<std::size_t>(j)];
    out.corrupted[static_cast<std::size_t>(i)] = true;
    out.y_train[i] = -out.y_train[i] + 2.0 * gaussian_vector(rng, 1)[0];
  }

  struct Data {
    Mat X, Xv;
    Vec y, yv;
    double ridge;
  };
  auto D = std::make_shared<Data>(Data{out.X_train, out.X_val, out.y_train, out.y_val, ridge});
  const double inv_n = 1.0 / double(N);
  const double inv_nv = 1.0 / double(out.X_val.rows());

  TestProblem& tp = out.test;
  Problem& p = tp.problem;
  p.name = "coreset";
  p.dim_theta = N;
  p.dim_phi = d;
  p.upper_value = [D, inv_nv](const Vec&, const Vec& ph, Batch) {
    return 0.5 * inv_nv * (D->Xv * ph - D->yv).squaredNorm();
  };
  p.upper_grad_theta = [N](const Vec&, const Vec&, Batch) -> Vec { return Vec::Zero(N); };
  p.upper_grad_phi = [D, inv_nv](const Vec&, const Vec& ph, Batch) -> Vec {
    return inv_nv * D->Xv.transpose() * (D->Xv * ph - D->yv);
  };
  p.lower_value = [D, inv_n](const Vec& w, const Vec& ph, Batch) {
    const Vec r = D->X * ph - D->y;
    return 0.5 * inv_n * w.dot(r.cwiseAbs2()) + 0.5 * D->ridge * ph.squaredNorm();
  };
  p.lower_grad_phi = [D, inv_n](const Vec& w, const Vec& ph, Batch) -> Vec {
    const Vec r = D->X * ph - D->y;
    return inv_n * D->X.transpose() * w.cwiseProduct(r) + D->ridge * ph;
  };
  p.lower_grad_theta = [D, inv_n](const Vec&, const Vec& ph, Batch) -> Vec {
    return 0.5 * inv_n * (D->X * ph - D->y).cwiseAbs2();
  };
  p.lower_hvp_phiphi = [D, inv_n](const Vec& w, const Vec&, const Vec& v, Batch) -> Vec {
    return inv_n * D->X.transpose() * w.cwiseProduct(D->X * v) + D->ridge * v;
  };
  p.lower_cross_jvp = [D, inv_n](const Vec&, const Vec& ph, const Vec& v, Batch) -> Vec {
    return inv_n * (D->X * ph - D->y).cwiseProduct(D->X * v);
  };
  p.upper_set = ConstraintSet<double>::budget_box(Vec::Ones(N), k);

  auto solve = [D, inv_n](const Vec& w) -> Vec {
    const Index dd = D->X.cols();
    const Mat H = inv_n * D->X.transpose() * w.asDiagonal() * D->X + D->ridge * Mat::Identity(dd, dd);
    return H.ldlt().solve(inv_n * D->X.transpose() * w.cwiseProduct(D->y));
  };
  tp.phi_star = solve;
  tp.hypergrad = [D, inv_n, inv_nv, solve](const Vec& w) -> Vec {
    const Vec phi = solve(w);
    const Index dd = D->X.cols();
    const Mat H = inv_n * D->X.transpose() * w.asDiagonal() * D->X + D->ridge * Mat::Identity(dd, dd);
    const Vec adj = H.ldlt().solve(inv_nv * D->Xv.transpose() * (D->Xv * phi - D->yv));
    return -inv_n * (D->X * phi - D->y).cwiseProduct(D->X * adj);
  };
  const double L = (out.X_train.transpose() * out.X_train).eval().norm() * inv_n + ridge;
  tp.lower_beta = 1.0 / L;
  tp.theta0 = Vec::Constant(N, std::min(1.0, k / double(N)));
  tp.engines = {"if", "gu", "vf"};
  return out;
}

// ---- wireless-style reweighting --------------------------------------------

Vec Reweight::rates(const Vec& theta) const {
  const Vec err = features.transpose() * theta - target;
  return rate_base - 0.5 * curvature.cwiseProduct(err.cwiseAbs2());
}

Reweight make_reweight_from(Vec rate_base, Vec curvature, Mat features, Vec target, double gamma,
                            double kappa) {
  if (!(gamma > 0)) throw ArgumentError("reweight gamma must be > 0");
  const Index N = rate_base.size();
  const Index m = features.rows();
  if (curvature.size() != N || features.cols() != N || target.size() != N) {
    throw ArgumentError("reweight data sizes disagree");
  }
  Reweight out;
  out.rate_base = std::move(rate_base);
  out.curvature = std::move(curvature);
  out.features = std::move(features);
  out.target = std::move(target);
  out.gamma = gamma;
  out.kappa = kappa;
  auto D = std::make_shared<Reweight>(out);
  // Column i of the Jacobian: grad R_i = -b_i (theta'h_i - p_i) h_i.
  auto jac = [D](const Vec& th) -> Mat {
    const Vec err = D->features.transpose() * th - D->target;
    return D->features * (-D->curvature.cwiseProduct(err)).asDiagonal();
  };

  TestProblem& tp = out.test;
  Problem& p = tp.problem;
  p.name = "reweight_simplex";
  p.dim_theta = m;
  p.dim_phi = N;
  p.upper_value = [D](const Vec& th, const Vec& lam, Batch) {
    return -lam.dot(D->rates(th)) + 0.5 * D->kappa * th.squaredNorm();
  };
  p.upper_grad_theta = [D, jac](const Vec& th, const Vec& lam, Batch) -> Vec {
    return -jac(th) * lam + D->kappa * th;
  };
  p.upper_grad_phi = [D](const Vec& th, const Vec&, Batch) -> Vec { return -D->rates(th); };
  p.lower_value = [D](const Vec& th, const Vec& lam, Batch) {
    return lam.dot(D->rates(th)) + 0.5 * D->gamma * lam.squaredNorm();
  };
  p.lower_grad_phi = [D](const Vec& th, const Vec& lam, Batch) -> Vec {
    return D->rates(th) + D->gamma * lam;
  };
  p.lower_grad_theta = [jac](const Vec& th, const Vec& lam, Batch) -> Vec { return jac(th) * lam; };
  p.lower_hvp_phiphi = [D](const Vec&, const Vec&, const Vec& v, Batch) -> Vec { return D->gamma * v; };
  p.lower_cross_jvp = [jac](const Vec& th, const Vec&, const Vec& v, Batch) -> Vec { return jac(th) * v; };
  p.lower_set = ConstraintSet<double>::simplex(1.0);

  auto lam_star = [D](const Vec& th) -> Vec {
    return ConstraintSet<double>::simplex(1.0).project(Vec(-D->rates(th) / D->gamma));
  };
  tp.phi_star = lam_star;
  tp.hypergrad = [D, jac, lam_star](const Vec& th) -> Vec {
    const Vec lam = lam_star(th);
    const Vec R = D->rates(th);
    const Mat J = jac(th);
    Vec mean = Vec::Zero(J.rows());
    Index support = 0;
    for (Index i = 0; i < lam.size(); ++i) {
      if (lam[i] > 0) {
        mean += J.col(i);
        ++support;
      }
    }
    mean /= double(support);
    Vec grad = -J * lam + D->kappa * th;
    for (Index i = 0; i < lam.size(); ++i) {
      if (lam[i] > 0) grad += (J.col(i) - mean) * R[i] / D->gamma;
    }
    return grad;
  };
  tp.lower_beta = 1.0 / gamma;
  tp.theta0 = Vec::Zero(m);
  tp.engines = {"if_constrained", "vf"};
  return out;
}

Reweight make_reweight_simplex(Index samples, Index m, double gamma, std::uint64_t seed) {
  if (samples < 1 || m < 1) throw ArgumentError("reweight needs samples, m >= 1");
  std::mt19937_64 rng(seed);
  Vec r(samples), b(samples);
  for (Index i = 0; i < samples; ++i) {
    r[i] = uniform(rng, 1.0, 2.0);
    b[i] = uniform(rng, 0.5, 1.5);
  }
  Mat H = gaussian_matrix(rng, m, samples);
  Vec target = gaussian_vector(rng, samples);
  return make_reweight_from(r, b, H, target, gamma, 0.1);
}

// ---- MAML sinusoid ----------------------------------------------------------

Vec Maml::basis(double x) {
  Vec v(5);
  v << std::sin(x), std::cos(x), std::sin(2 * x), std::cos(2 * x), 1.0;
  return v;
}

Mat Maml::design(const Vec& x) {
  Mat Psi(x.size(), 5);
  for (Index i = 0; i < x.size(); ++i) Psi.row(i) = basis(x[i]).transpose();
  return Psi;
}

double Maml::loss(const Vec& w, const Vec& x, const Vec& y) {
  return 0.5 * (design(x) * w - y).squaredNorm() / double(x.size());
}

Vec Maml::loss_grad(const Vec& w, const Vec& x, const Vec& y) {
  const Mat Psi = design(x);
  return Psi.transpose() * (Psi * w - y) / double(x.size());
}

Vec Maml::adapt(const Vec& init, const SinusoidTask& task, Index steps, double step) {
  Vec w = init;
  for (Index k = 0; k < steps; ++k) w -= step * loss_grad(w, task.x_train, task.y_train);
  return w;
}

SinusoidTask Maml::sample_task(std::uint64_t seed, Index shots, Index queries) {
  std::mt19937_64 rng(seed);
  SinusoidTask t;
  t.amplitude = uniform(rng, 0.8, 1.6);
  t.phase = uniform(rng, 0.0, std::numbers::pi / 3);
  const double offset = uniform(rng, 0.5, 1.0);
  auto draw = [&](Index count, Vec& x, Vec& y) {
    x.resize(count);
    y.resize(count);
    for (Index i = 0; i < count; ++i) {
      x[i] = uniform(rng, -std::numbers::pi, std::numbers::pi);
      y[i] = t.amplitude * std::sin(x[i] + t.phase) + offset;
    }
  };
  draw(shots, t.x_train, t.y_train);
  draw(queries, t.x_val, t.y_val);
  return t;
}

Maml make_maml_sinusoid(Index tasks, Index shots, Index K, std::uint64_t seed, double task_step) {
  if (tasks < 1 || shots < 1 || K < 0) throw ArgumentError("maml needs tasks, shots >= 1 and K >= 0");
  Maml out;
  out.shots = shots;
  out.K = K;
  out.task_step = task_step;
  for (Index i = 0; i < tasks; ++i) {
    out.tasks.push_back(Maml::sample_task(mix_seed(seed, static_cast<std::uint64_t>(i)), shots, shots));
  }
  struct Quad {
    Mat H;
    Vec b;
    double c;
  };
  struct Data {
    std::vector<Quad> train, val;
  };
  auto D = std::make_shared<Data>();
  auto quad = [](const Vec& x, const Vec& y) {
    const Mat Psi = Maml::design(x);
    const double s = double(x.size());
    return Quad{Psi.transpose() * Psi / s, Psi.transpose() * y / s, 0.5 * y.squaredNorm() / s};
  };
  for (const auto& t : out.tasks) {
    D->train.push_back(quad(t.x_train, t.y_train));
    D->val.push_back(quad(t.x_val, t.y_val));
  }
  constexpr Index p = 5;
  const Index N = tasks;
  auto value = [](const Quad& q, const Vec& w) { return 0.5 * w.dot(q.H * w) - q.b.dot(w) + q.c; };
  auto grad = [](const Quad& q, const Vec& w) -> Vec { return q.H * w - q.b; };
  auto block = [](const Vec& v, Index i) { return v.segment(i * p, p); };

  TestProblem& tp = out.test;
  Problem& P = tp.problem;
  P.name = "maml_sinusoid";
  P.dim_theta = p;
  P.dim_phi = p * N;
  P.num_samples = N;
  P.upper_value = [D, N, value, block](const Vec& th, const Vec& ph, Batch b) {
    return batch_mean(N, b, [&](Index i) { return value(D->val[i], th + block(ph, i)); });
  };
  P.upper_grad_theta = [D, N, grad, block](const Vec& th, const Vec& ph, Batch b) -> Vec {
    return batch_mean(N, b, [&](Index i) -> Vec { return grad(D->val[i], th + block(ph, i)); });
  };
  P.upper_grad_phi = [D, N, grad, block](const Vec& th, const Vec& ph, Batch b) -> Vec {
    const Index count = batch_count(N, b);
    Vec out_v = Vec::Zero(p * N);
    for (Index k = 0; k < count; ++k) {
      const Index i = batch_at(b, k);
      out_v.segment(i * p, p) += grad(D->val[i], th + block(ph, i)) / double(count);
    }
    return out_v;
  };
  P.lower_value = [D, N, value, block](const Vec& th, const Vec& ph, Batch b) {
    return batch_mean(N, b, [&](Index i) { return value(D->train[i], th + block(ph, i)); });
  };
  P.lower_grad_phi = [D, N, grad, block](const Vec& th, const Vec& ph, Batch b) -> Vec {
    const Index count = batch_count(N, b);
    Vec out_v = Vec::Zero(p * N);
    for (Index k = 0; k < count; ++k) {
      const Index i = batch_at(b, k);
      out_v.segment(i * p, p) += grad(D->train[i], th + block(ph, i)) / double(count);
    }
    return out_v;
  };
  P.lower_grad_theta = [D, N, grad, block](const Vec& th, const Vec& ph, Batch b) -> Vec {
    return batch_mean(N, b, [&](Index i) -> Vec { return grad(D->train[i], th + block(ph, i)); });
  };
  P.lower_hvp_phiphi = [D, N, block](const Vec&, const Vec&, const Vec& v, Batch b) -> Vec {
    const Index count = batch_count(N, b);
    Vec out_v = Vec::Zero(p * N);
    for (Index k = 0; k < count; ++k) {
      const Index i = batch_at(b, k);
      out_v.segment(i * p, p) += D->train[i].H * block(v, i) / double(count);
    }
    return out_v;
  };
  P.lower_cross_jvp = [D, N, block](const Vec&, const Vec&, const Vec& v, Batch b) -> Vec {
    return batch_mean(N, b, [&](Index i) -> Vec { return D->train[i].H * block(v, i); });
  };
  double L = 0;
  for (const auto& q : D->train) {
    L = std::max(L, Eigen::SelfAdjointEigenSolver<Mat>(q.H, Eigen::EigenvaluesOnly).eigenvalues().maxCoeff());
  }
  tp.lower_beta = std::min(task_step, 1.0 / L) * double(N);
  tp.theta0 = Vec::Zero(p);
  tp.engines = {"gu", "if"};
  return out;
}

// ---- Fast-BAT toy -----------------------------------------------------------

BatData make_bat_data(Index N, Index d, double eta, std::uint64_t seed) {
  if (N < 1 || d < 2) throw ArgumentError("fastbat data needs N >= 1, d >= 2");
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution coin(0.5), flip(0.05);
  std::normal_distribution<double> normal(0.0, 1.0);
  BatData data;
  data.X.resize(N, d);
  data.y.resize(N);
  for (Index i = 0; i < N; ++i) {
    const double y = coin(rng) ? 1.0 : -1.0;
    data.y[i] = y;
    data.X(i, 0) = flip(rng) ? -2.0 * y : 2.0 * y;
    for (Index j = 1; j < d; ++j) data.X(i, j) = eta * y + normal(rng);
  }
  return data;
}

double robust_accuracy(const Vec& theta, const BatData& data, double epsilon) {
  const Vec s = theta.unaryExpr([](double v) { return double((v > 0) - (v < 0)); });
  Index correct = 0;
  for (Index i = 0; i < data.X.rows(); ++i) {
    const Vec x = data.X.row(i).transpose() - epsilon * data.y[i] * s;
    if (data.y[i] * theta.dot(x) > 0) ++correct;
  }
  return double(correct) / double(data.X.rows());
}

Vec FastBat::attack(const Vec& theta) const {
  const Index N = X.rows();
  const Index d = X.cols();
  Vec delta(N * d);
  for (Index i = 0; i < N; ++i) {
    const double s0 = sigmoid(-y[i] * theta.dot(X.row(i).transpose()));
    const Vec q = -y[i] * s0 * theta;  // grad_x of the logistic loss
    delta.segment(i * d, d) = (q / gamma).cwiseMax(-epsilon).cwiseMin(epsilon);
  }
  return delta;
}

FastBat make_fastbat_from(BatData data, double epsilon, double gamma) {
  if (epsilon < 0) throw ArgumentError("fastbat epsilon must be >= 0");
  if (!(gamma > 0)) throw ArgumentError("fastbat gamma must be > 0");
  FastBat out;
  out.X = std::move(data.X);
  out.y = std::move(data.y);
  out.epsilon = epsilon;
  out.gamma = gamma;
  const Index N = out.X.rows();
  const Index d = out.X.cols();
  auto D = std::make_shared<FastBat>(out);
  const double inv_n = 1.0 / double(N);

  TestProblem& tp = out.test;
  Problem& p = tp.problem;
  p.name = "fastbat_toy";
  p.dim_theta = d;
  p.dim_phi = N * d;
  auto point = [D, d](const Vec& dl, Index i) -> Vec {
    return D->X.row(i).transpose() + dl.segment(i * d, d);
  };
  p.upper_value = [D, N, inv_n, point](const Vec& th, const Vec& dl, Batch) {
    double sum = 0;
    for (Index i = 0; i < N; ++i) sum += log1p_exp(-D->y[i] * th.dot(point(dl, i)));
    return inv_n * sum + 0.5 * D->ridge * th.squaredNorm();
  };
  p.upper_grad_theta = [D, N, inv_n, point](const Vec& th, const Vec& dl, Batch) -> Vec {
    Vec g = D->ridge * th;
    for (Index i = 0; i < N; ++i) {
      const Vec u = point(dl, i);
      g -= inv_n * D->y[i] * sigmoid(-D->y[i] * th.dot(u)) * u;
    }
    return g;
  };
  p.upper_grad_phi = [D, N, d, inv_n, point](const Vec& th, const Vec& dl, Batch) -> Vec {
    Vec g(N * d);
    for (Index i = 0; i < N; ++i) {
      g.segment(i * d, d) = -inv_n * D->y[i] * sigmoid(-D->y[i] * th.dot(point(dl, i))) * th;
    }
    return g;
  };
  // Linearized attack objective at delta_0 = 0:
  //   g = (1/N) sum_i [ -q_i(theta)' delta_i + gamma/2 ||delta_i||^2 ],  q_i = grad_x loss_i.
  auto s0 = [D](const Vec& th, Index i) { return sigmoid(-D->y[i] * th.dot(D->X.row(i).transpose())); };
  p.lower_value = [D, N, d, inv_n, s0](const Vec& th, const Vec& dl, Batch) {
    double sum = 0;
    for (Index i = 0; i < N; ++i) {
      const auto di = dl.segment(i * d, d);
      sum += D->y[i] * s0(th, i) * th.dot(di) + 0.5 * D->gamma * di.squaredNorm();
    }
    return inv_n * sum;
  };
  p.lower_grad_phi = [D, N, d, inv_n, s0](const Vec& th, const Vec& dl, Batch) -> Vec {
    Vec g(N * d);
    for (Index i = 0; i < N; ++i) {
      g.segment(i * d, d) = inv_n * (D->y[i] * s0(th, i) * th + D->gamma * dl.segment(i * d, d));
    }
    return g;
  };
  // d/dtheta of (1/N) sum_i -q_i' v_i, shared by the theta-gradient (v = delta).
  auto mixed = [D, N, d, inv_n, s0](const Vec& th, const Vec& v) -> Vec {
    Vec g = Vec::Zero(d);
    for (Index i = 0; i < N; ++i) {
      const double s = s0(th, i);
      const auto vi = v.segment(i * d, d);
      g += inv_n * (D->y[i] * s * vi - th.dot(vi) * s * (1 - s) * D->X.row(i).transpose());
    }
    return g;
  };
  p.lower_grad_theta = [mixed](const Vec& th, const Vec& dl, Batch) -> Vec { return mixed(th, dl); };
  p.lower_hvp_phiphi = [D, inv_n](const Vec&, const Vec&, const Vec& v, Batch) -> Vec {
    return inv_n * D->gamma * v;
  };
  p.lower_cross_jvp = [mixed](const Vec& th, const Vec&, const Vec& v, Batch) -> Vec { return mixed(th, v); };
  p.lower_set = ConstraintSet<double>::box(N * d, -epsilon, epsilon);
  if (epsilon == 0) {
    p.solution_map = SolutionMap<double>{
        [N, d](const Vec&) -> Vec { return Vec::Zero(N * d); },
        [d](const Vec&, const Vec&) -> Vec { return Vec::Zero(d); }};
  }
  tp.phi_star = [D](const Vec& th) -> Vec { return D->attack(th); };
  tp.lower_beta = double(N) / gamma;
  tp.theta0 = Vec::Zero(d);
  tp.engines = {"if_constrained"};
  if (epsilon == 0) tp.engines.push_back("analytic");
  tp.smooth = false;
  return out;
}

FastBat make_fastbat_toy(Index N, Index d, double epsilon, double gamma, std::uint64_t seed, double eta) {
  return make_fastbat_from(make_bat_data(N, d, eta, seed), epsilon, gamma);
}

// ---- BiP toy ----------------------------------------------------------------

Vec Bip::diagonal_ig(const Vec& mask, const Vec& phi) const {
  const Vec grad_z = quadratic ? Vec(mask.cwiseProduct(phi) - z_target) : a;
  return -grad_z / gamma;
}

Bip make_bip_toy(Index n, double gamma, std::uint64_t seed, bool quadratic) {
  if (n < 1) throw ArgumentError("bip needs n >= 1");
  if (!(gamma > 0)) throw ArgumentError("bip gamma must be > 0");
  std::mt19937_64 rng(seed);
  Bip out;
  out.a = gaussian_vector(rng, n);
  out.z_target = gaussian_vector(rng, n);
  out.z_val = gaussian_vector(rng, n);
  out.gamma = gamma;
  out.quadratic = quadratic;
  auto D = std::make_shared<Bip>(out);

  TestProblem& tp = out.test;
  Problem& p = tp.problem;
  p.name = "bip_toy";
  p.dim_theta = n;
  p.dim_phi = n;
  p.upper_value = [D](const Vec& m, const Vec& ph, Batch) {
    return 0.5 * (m.cwiseProduct(ph) - D->z_val).squaredNorm();
  };
  p.upper_grad_theta = [D](const Vec& m, const Vec& ph, Batch) -> Vec {
    return ph.cwiseProduct(m.cwiseProduct(ph) - D->z_val);
  };
  p.upper_grad_phi = [D](const Vec& m, const Vec& ph, Batch) -> Vec {
    return m.cwiseProduct(m.cwiseProduct(ph) - D->z_val);
  };
  if (quadratic) {
    p.lower_value = [D](const Vec& m, const Vec& ph, Batch) {
      return 0.5 * (m.cwiseProduct(ph) - D->z_target).squaredNorm() + 0.5 * D->gamma * ph.squaredNorm();
    };
    p.lower_grad_phi = [D](const Vec& m, const Vec& ph, Batch) -> Vec {
      return m.cwiseProduct(m.cwiseProduct(ph) - D->z_target) + D->gamma * ph;
    };
    p.lower_grad_theta = [D](const Vec& m, const Vec& ph, Batch) -> Vec {
      return ph.cwiseProduct(m.cwiseProduct(ph) - D->z_target);
    };
    p.lower_hvp_phiphi = [D](const Vec& m, const Vec&, const Vec& v, Batch) -> Vec {
      return m.cwiseAbs2().cwiseProduct(v) + D->gamma * v;
    };
    p.lower_cross_jvp = [D](const Vec& m, const Vec& ph, const Vec& v, Batch) -> Vec {
      return (2 * m.cwiseProduct(ph) - D->z_target).cwiseProduct(v);
    };
    tp.phi_star = [D](const Vec& m) -> Vec {
      return m.cwiseProduct(D->z_target).cwiseQuotient((m.cwiseAbs2().array() + D->gamma).matrix());
    };
    tp.hypergrad = [D](const Vec& m) -> Vec {
      const Vec den = m.cwiseAbs2().array() + D->gamma;
      const Vec phi = m.cwiseProduct(D->z_target).cwiseQuotient(den);
      const Vec dphi = D->z_target.cwiseProduct((D->gamma - m.cwiseAbs2().array()).matrix())
                           .cwiseQuotient(den.cwiseAbs2());
      const Vec r = m.cwiseProduct(phi) - D->z_val;
      return phi.cwiseProduct(r) + dphi.cwiseProduct(m.cwiseProduct(r));
    };
    tp.lower_beta = 1.0 / (1.0 + gamma);
  } else {
    p.lower_value = [D](const Vec& m, const Vec& ph, Batch) {
      return D->a.dot(m.cwiseProduct(ph)) + 0.5 * D->gamma * ph.squaredNorm();
    };
    p.lower_grad_phi = [D](const Vec& m, const Vec& ph, Batch) -> Vec {
      return D->a.cwiseProduct(m) + D->gamma * ph;
    };
    p.lower_grad_theta = [D](const Vec&, const Vec& ph, Batch) -> Vec { return D->a.cwiseProduct(ph); };
    p.lower_hvp_phiphi = [D](const Vec&, const Vec&, const Vec& v, Batch) -> Vec { return D->gamma * v; };
    p.lower_cross_jvp = [D](const Vec&, const Vec&, const Vec& v, Batch) -> Vec {
      return D->a.cwiseProduct(v);
    };
    tp.phi_star = [D](const Vec& m) -> Vec { return -D->a.cwiseProduct(m) / D->gamma; };
    tp.hypergrad = [D](const Vec& m) -> Vec {
      const Vec phi = -D->a.cwiseProduct(m) / D->gamma;
      const Vec r = m.cwiseProduct(phi) - D->z_val;
      return phi.cwiseProduct(r) - (D->a / D->gamma).cwiseProduct(m.cwiseProduct(r));
    };
    tp.lower_beta = 1.0 / gamma;
  }
  p.upper_set = ConstraintSet<double>::budget_box(Vec::Ones(n), 0.5 * double(n));
  tp.theta0 = Vec::Constant(n, 0.5);
  tp.engines = {"if", "gu", "vf"};
  return out;
}

// ---- IRM with consensus heads -----------------------------------------------

Vec consensus_project(const Vec& heads, Index E) {
  if (E < 1 || heads.size() % E != 0) throw ArgumentError("heads must split into E equal blocks");
  const Index p = heads.size() / E;
  Vec mean = Vec::Zero(p);
  for (Index e = 0; e < E; ++e) mean += heads.segment(e * p, p);
  mean /= double(E);
  return mean.replicate(E, 1);
}

Irm make_irm_consensus(Index E, Index d, std::uint64_t seed, double penalty, Index samples_per_env) {
  if (E < 1 || d < 2 || samples_per_env < 2) throw ArgumentError("irm needs E >= 1, d >= 2, samples >= 2");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Irm out;
  out.penalty = penalty;
  out.invariant_feature = 0;
  for (Index e = 0; e < E; ++e) {
    Vec corr(d);
    for (Index j = 1; j < d; ++j) corr[j] = uniform(rng, -0.5, 2.0);
    Mat X(samples_per_env, d);
    Vec y(samples_per_env);
    for (Index i = 0; i < samples_per_env; ++i) {
      const double inv = normal(rng);
      y[i] = inv + 0.5 * normal(rng);
      X(i, 0) = inv;
      for (Index j = 1; j < d; ++j) X(i, j) = corr[j] * y[i] + 0.3 * normal(rng);
    }
    const double s = double(samples_per_env);
    out.sigma.push_back(X.transpose() * X / s);
    out.cross.push_back(X.transpose() * y / s);
    out.y2.push_back(y.squaredNorm() / s);
  }
  auto D = std::make_shared<Irm>(out);
  const double inv_e = 1.0 / double(E);
  auto head_mean = [inv_e](const Vec& ph) { return ph.sum() * inv_e; };

  TestProblem& tp = out.test;
  Problem& p = tp.problem;
  p.name = "irm_consensus";
  p.dim_theta = d;
  p.dim_phi = E;
  // loss_e(phi theta) = 1/2 phi^2 a_e - phi c_e + 1/2 E[y^2], a_e = theta'S_e theta, c_e = theta'b_e.
  p.upper_value = [D, E, head_mean](const Vec& th, const Vec& ph, Batch) {
    const double w = head_mean(ph);
    double f = 0;
    for (Index e = 0; e < E; ++e) {
      const double a = th.dot(D->sigma[e] * th);
      const double c = th.dot(D->cross[e]);
      const double stat = w * a - c;
      f += 0.5 * w * w * a - w * c + 0.5 * D->y2[e] + D->penalty * stat * stat;
    }
    return f;
  };
  p.upper_grad_theta = [D, E, head_mean](const Vec& th, const Vec& ph, Batch) -> Vec {
    const double w = head_mean(ph);
    Vec g = Vec::Zero(th.size());
    for (Index e = 0; e < E; ++e) {
      const Vec St = D->sigma[e] * th;
      const double stat = w * th.dot(St) - th.dot(D->cross[e]);
      g += w * w * St - w * D->cross[e] + 2 * D->penalty * stat * (2 * w * St - D->cross[e]);
    }
    return g;
  };
  p.upper_grad_phi = [D, E, head_mean, inv_e](const Vec& th, const Vec& ph, Batch) -> Vec {
    const double w = head_mean(ph);
    double dw = 0;
    for (Index e = 0; e < E; ++e) {
      const double a = th.dot(D->sigma[e] * th);
      const double stat = w * a - th.dot(D->cross[e]);
      dw += stat + 2 * D->penalty * stat * a;
    }
    return Vec::Constant(E, dw * inv_e);
  };
  p.lower_value = [D, E](const Vec& th, const Vec& ph, Batch) {
    double g = 0;
    for (Index e = 0; e < E; ++e) {
      g += 0.5 * ph[e] * ph[e] * th.dot(D->sigma[e] * th) - ph[e] * th.dot(D->cross[e]) + 0.5 * D->y2[e];
    }
    return g;
  };
  p.lower_grad_phi = [D, E](const Vec& th, const Vec& ph, Batch) -> Vec {
    Vec g(E);
    for (Index e = 0; e < E; ++e) g[e] = ph[e] * th.dot(D->sigma[e] * th) - th.dot(D->cross[e]);
    return g;
  };
  p.lower_grad_theta = [D, E](const Vec& th, const Vec& ph, Batch) -> Vec {
    Vec g = Vec::Zero(th.size());
    for (Index e = 0; e < E; ++e) g += ph[e] * ph[e] * (D->sigma[e] * th) - ph[e] * D->cross[e];
    return g;
  };
  p.lower_hvp_phiphi = [D, E](const Vec& th, const Vec&, const Vec& v, Batch) -> Vec {
    Vec h(E);
    for (Index e = 0; e < E; ++e) h[e] = th.dot(D->sigma[e] * th) * v[e];
    return h;
  };
  p.lower_cross_jvp = [D, E](const Vec& th, const Vec& ph, const Vec& v, Batch) -> Vec {
    Vec g = Vec::Zero(th.size());
    for (Index e = 0; e < E; ++e) g += v[e] * (2 * ph[e] * (D->sigma[e] * th) - D->cross[e]);
    return g;
  };
  p.upper_set = ConstraintSet<double>::box(d, -1.0, 1.0);
  tp.phi_star = [D, E](const Vec& th) -> Vec {
    Vec h(E);
    for (Index e = 0; e < E; ++e) h[e] = th.dot(D->cross[e]) / th.dot(D->sigma[e] * th);
    return h;
  };
  double L = 0;
  for (const auto& S : out.sigma) {
    L = std::max(L, Eigen::SelfAdjointEigenSolver<Mat>(S, Eigen::EigenvaluesOnly).eigenvalues().maxCoeff());
  }
  tp.lower_beta = 1.0 / (double(d) * L);
  tp.theta0 = Vec::Constant(d, 0.5);
  tp.engines = {"gu", "if"};
  return out;
}

}  // namespace blo::testbed
