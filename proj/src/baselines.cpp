#include "cubf/baselines.hpp"

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>

namespace cubf {

MatrixXd symmetrize_psd(const MatrixXd& C) {
  MatrixXd A = 0.5 * (C + C.transpose());
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(A);
  double lo = es.eigenvalues().minCoeff();
  if (lo < -1e-12) throw numerical_error("symmetrize_psd: covariance lost definiteness");
  if (lo >= 0.0) return A;
  VectorXd ev = es.eigenvalues().cwiseMax(0.0);
  MatrixXd B = es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
  return 0.5 * (B + B.transpose());
}

static double gaussian_density(const VectorXd& x, const VectorXd& mean, const MatrixXd& cov) {
  Eigen::LLT<MatrixXd> llt(cov);
  if (llt.info() != Eigen::Success)
    throw numerical_error("gaussian_density: covariance not positive definite");
  VectorXd d = x - mean;
  double quad = d.dot(llt.solve(d));
  double logdet = 0.0;
  for (int i = 0; i < cov.rows(); ++i) logdet += std::log(llt.matrixL()(i, i));
  double n = static_cast<double>(cov.rows());
  return std::exp(-0.5 * quad - logdet - 0.5 * n * std::log(2.0 * M_PI));
}

std::pair<GaussianState, GaussianState> kalman_step(const GaussianState& state,
                                                    const LinearGaussianModel& model,
                                                    double T, const VectorXd& y) {
  model.validate();
  require(T > 0.0, "kalman_step: nonpositive step");
  require(state.mean.size() == model.N() && y.size() == model.N(),
          "kalman_step: dimension mismatch");
  auto [F, Q] = linear_exact(model, T);
  GaussianState prior;
  prior.mean = F * state.mean;
  prior.cov = symmetrize_psd(F * state.cov * F.transpose() + Q);

  MatrixXd S = prior.cov + model.R;
  Eigen::LLT<MatrixXd> llt(S);
  if (llt.info() != Eigen::Success)
    throw numerical_error("kalman_step: singular innovation covariance");
  MatrixXd K = llt.solve(prior.cov).transpose();  // C S^-1 for symmetric C, S
  GaussianState post;
  post.mean = prior.mean + K * (y - prior.mean);
  MatrixXd IK = MatrixXd::Identity(model.N(), model.N()) - K;
  post.cov = symmetrize_psd(IK * prior.cov * IK.transpose() + K * model.R * K.transpose());
  return {std::move(prior), std::move(post)};
}

static MatrixXd kalman_update_cov(const MatrixXd& C_pred, const MatrixXd& R) {
  int N = static_cast<int>(C_pred.rows());
  Eigen::LLT<MatrixXd> llt(C_pred + R);
  if (llt.info() != Eigen::Success)
    throw numerical_error("riccati_steady: singular innovation covariance");
  MatrixXd K = llt.solve(C_pred).transpose();
  MatrixXd IK = MatrixXd::Identity(N, N) - K;
  return symmetrize_psd(IK * C_pred * IK.transpose() + K * R * K.transpose());
}

RiccatiSteady riccati_steady(const LinearGaussianModel& model, double T) {
  model.validate();
  require(T > 0.0, "riccati_steady: nonpositive step");
  auto [F, Q] = linear_exact(model, T);
  MatrixXd C = Q;  // prediction from a deterministic start
  for (int it = 1; it <= 100000; ++it) {
    MatrixXd C_post = kalman_update_cov(C, model.R);
    MatrixXd C_next = symmetrize_psd(F * C_post * F.transpose() + Q);
    double change = (C_next - C).norm();
    C = C_next;
    if (change < 1e-14) return {C, kalman_update_cov(C, model.R), it};
  }
  throw numerical_error("riccati_steady: no convergence after 1e5 iterations");
}

Scenario make_scenario(const LinearGaussianModel& model, double T, double D) {
  RiccatiSteady rs = riccati_steady(model, T);
  Scenario s;
  s.prior.mean = VectorXd::Zero(model.N());
  s.prior.cov = rs.C_pred;
  s.D = D;
  s.R = model.R(0, 0);
  s.y = s.prior.mean + D * rs.C_pred.diagonal().cwiseSqrt();
  return s;
}

ScenarioStats scenario_stats(const LinearGaussianModel& model, double T,
                             std::int64_t draws, std::uint64_t seed) {
  require(draws >= 100000, "scenario_stats: need at least 1e5 draws");
  RiccatiSteady rs = riccati_steady(model, T);
  int N = model.N();
  MatrixXd A = psd_sqrt(rs.C_pred + model.R);  // stationary innovation covariance
  VectorXd sigma = rs.C_pred.diagonal().cwiseSqrt();
  Rng rng(seed);
  std::int64_t c0 = 0, c1 = 0, c2 = 0, c3 = 0;
  for (std::int64_t k = 0; k < draws; ++k) {
    VectorXd D = (A * rng.gaussian_vec(N)).cwiseQuotient(sigma).cwiseAbs();
    double lo = D.minCoeff();
    if (lo > 0.0) ++c0;
    if (lo > 1.0) ++c1;
    if (lo > 2.0) ++c2;
    if (lo > 3.0) ++c3;
  }
  double n = static_cast<double>(draws);
  return {c0 / n, c1 / n, c2 / n, c3 / n, draws};
}

DiscreteMeasure direct_posterior(const GaussianState& post, int M, std::uint64_t seed) {
  require(M >= 1, "direct_posterior: need at least one sample");
  int N = static_cast<int>(post.mean.size());
  MatrixXd A = psd_sqrt(post.cov);
  Rng rng(seed);
  DiscreteMeasure mu;
  mu.points.resize(N, M);
  mu.weights = VectorXd::Constant(M, 1.0 / M);
  for (int i = 0; i < M; ++i) mu.points.col(i) = post.mean + A * rng.gaussian_vec(N);
  return mu;
}

static void normalize_or_throw(DiscreteMeasure& mu, const char* who) {
  double total = det_sum(static_cast<std::size_t>(mu.size()),
                         [&](std::size_t i) { return mu.weights[static_cast<int>(i)]; });
  if (!std::isfinite(total) || total <= 0.0)
    throw numerical_error(std::string(who) + ": reweighted mass underflow");
  mu.weights /= total;
}

DiscreteMeasure sir_posterior(const GaussianState& prior,
                              const std::function<double(const VectorXd&)>& g, int M,
                              std::uint64_t seed) {
  DiscreteMeasure mu = direct_posterior(prior, M, seed);
  for (int i = 0; i < M; ++i) {
    double gi = g(mu.points.col(i));
    require(std::isfinite(gi) && gi >= 0.0, "sir_posterior: invalid likelihood value");
    mu.weights[i] = gi;
  }
  normalize_or_throw(mu, "sir_posterior");
  return mu;
}

GaussianState sisr_proposal(const MatrixXd& F, const MatrixXd& Q, const MatrixXd& R,
                            const VectorXd& x_prev, const VectorXd& y) {
  MatrixXd Qi = Q.inverse(), Ri = R.inverse();
  MatrixXd Sigma = (Qi + Ri).inverse();
  Sigma = 0.5 * (Sigma + Sigma.transpose());
  GaussianState s;
  s.cov = Sigma;
  s.mean = Sigma * (Qi * (F * x_prev) + Ri * y);
  return s;
}

DiscreteMeasure sisr_posterior(const GaussianState& prev_post,
                               const LinearGaussianModel& model, double T,
                               const VectorXd& y, int M, std::uint64_t seed) {
  require(M >= 1, "sisr_posterior: need at least one sample");
  auto [F, Q] = linear_exact(model, T);
  int N = model.N();
  MatrixXd A_prev = psd_sqrt(prev_post.cov);
  MatrixXd Qi = Q.inverse(), Ri = model.R.inverse();
  MatrixXd Sigma = (Qi + Ri).inverse();
  Sigma = 0.5 * (Sigma + Sigma.transpose());
  MatrixXd A_prop = psd_sqrt(Sigma);
  MatrixXd S = Q + model.R;  // innovation covariance of the weights
  Rng rng(seed);
  DiscreteMeasure mu;
  mu.points.resize(N, M);
  mu.weights.resize(M);
  for (int i = 0; i < M; ++i) {
    VectorXd x_prev = prev_post.mean + A_prev * rng.gaussian_vec(N);
    VectorXd m = Sigma * (Qi * (F * x_prev) + Ri * y);
    mu.points.col(i) = m + A_prop * rng.gaussian_vec(N);
    mu.weights[i] = gaussian_density(y, F * x_prev, S);
  }
  normalize_or_throw(mu, "sisr_posterior");
  return mu;
}

// ---------------------------------------------------------------------------
// Moment tensors

static int flat_pow(int N, int p) {
  int t = 1;
  for (int i = 0; i < p; ++i) t *= N;
  return t;
}

static std::vector<int> decode(int flat, int N, int p) {
  std::vector<int> idx(p);
  for (int k = p - 1; k >= 0; --k) {
    idx[k] = flat % N;
    flat /= N;
  }
  return idx;
}

static int encode(const std::vector<int>& idx, int N) {
  int flat = 0;
  for (int v : idx) flat = flat * N + v;
  return flat;
}

double MomentTensor::at(const std::vector<int>& idx) const {
  require(static_cast<int>(idx.size()) == p, "MomentTensor::at: wrong arity");
  return entries[encode(idx, N)];
}

// Compute each canonical (sorted) entry once and copy it to all permutations,
// so tensor symmetry holds bitwise.
template <typename EntryFn>
static MomentTensor symmetric_fill(int N, int p, EntryFn entry) {
  MomentTensor t;
  t.N = N;
  t.p = p;
  int total = flat_pow(N, p);
  t.entries.resize(total);
  for (int j = 0; j < total; ++j) {
    std::vector<int> idx = decode(j, N, p);
    std::vector<int> sorted = idx;
    std::sort(sorted.begin(), sorted.end());
    int cj = encode(sorted, N);
    t.entries[j] = (j == cj) ? entry(sorted) : t.entries[cj];
  }
  return t;
}

MomentTensor central_moments(const DiscreteMeasure& mu, int p) {
  require(p >= 1, "central_moments: order must be positive");
  mu.validate();
  int N = mu.dim();
  if (p == 1) {  // centered first moment vanishes identically
    MomentTensor t;
    t.N = N;
    t.p = 1;
    t.entries = VectorXd::Zero(N);
    return t;
  }
  VectorXd mean = mu.mean();
  return symmetric_fill(N, p, [&](const std::vector<int>& idx) {
    return det_sum(static_cast<std::size_t>(mu.size()), [&](std::size_t i) {
      int ii = static_cast<int>(i);
      double c = mu.weights[ii];
      for (int a : idx) c *= mu.points(a, ii) - mean[a];
      return c;
    });
  });
}

MomentTensor gaussian_central_moments(const GaussianState& s, int p) {
  require(p >= 1 && p <= 4, "gaussian_central_moments: order must be 1..4");
  int N = static_cast<int>(s.mean.size());
  if (p == 1 || p == 3) {
    MomentTensor t;
    t.N = N;
    t.p = p;
    t.entries = VectorXd::Zero(flat_pow(N, p));
    return t;
  }
  const MatrixXd& C = s.cov;
  if (p == 2)
    return symmetric_fill(N, 2, [&](const std::vector<int>& i) { return C(i[0], i[1]); });
  return symmetric_fill(N, 4, [&](const std::vector<int>& i) {  // Isserlis
    return C(i[0], i[1]) * C(i[2], i[3]) + C(i[0], i[2]) * C(i[1], i[3]) +
           C(i[0], i[3]) * C(i[1], i[2]);
  });
}

double tensor_l2(const MomentTensor& t) { return t.entries.norm(); }

double moment_rmse(const DiscreteMeasure& approx, const GaussianState& truth, int p) {
  require(p >= 1 && p <= 4, "moment_rmse: order must be 1..4");
  if (p == 1) {
    double den = truth.mean.norm();
    require(den > 0.0, "moment_rmse: zero reference mean");
    return (approx.mean() - truth.mean).norm() / den;
  }
  MomentTensor hat = central_moments(approx, p);
  double c2 = gaussian_central_moments(truth, 2).entries.norm();
  require(c2 > 0.0, "moment_rmse: zero reference covariance");
  if (p == 3) return tensor_l2(hat) / std::pow(c2, 1.5);
  MomentTensor ref = gaussian_central_moments(truth, p);
  MomentTensor diff = hat;
  diff.entries -= ref.entries;
  return tensor_l2(diff) / tensor_l2(ref);
}

}  // namespace cubf
