#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <numeric>

#include "cubf/baselines.hpp"
#include "cubf/propagate.hpp"

using namespace cubf;

namespace {

constexpr double kT = 0.5;

double gaussian_pdf(const VectorXd& x, const VectorXd& mean, const MatrixXd& cov) {
  VectorXd d = x - mean;
  Eigen::LLT<MatrixXd> llt(cov);
  double logdet = 0.0;
  for (int i = 0; i < cov.rows(); ++i) logdet += std::log(llt.matrixL()(i, i));
  return std::exp(-0.5 * d.dot(llt.solve(d)) - logdet -
                  0.5 * cov.rows() * std::log(2.0 * M_PI));
}

// seed-averaged rmse of a sampler over 20 seeds
template <typename Sampler>
double avg_rmse(Sampler make, const GaussianState& truth, int p) {
  double acc = 0.0;
  for (int s = 0; s < 20; ++s) acc += moment_rmse(make(s), truth, p);
  return acc / 20.0;
}

}  // namespace

TEST_CASE("kalman_step limiting behaviour") {
  LinearGaussianModel mod = ou_model(1e-2);
  GaussianState st;
  st.mean = VectorXd::LinSpaced(3, 0.3, 1.1);
  st.cov = 0.05 * MatrixXd::Identity(3, 3);
  VectorXd y(3);
  y << 0.4, -0.2, 0.9;

  // uninformative observation: posterior == prior
  mod.R = 1e12 * MatrixXd::Identity(3, 3);
  auto [prior, post] = kalman_step(st, mod, kT, y);
  CHECK((post.mean - prior.mean).norm() < 1e-6);
  CHECK((post.cov - prior.cov).norm() < 1e-6);

  // exact observation of noiseless dynamics: posterior mean -> y
  LinearGaussianModel sharp = ou_model(1e-12);
  sharp.g = 0.0;
  auto [prior2, post2] = kalman_step(st, sharp, kT, y);
  CHECK((post2.mean - y).norm() < 1e-6);
}

TEST_CASE("riccati_steady matches the closed-form reference and is a fixed point") {
  // reference diagonals computed with an independent Riccati iteration on the
  // Van Loan transition of the same model
  const double pred_ref[3][3] = {
      {1.139455815582e-01, 1.013747492765e-01, 4.580066114849e-02},
      {8.998337438111e-02, 8.442996272300e-02, 4.418456296333e-02},
      {8.600523776852e-02, 8.123366602973e-02, 4.368589174476e-02}};
  const double post_ref[3][3] = {
      {5.168053226284e-02, 4.866418623612e-02, 3.141320539133e-02},
      {8.935582130421e-03, 8.872983878387e-03, 8.154455909007e-03},
      {9.876876282201e-04, 9.869732083474e-04, 9.776215722467e-04}};
  const double Rs[3] = {1e-1, 1e-2, 1e-3};
  for (int c = 0; c < 3; ++c) {
    LinearGaussianModel mod = ou_model(Rs[c]);
    RiccatiSteady rs = riccati_steady(mod, kT);
    for (int i = 0; i < 3; ++i) {
      CHECK(rs.C_pred(i, i) == doctest::Approx(pred_ref[c][i]).epsilon(1e-8));
      CHECK(rs.C_post(i, i) == doctest::Approx(post_ref[c][i]).epsilon(1e-8));
      CHECK(rs.C_pred(i, i) > 0.03);
      CHECK(rs.C_pred(i, i) < 0.3);
    }
    // the diagonal scale of the posterior tracks R
    double mean_diag = rs.C_post.diagonal().mean();
    CHECK(mean_diag > Rs[c] / 3.0);
    CHECK(mean_diag < Rs[c] * 3.0);

    // one more full Kalman cycle leaves the covariances unchanged
    GaussianState st{VectorXd::Zero(3), rs.C_post};
    auto [prior, post] = kalman_step(st, mod, kT, VectorXd::Zero(3));
    CHECK((prior.cov - rs.C_pred).norm() < 1e-13);
    CHECK((post.cov - rs.C_post).norm() < 1e-13);
  }
}

TEST_CASE("riccati_steady collapses without process noise") {
  LinearGaussianModel mod = ou_model(1e-2);
  mod.g = 0.0;
  RiccatiSteady rs = riccati_steady(mod, kT);
  CHECK(rs.C_pred.norm() < 1e-10);
  CHECK(rs.C_post.norm() < 1e-10);
}

TEST_CASE("make_scenario places the observation exactly") {
  LinearGaussianModel mod = ou_model(1e-2);
  Scenario s = make_scenario(mod, kT, 2.0);
  CHECK(s.prior.mean.isZero(0.0));
  VectorXd expect = s.prior.mean + 2.0 * s.prior.cov.diagonal().cwiseSqrt();
  CHECK(std::memcmp(s.y.data(), expect.data(), 3 * sizeof(double)) == 0);
  CHECK(s.R == 1e-2);
}

TEST_CASE("scenario_stats reproduces the exact orthant probabilities") {
  // reference values from numerical integration of the stationary innovation
  // Gaussian over the sign orthants
  const double p1 = 4.58931701e-02, p2 = 3.75629851e-04;
  LinearGaussianModel mod = ou_model(1e-2);
  ScenarioStats st = scenario_stats(mod, kT, 1000000, 20240601);
  double n = static_cast<double>(st.draws);
  CHECK(st.frac0 == 1.0);
  CHECK(std::abs(st.frac1 - p1) < 3.0 * std::sqrt(p1 * (1 - p1) / n));
  CHECK(std::abs(st.frac2 - p2) < 3.0 * std::sqrt(p2 * (1 - p2) / n));
  CHECK(st.frac3 < 1e-5);  // exact value 5.0e-7
}

TEST_CASE("direct_posterior sampling moments") {
  LinearGaussianModel mod = ou_model(1e-2);
  Scenario sc = make_scenario(mod, kT, 1.0);
  GaussianState post = kalman_step({VectorXd::Zero(3), riccati_steady(mod, kT).C_post},
                                   mod, kT, sc.y)
                           .second;

  DiscreteMeasure one = direct_posterior(post, 1, 3);
  CHECK(one.size() == 1);
  CHECK(one.weights[0] == 1.0);

  // 1e6-sample cloud matches (M, C) within 4 standard errors
  DiscreteMeasure big = direct_posterior(post, 1000000, 4);
  VectorXd m = big.mean();
  MatrixXd C = big.covariance();
  double n = 1e6;
  for (int i = 0; i < 3; ++i) {
    CHECK(std::abs(m[i] - post.mean[i]) < 4.0 * std::sqrt(post.cov(i, i) / n));
    for (int j = 0; j < 3; ++j) {
      double se = std::sqrt((post.cov(i, i) * post.cov(j, j) + post.cov(i, j) * post.cov(i, j)) / n);
      CHECK(std::abs(C(i, j) - post.cov(i, j)) < 4.0 * se);
    }
  }

  // seed-averaged mean error decays like M^(-1/2)
  double err[3];
  int Ms[3] = {1000, 10000, 100000};
  for (int k = 0; k < 3; ++k) {
    double acc = 0.0;
    for (int s = 0; s < 20; ++s)
      acc += (direct_posterior(post, Ms[k], 100 + s).mean() - post.mean).norm();
    err[k] = acc / 20.0;
  }
  double slope = std::log(err[2] / err[0]) / std::log(100.0);
  CHECK(slope > -0.65);
  CHECK(slope < -0.35);
}

TEST_CASE("sir_posterior reweighting and Monte Carlo rate") {
  LinearGaussianModel mod = ou_model(1e-2);
  Scenario sc = make_scenario(mod, kT, 1.0);
  GaussianState kpost = kalman_step({VectorXd::Zero(3), riccati_steady(mod, kT).C_post},
                                    mod, kT, sc.y)
                            .second;

  DiscreteMeasure flat = sir_posterior(sc.prior, [](const VectorXd&) { return 7.0; }, 64, 11);
  for (int i = 0; i < 64; ++i) CHECK(flat.weights[i] == 1.0 / 64.0);

  auto lik = [&](const VectorXd& x) { return gaussian_pdf(sc.y, x, mod.R); };
  double err[3];
  int Ms[3] = {1000, 10000, 100000};
  for (int k = 0; k < 3; ++k) {
    double acc = 0.0;
    for (int s = 0; s < 20; ++s)
      acc += moment_rmse(sir_posterior(sc.prior, lik, Ms[k], 500 + s), kpost, 2);
    err[k] = acc / 20.0;
  }
  double slope = std::log(err[2] / err[0]) / std::log(100.0);
  CHECK(slope > -0.65);
  CHECK(slope < -0.35);

  // the rare-event scenario is strictly harder at fixed sample size
  Scenario sc3 = make_scenario(mod, kT, 3.0);
  GaussianState kpost3 = kalman_step({VectorXd::Zero(3), riccati_steady(mod, kT).C_post},
                                     mod, kT, sc3.y)
                             .second;
  auto lik3 = [&](const VectorXd& x) { return gaussian_pdf(sc3.y, x, mod.R); };
  double e1 = avg_rmse(
      [&](int s) { return sir_posterior(sc.prior, lik, 10000, 700 + s); }, kpost, 2);
  double e3 = avg_rmse(
      [&](int s) { return sir_posterior(sc3.prior, lik3, 10000, 700 + s); }, kpost3, 2);
  CHECK(e3 > e1);
}

TEST_CASE("sisr optimal proposal against the pointwise density product") {
  LinearGaussianModel mod = ou_model(1e-2);
  auto [F, Q] = linear_exact(mod, kT);
  Rng rng(77);
  VectorXd xp = rng.gaussian_vec(3), y = rng.gaussian_vec(3) * 0.3;
  GaussianState prop = sisr_proposal(F, Q, mod.R, xp, y);
  // N(x; Fxp, Q) N(y; x, R) / N(x; m, Sigma) must be constant in x
  double ref = 0.0;
  for (int t = 0; t < 10; ++t) {
    VectorXd x = prop.mean + 0.3 * rng.gaussian_vec(3);
    double ratio = gaussian_pdf(x, F * xp, Q) * gaussian_pdf(y, x, mod.R) /
                   gaussian_pdf(x, prop.mean, prop.cov);
    if (t == 0)
      ref = ratio;
    else
      CHECK(ratio == doctest::Approx(ref).epsilon(1e-10));
  }
  // and the constant is the marginal weight density N(y; Fxp, Q+R)
  CHECK(ref == doctest::Approx(gaussian_pdf(y, F * xp, Q + mod.R)).epsilon(1e-10));
}

TEST_CASE("sisr weights have zero variance from a degenerate previous posterior") {
  LinearGaussianModel mod = ou_model(1e-2);
  GaussianState prev{VectorXd::Constant(3, 0.2), MatrixXd::Zero(3, 3)};
  VectorXd y = VectorXd::Constant(3, 0.1);
  DiscreteMeasure mu = sisr_posterior(prev, mod, kT, y, 200, 5);
  for (int i = 0; i < 200; ++i) CHECK(mu.weights[i] == mu.weights[0]);
}

TEST_CASE("sisr at small R is comparable to direct posterior sampling") {
  LinearGaussianModel mod = ou_model(1e-3);
  Scenario sc = make_scenario(mod, kT, 1.0);
  RiccatiSteady rs = riccati_steady(mod, kT);
  GaussianState prev{VectorXd::Zero(3), rs.C_post};
  GaussianState kpost = kalman_step(prev, mod, kT, sc.y).second;
  for (int p : {2, 4}) {
    double es = avg_rmse(
        [&](int s) { return sisr_posterior(prev, mod, kT, sc.y, 10000, 900 + s); }, kpost,
        p);
    double ed = avg_rmse(
        [&](int s) { return direct_posterior(kpost, 10000, 950 + s); }, kpost, p);
    CAPTURE(p);
    CHECK(es / ed > 1.0 / 3.0);
    CHECK(es / ed < 3.0);
  }
}

TEST_CASE("moment tensors: hand values, symmetry, Gauss-Hermite cross-check") {
  DiscreteMeasure two;
  two.points.resize(1, 2);
  two.points << 0.0, 2.0;
  two.weights = VectorXd::Constant(2, 0.5);
  CHECK(two.mean()[0] == doctest::Approx(1.0));
  CHECK(central_moments(two, 2).entries[0] == doctest::Approx(1.0));
  CHECK(central_moments(two, 3).entries[0] == doctest::Approx(0.0));
  CHECK(central_moments(two, 4).entries[0] == doctest::Approx(1.0));
  CHECK(central_moments(two, 1).entries[0] == 0.0);

  GaussianState diag{VectorXd::Zero(3), VectorXd::LinSpaced(3, 1.0, 3.0).asDiagonal()};
  CHECK(tensor_l2(gaussian_central_moments(diag, 2)) ==
        doctest::Approx(std::sqrt(1.0 + 4.0 + 9.0)));

  // exact permutation symmetry on a random cloud
  Rng rng(13);
  DiscreteMeasure cloud;
  cloud.points.resize(3, 40);
  cloud.weights.resize(40);
  for (int i = 0; i < 40; ++i) {
    cloud.points.col(i) = rng.gaussian_vec(3);
    cloud.weights[i] = rng.uniform();
  }
  cloud.weights /= cloud.weights.sum();
  for (int p : {3, 4}) {
    MomentTensor t = central_moments(cloud, p);
    std::vector<int> idx = {0, 2, 1, 2};
    idx.resize(p);
    std::vector<int> perm = idx;
    std::reverse(perm.begin(), perm.end());
    CHECK(t.at(idx) == t.at(perm));
  }

  // Isserlis degree-4 tensor vs an independent degree-7 quadrature
  MatrixXd A(3, 3);
  A << 0.8, 0.2, 0.0, -0.1, 0.7, 0.3, 0.2, 0.0, 0.5;
  GaussianState g{VectorXd::LinSpaced(3, 1.0, -1.0), MatrixXd(A * A.transpose())};
  DiscreteMeasure gh = gauss_hermite_measure(g.mean, g.cov, 7);
  CHECK(gh.size() == 64);
  for (int p : {2, 3, 4}) {
    MomentTensor got = central_moments(gh, p);
    MomentTensor ref = gaussian_central_moments(g, p);
    CHECK((got.entries - ref.entries).cwiseAbs().maxCoeff() < 1e-12);
  }
  CHECK(moment_rmse(gh, g, 1) < 1e-12);
  CHECK(moment_rmse(gh, g, 2) < 1e-12);
  CHECK(moment_rmse(gh, g, 3) < 1e-12);
  CHECK(moment_rmse(gh, g, 4) < 1e-12);
}

TEST_CASE("samplers are reproducible and streams are split") {
  LinearGaussianModel mod = ou_model(1e-2);
  Scenario sc = make_scenario(mod, kT, 1.0);
  DiscreteMeasure a = direct_posterior(sc.prior, 1000, 42);
  DiscreteMeasure b = direct_posterior(sc.prior, 1000, 42);
  CHECK(std::memcmp(a.points.data(), b.points.data(), sizeof(double) * a.points.size()) == 0);
  DiscreteMeasure c = direct_posterior(sc.prior, 1000, 43);
  CHECK(std::memcmp(a.points.data(), c.points.data(), sizeof(double) * a.points.size()) != 0);
}
