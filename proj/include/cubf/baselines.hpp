#pragma once

#include <cstdint>
#include <functional>
#include <utility>

#include "cubf/dynamics.hpp"
#include "cubf/measure.hpp"

namespace cubf {

struct GaussianState {
  VectorXd mean;
  MatrixXd cov;  // symmetric PSD
};

// Symmetrize and clamp round-off negatives; eigenvalues below -1e-12 are a
// numerical_error (the state is no longer a covariance).
MatrixXd symmetrize_psd(const MatrixXd& C);

// One predict/update cycle of the Kalman filter for the linear-Gaussian model
// with identity observation map: returns (prior, posterior).
std::pair<GaussianState, GaussianState> kalman_step(const GaussianState& state,
                                                    const LinearGaussianModel& model,
                                                    double T, const VectorXd& y);

struct RiccatiSteady {
  MatrixXd C_pred, C_post;
  int iterations = 0;
};

// Fixed point of the Riccati predict/update recursion (successive Frobenius
// change < 1e-14); the steady covariances make the filter n-independent.
RiccatiSteady riccati_steady(const LinearGaussianModel& model, double T);

// Observation placed D prior standard deviations from the prior mean on every
// axis: y = mean + D * sqrt(diag(C_pred)), prior the steady-state prediction.
struct Scenario {
  GaussianState prior;
  double D = 0.0;
  double R = 0.0;
  VectorXd y;
};
Scenario make_scenario(const LinearGaussianModel& model, double T, double D);

// Frequencies of the stationary innovation exceeding c prior standard
// deviations on all axes simultaneously, c = 0,1,2,3.
struct ScenarioStats {
  double frac0 = 0, frac1 = 0, frac2 = 0, frac3 = 0;
  std::int64_t draws = 0;
};
ScenarioStats scenario_stats(const LinearGaussianModel& model, double T,
                             std::int64_t draws, std::uint64_t seed);

// Monte Carlo posterior baselines.  No resampling anywhere: SIR reweights
// exact prior draws, SISR uses the optimal proposal from exact previous
// posterior draws, direct sampling draws from the exact posterior.
DiscreteMeasure direct_posterior(const GaussianState& post, int M, std::uint64_t seed);
DiscreteMeasure sir_posterior(const GaussianState& prior,
                              const std::function<double(const VectorXd&)>& g, int M,
                              std::uint64_t seed);
// Optimal-proposal parameters p(x_n | x_{n-1}, y) for the linear model:
// covariance (Q^-1 + R^-1)^-1, mean Sigma (Q^-1 F x_prev + R^-1 y).
GaussianState sisr_proposal(const MatrixXd& F, const MatrixXd& Q, const MatrixXd& R,
                            const VectorXd& x_prev, const VectorXd& y);
DiscreteMeasure sisr_posterior(const GaussianState& prev_post,
                               const LinearGaussianModel& model, double T,
                               const VectorXd& y, int M, std::uint64_t seed);

// Dense order-p moment tensor over N^p index tuples; entries are exactly
// permutation-symmetric (each canonical value is computed once and copied).
struct MomentTensor {
  int N = 0, p = 0;
  VectorXd entries;  // flat index i_1 N^{p-1} + ... + i_p
  double at(const std::vector<int>& idx) const;
};
MomentTensor central_moments(const DiscreteMeasure& mu, int p);
MomentTensor gaussian_central_moments(const GaussianState& s, int p);  // p <= 4, Isserlis
double tensor_l2(const MomentTensor& t);

// Relative L2 moment error against the Gaussian truth.  p=1 compares raw
// means; p=3 has a zero truth tensor, so the defect is normalized by
// ||C^2||^(3/2) instead (scale-free substitute, flagged in all outputs).
double moment_rmse(const DiscreteMeasure& approx, const GaussianState& truth, int p);

}  // namespace cubf
