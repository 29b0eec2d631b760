#pragma once

#include <string>
#include <vector>

#include "cubf/baselines.hpp"
#include "cubf/cubature.hpp"
#include "cubf/dynamics.hpp"
#include "cubf/measure.hpp"
#include "cubf/propagate.hpp"

namespace cubf {

// Observation likelihood x -> N(y; x, R); the test function the filters
// integrate and reweight by.
struct GaussianLikelihood {
  VectorXd y;
  MatrixXd R;
  double operator()(const VectorXd& x) const;
};

// Heat-kernel smoothing of a Gaussian likelihood under the linear model:
// integrating the transition over a horizon t collapses to the closed form
// (P_t g)(x) = N(y; F_t x, Q_t + R), so intermediate-time functionals of the
// filters are evaluated exactly rather than by nested quadrature.
class SmoothedLikelihood {
 public:
  SmoothedLikelihood(const LinearGaussianModel& model, double t, const VectorXd& y,
                     const MatrixXd& R);
  double operator()(const VectorXd& x) const;
  // (mu, P_t g): deterministically ordered weighted sum over the atoms.
  double integral(const DiscreteMeasure& mu) const;
  // Peak value over x; defect tolerances are measured relative to it so that
  // they mean the same thing at every noise level and horizon.
  double sup() const;

 private:
  MatrixXd F_;
  VectorXd y_;
  Eigen::LLT<MatrixXd> llt_;
  double lognorm_ = 0.0;
};

// Interval partition 0 = t_0 < ... < t_k = T driving one filter step.
struct PartitionSchedule {
  VectorXd t;
  std::string kind;  // "kusuoka" or "adaptive"
  int k() const { return static_cast<int>(t.size()) - 1; }
};

// t_j = T (1 - (1 - j/k)^gamma): step sizes shrink toward the terminal time
// for gamma > 1, where the semigroup loses smoothing; gamma = 1 is uniform.
PartitionSchedule kusuoka_partition(double T, int k, double gamma);

// Propagation backend over the linear model: either the flow-level cubature
// step of degree m (3 or 5 on a 3-d driver) or its Gauss-Hermite counterpart
// of odd degree m, both exposed as per-step affine atom maps.
class Propagator {
 public:
  static Propagator klv(const LinearGaussianModel& model, int m);
  static Propagator ghc(const LinearGaussianModel& model, int m);

  AffineAtomMaps maps(double dt) const;
  const LinearGaussianModel& model() const { return model_; }
  int degree() const { return m_; }
  bool gauss_hermite() const { return ghc_; }
  int fanout() const;  // children per atom of one step

 private:
  Propagator(const LinearGaussianModel& model, int m, bool use_ghc);
  LinearGaussianModel model_;
  int m_ = 5;
  bool ghc_ = false;
  CubatureFormulaWiener formula_;  // unused for the Gauss-Hermite backend
};

// Largest-first step search: repeatedly take the longest step s from t such
// that the one-step operator still reproduces the smoothed likelihoods at
// T - t - s within eps relative to their peak, measured on a fixed probe grid
// of states and observation offsets.  Throws numerical_error if eps forces
// steps below 1e-6 T.
PartitionSchedule adaptive_partition(const Propagator& prop, double T, double eps);

// Bayes reweighting: atom weights scaled by g and renormalized with a
// deterministic sum.  Throws numerical_error if the total mass underflows.
DiscreteMeasure rew(const DiscreteMeasure& mu, const GaussianLikelihood& g);

struct FilterParams {
  int m = 5;                   // propagation degree
  int r = 5;                   // recombination matching degree
  double eps = 1e-3;           // one-step operator tolerance
  double theta = -1.0;         // recombination tolerance; < 0 picks the default
  double leap_fraction = 0.3;  // target share of atoms leaping per split
  double gamma = 6.0;          // kusuoka exponent for fixed schedules
  int k = 0;                   // fixed step count; 0 selects the adaptive schedule
  int n_max = 8;               // finest patch level the recombination may reach
  bool ghc = false;            // Gauss-Hermite backend instead of cubature
  bool formula_split = false;  // alternative split orientation (see spl)
  bool one_shot_deposit = false;  // deposit leapers by the direct push instead
  double resolved_theta() const {
    return theta >= 0.0 ? theta : (ghc ? 0.2 : 0.3) * eps;
  }
};

// Per-step instrumentation of one filter update.
struct StepDiagnostics {
  int k = 0;                     // partition steps actually used
  std::vector<int> patches;      // occupied patches per recombination call
  std::vector<int> rec_level;    // winning partition level per call
  std::vector<int> support;      // atom count after each recombination
  std::vector<int> leaps;        // leaping atoms per intermediate step
  double rec_ms = 0.0;           // wall time spent inside recombination
  int max_patches() const;
};

struct FilterResult {
  DiscreteMeasure prior;  // predicted measure at the observation time
  DiscreteMeasure post;   // reweighted by the observation likelihood
  StepDiagnostics diag;
};

// Recombination control shared by the prediction sweeps: the defect of a
// candidate reduction is measured against the peak-normalized smoothed
// likelihoods of the family ys (all sharing R) at the remaining horizon.
struct RecControl {
  int r = 5;
  double theta = 0.0;
  int n_max = 8;
  bool enabled = true;
  std::vector<VectorXd> ys;
  MatrixXd R;
};

// REC/KLV alternation along the schedule: recombine (when the support exceeds
// the moment count), then push through the one-step maps; no recombination
// after the final step.  Throws numerical_error if theta is unattainable at
// the finest level.
DiscreteMeasure predict_sequence(const DiscreteMeasure& mu0, const Propagator& prop,
                                 const PartitionSchedule& sched, const RecControl& rc,
                                 StepDiagnostics* diag = nullptr);

// Splitting control: a fixed split tolerance tau, or (tau < 0) the empirical
// defect quantile at leap_fraction clamped by the ceiling 0.1 eps.
struct SplControl {
  double tau = -1.0;
  double leap_fraction = 0.3;
  double eps = 1e-3;
  bool one_shot_deposit = false;  // push leapers directly to T instead
  bool flipped = false;           // alternative orientation: disagreers leap
};

// Outcome of one split at step j: `leap` is already pushed to the terminal
// time, `cont` has taken the single step to t_j; either side may be empty.
struct SplResult {
  DiscreteMeasure leap;
  DiscreteMeasure cont;
  double tau = 0.0;
  int leapt = 0;
};

// Per-atom split at step j of the schedule: each atom is pushed to T in one
// shot and in two steps (via t_j); atoms whose g-integrals agree within tau
// leap (the two-step push-forward is deposited at T), the rest continue.
SplResult spl(const DiscreteMeasure& mu, int j, const PartitionSchedule& sched,
              const Propagator& prop, const GaussianLikelihood& g, const SplControl& ctl);

// One update of the patched filter: prediction from the previous posterior
// with recombination steered by a band of plausible observations, then
// reweighting by the actual one.
FilterResult pcf_step(const DiscreteMeasure& post0, const LinearGaussianModel& model,
                      double T, const GaussianLikelihood& g, const FilterParams& params);

// Adaptive variant: recombination is steered by the actual observation only,
// and intermediate steps split the support by the per-atom defect of skipping
// straight to the terminal time.  Atoms whose defect is below the split
// threshold leap (their two-step push-forward is deposited at T); the rest
// continue through the remaining schedule.  formula_split flips which side
// leaps.
FilterResult apcf_step(const DiscreteMeasure& post0, const LinearGaussianModel& model,
                       double T, const GaussianLikelihood& g, const FilterParams& params);

// Observation band used by the patched filter's recombination control:
// y = M + D sigma for D in {0, +-1, +-2, +-3}, with M the predicted mean and
// sigma the predicted per-axis spread of the pushed-forward posterior.
std::vector<VectorXd> observation_band(const LinearGaussianModel& model, double T,
                                       const VectorXd& post_mean, const MatrixXd& post_cov);

namespace serial {
DiscreteMeasure rew(const DiscreteMeasure& mu, const GaussianLikelihood& g);
}

}  // namespace cubf
