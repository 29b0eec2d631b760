#include "cubf/filter.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <utility>

#include "cubf/recombine.hpp"

namespace cubf {

namespace {

double gaussian_lognorm(const Eigen::LLT<MatrixXd>& llt, int N) {
  double logdet = 0.0;
  MatrixXd L = llt.matrixL();
  for (int i = 0; i < N; ++i) logdet += std::log(L(i, i));
  return -0.5 * N * std::log(2.0 * M_PI) - logdet;
}

Eigen::LLT<MatrixXd> llt_spd(const MatrixXd& S, const char* what) {
  Eigen::LLT<MatrixXd> llt(S);
  require(llt.info() == Eigen::Success, what);
  return llt;
}

}  // namespace

double GaussianLikelihood::operator()(const VectorXd& x) const {
  require(x.size() == y.size() && R.rows() == y.size() && R.cols() == y.size(),
          "likelihood: dimension mismatch");
  Eigen::LLT<MatrixXd> llt = llt_spd(R, "likelihood: R not positive definite");
  VectorXd d = llt.matrixL().solve(y - x);
  return std::exp(gaussian_lognorm(llt, static_cast<int>(y.size())) - 0.5 * d.squaredNorm());
}

SmoothedLikelihood::SmoothedLikelihood(const LinearGaussianModel& model, double t,
                                       const VectorXd& y, const MatrixXd& R)
    : y_(y) {
  model.validate();
  require(t >= 0.0, "smoothed likelihood: negative horizon");
  require(y.size() == model.N() && R.rows() == model.N() && R.cols() == model.N(),
          "smoothed likelihood: dimension mismatch");
  auto [F, Q] = linear_exact(model, t);
  F_ = F;
  llt_ = llt_spd(Q + R, "smoothed likelihood: covariance not positive definite");
  lognorm_ = gaussian_lognorm(llt_, model.N());
}

double SmoothedLikelihood::operator()(const VectorXd& x) const {
  VectorXd d = llt_.matrixL().solve(y_ - F_ * x);
  return std::exp(lognorm_ - 0.5 * d.squaredNorm());
}

double SmoothedLikelihood::integral(const DiscreteMeasure& mu) const {
  return det_sum(static_cast<std::size_t>(mu.size()), [&](std::size_t i) {
    int j = static_cast<int>(i);
    return mu.weights[j] * (*this)(VectorXd(mu.points.col(j)));
  });
}

double SmoothedLikelihood::sup() const { return std::exp(lognorm_); }

PartitionSchedule kusuoka_partition(double T, int k, double gamma) {
  require(T > 0.0, "kusuoka partition: horizon must be positive");
  require(k >= 1, "kusuoka partition: need at least one step");
  require(gamma >= 1.0, "kusuoka partition: exponent below one");
  PartitionSchedule s;
  s.kind = "kusuoka";
  s.t.resize(k + 1);
  for (int j = 0; j <= k; ++j)
    s.t[j] = T * (1.0 - std::pow(1.0 - static_cast<double>(j) / k, gamma));
  s.t[0] = 0.0;
  s.t[k] = T;
  for (int j = 1; j <= k; ++j)
    require(s.t[j] > s.t[j - 1], "kusuoka partition: step underflow");
  return s;
}

Propagator::Propagator(const LinearGaussianModel& model, int m, bool use_ghc)
    : model_(model), m_(m), ghc_(use_ghc) {
  model_.validate();
  if (ghc_) {
    require(m >= 1 && m % 2 == 1, "propagator: degree must be odd");
  } else if (m == 3) {
    formula_ = to_flow_level(build_degree3(model_.N()));
  } else {
    require(m == 5, "propagator: cubature degree must be 3 or 5");
    require(model_.N() == 3, "propagator: the degree-5 formula drives three dimensions");
    formula_ = load_formula(std::string(CUBF_DATA_DIR) + "/wiener_d3_m5_flow.json");
  }
}

Propagator Propagator::klv(const LinearGaussianModel& model, int m) {
  return Propagator(model, m, false);
}

Propagator Propagator::ghc(const LinearGaussianModel& model, int m) {
  return Propagator(model, m, true);
}

AffineAtomMaps Propagator::maps(double dt) const {
  if (ghc_) return ghc_maps(model_, m_, dt);
  return klv_flow_maps(formula_, model_.dynamics(), dt);
}

int Propagator::fanout() const {
  if (!ghc_) return formula_.size();
  int npts = (m_ + 1) / 2, total = 1;
  for (int a = 0; a < model_.N(); ++a) total *= npts;
  return total;
}

PartitionSchedule adaptive_partition(const Propagator& prop, double T, double eps) {
  require(T > 0.0, "adaptive partition: horizon must be positive");
  require(eps > 0.0, "adaptive partition: tolerance must be positive");
  const LinearGaussianModel& model = prop.model();
  const int N = model.N();
  RiccatiSteady rs = riccati_steady(model, T);
  VectorXd sig_post = rs.C_post.diagonal().cwiseSqrt();
  VectorXd sig_pred = rs.C_pred.diagonal().cwiseSqrt();

  // Probe states span the stationary posterior (+-4 sigma per axis); probe
  // observations span the stationary prediction (0, +-1, +-2, +-3 sigma).
  std::vector<VectorXd> xs;
  int npx = 1;
  for (int a = 0; a < N; ++a) npx *= 3;
  for (int c = 0; c < npx; ++c) {
    VectorXd x(N);
    int rest = c;
    for (int a = N - 1; a >= 0; --a) {
      int ia = rest % 3;
      rest /= 3;
      x[a] = (ia - 1) * 4.0 * sig_post[a];
    }
    xs.push_back(std::move(x));
  }
  std::vector<VectorXd> ys;
  for (int D = -3; D <= 3; ++D) ys.push_back(D * sig_pred);

  // The step s from time t is feasible when the one-step operator reproduces
  // every smoothed likelihood of the probe family within eps at every probe
  // state; defects are measured relative to the smoothed likelihood's peak so
  // the tolerance is scale-free.
  auto feasible = [&](double t, double s) -> bool {
    double v = T - t;
    double u = v - s;
    if (u < 0.0) u = 0.0;
    AffineAtomMaps maps = prop.maps(s);
    for (const VectorXd& y : ys) {
      SmoothedLikelihood ex(model, v, y, model.R);
      SmoothedLikelihood ap(model, u, y, model.R);
      double scale = ex.sup();
      for (const VectorXd& x : xs) {
        double exact = ex(x);
        double sum = 0.0;
        for (int j = 0; j < maps.size(); ++j)
          sum += maps.lambda[j] * ap(VectorXd(maps.P[j] * x + maps.q[j]));
        if (!(std::abs(exact - sum) < eps * scale)) return false;
      }
    }
    return true;
  };

  std::vector<double> times{0.0};
  double t = 0.0;
  while (true) {
    double rem = T - t;
    if (feasible(t, rem)) {
      times.push_back(T);
      break;
    }
    double lo = 0.0, hi = rem;
    for (int it = 0; it < 50; ++it) {
      double mid = 0.5 * (lo + hi);
      (feasible(t, mid) ? lo : hi) = mid;
    }
    if (lo <= 1e-6 * T)
      throw numerical_error(
          "adaptive partition: step underflow (tolerance out of reach for this degree)");
    t += lo;
    times.push_back(t);
    if (times.size() > 100000)
      throw numerical_error("adaptive partition: runaway partition");
  }
  PartitionSchedule s;
  s.kind = "adaptive";
  s.t = Eigen::Map<VectorXd>(times.data(), static_cast<Eigen::Index>(times.size()));
  return s;
}

static DiscreteMeasure rew_impl(const DiscreteMeasure& mu, const GaussianLikelihood& g,
                                bool parallel) {
  mu.validate(false);
  require(g.y.size() == mu.dim() && g.R.rows() == mu.dim() && g.R.cols() == mu.dim(),
          "rew: dimension mismatch");
  Eigen::LLT<MatrixXd> llt = llt_spd(g.R, "rew: R not positive definite");
  double lognorm = gaussian_lognorm(llt, mu.dim());
  int n = mu.size();
  DiscreteMeasure out;
  out.points = mu.points;
  out.weights.resize(n);
#pragma omp parallel for schedule(static) if (parallel)
  for (int i = 0; i < n; ++i) {
    VectorXd d = llt.matrixL().solve(g.y - mu.points.col(i));
    out.weights[i] = mu.weights[i] * std::exp(lognorm - 0.5 * d.squaredNorm());
  }
  double total =
      det_sum(static_cast<std::size_t>(n), [&](std::size_t i) { return out.weights[static_cast<int>(i)]; });
  if (!(std::isfinite(total) && total > 0.0))
    throw numerical_error("rew: observation weight underflow");
  out.weights /= total;
  return out;
}

DiscreteMeasure rew(const DiscreteMeasure& mu, const GaussianLikelihood& g) {
  return rew_impl(mu, g, true);
}

namespace serial {
DiscreteMeasure rew(const DiscreteMeasure& mu, const GaussianLikelihood& g) {
  return rew_impl(mu, g, false);
}
}  // namespace serial

int StepDiagnostics::max_patches() const {
  int m = 0;
  for (int p : patches) m = std::max(m, p);
  return m;
}

// Recombine mu against the smoothed family at remaining horizon T - t_prev,
// recording diagnostics; no-op while the support is within the moment count.
// Family integrals are peak-normalized so theta carries the same meaning at
// every horizon and noise level.
static DiscreteMeasure maybe_recombine(const DiscreteMeasure& mu, const LinearGaussianModel& model,
                                       double horizon, const RecControl& rc,
                                       StepDiagnostics* diag) {
  if (!rc.enabled || mu.size() <= monomial_count(mu.dim(), rc.r)) return mu;
  std::vector<SmoothedLikelihood> fam;
  fam.reserve(rc.ys.size());
  for (const VectorXd& y : rc.ys) fam.emplace_back(model, horizon, y, rc.R);
  auto eval = [&](const DiscreteMeasure& nu) {
    VectorXd v(static_cast<Eigen::Index>(fam.size()));
    for (std::size_t a = 0; a < fam.size(); ++a)
      v[static_cast<Eigen::Index>(a)] = fam[a].integral(nu) / fam[a].sup();
    return v;
  };
  auto t0 = std::chrono::steady_clock::now();
  AdaptiveRecResult res = adaptive_rec(mu, rc.r, rc.theta, eval, rc.n_max);
  auto t1 = std::chrono::steady_clock::now();
  if (!res.attained)
    throw numerical_error("predict: recombination tolerance unattainable at the finest level");
  if (diag) {
    diag->rec_ms += std::chrono::duration<double, std::milli>(t1 - t0).count();
    diag->patches.push_back(res.patches);
    diag->rec_level.push_back(res.level);
    diag->support.push_back(res.measure.size());
  }
  return std::move(res.measure);
}

DiscreteMeasure predict_sequence(const DiscreteMeasure& mu0, const Propagator& prop,
                                 const PartitionSchedule& sched, const RecControl& rc,
                                 StepDiagnostics* diag) {
  mu0.validate(false);
  const LinearGaussianModel& model = prop.model();
  require(mu0.dim() == model.N(), "predict: dimension mismatch");
  int k = sched.k();
  require(k >= 1, "predict: empty schedule");
  double T = sched.t[k];
  if (rc.enabled) {
    require(!rc.ys.empty(), "predict: empty observation family");
    require(rc.theta > 0.0, "predict: recombination tolerance must be positive");
  }
  if (diag) diag->k = k;
  DiscreteMeasure mu = mu0;
  for (int j = 1; j <= k; ++j) {
    double t_prev = sched.t[j - 1];
    mu = maybe_recombine(mu, model, T - t_prev, rc, diag);
    mu = apply_maps(mu, prop.maps(sched.t[j] - t_prev));
  }
  return mu;
}

std::vector<VectorXd> observation_band(const LinearGaussianModel& model, double T,
                                       const VectorXd& post_mean, const MatrixXd& post_cov) {
  auto [F, Q] = linear_exact(model, T);
  VectorXd M = F * post_mean;
  MatrixXd C = F * post_cov * F.transpose() + Q;
  VectorXd sigma = C.diagonal().cwiseSqrt();
  std::vector<VectorXd> ys;
  for (int D = -3; D <= 3; ++D) ys.push_back(M + D * sigma);
  return ys;
}

static Propagator make_propagator(const LinearGaussianModel& model, const FilterParams& params) {
  return params.ghc ? Propagator::ghc(model, params.m) : Propagator::klv(model, params.m);
}

static PartitionSchedule make_schedule(const Propagator& prop, double T,
                                       const FilterParams& params) {
  if (params.k > 0) return kusuoka_partition(T, params.k, params.gamma);
  return adaptive_partition(prop, T, params.eps);
}

FilterResult pcf_step(const DiscreteMeasure& post0, const LinearGaussianModel& model,
                      double T, const GaussianLikelihood& g, const FilterParams& params) {
  post0.validate();
  Propagator prop = make_propagator(model, params);
  PartitionSchedule sched = make_schedule(prop, T, params);
  RecControl rc;
  rc.r = params.r;
  rc.theta = params.resolved_theta();
  rc.n_max = params.n_max;
  rc.ys = observation_band(model, T, post0.mean(), post0.covariance());
  rc.R = g.R;
  FilterResult out;
  out.prior = predict_sequence(post0, prop, sched, rc, &out.diag);
  out.post = rew(out.prior, g);
  return out;
}

// N(y, R) density of every column, vectorized; the per-column arithmetic
// matches SmoothedLikelihood at horizon zero.
static VectorXd column_density(const Eigen::LLT<MatrixXd>& llt, double lognorm,
                               const VectorXd& y, const MatrixXd& pts) {
  MatrixXd D = (-pts).colwise() + y;
  MatrixXd Z = llt.matrixL().solve(D);
  VectorXd q = Z.colwise().squaredNorm();
  return (-0.5 * q.array() + lognorm).exp();
}

// Per-atom defect of leaping from t_prev: the one-shot push to T versus the
// scheduled step followed by the push from t_next, both integrated against g
// and normalized by g's peak. Two-step points are formed exactly as the
// deposit push-forward forms them.
static std::vector<double> split_defects(const DiscreteMeasure& mu, const AffineAtomMaps& one,
                                         const AffineAtomMaps& step, const AffineAtomMaps& rest,
                                         const GaussianLikelihood& g) {
  const int n = mu.size();
  const int f1 = one.size(), fa = step.size(), fb = rest.size();
  Eigen::LLT<MatrixXd> llt = llt_spd(g.R, "split: R not positive definite");
  double lognorm = gaussian_lognorm(llt, mu.dim());

  MatrixXd pts1(mu.dim(), static_cast<Eigen::Index>(n) * f1);
#pragma omp parallel for schedule(static)
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < f1; ++j)
      pts1.col(static_cast<Eigen::Index>(i) * f1 + j) = one.P[j] * mu.points.col(i) + one.q[j];

  MatrixXd mid(mu.dim(), static_cast<Eigen::Index>(n) * fa);
#pragma omp parallel for schedule(static)
  for (int i = 0; i < n; ++i)
    for (int a = 0; a < fa; ++a)
      mid.col(static_cast<Eigen::Index>(i) * fa + a) = step.P[a] * mu.points.col(i) + step.q[a];

  MatrixXd pts2(mu.dim(), static_cast<Eigen::Index>(n) * fa * fb);
#pragma omp parallel for schedule(static)
  for (int c = 0; c < n * fa; ++c)
    for (int b = 0; b < fb; ++b)
      pts2.col(static_cast<Eigen::Index>(c) * fb + b) = rest.P[b] * mid.col(c) + rest.q[b];

  VectorXd v1 = column_density(llt, lognorm, g.y, pts1);
  VectorXd v2 = column_density(llt, lognorm, g.y, pts2);

  const double peak = std::exp(lognorm);
  std::vector<double> d(n);
#pragma omp parallel for schedule(static)
  for (int i = 0; i < n; ++i) {
    double s1 = 0.0;
    for (int j = 0; j < f1; ++j) s1 += one.lambda[j] * v1[static_cast<Eigen::Index>(i) * f1 + j];
    double s2 = 0.0;
    for (int a = 0; a < fa; ++a) {
      double inner = 0.0;
      for (int b = 0; b < fb; ++b)
        inner += rest.lambda[b] * v2[(static_cast<Eigen::Index>(i) * fa + a) * fb + b];
      s2 += step.lambda[a] * inner;
    }
    d[i] = std::abs(s1 - s2) / peak;
  }
  return d;
}

// Split tolerance: fixed when configured, otherwise the empirical defect
// quantile at leap_fraction clamped by the absolute ceiling 0.1 eps.
static double resolve_tau(const std::vector<double>& d, const SplControl& ctl) {
  if (ctl.tau >= 0.0) return ctl.tau;
  const int n = static_cast<int>(d.size());
  std::vector<double> sorted(d);
  std::sort(sorted.begin(), sorted.end());
  int idx = std::clamp(static_cast<int>(std::floor(ctl.leap_fraction * n)), 0, n - 1);
  return std::min(sorted[idx], 0.1 * ctl.eps);
}

static std::pair<DiscreteMeasure, DiscreteMeasure> partition_measure(const DiscreteMeasure& mu,
                                                                     const std::vector<int>& leap) {
  std::vector<char> is_leap(mu.size(), 0);
  for (int i : leap) is_leap[i] = 1;
  DiscreteMeasure a, b;
  a.points.resize(mu.dim(), static_cast<Eigen::Index>(leap.size()));
  a.weights.resize(static_cast<Eigen::Index>(leap.size()));
  b.points.resize(mu.dim(), mu.size() - static_cast<Eigen::Index>(leap.size()));
  b.weights.resize(mu.size() - static_cast<Eigen::Index>(leap.size()));
  int ia = 0, ib = 0;
  for (int i = 0; i < mu.size(); ++i) {
    if (is_leap[i]) {
      a.points.col(ia) = mu.points.col(i);
      a.weights[ia++] = mu.weights[i];
    } else {
      b.points.col(ib) = mu.points.col(i);
      b.weights[ib++] = mu.weights[i];
    }
  }
  return {std::move(a), std::move(b)};
}

static DiscreteMeasure concat_measures(const std::vector<DiscreteMeasure>& parts) {
  Eigen::Index total = 0;
  for (const DiscreteMeasure& p : parts) total += p.size();
  require(total > 0, "filter: empty union");
  DiscreteMeasure out;
  out.points.resize(parts.front().dim(), total);
  out.weights.resize(total);
  Eigen::Index at = 0;
  for (const DiscreteMeasure& p : parts) {
    if (p.size() == 0) continue;
    out.points.middleCols(at, p.size()) = p.points;
    out.weights.segment(at, p.size()) = p.weights;
    at += p.size();
  }
  return out;
}

SplResult spl(const DiscreteMeasure& mu, int j, const PartitionSchedule& sched,
              const Propagator& prop, const GaussianLikelihood& g, const SplControl& ctl) {
  mu.validate(false);
  require(j >= 1 && j < sched.k(), "spl: step index out of range");
  const int k = sched.k();
  double T = sched.t[k];
  double t_prev = sched.t[j - 1];
  AffineAtomMaps one = prop.maps(T - t_prev);
  AffineAtomMaps step = prop.maps(sched.t[j] - t_prev);
  AffineAtomMaps rest = prop.maps(T - sched.t[j]);
  std::vector<double> d = split_defects(mu, one, step, rest, g);
  SplResult out;
  out.tau = resolve_tau(d, ctl);
  std::vector<int> leap;
  for (int i = 0; i < mu.size(); ++i) {
    bool leaps = ctl.flipped ? d[i] >= out.tau : d[i] < out.tau;
    if (leaps) leap.push_back(i);
  }
  out.leapt = static_cast<int>(leap.size());
  auto [leap_mu, stay_mu] = partition_measure(mu, leap);
  if (leap_mu.size() > 0)
    out.leap = ctl.one_shot_deposit ? apply_maps(leap_mu, one)
                                    : apply_maps(apply_maps(leap_mu, step), rest);
  if (stay_mu.size() > 0) out.cont = apply_maps(stay_mu, step);
  return out;
}

FilterResult apcf_step(const DiscreteMeasure& post0, const LinearGaussianModel& model,
                       double T, const GaussianLikelihood& g, const FilterParams& params) {
  post0.validate();
  Propagator prop = make_propagator(model, params);
  PartitionSchedule sched = make_schedule(prop, T, params);
  RecControl rc;
  rc.r = params.r;
  rc.theta = params.resolved_theta();
  rc.n_max = params.n_max;
  rc.ys = {g.y};
  rc.R = g.R;
  SplControl ctl;
  ctl.leap_fraction = params.leap_fraction;
  ctl.eps = params.eps;
  ctl.one_shot_deposit = params.one_shot_deposit;
  ctl.flipped = params.formula_split;
  const int k = sched.k();
  FilterResult out;
  out.diag.k = k;
  DiscreteMeasure mu = post0;
  std::vector<DiscreteMeasure> deposits;
  for (int j = 1; j <= k; ++j) {
    if (mu.size() == 0) {
      out.diag.leaps.push_back(0);
      continue;  // everything already leapt to the terminal time
    }
    double t_prev = sched.t[j - 1];
    mu = maybe_recombine(mu, model, T - t_prev, rc, &out.diag);
    // first and last two steps never leap
    if (params.leap_fraction > 0.0 && j >= 2 && j <= k - 2) {
      SplResult sp = spl(mu, j, sched, prop, g, ctl);
      out.diag.leaps.push_back(sp.leapt);
      if (sp.leap.size() > 0) deposits.push_back(std::move(sp.leap));
      mu = std::move(sp.cont);
    } else {
      out.diag.leaps.push_back(0);
      mu = apply_maps(mu, prop.maps(sched.t[j] - t_prev));
    }
  }
  deposits.push_back(std::move(mu));
  out.prior = concat_measures(deposits);
  out.post = rew(out.prior, g);
  return out;
}

}  // namespace cubf
