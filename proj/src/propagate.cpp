#include "cubf/propagate.hpp"

#include <cmath>
#include <memory>

#include <unsupported/Eigen/MatrixFunctions>

namespace cubf {

// ---------------------------------------------------------------------------
// Dormand-Prince 5(4) with adaptive substeps.  Autonomous RHS, fixed span.
// The tolerance sits far below the cubature error so convergence-order tests
// measure the method and not the solver.

static VectorXd dopri5(const std::function<VectorXd(const VectorXd&)>& rhs, VectorXd x,
                       double span) {
  if (span == 0.0) return x;
  constexpr double atol = 1e-12, rtol = 1e-12;
  double t = 0.0, h = span;
  VectorXd k1 = rhs(x);
  for (int iter = 0; iter < 100000; ++iter) {
    if (t >= span) return x;
    h = std::min(h, span - t);
    if (h < 1e-14 * span) throw numerical_error("ode: step size underflow");
    VectorXd k2 = rhs(x + h * (0.2 * k1));
    VectorXd k3 = rhs(x + h * ((3.0 / 40) * k1 + (9.0 / 40) * k2));
    VectorXd k4 = rhs(x + h * ((44.0 / 45) * k1 - (56.0 / 15) * k2 + (32.0 / 9) * k3));
    VectorXd k5 = rhs(x + h * ((19372.0 / 6561) * k1 - (25360.0 / 2187) * k2 +
                               (64448.0 / 6561) * k3 - (212.0 / 729) * k4));
    VectorXd k6 = rhs(x + h * ((9017.0 / 3168) * k1 - (355.0 / 33) * k2 +
                               (46732.0 / 5247) * k3 + (49.0 / 176) * k4 -
                               (5103.0 / 18656) * k5));
    VectorXd x5 = x + h * ((35.0 / 384) * k1 + (500.0 / 1113) * k3 + (125.0 / 192) * k4 -
                           (2187.0 / 6784) * k5 + (11.0 / 84) * k6);
    VectorXd k7 = rhs(x5);
    VectorXd x4 = x + h * ((5179.0 / 57600) * k1 + (7571.0 / 16695) * k3 +
                           (393.0 / 640) * k4 - (92097.0 / 339200) * k5 +
                           (187.0 / 2100) * k6 + (1.0 / 40) * k7);
    if (!x5.allFinite()) throw numerical_error("ode: non-finite state");
    double err = 0.0;
    for (int i = 0; i < x.size(); ++i) {
      double sc = atol + rtol * std::max(std::abs(x[i]), std::abs(x5[i]));
      double e = (x5[i] - x4[i]) / sc;
      err += e * e;
    }
    err = std::sqrt(err / x.size());
    if (err <= 1.0) {
      t += h;
      x = std::move(x5);
      k1 = std::move(k7);  // first-same-as-last
    }
    double f = (err == 0.0) ? 5.0 : 0.9 * std::pow(err, -0.2);
    h *= std::min(5.0, std::max(0.2, f));
  }
  throw numerical_error("ode: too many steps");
}

// Unit-time flow map of the affine field x -> A x + b, from the augmented
// (N+1) x (N+1) matrix exponential.
static void affine_unit_flow(const MatrixXd& A, const VectorXd& b, MatrixXd& P, VectorXd& q) {
  int N = static_cast<int>(A.rows());
  MatrixXd M = MatrixXd::Zero(N + 1, N + 1);
  M.topLeftCorner(N, N) = A;
  M.topRightCorner(N, 1) = b;
  MatrixXd E = M.exp();
  P = E.topLeftCorner(N, N);
  q = E.topRightCorner(N, 1);
}

AffineField gamma_affine(const TruncatedTensor& L, const Dynamics& dyn) {
  require(dyn.affine, "gamma_affine: dynamics must be affine");
  const WordTable& T = *L.tab;
  require(T.d == dyn.d, "gamma_affine: driving dimension mismatch");
  AffineField out{MatrixXd::Zero(dyn.N, dyn.N), VectorXd::Zero(dyn.N)};
  for (int slot : T.valid) {
    double c = L.c[slot];
    if (c == 0.0) continue;
    Word w = T.word(slot);
    int len = w.length();
    // Dynkin projection: a Lie element with word coefficients c_w equals
    // sum_w (c_w / |w|) [w_1,[w_2,[...,w_len]]].
    AffineField f = dyn.aff[w.letters[len - 1]];
    for (int k = len - 2; k >= 0; --k) f = affine_bracket(dyn.aff[w.letters[k]], f);
    out.A += (c / len) * f.A;
    out.b += (c / len) * f.b;
  }
  return out;
}

// Gamma(L) evaluator for generic dynamics.  Only words of length <= 2 are
// representable with first derivatives; longer words require affine dynamics.
static std::function<VectorXd(const VectorXd&)> gamma_field(const TruncatedTensor& L,
                                                            const Dynamics& dyn) {
  const WordTable& T = *L.tab;
  require(T.d == dyn.d, "gamma_field: driving dimension mismatch");
  struct Term {
    double c;
    int a, b;  // b < 0 for a single letter
  };
  auto terms = std::make_shared<std::vector<Term>>();
  for (int slot : T.valid) {
    double c = L.c[slot];
    if (c == 0.0) continue;
    Word w = T.word(slot);
    int len = w.length();
    require(len <= 2,
            "klv_flow: log-signature words longer than 2 need affine dynamics "
            "(second derivatives are not available)");
    if (len == 1)
      terms->push_back({c, w.letters[0], -1});
    else
      terms->push_back({0.5 * c, w.letters[0], w.letters[1]});
  }
  return [terms, &dyn](const VectorXd& x) {
    VectorXd v = VectorXd::Zero(x.size());
    for (const Term& t : *terms) {
      if (t.b < 0)
        v += t.c * dyn.eval(t.a, x);
      else
        v += t.c * (dyn.jacobian(t.b, x) * dyn.eval(t.a, x) -
                    dyn.jacobian(t.a, x) * dyn.eval(t.b, x));
    }
    return v;
  };
}

VectorXd gamma_flow(const TruncatedTensor& L, const Dynamics& dyn, const VectorXd& x) {
  if (dyn.affine) {
    AffineField f = gamma_affine(L, dyn);
    MatrixXd P;
    VectorXd q;
    affine_unit_flow(f.A, f.b, P, q);
    return P * x + q;
  }
  return dopri5(gamma_field(L, dyn), x, 1.0);
}

// ---------------------------------------------------------------------------
// Shared per-formula precomputation and per-element pushforwards.

// Per-path composed affine maps for path-level propagation.
static void path_affine_maps(const CubatureFormulaWiener& f, const Dynamics& dyn,
                             std::vector<MatrixXd>& P, std::vector<VectorXd>& q) {
  int n = f.size();
  P.resize(n);
  q.resize(n);
  for (int j = 0; j < n; ++j) {
    MatrixXd Pj = MatrixXd::Identity(dyn.N, dyn.N);
    VectorXd qj = VectorXd::Zero(dyn.N);
    const PiecewiseLinearPath& path = f.paths[j];
    for (int s = 0; s < path.segments(); ++s) {
      VectorXd delta = path.values[s + 1] - path.values[s];
      MatrixXd A = MatrixXd::Zero(dyn.N, dyn.N);
      VectorXd b = VectorXd::Zero(dyn.N);
      for (int l = 0; l <= dyn.d; ++l) {
        A += delta[l] * dyn.aff[l].A;
        b += delta[l] * dyn.aff[l].b;
      }
      MatrixXd Ps;
      VectorXd qs;
      affine_unit_flow(A, b, Ps, qs);
      Pj = Ps * Pj;
      qj = Ps * qj + qs;
    }
    P[j] = std::move(Pj);
    q[j] = std::move(qj);
  }
}

// Transport one point along cubature path j of f (generic dynamics).
static VectorXd path_push_one(const CubatureFormulaWiener& f, const Dynamics& dyn, int j,
                              VectorXd x) {
  const PiecewiseLinearPath& path = f.paths[j];
  for (int s = 0; s < path.segments(); ++s) {
    VectorXd delta = path.values[s + 1] - path.values[s];
    auto rhs = [&](const VectorXd& y) {
      VectorXd v = VectorXd::Zero(y.size());
      for (int l = 0; l <= dyn.d; ++l) v += delta[l] * dyn.eval(l, y);
      return v;
    };
    x = dopri5(rhs, std::move(x), 1.0);
  }
  return x;
}

static void flow_affine_maps(const CubatureFormulaWiener& f, const Dynamics& dyn,
                             std::vector<MatrixXd>& P, std::vector<VectorXd>& q) {
  int n = f.size();
  P.resize(n);
  q.resize(n);
  for (int j = 0; j < n; ++j) {
    AffineField g = gamma_affine(f.lies[j], dyn);
    affine_unit_flow(g.A, g.b, P[j], q[j]);
  }
}

static DiscreteMeasure duplicate_atoms(const DiscreteMeasure& mu,
                                       const CubatureFormulaWiener& f) {
  int n = mu.size(), nm = f.size();
  DiscreteMeasure out;
  out.points.resize(mu.dim(), n * nm);
  out.weights.resize(n * nm);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < nm; ++j) {
      out.points.col(i * nm + j) = mu.points.col(i);
      out.weights[i * nm + j] = mu.weights[i] * f.weights[j];
    }
  return out;
}

static void check_klv_inputs(const DiscreteMeasure& mu, const CubatureFormulaWiener& f,
                             double Delta, const Dynamics& dyn,
                             CubatureFormulaWiener::Level level) {
  mu.validate(false);
  dyn.validate();
  require(f.level == level, "klv: formula level mismatch");
  require(mu.dim() == dyn.N, "klv: state dimension mismatch");
  require(f.d == dyn.d, "klv: driving dimension mismatch");
  require(Delta >= 0.0, "klv: negative step");
}

// ---------------------------------------------------------------------------
// OpenMP kernels.

DiscreteMeasure klv_path(const DiscreteMeasure& mu, const CubatureFormulaWiener& f,
                         double Delta, const Dynamics& dyn) {
  check_klv_inputs(mu, f, Delta, dyn, CubatureFormulaWiener::Level::path);
  if (Delta == 0.0) return duplicate_atoms(mu, f);
  CubatureFormulaWiener g = rescale_formula(f, Delta);
  int n = mu.size(), nm = g.size();
  DiscreteMeasure out;
  out.points.resize(mu.dim(), n * nm);
  out.weights.resize(n * nm);
  if (dyn.affine) {
    std::vector<MatrixXd> P;
    std::vector<VectorXd> q;
    path_affine_maps(g, dyn, P, q);
#pragma omp parallel for schedule(static)
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < nm; ++j) {
        out.points.col(i * nm + j) = P[j] * mu.points.col(i) + q[j];
        out.weights[i * nm + j] = mu.weights[i] * g.weights[j];
      }
  } else {
#pragma omp parallel for schedule(static)
    for (int idx = 0; idx < n * nm; ++idx) {
      int i = idx / nm, j = idx % nm;
      out.points.col(idx) = path_push_one(g, dyn, j, mu.points.col(i));
      out.weights[idx] = mu.weights[i] * g.weights[j];
    }
  }
  require(out.points.allFinite(), "klv_path: non-finite state");
  return out;
}

DiscreteMeasure klv_flow(const DiscreteMeasure& mu, const CubatureFormulaWiener& f,
                         double Delta, const Dynamics& dyn) {
  check_klv_inputs(mu, f, Delta, dyn, CubatureFormulaWiener::Level::flow);
  if (Delta == 0.0) return duplicate_atoms(mu, f);
  CubatureFormulaWiener g = rescale_formula(f, Delta);
  int n = mu.size(), nm = g.size();
  DiscreteMeasure out;
  out.points.resize(mu.dim(), n * nm);
  out.weights.resize(n * nm);
  if (dyn.affine) {
    std::vector<MatrixXd> P;
    std::vector<VectorXd> q;
    flow_affine_maps(g, dyn, P, q);
#pragma omp parallel for schedule(static)
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < nm; ++j) {
        out.points.col(i * nm + j) = P[j] * mu.points.col(i) + q[j];
        out.weights[i * nm + j] = mu.weights[i] * g.weights[j];
      }
  } else {
    std::vector<std::function<VectorXd(const VectorXd&)>> fields(nm);
    for (int j = 0; j < nm; ++j) fields[j] = gamma_field(g.lies[j], dyn);
#pragma omp parallel for schedule(static)
    for (int idx = 0; idx < n * nm; ++idx) {
      int i = idx / nm, j = idx % nm;
      out.points.col(idx) = dopri5(fields[j], mu.points.col(i), 1.0);
      out.weights[idx] = mu.weights[i] * g.weights[j];
    }
  }
  require(out.points.allFinite(), "klv_flow: non-finite state");
  return out;
}

void gauss_hermite(int n, VectorXd& nodes, VectorXd& weights) {
  require(n >= 1, "gauss_hermite: need at least one node");
  MatrixXd J = MatrixXd::Zero(n, n);
  for (int k = 1; k < n; ++k) {
    double b = std::sqrt(static_cast<double>(k));
    J(k, k - 1) = b;
    J(k - 1, k) = b;
  }
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(J);
  nodes = es.eigenvalues();
  weights.resize(n);
  for (int k = 0; k < n; ++k) {
    double v = es.eigenvectors()(0, k);
    weights[k] = v * v;
  }
  weights /= weights.sum();
}

// Gauss-Hermite tensor nodes for N(0, Q), last axis fastest.
DiscreteMeasure gauss_hermite_measure(const VectorXd& mean, const MatrixXd& cov, int m) {
  require(m >= 1 && m % 2 == 1, "gauss_hermite_measure: degree must be odd");
  require(cov.rows() == cov.cols() && cov.rows() == mean.size(),
          "gauss_hermite_measure: dimension mismatch");
  int N = static_cast<int>(mean.size());
  int npts = (m + 1) / 2;
  VectorXd x, w;
  gauss_hermite(npts, x, w);
  MatrixXd S = psd_sqrt(cov);
  int total = 1;
  for (int a = 0; a < N; ++a) total *= npts;
  DiscreteMeasure out;
  out.points.resize(N, total);
  out.weights.resize(total);
  for (int j = 0; j < total; ++j) {
    VectorXd z(N);
    double lam = 1.0;
    int rest = j;
    for (int a = N - 1; a >= 0; --a) {
      int ia = rest % npts;
      rest /= npts;
      z[a] = x[ia];
      lam *= w[ia];
    }
    out.points.col(j) = mean + S * z;
    out.weights[j] = lam;
  }
  return out;
}

static void ghc_nodes(const MatrixXd& Q, int m, MatrixXd& Z, VectorXd& lambda) {
  DiscreteMeasure gm = gauss_hermite_measure(VectorXd::Zero(Q.rows()), Q, m);
  Z = gm.points;
  lambda = gm.weights;
}

DiscreteMeasure ghc_step(const DiscreteMeasure& mu, double Delta,
                         const LinearGaussianModel& model, int m) {
  mu.validate(false);
  model.validate();
  require(m >= 1 && m % 2 == 1, "ghc_step: degree must be odd");
  require(mu.dim() == model.N(), "ghc_step: state dimension mismatch");
  auto [F, Q] = linear_exact(model, Delta);
  MatrixXd Z;
  VectorXd lambda;
  ghc_nodes(Q, m, Z, lambda);
  int n = mu.size(), nm = static_cast<int>(lambda.size());
  DiscreteMeasure out;
  out.points.resize(mu.dim(), n * nm);
  out.weights.resize(n * nm);
#pragma omp parallel for schedule(static)
  for (int i = 0; i < n; ++i) {
    VectorXd Fx = F * mu.points.col(i);
    for (int j = 0; j < nm; ++j) {
      out.points.col(i * nm + j) = Fx + Z.col(j);
      out.weights[i * nm + j] = mu.weights[i] * lambda[j];
    }
  }
  return out;
}

AffineAtomMaps klv_flow_maps(const CubatureFormulaWiener& f, const Dynamics& dyn,
                             double Delta) {
  dyn.validate();
  require(f.level == CubatureFormulaWiener::Level::flow,
          "klv_flow_maps: flow-level formula required");
  require(dyn.affine, "klv_flow_maps: affine dynamics required");
  require(f.d == dyn.d, "klv_flow_maps: driving dimension mismatch");
  require(Delta >= 0.0, "klv_flow_maps: negative step");
  AffineAtomMaps maps;
  maps.lambda = Eigen::Map<const VectorXd>(f.weights.data(), f.size());
  if (Delta == 0.0) {
    maps.P.assign(f.size(), MatrixXd::Identity(dyn.N, dyn.N));
    maps.q.assign(f.size(), VectorXd::Zero(dyn.N));
    return maps;
  }
  CubatureFormulaWiener g = rescale_formula(f, Delta);
  flow_affine_maps(g, dyn, maps.P, maps.q);
  return maps;
}

AffineAtomMaps ghc_maps(const LinearGaussianModel& model, int m, double Delta) {
  model.validate();
  require(m >= 1 && m % 2 == 1, "ghc_maps: degree must be odd");
  require(Delta >= 0.0, "ghc_maps: negative step");
  auto [F, Q] = linear_exact(model, Delta);
  MatrixXd Z;
  VectorXd lambda;
  ghc_nodes(Q, m, Z, lambda);
  AffineAtomMaps maps;
  maps.lambda = lambda;
  maps.P.assign(lambda.size(), F);
  maps.q.resize(lambda.size());
  for (int j = 0; j < lambda.size(); ++j) maps.q[j] = Z.col(j);
  return maps;
}

static void check_maps(const DiscreteMeasure& mu, const AffineAtomMaps& maps) {
  mu.validate(false);
  require(maps.size() > 0, "apply_maps: empty map family");
  require(static_cast<int>(maps.P.size()) == maps.size() &&
              static_cast<int>(maps.q.size()) == maps.size(),
          "apply_maps: ragged map family");
  require(maps.P[0].rows() == mu.dim() && maps.P[0].cols() == mu.dim(),
          "apply_maps: dimension mismatch");
}

DiscreteMeasure apply_maps(const DiscreteMeasure& mu, const AffineAtomMaps& maps) {
  check_maps(mu, maps);
  int n = mu.size(), nm = maps.size();
  DiscreteMeasure out;
  out.points.resize(mu.dim(), static_cast<Eigen::Index>(n) * nm);
  out.weights.resize(static_cast<Eigen::Index>(n) * nm);
#pragma omp parallel for schedule(static)
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < nm; ++j) {
      out.points.col(static_cast<Eigen::Index>(i) * nm + j) =
          maps.P[j] * mu.points.col(i) + maps.q[j];
      out.weights[static_cast<Eigen::Index>(i) * nm + j] = mu.weights[i] * maps.lambda[j];
    }
  require(out.points.allFinite(), "apply_maps: non-finite state");
  return out;
}

// ---------------------------------------------------------------------------
// Serial reference kernels: plain loops, same per-element arithmetic.

namespace serial {

DiscreteMeasure klv_path(const DiscreteMeasure& mu, const CubatureFormulaWiener& f,
                         double Delta, const Dynamics& dyn) {
  check_klv_inputs(mu, f, Delta, dyn, CubatureFormulaWiener::Level::path);
  if (Delta == 0.0) return duplicate_atoms(mu, f);
  CubatureFormulaWiener g = rescale_formula(f, Delta);
  int n = mu.size(), nm = g.size();
  DiscreteMeasure out;
  out.points.resize(mu.dim(), n * nm);
  out.weights.resize(n * nm);
  if (dyn.affine) {
    std::vector<MatrixXd> P;
    std::vector<VectorXd> q;
    path_affine_maps(g, dyn, P, q);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < nm; ++j) {
        out.points.col(i * nm + j) = P[j] * mu.points.col(i) + q[j];
        out.weights[i * nm + j] = mu.weights[i] * g.weights[j];
      }
  } else {
    for (int idx = 0; idx < n * nm; ++idx) {
      int i = idx / nm, j = idx % nm;
      out.points.col(idx) = path_push_one(g, dyn, j, mu.points.col(i));
      out.weights[idx] = mu.weights[i] * g.weights[j];
    }
  }
  require(out.points.allFinite(), "klv_path: non-finite state");
  return out;
}

DiscreteMeasure klv_flow(const DiscreteMeasure& mu, const CubatureFormulaWiener& f,
                         double Delta, const Dynamics& dyn) {
  check_klv_inputs(mu, f, Delta, dyn, CubatureFormulaWiener::Level::flow);
  if (Delta == 0.0) return duplicate_atoms(mu, f);
  CubatureFormulaWiener g = rescale_formula(f, Delta);
  int n = mu.size(), nm = g.size();
  DiscreteMeasure out;
  out.points.resize(mu.dim(), n * nm);
  out.weights.resize(n * nm);
  if (dyn.affine) {
    std::vector<MatrixXd> P;
    std::vector<VectorXd> q;
    flow_affine_maps(g, dyn, P, q);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < nm; ++j) {
        out.points.col(i * nm + j) = P[j] * mu.points.col(i) + q[j];
        out.weights[i * nm + j] = mu.weights[i] * g.weights[j];
      }
  } else {
    for (int idx = 0; idx < n * nm; ++idx) {
      int i = idx / nm, j = idx % nm;
      auto field = gamma_field(g.lies[j], dyn);
      out.points.col(idx) = dopri5(field, mu.points.col(i), 1.0);
      out.weights[idx] = mu.weights[i] * g.weights[j];
    }
  }
  require(out.points.allFinite(), "klv_flow: non-finite state");
  return out;
}

DiscreteMeasure ghc_step(const DiscreteMeasure& mu, double Delta,
                         const LinearGaussianModel& model, int m) {
  mu.validate(false);
  model.validate();
  require(m >= 1 && m % 2 == 1, "ghc_step: degree must be odd");
  require(mu.dim() == model.N(), "ghc_step: state dimension mismatch");
  auto [F, Q] = linear_exact(model, Delta);
  MatrixXd Z;
  VectorXd lambda;
  ghc_nodes(Q, m, Z, lambda);
  int n = mu.size(), nm = static_cast<int>(lambda.size());
  DiscreteMeasure out;
  out.points.resize(mu.dim(), n * nm);
  out.weights.resize(n * nm);
  for (int i = 0; i < n; ++i) {
    VectorXd Fx = F * mu.points.col(i);
    for (int j = 0; j < nm; ++j) {
      out.points.col(i * nm + j) = Fx + Z.col(j);
      out.weights[i * nm + j] = mu.weights[i] * lambda[j];
    }
  }
  return out;
}

DiscreteMeasure apply_maps(const DiscreteMeasure& mu, const AffineAtomMaps& maps) {
  check_maps(mu, maps);
  int n = mu.size(), nm = maps.size();
  DiscreteMeasure out;
  out.points.resize(mu.dim(), static_cast<Eigen::Index>(n) * nm);
  out.weights.resize(static_cast<Eigen::Index>(n) * nm);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < nm; ++j) {
      out.points.col(static_cast<Eigen::Index>(i) * nm + j) =
          maps.P[j] * mu.points.col(i) + maps.q[j];
      out.weights[static_cast<Eigen::Index>(i) * nm + j] = mu.weights[i] * maps.lambda[j];
    }
  require(out.points.allFinite(), "apply_maps: non-finite state");
  return out;
}

}  // namespace serial

}  // namespace cubf
