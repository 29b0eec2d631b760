#pragma once

#include "cubf/cubature.hpp"
#include "cubf/dynamics.hpp"
#include "cubf/measure.hpp"

namespace cubf {

// Push mu one step of size Delta through the cubature operator at path level:
// every atom is transported along every cubature path by solving the driven
// ODE segment by segment.  Output atom (i, j) sits at index i * n_m + j with
// weight w_i * lambda_j; total mass is preserved exactly.
DiscreteMeasure klv_path(const DiscreteMeasure& mu, const CubatureFormulaWiener& f,
                         double Delta, const Dynamics& dyn);

// Flow-level variant: each atom flows for unit time along the autonomous
// field Gamma(L_j) built from the log-signature L_j of cubature path j.
// Affine dynamics use closed-form matrix exponentials; otherwise Gamma is
// assembled from the field evaluators and their Jacobians, which limits the
// usable words of L_j to length <= 2 (degree-5 formulas need affine dynamics
// or higher derivatives).
DiscreteMeasure klv_flow(const DiscreteMeasure& mu, const CubatureFormulaWiener& f,
                         double Delta, const Dynamics& dyn);

// Gauss-Hermite cubature step for the exact linear-Gaussian transition:
// atoms F x_i + sqrt(Q) z_j where {lambda_j, z_j} is the tensor-product
// Gauss-Hermite rule of polynomial degree m (ceil((m+1)/2) points per axis).
DiscreteMeasure ghc_step(const DiscreteMeasure& mu, double Delta,
                         const LinearGaussianModel& model, int m);

// Nodes and weights of the n-point Gauss-Hermite rule for N(0,1), by the
// symmetric-tridiagonal eigenvalue method; weights sum to 1, nodes ascend.
void gauss_hermite(int n, VectorXd& nodes, VectorXd& weights);

// Tensor-product Gauss-Hermite discretization of N(mean, cov): matches all
// Gaussian moments of total degree <= m ((m+1)/2 points per axis, last axis
// varying fastest).
DiscreteMeasure gauss_hermite_measure(const VectorXd& mean, const MatrixXd& cov, int m);

// A one-step transition as a family of affine atom maps: an input atom at x
// spawns size() children P[j] x + q[j], each carrying weight factor
// lambda[j].  Both cubature backends reduce to this form on affine dynamics,
// which lets the filters evaluate per-atom transitions without rebuilding
// the step operator.
struct AffineAtomMaps {
  VectorXd lambda;
  std::vector<MatrixXd> P;
  std::vector<VectorXd> q;
  int size() const { return static_cast<int>(lambda.size()); }
};

// Atom maps of the flow-level cubature step over Delta (affine dynamics
// only).  Delta == 0 yields identity maps with the formula weights.
AffineAtomMaps klv_flow_maps(const CubatureFormulaWiener& f, const Dynamics& dyn,
                             double Delta);

// Atom maps of the Gauss-Hermite step over Delta: P[j] = F for all j and
// q[j] runs over the rule's nodes for N(0, Q).
AffineAtomMaps ghc_maps(const LinearGaussianModel& model, int m, double Delta);

// Fan mu out through the map family; output atom (i, j) at index
// i * maps.size() + j with weight w_i * lambda[j].
DiscreteMeasure apply_maps(const DiscreteMeasure& mu, const AffineAtomMaps& maps);

// Gamma(L) for affine dynamics: the lie element L (word-basis log-signature
// coefficients) mapped to a single affine field via the Dynkin projection
// L = sum_w (c_w / |w|) [w_1,[w_2,[...]]] and matrix commutators.
AffineField gamma_affine(const TruncatedTensor& L, const Dynamics& dyn);

// Terminal value of the flow of the autonomous field Gamma(L) from x over
// unit time (generic dynamics; the affine case is closed-form).
VectorXd gamma_flow(const TruncatedTensor& L, const Dynamics& dyn, const VectorXd& x);

// Plain loop twins of the OpenMP kernels, kept as references for the
// bitwise-equality tests and the kernel benchmark.
namespace serial {
DiscreteMeasure klv_path(const DiscreteMeasure& mu, const CubatureFormulaWiener& f,
                         double Delta, const Dynamics& dyn);
DiscreteMeasure klv_flow(const DiscreteMeasure& mu, const CubatureFormulaWiener& f,
                         double Delta, const Dynamics& dyn);
DiscreteMeasure ghc_step(const DiscreteMeasure& mu, double Delta,
                         const LinearGaussianModel& model, int m);
DiscreteMeasure apply_maps(const DiscreteMeasure& mu, const AffineAtomMaps& maps);
}  // namespace serial

}  // namespace cubf
