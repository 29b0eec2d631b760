#pragma once

#include <utility>

#include "cubf/common.hpp"

namespace cubf {

// Affine vector field x -> A x + b.
struct AffineField {
  MatrixXd A;
  VectorXd b;
};

// Stratonovich SDE data dX = V_0(X)dt + sum_i V_i(X) o dW_i.  Fields are
// indexed 0..d with V_0 the drift.  Jacobians are optional; they are needed
// only for flow-level propagation of non-affine dynamics.  When `affine` is
// set the closed-form (A_i, b_i) pairs are used everywhere and the generic
// evaluators may be left empty.
struct Dynamics {
  int N = 0;
  int d = 0;
  std::vector<std::function<VectorXd(const VectorXd&)>> fields;
  std::vector<std::function<MatrixXd(const VectorXd&)>> jacobians;
  bool affine = false;
  std::vector<AffineField> aff;

  VectorXd eval(int i, const VectorXd& x) const;
  MatrixXd jacobian(int i, const VectorXd& x) const;
  bool has_jacobians() const { return affine || !jacobians.empty(); }
  void validate() const;
};

Dynamics affine_dynamics(std::vector<AffineField> fields);

// Commutator of affine fields as vector fields: [U, V](x) = DV U - DU V.
AffineField affine_bracket(const AffineField& u, const AffineField& v);

// Linear-Gaussian state-space model: dX = -Lambda X dt + g dW, observed as
// Y_n = X_n + eta_n with eta_n ~ N(0, R) through the identity map.
struct LinearGaussianModel {
  MatrixXd Lambda;
  double g = 0.0;
  MatrixXd R;

  int N() const { return static_cast<int>(Lambda.rows()); }
  void validate() const;
  Dynamics dynamics() const;
};

// The three-dimensional test model: Lambda = [[1,-1,0],[-0.28,1,0],[0,0,8/3]],
// g = 0.5, observation covariance r * I.
LinearGaussianModel ou_model(double r = 1e-2);

// Exact transition of the linear model over a step: X(D) = F X(0) + nu,
// nu ~ N(0, Q), with F = exp(-Lambda D) and
// Q = g^2 int_0^D exp(-Lambda s) exp(-Lambda^T s) ds,
// both obtained from one augmented matrix exponential.
std::pair<MatrixXd, MatrixXd> linear_exact(const LinearGaussianModel& model, double Delta);

}  // namespace cubf
