#include "cubf/dynamics.hpp"

#include <unsupported/Eigen/MatrixFunctions>

namespace cubf {

VectorXd Dynamics::eval(int i, const VectorXd& x) const {
  if (affine) return aff[i].A * x + aff[i].b;
  return fields[i](x);
}

MatrixXd Dynamics::jacobian(int i, const VectorXd& x) const {
  if (affine) return aff[i].A;
  require(!jacobians.empty(), "dynamics: jacobians not supplied");
  return jacobians[i](x);
}

void Dynamics::validate() const {
  require(N > 0 && d > 0, "dynamics: dimensions must be positive");
  if (affine) {
    require(static_cast<int>(aff.size()) == d + 1, "dynamics: need d+1 affine fields");
    for (const auto& f : aff) {
      require(f.A.rows() == N && f.A.cols() == N && f.b.size() == N,
              "dynamics: affine field shape mismatch");
    }
  } else {
    require(static_cast<int>(fields.size()) == d + 1, "dynamics: need d+1 field evaluators");
    require(jacobians.empty() || static_cast<int>(jacobians.size()) == d + 1,
            "dynamics: jacobian list must match field list");
  }
}

Dynamics affine_dynamics(std::vector<AffineField> fields) {
  Dynamics dyn;
  require(!fields.empty(), "dynamics: need at least the drift field");
  dyn.N = static_cast<int>(fields[0].A.rows());
  dyn.d = static_cast<int>(fields.size()) - 1;
  dyn.affine = true;
  dyn.aff = std::move(fields);
  dyn.validate();
  return dyn;
}

AffineField affine_bracket(const AffineField& u, const AffineField& v) {
  return AffineField{v.A * u.A - u.A * v.A, v.A * u.b - u.A * v.b};
}

void LinearGaussianModel::validate() const {
  require(Lambda.rows() == Lambda.cols() && Lambda.rows() > 0, "model: Lambda must be square");
  require(R.rows() == N() && R.cols() == N(), "model: R must match the state dimension");
  require((R - R.transpose()).cwiseAbs().maxCoeff() <= 1e-12 * R.cwiseAbs().maxCoeff(),
          "model: R must be symmetric");
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(0.5 * (R + R.transpose()));
  require(es.eigenvalues().minCoeff() > 0.0, "model: R must be positive definite");
  require(g >= 0.0, "model: noise amplitude must be nonnegative");
}

Dynamics LinearGaussianModel::dynamics() const {
  std::vector<AffineField> f(N() + 1);
  f[0] = {-Lambda, VectorXd::Zero(N())};
  for (int i = 1; i <= N(); ++i) f[i] = {MatrixXd::Zero(N(), N()), g * VectorXd::Unit(N(), i - 1)};
  return affine_dynamics(std::move(f));
}

LinearGaussianModel ou_model(double r) {
  LinearGaussianModel m;
  m.Lambda.resize(3, 3);
  m.Lambda << 1.0, -1.0, 0.0, -0.28, 1.0, 0.0, 0.0, 0.0, 8.0 / 3.0;
  m.g = 0.5;
  m.R = r * MatrixXd::Identity(3, 3);
  m.validate();
  return m;
}

std::pair<MatrixXd, MatrixXd> linear_exact(const LinearGaussianModel& model, double Delta) {
  require(Delta >= 0.0, "linear_exact: negative step");
  const int N = model.N();
  // Van Loan block trick: exp(D*[[-Lambda, g^2 I],[0, Lambda^T]]) packs
  // F = exp(-Lambda D) in the (1,1) block and E12 with Q = E12 F^T.
  MatrixXd H = MatrixXd::Zero(2 * N, 2 * N);
  H.topLeftCorner(N, N) = -model.Lambda;
  H.topRightCorner(N, N) = model.g * model.g * MatrixXd::Identity(N, N);
  H.bottomRightCorner(N, N) = model.Lambda.transpose();
  MatrixXd E = (Delta * H).exp();
  MatrixXd F = E.topLeftCorner(N, N);
  MatrixXd Q = E.topRightCorner(N, N) * F.transpose();
  Q = 0.5 * (Q + Q.transpose());
  return {F, Q};
}

}  // namespace cubf
