#include "cubf/measure.hpp"

namespace cubf {

void DiscreteMeasure::validate(bool normalized) const {
  require(points.cols() == weights.size(), "measure: points/weights size mismatch");
  require(points.cols() > 0, "measure: empty support");
  for (int i = 0; i < weights.size(); ++i) {
    require(std::isfinite(weights[i]) && weights[i] >= 0.0, "measure: negative weight");
  }
  require(points.allFinite(), "measure: non-finite atom");
  if (normalized) {
    require(std::abs(mass() - 1.0) <= 1e-12, "measure: mass differs from 1");
  }
}

double DiscreteMeasure::mass() const {
  return det_sum(size(), [&](std::size_t i) { return weights[static_cast<int>(i)]; });
}

VectorXd DiscreteMeasure::mean() const {
  VectorXd s = det_sum_vec(size(), dim(), [&](std::size_t i, VectorXd& t) {
    t += weights[static_cast<int>(i)] * points.col(static_cast<int>(i));
  });
  return s / mass();
}

MatrixXd DiscreteMeasure::covariance() const {
  const VectorXd mu = mean();
  const int N = dim();
  VectorXd flat = det_sum_vec(size(), N * N, [&](std::size_t i, VectorXd& t) {
    VectorXd c = points.col(static_cast<int>(i)) - mu;
    Eigen::Map<MatrixXd>(t.data(), N, N) += weights[static_cast<int>(i)] * (c * c.transpose());
  });
  MatrixXd C = Eigen::Map<MatrixXd>(flat.data(), N, N) / mass();
  return 0.5 * (C + C.transpose());
}

DiscreteMeasure dirac(const VectorXd& x) {
  DiscreteMeasure mu;
  mu.points = x;
  mu.weights = VectorXd::Ones(1);
  return mu;
}

}  // namespace cubf
