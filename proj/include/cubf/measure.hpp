#pragma once

#include "cubf/common.hpp"

namespace cubf {

// Weighted empirical measure sum_i w_i delta_{x_i} on R^N.  Atoms are the
// columns of `points`.  Weights are nonnegative; a normalized measure carries
// total mass 1, but unnormalized measures are legal inside recombination
// patches and are validated with `normalized = false`.
struct DiscreteMeasure {
  MatrixXd points;   // N x n
  VectorXd weights;  // n

  int dim() const { return static_cast<int>(points.rows()); }
  int size() const { return static_cast<int>(points.cols()); }

  void validate(bool normalized = true) const;

  double mass() const;
  VectorXd mean() const;
  // Weighted covariance about the weighted mean, normalized by the mass.
  MatrixXd covariance() const;
};

DiscreteMeasure dirac(const VectorXd& x);

}  // namespace cubf
