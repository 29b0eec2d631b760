#include "cubf/common.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace cubf {

double det_sum(std::size_t n, const std::function<double(std::size_t)>& term) {
  std::size_t nblocks = (n + kSumBlock - 1) / kSumBlock;
  if (nblocks <= 1) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += term(i);
    return s;
  }
  std::vector<double> partial(nblocks, 0.0);
#pragma omp parallel for schedule(static)
  for (long long b = 0; b < static_cast<long long>(nblocks); ++b) {
    std::size_t lo = static_cast<std::size_t>(b) * kSumBlock;
    std::size_t hi = std::min(n, lo + kSumBlock);
    double s = 0.0;
    for (std::size_t i = lo; i < hi; ++i) s += term(i);
    partial[b] = s;
  }
  double total = 0.0;
  for (double s : partial) total += s;
  return total;
}

VectorXd det_sum_vec(std::size_t n, int dim,
                     const std::function<void(std::size_t, VectorXd&)>& add_term) {
  std::size_t nblocks = (n + kSumBlock - 1) / kSumBlock;
  if (nblocks <= 1) {
    VectorXd s = VectorXd::Zero(dim);
    for (std::size_t i = 0; i < n; ++i) add_term(i, s);
    return s;
  }
  std::vector<VectorXd> partial(nblocks, VectorXd::Zero(dim));
#pragma omp parallel for schedule(static)
  for (long long b = 0; b < static_cast<long long>(nblocks); ++b) {
    std::size_t lo = static_cast<std::size_t>(b) * kSumBlock;
    std::size_t hi = std::min(n, lo + kSumBlock);
    for (std::size_t i = lo; i < hi; ++i) add_term(i, partial[b]);
  }
  VectorXd total = VectorXd::Zero(dim);
  for (const VectorXd& s : partial) total += s;
  return total;
}

MatrixXd psd_sqrt(const MatrixXd& C) {
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(C);
  require(es.info() == Eigen::Success, "psd_sqrt: eigendecomposition failed");
  VectorXd ev = es.eigenvalues();
  for (int i = 0; i < ev.size(); ++i) ev[i] = std::sqrt(std::max(0.0, ev[i]));
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace cubf
