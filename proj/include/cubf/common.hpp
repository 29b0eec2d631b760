#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace cubf {

using Eigen::MatrixXd;
using Eigen::VectorXd;

// Bad inputs / malformed configs / contract violations -> exit code 1.
struct validation_error : std::runtime_error {
  explicit validation_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Numerical breakdowns (non-convergence, singular systems, underflow) -> exit code 2.
struct numerical_error : std::runtime_error {
  explicit numerical_error(const std::string& msg) : std::runtime_error(msg) {}
};

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw validation_error(msg);
}

// ---------------------------------------------------------------------------
// Deterministic summation: results are independent of thread count because
// partial sums are always formed over the same fixed-size index blocks and
// merged serially in block order.

inline constexpr std::size_t kSumBlock = 1024;

double det_sum(std::size_t n, const std::function<double(std::size_t)>& term);

// Vector-valued variant; `dim` is the length of each term.
VectorXd det_sum_vec(std::size_t n, int dim,
                     const std::function<void(std::size_t, VectorXd&)>& add_term);

// ---------------------------------------------------------------------------
// Seeded RNG used by the Monte Carlo baselines.  Everything is hand-specified
// (engine, uniform mapping, Box-Muller) so that streams are reproducible
// across platforms and independent of library distribution internals.
//
// Stream derivation rule: the engine is seeded with
// splitmix64(seed ^ splitmix64(stream)), so distinct (seed, stream) pairs give
// decorrelated engines while staying fully deterministic.

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0)
      : eng_(splitmix64(seed ^ splitmix64(stream))), have_spare_(false), spare_(0.0) {}

  // uniform on (0,1): 53 random bits, never exactly 0 or 1 after the shift
  double uniform() { return std::ldexp(static_cast<double>(eng_() >> 11) + 0.5, -53); }

  double gaussian() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform(), u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * M_PI * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  VectorXd gaussian_vec(int n) {
    VectorXd z(n);
    for (int i = 0; i < n; ++i) z[i] = gaussian();
    return z;
  }

 private:
  std::mt19937_64 eng_;
  bool have_spare_;
  double spare_;
};

// Symmetric PSD square root via eigendecomposition, eigenvalues clamped at 0.
MatrixXd psd_sqrt(const MatrixXd& C);

}  // namespace cubf
