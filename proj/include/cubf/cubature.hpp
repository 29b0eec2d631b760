#pragma once

#include <string>
#include <vector>

#include "cubf/tensor.hpp"

namespace cubf {

// Finitely supported measure on bounded-variation paths (or on log-signature
// flows) matching the expected Brownian signature up to degree m over a
// window of length T.  Exactly one of `paths` / `lies` is populated,
// according to `level`.
struct CubatureFormulaWiener {
  enum class Level { path, flow };

  int d = 0;
  int m = 0;
  Level level = Level::path;
  double T = 1.0;
  std::vector<double> weights;
  std::vector<PiecewiseLinearPath> paths;
  std::vector<TruncatedTensor> lies;

  int size() const { return static_cast<int>(weights.size()); }
  void validate() const;
};

// E[S(B)] truncated at degree m over a window of length T: the exponential of
// t*e_0 + (t/2) * sum_i e_i e_i.
TruncatedTensor expected_signature(int d, int m, double T);

struct VerifyResult {
  double max_defect = 0.0;
  bool pass = false;
};

// Max absolute moment defect over all words of degree <= m against the
// expected signature at the formula's own scale T.
VerifyResult verify_formula(const CubatureFormulaWiener& f, double tol = 1e-12);

// Classical degree-3 construction: 2d single-segment paths over [0,1], the
// i-th axis pair moving +-sqrt(d) along e_i, each with weight 1/(2d).
// Ordering: (axis 1, +), (axis 1, -), (axis 2, +), ...
CubatureFormulaWiener build_degree3(int d);

// Brownian rescaling of a formula from its own T to the given window length.
CubatureFormulaWiener rescale_formula(const CubatureFormulaWiener& f, double T);

// Load a formula from JSON and verify it to 1e-10 (throws on failure).
// Flow-level support entries are [bracket-word, coefficient] pair lists;
// path-level entries carry knot/value arrays.  Coefficients may be native
// numbers or exact rational strings "p/q".
CubatureFormulaWiener load_formula(const std::string& filename);

// Embed into a larger truncation level (coefficients above the source degree
// are zero).
TruncatedTensor embed(const TruncatedTensor& a, int m2);

struct PathFromLieOptions {
  int segments = 0;      // 0 = choose automatically from the Lie dimension
  double tol = 1e-11;    // max log-signature residual, absolute
  int max_retries = 3;
};

// Bounded-variation path over [0, T0] (T0 = the e_0 coefficient of L) whose
// log-signature truncated at L's degree equals L.  Levenberg-Marquardt on the
// signature residual with a degree-cutoff homotopy.
PiecewiseLinearPath path_from_lie(const TruncatedTensor& L,
                                  const PathFromLieOptions& opts = {});

// Replace every flow atom by a realizing path (identity on path-level input).
CubatureFormulaWiener to_path_level(const CubatureFormulaWiener& f,
                                    const PathFromLieOptions& opts = {});

// Replace every path atom by its log-signature (identity on flow-level input).
CubatureFormulaWiener to_flow_level(const CubatureFormulaWiener& f);

// Dimension of the space of Lie elements of degree <= m over d+1 letters
// (letter 0 of weight 2), via Lyndon word counting.
int lie_dimension(int d, int m);

}  // namespace cubf
