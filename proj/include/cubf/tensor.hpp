#pragma once

#include <cstdint>
#include <vector>

#include "cubf/common.hpp"

namespace cubf {

// Words over the alphabet {0,1,...,d}.  Letter 0 is the time component and
// counts twice towards the degree; letters 1..d count once.
struct Word {
  std::vector<int> letters;
  int length() const { return static_cast<int>(letters.size()); }
  int degree() const {
    int deg = 0;
    for (int a : letters) deg += (a == 0) ? 2 : 1;
    return deg;
  }
};

// Slot layout for the tensor algebra over d+1 letters truncated at degree m:
// one contiguous block per word length l = 0..m, slot within a block is the
// base-(d+1) value of the letter string (first letter most significant).
// Words of length <= m whose degree exceeds m are present as slots but marked
// invalid; algebra operations keep their coefficients at exactly zero, which
// implements the quotient by degree.
class WordTable {
 public:
  WordTable(int d, int m);

  int d, m;
  int size;                      // total number of slots
  std::vector<int> offset;       // offset[l] = first slot of the length-l block
  std::vector<std::uint8_t> len_of;  // word length per slot
  std::vector<std::uint8_t> deg;     // degree per slot (0xFF if > m)
  std::vector<int> valid;        // slots with degree <= m, ascending

  int index(const Word& w) const;
  Word word(int slot) const;
  bool is_valid(int slot) const { return deg[slot] != 0xFF; }

  // Cached shared instance (tables are immutable once built).
  static const WordTable& get(int d, int m);
};

// Dense element of the degree-truncated tensor algebra.
struct TruncatedTensor {
  const WordTable* tab = nullptr;
  std::vector<double> c;

  TruncatedTensor() = default;
  TruncatedTensor(int d, int m) : tab(&WordTable::get(d, m)), c(tab->size, 0.0) {}

  int d() const { return tab->d; }
  int m() const { return tab->m; }
  double& operator[](int slot) { return c[slot]; }
  double operator[](int slot) const { return c[slot]; }
  double coeff(const Word& w) const;
  void set_coeff(const Word& w, double v);

  TruncatedTensor& operator+=(const TruncatedTensor& b);
  TruncatedTensor& operator-=(const TruncatedTensor& b);
  TruncatedTensor& operator*=(double s);
};

TruncatedTensor operator+(TruncatedTensor a, const TruncatedTensor& b);
TruncatedTensor operator-(TruncatedTensor a, const TruncatedTensor& b);
TruncatedTensor operator*(double s, TruncatedTensor a);

TruncatedTensor tensor_unit(int d, int m);  // the constant 1
TruncatedTensor tensor_product(const TruncatedTensor& a, const TruncatedTensor& b);
// exp of a general element (constant term handled via the scalar factor)
TruncatedTensor tensor_exp(const TruncatedTensor& a);
// log; requires positive constant term
TruncatedTensor tensor_log(const TruncatedTensor& a);

// Scaling t^(degree/2) per coefficient: the pushforward of the algebra under
// Brownian scaling of the underlying increments over a window of length t.
TruncatedTensor brownian_scale(double t, const TruncatedTensor& a);

// Right-nested bracket of a word: [e_{a1},[e_{a2},...,[e_{a_{l-1}},e_{a_l}]...]],
// expanded into word coefficients.  Length-1 words map to the letter itself.
TruncatedTensor right_nested_bracket(const Word& w, int d, int m);

// First-kind projection: on each length-l homogeneous component applies the
// right-nested bracketing map divided by l.  Fixes Lie elements.
TruncatedTensor lie_project(const TruncatedTensor& a);

// max |a - lie_project(a)| over slots, relative to max(1, max|a|)
double lie_defect(const TruncatedTensor& a);
bool is_lie(const TruncatedTensor& a, double tol = 1e-10);

double max_abs(const TruncatedTensor& a);

// ---------------------------------------------------------------------------
// Bounded-variation driving paths.  Coordinate 0 is time and must start at 0
// and be nondecreasing; coordinates 1..d are the spatial channels.
struct PiecewiseLinearPath {
  int d = 0;
  std::vector<double> knots;             // parameter values, strictly increasing
  std::vector<VectorXd> values;          // size knots.size(), each of dim d+1

  int segments() const { return static_cast<int>(knots.size()) - 1; }
  void validate() const;
};

// Signature of the path truncated at degree m (letter 0 = the time channel).
// Exact: the product over segments of the exponential of the increment.
TruncatedTensor signature(const PiecewiseLinearPath& path, int m);

TruncatedTensor log_signature(const PiecewiseLinearPath& path, int m);

}  // namespace cubf
