#pragma once

#include <cstdint>

#include "cubf/measure.hpp"

namespace cubf {

// Interleaved-mantissa Morton key: bit t*N + a is mantissa bit t of
// box-normalized coordinate a.  Lexicographic word comparison equals
// bit-string comparison; the first n*N bits identify the level-n sub-box.
using MortonKey = std::vector<std::uint64_t>;

struct Patch {
  std::vector<int> members;  // indices into the parent measure
  VectorXd box_lo, box_hi;   // tight bounding box of the members
  VectorXd center;           // weighted centroid
  double radius = 0.0;       // max |x - center|_inf over members, floored
};

// Morton keys of all atoms: coordinates affinely mapped into [0.5, 1)^N using
// the global bounding box expanded by 1e-9 relative, then the 52 mantissa
// bits of each coordinate interleaved.
std::vector<MortonKey> morton_keys(const DiscreteMeasure& mu);

// Partition atoms into the occupied level-n boxes by sorting keys (boxes are
// never materialized).  Patches appear in Morton-key order.
std::vector<Patch> morton_partition(const DiscreteMeasure& mu, int level);

// Moment-matching support reduction on one (unnormalized) patch measure.
// Monomials are evaluated in coordinates centered at `center` and divided by
// `scale`; all moments of total degree <= r are preserved and the output
// support is a subset of the input support of size <= binom(N+r, r).
DiscreteMeasure reduce_patch(const DiscreteMeasure& mu, int r, const VectorXd& center,
                             double scale);

// Patched recombination: reduce every patch of the level-n Morton partition
// and concatenate the results in patch order.
DiscreteMeasure rec(const DiscreteMeasure& mu, int level, int r);

struct AdaptiveRecResult {
  DiscreteMeasure measure;
  int level = 0;
  int patches = 0;        // occupied patches of the winning partition
  bool attained = false;  // defect < theta reached within the level cap
};

// Coarsest-first search for the largest patches whose recombination moves the
// test functional by less than theta: returns rec(mu, n, r) for the smallest
// n with |eval(mu) - eval(rec(mu, n, r))|_inf < theta, n = 0..n_max.  Levels
// whose reduction degenerates numerically are skipped (patch splitting).
AdaptiveRecResult adaptive_rec(const DiscreteMeasure& mu, int r, double theta,
                               const std::function<VectorXd(const DiscreteMeasure&)>& eval,
                               int n_max = 8);

int monomial_count(int N, int r);  // binom(N+r, r)

namespace serial {
DiscreteMeasure rec(const DiscreteMeasure& mu, int level, int r);
}

}  // namespace cubf
