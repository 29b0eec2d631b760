#include "cubf/recombine.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <limits>

namespace cubf {

int monomial_count(int N, int r) {
  long long v = 1;
  for (int k = 1; k <= r; ++k) v = v * (N + k) / k;
  return static_cast<int>(v);
}

// Exponent multi-indices of total degree <= r, by degree then lexicographic.
// The first entry is the constant monomial, so row 0 of the evaluation
// matrix is all ones and every kernel step conserves mass.
static std::vector<std::vector<int>> monomial_exponents(int N, int r) {
  std::vector<std::vector<int>> out;
  std::vector<int> e(N, 0);
  for (int deg = 0; deg <= r; ++deg) {
    std::function<void(int, int)> fill = [&](int pos, int left) {
      if (pos == N - 1) {
        e[pos] = left;
        out.push_back(e);
        return;
      }
      for (int k = left; k >= 0; --k) {
        e[pos] = k;
        fill(pos + 1, left - k);
      }
    };
    fill(0, deg);
  }
  return out;
}

static void eval_monomials(const std::vector<std::vector<int>>& expo, int r,
                           const VectorXd& z, double* out) {
  const int N = static_cast<int>(z.size());
  // coordinate powers z_a^k, k = 0..r
  thread_local std::vector<double> pw;
  pw.assign(static_cast<std::size_t>(N) * (r + 1), 1.0);
  for (int a = 0; a < N; ++a)
    for (int k = 1; k <= r; ++k) pw[a * (r + 1) + k] = pw[a * (r + 1) + k - 1] * z[a];
  for (std::size_t j = 0; j < expo.size(); ++j) {
    double v = 1.0;
    for (int a = 0; a < N; ++a) v *= pw[a * (r + 1) + expo[j][a]];
    out[j] = v;
  }
}

// ---------------------------------------------------------------------------
// Morton keys

std::vector<MortonKey> morton_keys(const DiscreteMeasure& mu) {
  const int N = mu.dim(), n = mu.size();
  const int nwords = (52 * N + 63) / 64;
  VectorXd lo = mu.points.rowwise().minCoeff();
  VectorXd hi = mu.points.rowwise().maxCoeff();
  VectorXd width(N);
  for (int a = 0; a < N; ++a) {
    double ref = std::max({hi[a] - lo[a], std::abs(lo[a]), std::abs(hi[a]), 1.0});
    width[a] = (hi[a] - lo[a]) + 1e-9 * ref;  // upper pad keeps the max below 1
  }
  std::vector<MortonKey> keys(n, MortonKey(nwords, 0));
  const double top = std::nextafter(1.0, 0.0);
  for (int i = 0; i < n; ++i) {
    for (int a = 0; a < N; ++a) {
      double v = 0.5 + 0.5 * (mu.points(a, i) - lo[a]) / width[a];
      v = std::min(std::max(v, 0.5), top);
      // v in [0.5, 1) has a fixed exponent; its 52 mantissa bits are the
      // binary expansion of 2v - 1
      std::uint64_t mant = std::bit_cast<std::uint64_t>(v) & ((1ull << 52) - 1);
      for (int t = 0; t < 52; ++t) {
        if ((mant >> (51 - t)) & 1) {
          int k = t * N + a;
          keys[i][k / 64] |= 1ull << (63 - (k % 64));
        }
      }
    }
  }
  return keys;
}

// compare the first `bits` bits of two keys
static bool key_prefix_equal(const MortonKey& a, const MortonKey& b, int bits) {
  int full = bits / 64, rem = bits % 64;
  for (int w = 0; w < full; ++w)
    if (a[w] != b[w]) return false;
  if (rem == 0) return true;
  std::uint64_t mask = ~0ull << (64 - rem);
  return (a[full] & mask) == (b[full] & mask);
}

std::vector<Patch> morton_partition(const DiscreteMeasure& mu, int level) {
  mu.validate(false);
  require(level >= 0, "morton_partition: negative level");
  const int N = mu.dim(), n = mu.size();
  const int bits = std::min(level * N, 52 * N);
  std::vector<MortonKey> keys = morton_keys(mu);
  std::vector<int> idx(n);
  for (int i = 0; i < n; ++i) idx[i] = i;
  std::sort(idx.begin(), idx.end(), [&](int a, int b) {
    if (keys[a] != keys[b]) return keys[a] < keys[b];
    return a < b;
  });
  std::vector<Patch> patches;
  int start = 0;
  while (start < n) {
    int end = start + 1;
    while (end < n && key_prefix_equal(keys[idx[start]], keys[idx[end]], bits)) ++end;
    Patch p;
    p.members.assign(idx.begin() + start, idx.begin() + end);
    p.box_lo = mu.points.col(p.members[0]);
    p.box_hi = p.box_lo;
    double mass = 0.0;
    VectorXd wx = VectorXd::Zero(N);
    for (int i : p.members) {
      p.box_lo = p.box_lo.cwiseMin(mu.points.col(i));
      p.box_hi = p.box_hi.cwiseMax(mu.points.col(i));
      mass += mu.weights[i];
      wx += mu.weights[i] * mu.points.col(i);
    }
    p.center = (mass > 0.0) ? VectorXd(wx / mass) : VectorXd(0.5 * (p.box_lo + p.box_hi));
    p.radius = 0.0;
    for (int i : p.members)
      p.radius = std::max(p.radius, (mu.points.col(i) - p.center).cwiseAbs().maxCoeff());
    p.radius = std::max(p.radius, 1e-9 * (1.0 + p.center.cwiseAbs().maxCoeff()));
    patches.push_back(std::move(p));
    start = end;
  }
  return patches;
}

// ---------------------------------------------------------------------------
// Moment-matching reduction

DiscreteMeasure reduce_patch(const DiscreteMeasure& mu, int r, const VectorXd& center,
                             double scale) {
  require(r >= 0, "reduce_patch: negative degree");
  require(scale > 0.0, "reduce_patch: scale must be positive");
  require(center.size() == mu.dim(), "reduce_patch: center dimension mismatch");
  const int N = mu.dim(), n = mu.size();
  const int nm = monomial_count(N, r);
  if (n <= nm) return mu;

  const auto expo = monomial_exponents(N, r);
  require(mu.weights.minCoeff() > 0.0, "reduce_patch: weights must be positive");
  const double mass_in = mu.mass();

  // input moments in the centered/scaled coordinates, for the self-check
  VectorXd mom_in = VectorXd::Zero(nm);
  MatrixXd cols(nm, n);
  for (int i = 0; i < n; ++i) {
    VectorXd z = (mu.points.col(i) - center) / scale;
    eval_monomials(expo, r, z, cols.col(i).data());
    mom_in += mu.weights[i] * cols.col(i);
  }

  const int cap = std::min(n, 2 * nm);
  std::vector<int> blk;  // atom ids in the working block
  blk.reserve(cap);
  std::vector<double> w;
  w.reserve(cap);
  int next = 0;

  auto drop_col = [](MatrixXd& U, int c) {
    if (c + 1 < U.cols())
      U.block(0, c, U.rows(), U.cols() - c - 1) = U.rightCols(U.cols() - c - 1).eval();
    U.conservativeResize(Eigen::NoChange, U.cols() - 1);
  };

  while (true) {
    while (static_cast<int>(blk.size()) < cap && next < n) {
      blk.push_back(next);
      w.push_back(mu.weights[next]);
      ++next;
    }
    int b = static_cast<int>(blk.size());
    if (b <= nm) {
      if (next >= n) break;
      continue;
    }
    // kernel of the evaluation matrix = orthogonal complement of the column
    // space of its transpose; PhiT has more rows than its nm columns, so the
    // complement is never empty and every round eliminates atoms
    MatrixXd PhiT(b, nm);
    for (int i = 0; i < b; ++i) PhiT.row(i) = cols.col(blk[i]).transpose();
    Eigen::ColPivHouseholderQR<MatrixXd> qr(PhiT);
    int rank = std::min<int>(static_cast<int>(qr.rank()), b - 1);
    MatrixXd U = (qr.householderQ() * MatrixXd::Identity(b, b)).rightCols(b - rank);

    int eliminated = 0;
    while (U.cols() > 0) {
      VectorXd psi = U.col(0);
      if (psi.maxCoeff() <= 0.0) psi = -psi;
      double postol = 1e-12 * psi.cwiseAbs().maxCoeff();
      double alpha = std::numeric_limits<double>::infinity();
      int imin = -1;
      for (int i = 0; i < b; ++i)
        if (psi[i] > postol) {
          double ratio = w[i] / psi[i];
          if (ratio < alpha) {
            alpha = ratio;
            imin = i;
          }
        }
      if (imin < 0) {  // direction without usable positive entries
        drop_col(U, 0);
        continue;
      }
      for (int i = 0; i < b; ++i) w[i] -= alpha * psi[i];
      w[imin] = 0.0;
      std::vector<int> zeroed;
      for (int i = 0; i < b; ++i)
        if (w[i] <= 0.0) {
          w[i] = 0.0;
          zeroed.push_back(i);
        }
      // pivot the zeroed rows out of the remaining kernel basis so the
      // surviving columns stay kernel vectors after the rows are removed
      for (int c = 1; c < U.cols(); ++c) U.col(c) -= (U(imin, c) / psi[imin]) * psi;
      drop_col(U, 0);
      for (int j : zeroed) {
        if (j == imin || U.cols() == 0) continue;
        int cbest = 0;
        for (int c = 1; c < U.cols(); ++c)
          if (std::abs(U(j, c)) > std::abs(U(j, cbest))) cbest = c;
        if (std::abs(U(j, cbest)) <= 1e-13) continue;  // basis already vanishes at j
        for (int c = 0; c < U.cols(); ++c) {
          if (c == cbest) continue;
          U.col(c) -= (U(j, c) / U(j, cbest)) * U.col(cbest);
        }
        drop_col(U, cbest);
      }
      // compact the block
      int keep = 0;
      for (int i = 0; i < b; ++i)
        if (w[i] > 0.0) {
          blk[keep] = blk[i];
          w[keep] = w[i];
          if (keep != i) U.row(keep) = U.row(i);
          ++keep;
        }
      eliminated += b - keep;
      blk.resize(keep);
      w.resize(keep);
      U.conservativeResize(keep, Eigen::NoChange);
      b = keep;
    }
    if (eliminated == 0) throw numerical_error("reduce_patch: elimination stalled");
  }

  DiscreteMeasure out;
  const int nout = static_cast<int>(blk.size());
  out.points.resize(N, nout);
  out.weights.resize(nout);
  for (int i = 0; i < nout; ++i) {
    out.points.col(i) = mu.points.col(blk[i]);
    out.weights[i] = w[i];
  }
  out.weights *= mass_in / out.mass();

  VectorXd mom_out = VectorXd::Zero(nm);
  for (int i = 0; i < nout; ++i) mom_out += out.weights[i] * cols.col(blk[i]);
  double tol = 1e-10 * std::max(mass_in, mom_in.cwiseAbs().maxCoeff());
  double drift = (mom_out - mom_in).cwiseAbs().maxCoeff();
  if (drift > tol) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "reduce_patch: moment drift %.3e of %d atoms (tol %.3e)",
                  drift, n, tol);
    throw numerical_error(buf);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Patched recombination

// One patch: drop negligible weights, reduce, restore the exact patch mass.
static DiscreteMeasure reduce_one_patch(const DiscreteMeasure& mu, const Patch& p, int r) {
  double patch_mass = 0.0;
  for (int i : p.members) patch_mass += mu.weights[i];
  DiscreteMeasure sub;
  if (patch_mass <= 0.0) {
    sub.points.resize(mu.dim(), 0);
    sub.weights.resize(0);
    return sub;
  }
  std::vector<int> kept;
  for (int i : p.members)
    if (mu.weights[i] >= 1e-16 * patch_mass) kept.push_back(i);
  sub.points.resize(mu.dim(), static_cast<int>(kept.size()));
  sub.weights.resize(static_cast<int>(kept.size()));
  for (std::size_t k = 0; k < kept.size(); ++k) {
    sub.points.col(static_cast<int>(k)) = mu.points.col(kept[k]);
    sub.weights[static_cast<int>(k)] = mu.weights[kept[k]];
  }
  DiscreteMeasure red = reduce_patch(sub, r, p.center, p.radius);
  red.weights *= patch_mass / red.mass();
  return red;
}

static DiscreteMeasure concat_patches(const DiscreteMeasure& mu,
                                      const std::vector<DiscreteMeasure>& parts) {
  int total = 0;
  for (const auto& p : parts) total += p.size();
  DiscreteMeasure out;
  out.points.resize(mu.dim(), total);
  out.weights.resize(total);
  int at = 0;
  for (const auto& p : parts) {
    if (p.size() == 0) continue;
    out.points.middleCols(at, p.size()) = p.points;
    out.weights.segment(at, p.size()) = p.weights;
    at += p.size();
  }
  return out;
}

DiscreteMeasure rec(const DiscreteMeasure& mu, int level, int r) {
  std::vector<Patch> patches = morton_partition(mu, level);
  const int P = static_cast<int>(patches.size());
  std::vector<DiscreteMeasure> parts(P);
  std::exception_ptr err;
#pragma omp parallel for schedule(dynamic)
  for (int p = 0; p < P; ++p) {
    try {
      parts[p] = reduce_one_patch(mu, patches[p], r);
    } catch (...) {
#pragma omp critical
      if (!err) err = std::current_exception();
    }
  }
  if (err) std::rethrow_exception(err);
  return concat_patches(mu, parts);
}

AdaptiveRecResult adaptive_rec(const DiscreteMeasure& mu, int r, double theta,
                               const std::function<VectorXd(const DiscreteMeasure&)>& eval,
                               int n_max) {
  require(!(theta < 0.0), "adaptive_rec: negative tolerance");
  VectorXd base = eval(mu);
  AdaptiveRecResult last;
  bool have_last = false;
  for (int n = 0; n <= n_max; ++n) {
    DiscreteMeasure nu;
    try {
      nu = rec(mu, n, r);
    } catch (const numerical_error&) {
      continue;  // degenerate patches at this level: split further
    }
    int used = static_cast<int>(morton_partition(mu, n).size());
    double defect = (eval(nu) - base).cwiseAbs().maxCoeff();
    if (defect < theta) return {std::move(nu), n, used, true};
    last = {std::move(nu), n, used, false};
    have_last = true;
  }
  if (!have_last) throw numerical_error("adaptive_rec: all levels degenerate");
  return last;
}

namespace serial {

DiscreteMeasure rec(const DiscreteMeasure& mu, int level, int r) {
  std::vector<Patch> patches = morton_partition(mu, level);
  std::vector<DiscreteMeasure> parts(patches.size());
  for (std::size_t p = 0; p < patches.size(); ++p)
    parts[p] = reduce_one_patch(mu, patches[p], r);
  return concat_patches(mu, parts);
}

}  // namespace serial

}  // namespace cubf
