#include "cubf/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <memory>
#include <mutex>

namespace cubf {

WordTable::WordTable(int d_, int m_) : d(d_), m(m_) {
  require(d >= 1 && d <= 8, "WordTable: d must be in [1,8]");
  require(m >= 1 && m <= 10, "WordTable: m must be in [1,10]");
  offset.assign(m + 2, 0);
  int q = d + 1;
  int total = 0, block = 1;
  for (int l = 0; l <= m; ++l) {
    offset[l] = total;
    total += block;
    block *= q;
  }
  offset[m + 1] = total;
  size = total;
  len_of.assign(size, 0);
  deg.assign(size, 0);
  for (int l = 0; l <= m; ++l) {
    int nb = offset[l + 1] - offset[l];
    for (int loc = 0; loc < nb; ++loc) {
      int slot = offset[l] + loc;
      len_of[slot] = static_cast<std::uint8_t>(l);
      // count zero digits of loc in base q, over exactly l digits
      int zeros = 0, v = loc;
      for (int k = 0; k < l; ++k) {
        if (v % q == 0) ++zeros;
        v /= q;
      }
      int dg = l + zeros;
      deg[slot] = (dg <= m) ? static_cast<std::uint8_t>(dg) : 0xFF;
      if (dg <= m) valid.push_back(slot);
    }
  }
}

int WordTable::index(const Word& w) const {
  int l = w.length();
  require(l <= m, "word longer than truncation level");
  int loc = 0;
  for (int a : w.letters) {
    require(a >= 0 && a <= d, "letter out of range");
    loc = loc * (d + 1) + a;
  }
  return offset[l] + loc;
}

Word WordTable::word(int slot) const {
  int l = len_of[slot];
  int loc = slot - offset[l];
  Word w;
  w.letters.assign(l, 0);
  for (int k = l - 1; k >= 0; --k) {
    w.letters[k] = loc % (d + 1);
    loc /= (d + 1);
  }
  return w;
}

const WordTable& WordTable::get(int d, int m) {
  static std::mutex mu;
  static std::map<std::pair<int, int>, std::unique_ptr<WordTable>> cache;
  std::lock_guard<std::mutex> lock(mu);
  auto key = std::make_pair(d, m);
  auto it = cache.find(key);
  if (it == cache.end())
    it = cache.emplace(key, std::make_unique<WordTable>(d, m)).first;
  return *it->second;
}

double TruncatedTensor::coeff(const Word& w) const { return c[tab->index(w)]; }

void TruncatedTensor::set_coeff(const Word& w, double v) {
  int slot = tab->index(w);
  require(tab->is_valid(slot), "cannot set coefficient of a word with degree > m");
  c[slot] = v;
}

static void check_same(const TruncatedTensor& a, const TruncatedTensor& b) {
  require(a.tab == b.tab, "tensors live in different algebras");
}

TruncatedTensor& TruncatedTensor::operator+=(const TruncatedTensor& b) {
  check_same(*this, b);
  for (int i = 0; i < tab->size; ++i) c[i] += b.c[i];
  return *this;
}

TruncatedTensor& TruncatedTensor::operator-=(const TruncatedTensor& b) {
  check_same(*this, b);
  for (int i = 0; i < tab->size; ++i) c[i] -= b.c[i];
  return *this;
}

TruncatedTensor& TruncatedTensor::operator*=(double s) {
  for (double& x : c) x *= s;
  return *this;
}

TruncatedTensor operator+(TruncatedTensor a, const TruncatedTensor& b) { return a += b; }
TruncatedTensor operator-(TruncatedTensor a, const TruncatedTensor& b) { return a -= b; }
TruncatedTensor operator*(double s, TruncatedTensor a) { return a *= s; }

TruncatedTensor tensor_unit(int d, int m) {
  TruncatedTensor t(d, m);
  t.c[0] = 1.0;
  return t;
}

static void mask_invalid(TruncatedTensor& t) {
  const WordTable& T = *t.tab;
  for (int i = 0; i < T.size; ++i)
    if (T.deg[i] == 0xFF) t.c[i] = 0.0;
}

TruncatedTensor tensor_product(const TruncatedTensor& a, const TruncatedTensor& b) {
  check_same(a, b);
  const WordTable& T = *a.tab;
  int q = T.d + 1, m = T.m;
  TruncatedTensor out(T.d, m);
  // block sizes
  std::vector<int> bs(m + 1);
  for (int l = 0; l <= m; ++l) bs[l] = T.offset[l + 1] - T.offset[l];
  for (int l1 = 0; l1 <= m; ++l1) {
    for (int i1 = 0; i1 < bs[l1]; ++i1) {
      double av = a.c[T.offset[l1] + i1];
      if (av == 0.0) continue;
      for (int l2 = 0; l2 + l1 <= m; ++l2) {
        const double* bp = b.c.data() + T.offset[l2];
        double* op = out.c.data() + T.offset[l1 + l2] + i1 * bs[l2];
        for (int i2 = 0; i2 < bs[l2]; ++i2) op[i2] += av * bp[i2];
      }
    }
  }
  (void)q;
  mask_invalid(out);
  return out;
}

TruncatedTensor tensor_exp(const TruncatedTensor& a) {
  const WordTable& T = *a.tab;
  TruncatedTensor x = a;
  double a0 = x.c[0];
  x.c[0] = 0.0;
  // x has zero constant term, hence minimal degree >= 1: the series terminates.
  TruncatedTensor out = tensor_unit(T.d, T.m);
  TruncatedTensor pw = tensor_unit(T.d, T.m);
  double fact = 1.0;
  for (int k = 1; k <= T.m; ++k) {
    pw = tensor_product(pw, x);
    fact *= k;
    for (int i = 0; i < T.size; ++i) out.c[i] += pw.c[i] / fact;
  }
  if (a0 != 0.0) out *= std::exp(a0);
  return out;
}

TruncatedTensor tensor_log(const TruncatedTensor& a) {
  const WordTable& T = *a.tab;
  double a0 = a.c[0];
  require(a0 > 0.0, "tensor_log requires a positive constant term");
  TruncatedTensor x = a;
  x *= 1.0 / a0;
  x.c[0] = 0.0;
  TruncatedTensor out(T.d, T.m);
  out.c[0] = std::log(a0);
  TruncatedTensor pw = tensor_unit(T.d, T.m);
  for (int k = 1; k <= T.m; ++k) {
    pw = tensor_product(pw, x);
    double sgn = (k % 2 == 1) ? 1.0 : -1.0;
    for (int i = 0; i < T.size; ++i) out.c[i] += sgn * pw.c[i] / k;
  }
  return out;
}

TruncatedTensor brownian_scale(double t, const TruncatedTensor& a) {
  require(t >= 0.0, "brownian_scale requires t >= 0");
  const WordTable& T = *a.tab;
  TruncatedTensor out = a;
  double rt = std::sqrt(t);
  std::vector<double> pw(T.m + 1, 1.0);
  for (int k = 1; k <= T.m; ++k) pw[k] = pw[k - 1] * rt;
  for (int i = 0; i < T.size; ++i)
    if (T.deg[i] != 0xFF) out.c[i] *= pw[T.deg[i]];
  return out;
}

double max_abs(const TruncatedTensor& a) {
  double mx = 0.0;
  for (double v : a.c) mx = std::max(mx, std::abs(v));
  return mx;
}

// Right-nested bracketing, working on the local coordinates of one length
// block: rho(a1 a2 ... al) = ad(a1) ad(a2) ... applied to e_{al}.
static std::vector<double> rho_local(const std::vector<int>& letters, int q) {
  int l = static_cast<int>(letters.size());
  // build from the last letter outward
  std::vector<double> cur(q, 0.0);
  cur[letters[l - 1]] = 1.0;
  int cur_len = 1;
  for (int p = l - 2; p >= 0; --p) {
    int a = letters[p];
    int nb = 1;
    for (int k = 0; k <= cur_len; ++k) nb *= q;  // q^(cur_len+1)
    std::vector<double> nxt(nb, 0.0);
    int stride = nb / q;  // q^cur_len
    for (int j = 0; j < stride; ++j) {
      double v = cur[j];
      if (v == 0.0) continue;
      nxt[a * stride + j] += v;   // prepend letter a
      nxt[j * q + a] -= v;        // append letter a
    }
    cur.swap(nxt);
    ++cur_len;
  }
  return cur;
}

TruncatedTensor right_nested_bracket(const Word& w, int d, int m) {
  const WordTable& T = WordTable::get(d, m);
  int l = w.length();
  require(l >= 1 && l <= m, "bracket word length out of range");
  TruncatedTensor out(d, m);
  std::vector<double> loc = rho_local(w.letters, d + 1);
  for (std::size_t j = 0; j < loc.size(); ++j)
    out.c[T.offset[l] + j] = loc[j];
  mask_invalid(out);
  return out;
}

TruncatedTensor lie_project(const TruncatedTensor& a) {
  const WordTable& T = *a.tab;
  TruncatedTensor out(T.d, T.m);
  for (int slot : T.valid) {
    int l = T.len_of[slot];
    if (l == 0) continue;  // no constant term in a Lie element
    double v = a.c[slot];
    if (v == 0.0) continue;
    if (l == 1) {
      out.c[slot] += v;
      continue;
    }
    Word w = T.word(slot);
    std::vector<double> loc = rho_local(w.letters, T.d + 1);
    double f = v / l;
    for (std::size_t j = 0; j < loc.size(); ++j)
      if (loc[j] != 0.0) out.c[T.offset[l] + j] += f * loc[j];
  }
  mask_invalid(out);
  return out;
}

double lie_defect(const TruncatedTensor& a) {
  TruncatedTensor p = lie_project(a);
  double mx = 0.0;
  double scale = std::max(1.0, max_abs(a));
  for (int i = 0; i < a.tab->size; ++i)
    mx = std::max(mx, std::abs(a.c[i] - p.c[i]));
  return mx / scale;
}

bool is_lie(const TruncatedTensor& a, double tol) { return lie_defect(a) <= tol; }

// ---------------------------------------------------------------------------

void PiecewiseLinearPath::validate() const {
  require(d >= 1, "path dimension must be >= 1");
  require(knots.size() >= 2, "path needs at least two knots");
  require(values.size() == knots.size(), "knot/value count mismatch");
  for (std::size_t i = 0; i < knots.size(); ++i) {
    require(values[i].size() == d + 1, "path value dimension mismatch");
    if (i > 0) require(knots[i] > knots[i - 1], "path knots must increase");
  }
  require(values[0][0] == 0.0, "time coordinate must start at 0");
  for (std::size_t i = 1; i < values.size(); ++i)
    require(values[i][0] >= values[i - 1][0] - 1e-15, "time coordinate must be nondecreasing");
}

// exp of a pure level-1 element with coefficients v[0..d]: coefficient of a
// length-l word is prod(v over letters)/l!, built block by block.
static TruncatedTensor segment_exp(const VectorXd& v, int d, int m) {
  const WordTable& T = WordTable::get(d, m);
  TruncatedTensor out(d, m);
  out.c[0] = 1.0;
  int q = d + 1;
  int prev_off = 0, prev_n = 1;
  for (int l = 1; l <= m; ++l) {
    int off = T.offset[l];
    for (int i = 0; i < prev_n; ++i) {
      double base = out.c[prev_off + i] / l;
      if (base == 0.0) continue;
      double* op = out.c.data() + off + i * q;
      for (int a = 0; a < q; ++a) op[a] = base * v[a];
    }
    prev_off = off;
    prev_n *= q;
  }
  mask_invalid(out);
  return out;
}

TruncatedTensor signature(const PiecewiseLinearPath& path, int m) {
  path.validate();
  TruncatedTensor sig = tensor_unit(path.d, m);
  for (int s = 0; s < path.segments(); ++s) {
    VectorXd inc = path.values[s + 1] - path.values[s];
    sig = tensor_product(sig, segment_exp(inc, path.d, m));
  }
  return sig;
}

TruncatedTensor log_signature(const PiecewiseLinearPath& path, int m) {
  return tensor_log(signature(path, m));
}

}  // namespace cubf
