#include "cubf/cubature.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <limits>

#include <json.hpp>

namespace cubf {

void CubatureFormulaWiener::validate() const {
  require(d >= 1, "formula: d must be >= 1");
  require(m >= 1, "formula: m must be >= 1");
  require(T > 0.0, "formula: T must be positive");
  require(!weights.empty(), "formula: empty support");
  std::size_t n = weights.size();
  if (level == Level::path)
    require(paths.size() == n && lies.empty(), "formula: path support size mismatch");
  else
    require(lies.size() == n && paths.empty(), "formula: flow support size mismatch");
  double total = 0.0;
  for (double w : weights) {
    require(w > 0.0, "formula: weights must be positive");
    total += w;
  }
  require(std::abs(total - 1.0) < 1e-12, "formula: weights must sum to 1");
  if (level == Level::path)
    for (const auto& p : paths) {
      p.validate();
      require(p.d == d, "formula: path dimension mismatch");
    }
  else
    for (const auto& L : lies)
      require(L.tab->d == d && L.tab->m == m, "formula: lie polynomial algebra mismatch");
}

TruncatedTensor expected_signature(int d, int m, double T) {
  require(T >= 0.0, "expected_signature: T must be >= 0");
  TruncatedTensor gen(d, m);
  gen.set_coeff(Word{{0}}, 1.0);
  for (int i = 1; i <= d; ++i) {
    Word w{{i, i}};
    gen.set_coeff(w, 0.5);
  }
  return brownian_scale(T, tensor_exp(gen));
}

static TruncatedTensor formula_moments(const CubatureFormulaWiener& f, int m) {
  TruncatedTensor acc(f.d, m);
  for (int i = 0; i < f.size(); ++i) {
    TruncatedTensor s = (f.level == CubatureFormulaWiener::Level::path)
                            ? signature(f.paths[i], m)
                            : tensor_exp(embed(f.lies[i], m));
    acc += f.weights[i] * s;
  }
  return acc;
}

VerifyResult verify_formula(const CubatureFormulaWiener& f, double tol) {
  f.validate();
  TruncatedTensor got = formula_moments(f, f.m);
  TruncatedTensor want = expected_signature(f.d, f.m, f.T);
  VerifyResult r;
  r.max_defect = max_abs(got - want);
  r.pass = r.max_defect < tol;
  return r;
}

CubatureFormulaWiener build_degree3(int d) {
  require(d >= 1, "build_degree3: d must be >= 1");
  CubatureFormulaWiener f;
  f.d = d;
  f.m = 3;
  f.level = CubatureFormulaWiener::Level::path;
  f.T = 1.0;
  double z = std::sqrt(static_cast<double>(d));
  for (int i = 1; i <= d; ++i) {
    for (double sgn : {1.0, -1.0}) {
      PiecewiseLinearPath p;
      p.d = d;
      p.knots = {0.0, 1.0};
      VectorXd v0 = VectorXd::Zero(d + 1), v1 = VectorXd::Zero(d + 1);
      v1[0] = 1.0;
      v1[i] = sgn * z;
      p.values = {v0, v1};
      f.paths.push_back(std::move(p));
      f.weights.push_back(1.0 / (2.0 * d));
    }
  }
  return f;
}

CubatureFormulaWiener rescale_formula(const CubatureFormulaWiener& f, double T) {
  require(T > 0.0, "rescale_formula: T must be positive");
  CubatureFormulaWiener g = f;
  double ratio = T / f.T;
  double rt = std::sqrt(ratio);
  if (f.level == CubatureFormulaWiener::Level::path) {
    for (auto& p : g.paths)
      for (auto& v : p.values) {
        v[0] *= ratio;
        for (int i = 1; i <= f.d; ++i) v[i] *= rt;
      }
  } else {
    for (auto& L : g.lies) L = brownian_scale(ratio, L);
  }
  g.T = T;
  return g;
}

TruncatedTensor embed(const TruncatedTensor& a, int m2) {
  const WordTable& src = *a.tab;
  require(m2 >= src.m, "embed: target degree must not truncate");
  if (m2 == src.m) return a;
  TruncatedTensor out(src.d, m2);
  const WordTable& dst = *out.tab;
  for (int l = 0; l <= src.m; ++l) {
    int n = src.offset[l + 1] - src.offset[l];
    for (int j = 0; j < n; ++j) {
      double v = a.c[src.offset[l] + j];
      if (v != 0.0 && src.deg[src.offset[l] + j] != 0xFF) out.c[dst.offset[l] + j] = v;
    }
  }
  return out;
}

// --- JSON loader -------------------------------------------------------------

static double parse_coeff(const nlohmann::json& j, const char* what) {
  if (j.is_number()) return j.get<double>();
  if (j.is_string()) {
    std::string s = j.get<std::string>();
    std::size_t slash = s.find('/');
    try {
      if (slash == std::string::npos) return std::stod(s);
      double num = std::stod(s.substr(0, slash));
      double den = std::stod(s.substr(slash + 1));
      require(den != 0.0, std::string(what) + ": zero denominator");
      return num / den;
    } catch (const std::invalid_argument&) {
      throw validation_error(std::string(what) + ": malformed rational '" + s + "'");
    }
  }
  throw validation_error(std::string(what) + ": coefficient must be a number or string");
}

CubatureFormulaWiener load_formula(const std::string& filename) {
  std::ifstream in(filename);
  require(in.good(), "load_formula: cannot open " + filename);
  nlohmann::json root;
  try {
    in >> root;
  } catch (const nlohmann::json::parse_error& e) {
    throw validation_error("load_formula: JSON parse error in " + filename + ": " + e.what());
  }
  require(root.is_object(), "load_formula: top level must be an object");
  for (const char* key : {"d", "m", "level", "weights", "support"})
    require(root.contains(key), std::string("load_formula: missing field '") + key + "'");

  CubatureFormulaWiener f;
  f.d = root["d"].get<int>();
  f.m = root["m"].get<int>();
  std::string level = root["level"].get<std::string>();
  require(level == "path" || level == "flow", "load_formula: level must be 'path' or 'flow'");
  f.level = (level == "path") ? CubatureFormulaWiener::Level::path
                              : CubatureFormulaWiener::Level::flow;
  f.T = root.value("T", 1.0);

  const auto& jw = root["weights"];
  const auto& js = root["support"];
  require(jw.is_array() && js.is_array(), "load_formula: weights/support must be arrays");
  require(jw.size() == js.size(), "load_formula: weights/support size mismatch");
  for (const auto& w : jw) f.weights.push_back(parse_coeff(w, "weight"));

  for (const auto& atom : js) {
    if (f.level == CubatureFormulaWiener::Level::flow) {
      require(atom.is_array(), "load_formula: flow atom must be a list of [word, coeff] pairs");
      TruncatedTensor L(f.d, f.m);
      for (const auto& term : atom) {
        require(term.is_array() && term.size() == 2, "load_formula: malformed term");
        Word w;
        for (const auto& a : term[0]) w.letters.push_back(a.get<int>());
        double cf = parse_coeff(term[1], "lie coefficient");
        L += cf * right_nested_bracket(w, f.d, f.m);
      }
      f.lies.push_back(std::move(L));
    } else {
      require(atom.is_object() && atom.contains("knots") && atom.contains("values"),
              "load_formula: path atom needs knots/values");
      PiecewiseLinearPath p;
      p.d = f.d;
      for (const auto& k : atom["knots"]) p.knots.push_back(k.get<double>());
      for (const auto& row : atom["values"]) {
        VectorXd v(f.d + 1);
        require(static_cast<int>(row.size()) == f.d + 1, "load_formula: value row dimension");
        int i = 0;
        for (const auto& x : row) v[i++] = parse_coeff(x, "path value");
        p.values.push_back(v);
      }
      f.paths.push_back(std::move(p));
    }
  }

  VerifyResult vr = verify_formula(f, 1e-10);
  if (!vr.pass)
    throw validation_error("load_formula: formula fails verification, max defect " +
                           std::to_string(vr.max_defect));
  return f;
}

// --- Lyndon counting ---------------------------------------------------------

int lie_dimension(int d, int m) {
  // Duval's generation of all Lyndon words over {0..d} of length <= m,
  // keeping those with weighted degree <= m (letter 0 weighs 2).
  int q = d + 1, count = 0;
  std::vector<int> w{-1};
  while (!w.empty()) {
    ++w.back();
    int deg = 0;
    for (int a : w) deg += (a == 0) ? 2 : 1;
    if (deg <= m) ++count;
    int n = static_cast<int>(w.size());
    while (static_cast<int>(w.size()) < m) w.push_back(w[w.size() - n]);
    while (!w.empty() && w.back() == q - 1) w.pop_back();
  }
  return count;
}

// --- path_from_lie -----------------------------------------------------------

namespace {

// exp of a pure level-1 element and its derivatives along spatial letters.
// exp blocks are built by the recursion B_l = (B_{l-1} (x) v)/l; derivative
// blocks follow the product rule.
struct SegExpWithGrad {
  TruncatedTensor e;
  std::vector<TruncatedTensor> de;  // index i-1 = d/dv_i, spatial letters only
};

SegExpWithGrad segment_exp_grad(const VectorXd& v, int d, int m) {
  const WordTable& T = WordTable::get(d, m);
  SegExpWithGrad out{TruncatedTensor(d, m), {}};
  out.e.c[0] = 1.0;
  out.de.assign(d, TruncatedTensor(d, m));
  int q = d + 1;
  int prev_off = 0, prev_n = 1;
  for (int l = 1; l <= m; ++l) {
    int off = T.offset[l];
    for (int i = 0; i < prev_n; ++i) {
      double base = out.e.c[prev_off + i] / l;
      for (int a = 0; a < q; ++a) out.e.c[off + i * q + a] = base * v[a];
      for (int g = 1; g <= d; ++g) {
        double dbase = out.de[g - 1].c[prev_off + i] / l;
        double* dp = out.de[g - 1].c.data() + off + i * q;
        if (dbase != 0.0)
          for (int a = 0; a < q; ++a) dp[a] = dbase * v[a];
        dp[g] += base;
      }
    }
    prev_off = off;
    prev_n *= q;
  }
  for (int i = 0; i < T.size; ++i)
    if (T.deg[i] == 0xFF) {
      out.e.c[i] = 0.0;
      for (auto& g : out.de) g.c[i] = 0.0;
    }
  return out;
}

}  // namespace

PiecewiseLinearPath path_from_lie(const TruncatedTensor& L, const PathFromLieOptions& opts) {
  const WordTable& T = *L.tab;
  int d = T.d, m = T.m;
  require(lie_defect(L) < 1e-8, "path_from_lie: target is not a Lie element");
  double T0 = L.c[T.index(Word{{0}})];
  require(T0 >= 0.0, "path_from_lie: negative time coefficient");

  // Fast path: pure level-1 target realized by a single segment.
  bool pure = true;
  for (int slot : T.valid)
    if (T.len_of[slot] >= 2 && L.c[slot] != 0.0) pure = false;
  if (pure) {
    PiecewiseLinearPath p;
    p.d = d;
    p.knots = {0.0, 1.0};
    VectorXd v0 = VectorXd::Zero(d + 1), v1(d + 1);
    v1[0] = T0;
    for (int i = 1; i <= d; ++i) v1[i] = L.c[T.index(Word{{i}})];
    p.values = {v0, v1};
    return p;
  }
  require(T0 > 0.0, "path_from_lie: nontrivial target needs positive time span");

  int K = opts.segments;
  if (K <= 0) K = std::max(6, (115 * (lie_dimension(d, m) - 1)) / (100 * d) + 3);

  TruncatedTensor G = tensor_exp(L);
  double gscale = std::max(1.0, max_abs(G));

  for (int attempt = 0; attempt <= opts.max_retries; ++attempt) {
    int nvar = K * d;
    Eigen::VectorXd xi = Eigen::VectorXd::Zero(nvar);
    // Initial guess: straight-line split of the level-1 part, overlaid with
    // one square loop per coordinate pair realizing that pair's area
    // component (the antisymmetric level-2 coefficient).  A bare straight
    // line is useless as a start: it is a stationary point of every area
    // residual, so Gauss-Newton cannot leave it.
    {
      for (int k = 0; k < K; ++k)
        for (int i = 0; i < d; ++i) xi[k * d + i] = L.c[T.index(Word{{i + 1}})] / K;
      int window = 0;
      for (int i = 1; i <= d && 4 * (window + 1) <= K; ++i)
        for (int j = i + 1; j <= d && 4 * (window + 1) <= K; ++j) {
          double area = L.c[T.index(Word{{i, j}})];
          if (area == 0.0) continue;
          double c = std::sqrt(std::abs(area));
          int a = (area > 0) ? i : j, b = (area > 0) ? j : i;
          int k0 = 4 * window;
          xi[(k0 + 0) * d + (a - 1)] += c;
          xi[(k0 + 1) * d + (b - 1)] += c;
          xi[(k0 + 2) * d + (a - 1)] -= c;
          xi[(k0 + 3) * d + (b - 1)] -= c;
          ++window;
        }
      if (attempt > 0) {
        Rng jitter(77 + 131 * attempt);
        double amp = 0.25 * attempt / std::sqrt(double(K));
        for (int k = 0; k < K; ++k)
          for (int i = 0; i < d; ++i) xi[k * d + i] += amp * jitter.gaussian();
      }
    }
    double dt = T0 / K;

    // Homotopy in the degree cutoff: first match all words of degree <= 3,
    // then extend the residual row set one degree at a time.  If a direct
    // extension stalls (it can: the new rows are nonconvex in the increments),
    // crawl with a moving target that blends the new-degree coefficients from
    // their current values towards the true ones.
    auto eval_sig = [&](const Eigen::VectorXd& z) {
      TruncatedTensor S = tensor_unit(d, m);
      for (int k = 0; k < K; ++k) {
        VectorXd v(d + 1);
        v[0] = dt;
        for (int i = 0; i < d; ++i) v[i + 1] = z[k * d + i];
        S = tensor_product(S, segment_exp_grad(v, d, m).e);
      }
      return S;
    };

    // Levenberg-Marquardt on the residual S(xi) - tgt over the given rows.
    auto solve_rows = [&](const std::vector<int>& rows, const Eigen::VectorXd& tgt,
                          int max_it) -> bool {
      int nres = static_cast<int>(rows.size());
      double lambda = 1e-8;
      double best = std::numeric_limits<double>::infinity();
      int flat = 0;
      std::vector<SegExpWithGrad> segs(K);
      std::vector<TruncatedTensor> prefix(K + 1), suffix(K + 2);
      for (int it = 0; it < max_it; ++it) {
        for (int k = 0; k < K; ++k) {
          VectorXd v(d + 1);
          v[0] = dt;
          for (int i = 0; i < d; ++i) v[i + 1] = xi[k * d + i];
          segs[k] = segment_exp_grad(v, d, m);
        }
        prefix[0] = tensor_unit(d, m);
        for (int k = 1; k <= K; ++k) prefix[k] = tensor_product(prefix[k - 1], segs[k - 1].e);
        suffix[K + 1] = tensor_unit(d, m);
        for (int k = K; k >= 1; --k) suffix[k] = tensor_product(segs[k - 1].e, suffix[k + 1]);

        Eigen::VectorXd r(nres);
        for (int j = 0; j < nres; ++j) r[j] = prefix[K].c[rows[j]] - tgt[j];
        double rn = r.lpNorm<Eigen::Infinity>();
        double r2 = r.squaredNorm();
        if (std::getenv("CUBF_PFL_TRACE"))
          std::fprintf(stderr, "pfl K=%d rows=%d it=%d rn=%.3e lambda=%.1e\n", K, nres, it,
                       rn, lambda);
        if (rn < 1e-13 * gscale) return true;
        // plateau: no meaningful decrease of the objective for a while
        if (r2 < best * (1.0 - 1e-3)) {
          best = r2;
          flat = 0;
        } else if (++flat > 30) {
          return false;
        }
        Eigen::MatrixXd J(nres, nvar);
        for (int k = 0; k < K; ++k)
          for (int i = 0; i < d; ++i) {
            TruncatedTensor col =
                tensor_product(tensor_product(prefix[k], segs[k].de[i]), suffix[k + 2]);
            for (int j = 0; j < nres; ++j) J(j, k * d + i) = col.c[rows[j]];
          }
        double jscale = std::max(1e-30, J.colwise().norm().maxCoeff());
        // LM step from the stacked least-squares system [J; sqrt(lambda)*I],
        // solved by QR (avoids forming J^T J, whose squared conditioning
        // stalls the last digits).
        bool accepted = false;
        for (int tries = 0; tries < 14; ++tries) {
          Eigen::MatrixXd A(nres + nvar, nvar);
          A.topRows(nres) = J;
          A.bottomRows(nvar) =
              std::sqrt(lambda) * jscale * Eigen::MatrixXd::Identity(nvar, nvar);
          Eigen::VectorXd rhs = Eigen::VectorXd::Zero(nres + nvar);
          rhs.head(nres) = -r;
          Eigen::VectorXd step = A.householderQr().solve(rhs);
          Eigen::VectorXd xi_new = xi + step;
          TruncatedTensor Snew = eval_sig(xi_new);
          double r2_new = 0.0;
          for (int j = 0; j < nres; ++j) {
            double e = Snew.c[rows[j]] - tgt[j];
            r2_new += e * e;
          }
          if (r2_new < r2) {
            xi = xi_new;
            lambda = std::max(1e-14, lambda * 0.25);
            accepted = true;
            break;
          }
          lambda *= 8.0;
        }
        if (!accepted) return false;
      }
      return false;
    };

    bool stage_fail = false;
    for (int cutoff = std::min(3, m); cutoff <= m && !stage_fail; ++cutoff) {
      std::vector<int> rows;
      for (int slot : T.valid)
        if (T.deg[slot] <= cutoff) rows.push_back(slot);
      int nres = static_cast<int>(rows.size());
      Eigen::VectorXd goal(nres);
      for (int j = 0; j < nres; ++j) goal[j] = G.c[rows[j]];

      if (solve_rows(rows, goal, 200)) continue;

      // moving-target crawl on the rows of the new degree
      Eigen::VectorXd base(nres);
      {
        TruncatedTensor S0 = eval_sig(xi);
        for (int j = 0; j < nres; ++j) base[j] = S0.c[rows[j]];
        // rows already solved at lower cutoffs stay pinned to the goal
        for (int j = 0; j < nres; ++j)
          if (T.deg[rows[j]] < cutoff) base[j] = goal[j];
      }
      double t = 0.0, step_t = 0.25;
      while (t < 1.0) {
        double t2 = std::min(1.0, t + step_t);
        Eigen::VectorXd tgt = (1.0 - t2) * base + t2 * goal;
        if (solve_rows(rows, tgt, 60)) {
          t = t2;
          step_t *= 1.6;
        } else {
          // keep whatever progress was made and try a shorter blend step
          step_t *= 0.5;
          if (step_t < 1.0 / 64) {
            stage_fail = true;
            break;
          }
        }
      }
    }
    if (stage_fail) {
      K = K + (K + 1) / 2;
      continue;
    }
    // assemble the path and run the final contract check
    PiecewiseLinearPath p;
    p.d = d;
    p.knots.resize(K + 1);
    p.values.resize(K + 1);
    VectorXd cur = VectorXd::Zero(d + 1);
    p.knots[0] = 0.0;
    p.values[0] = cur;
    for (int k = 0; k < K; ++k) {
      cur[0] += dt;
      for (int i = 0; i < d; ++i) cur[i + 1] += xi[k * d + i];
      p.knots[k + 1] = k + 1.0;
      p.values[k + 1] = cur;
    }
    TruncatedTensor back = log_signature(p, m);
    if (max_abs(back - L) < opts.tol) return p;
    K = K + (K + 1) / 2;
  }
  throw numerical_error("path_from_lie: Gauss-Newton did not converge");
}

CubatureFormulaWiener to_path_level(const CubatureFormulaWiener& f,
                                    const PathFromLieOptions& opts) {
  if (f.level == CubatureFormulaWiener::Level::path) return f;
  CubatureFormulaWiener g;
  g.d = f.d;
  g.m = f.m;
  g.level = CubatureFormulaWiener::Level::path;
  g.T = f.T;
  g.weights = f.weights;
  g.paths.resize(f.size());
  for (int i = 0; i < f.size(); ++i) g.paths[i] = path_from_lie(f.lies[i], opts);
  return g;
}

CubatureFormulaWiener to_flow_level(const CubatureFormulaWiener& f) {
  if (f.level == CubatureFormulaWiener::Level::flow) return f;
  CubatureFormulaWiener g;
  g.d = f.d;
  g.m = f.m;
  g.level = CubatureFormulaWiener::Level::flow;
  g.T = f.T;
  g.weights = f.weights;
  g.lies.resize(f.size());
  for (int i = 0; i < f.size(); ++i) g.lies[i] = log_signature(f.paths[i], f.m);
  return g;
}

}  // namespace cubf
