#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <map>
#include <set>

#include "cubf/recombine.hpp"

using namespace cubf;

namespace {

// test-local monomial moment sums, plain pow products
std::vector<double> all_moments(const DiscreteMeasure& mu, int r, const VectorXd& center,
                                double scale) {
  const int N = mu.dim();
  std::vector<std::vector<int>> expo;
  std::vector<int> e(N, 0);
  std::function<void(int, int, int)> gen = [&](int pos, int left, int) {
    if (pos == N - 1) {
      e[pos] = left;
      expo.push_back(e);
      return;
    }
    for (int k = left; k >= 0; --k) {
      e[pos] = k;
      gen(pos + 1, left - k, 0);
    }
  };
  for (int deg = 0; deg <= r; ++deg) gen(0, deg, 0);
  std::vector<double> mom(expo.size(), 0.0);
  for (int i = 0; i < mu.size(); ++i) {
    VectorXd z = (mu.points.col(i) - center) / scale;
    for (std::size_t j = 0; j < expo.size(); ++j) {
      double v = 1.0;
      for (int a = 0; a < N; ++a) v *= std::pow(z[a], expo[j][a]);
      mom[j] += mu.weights[i] * v;
    }
  }
  return mom;
}

bool support_subset(const DiscreteMeasure& small, const DiscreteMeasure& big) {
  std::set<std::vector<double>> pts;
  for (int i = 0; i < big.size(); ++i) {
    std::vector<double> v(big.points.col(i).data(), big.points.col(i).data() + big.dim());
    pts.insert(v);
  }
  for (int i = 0; i < small.size(); ++i) {
    std::vector<double> v(small.points.col(i).data(),
                          small.points.col(i).data() + small.dim());
    if (!pts.count(v)) return false;
  }
  return true;
}

DiscreteMeasure random_cloud(int N, int n, std::uint64_t seed) {
  Rng rng(seed);
  DiscreteMeasure mu;
  mu.points.resize(N, n);
  mu.weights.resize(n);
  for (int i = 0; i < n; ++i) {
    mu.points.col(i) = rng.gaussian_vec(N);
    mu.weights[i] = rng.uniform();
  }
  mu.weights /= mu.weights.sum();
  return mu;
}

}  // namespace

TEST_CASE("reduce_patch on five integer points keeps mass, mean, second moment") {
  DiscreteMeasure mu;
  mu.points.resize(1, 5);
  mu.points << -2.0, -1.0, 0.0, 1.0, 2.0;
  mu.weights = VectorXd::Constant(5, 0.2);
  VectorXd c = VectorXd::Zero(1);
  DiscreteMeasure out = reduce_patch(mu, 2, c, 2.0);
  CHECK(out.size() <= 3);
  CHECK(support_subset(out, mu));
  CHECK(out.weights.minCoeff() >= 0.0);
  CHECK(out.mass() == doctest::Approx(1.0).epsilon(1e-14));
  double m1 = 0.0, m2 = 0.0;
  for (int i = 0; i < out.size(); ++i) {
    m1 += out.weights[i] * out.points(0, i);
    m2 += out.weights[i] * out.points(0, i) * out.points(0, i);
  }
  CHECK(std::abs(m1) < 1e-12);
  CHECK(m2 == doctest::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("reduce_patch returns small inputs unchanged and checks inputs") {
  DiscreteMeasure mu;
  mu.points.resize(1, 3);
  mu.points << 0.0, 1.0, 2.0;
  mu.weights.resize(3);
  mu.weights << 0.5, 0.25, 0.25;
  VectorXd c = VectorXd::Zero(1);
  DiscreteMeasure out = reduce_patch(mu, 2, c, 1.0);  // binom(3,2) = 3 atoms allowed
  CHECK(out.size() == 3);
  CHECK(std::memcmp(out.points.data(), mu.points.data(), 3 * sizeof(double)) == 0);
  CHECK(std::memcmp(out.weights.data(), mu.weights.data(), 3 * sizeof(double)) == 0);

  CHECK_THROWS_AS(reduce_patch(mu, 2, c, 0.0), validation_error);
  DiscreteMeasure five = random_cloud(1, 5, 1);
  five.weights[2] = 0.0;
  CHECK_THROWS_AS(reduce_patch(five, 2, c, 1.0), validation_error);
}

TEST_CASE("reduce_patch preserves all moments on random measures") {
  for (int N : {1, 2, 3})
    for (int r : {2, 3, 5})
      for (int n : {50, 500, 2000}) {
        DiscreteMeasure mu = random_cloud(N, n, 1000 + N * 100 + r * 10 + n);
        VectorXd center = mu.mean();
        double scale = 0.0;
        for (int i = 0; i < n; ++i)
          scale = std::max(scale, (mu.points.col(i) - center).cwiseAbs().maxCoeff());
        DiscreteMeasure out = reduce_patch(mu, r, center, scale);
        CAPTURE(N);
        CAPTURE(r);
        CAPTURE(n);
        CHECK(out.size() <= monomial_count(N, r));
        CHECK(out.weights.minCoeff() >= 0.0);
        CHECK(support_subset(out, mu));
        CHECK(std::abs(out.mass() - mu.mass()) < 1e-14);
        auto before = all_moments(mu, r, center, scale);
        auto after = all_moments(out, r, center, scale);
        for (std::size_t j = 0; j < before.size(); ++j)
          CHECK(std::abs(before[j] - after[j]) < 1e-10 * std::max(1.0, std::abs(before[j])));
      }
}

TEST_CASE("morton_partition levels, duplicates, quadrant order") {
  DiscreteMeasure mu = random_cloud(3, 64, 5);
  auto whole = morton_partition(mu, 0);
  CHECK(whole.size() == 1);
  CHECK(whole[0].members.size() == 64);

  // duplicate atoms never separate
  DiscreteMeasure dup = random_cloud(2, 6, 6);
  dup.points.col(3) = dup.points.col(0);
  for (int lvl : {0, 1, 2, 4, 8}) {
    for (const Patch& p : morton_partition(dup, lvl)) {
      bool has0 = std::count(p.members.begin(), p.members.end(), 0) > 0;
      bool has3 = std::count(p.members.begin(), p.members.end(), 3) > 0;
      CHECK(has0 == has3);
    }
  }

  // four quadrant points; the (high, high) one sorts last in Morton order
  DiscreteMeasure quad;
  quad.points.resize(2, 4);
  quad.points << 0.1, 0.9, 0.1, 0.9, 0.1, 0.1, 0.9, 0.9;
  quad.weights = VectorXd::Constant(4, 0.25);
  auto parts = morton_partition(quad, 1);
  REQUIRE(parts.size() == 4);
  for (const Patch& p : parts) CHECK(p.members.size() == 1);
  CHECK(parts[0].members[0] == 0);  // (low, low)
  CHECK(parts[1].members[0] == 2);  // (low, high): second bit of the interleave
  CHECK(parts[2].members[0] == 1);  // (high, low): first bit of the interleave
  CHECK(parts[3].members[0] == 3);  // (high, high) quadrant
}

TEST_CASE("morton_partition agrees with explicit interval-halving box assignment") {
  DiscreteMeasure mu = random_cloud(3, 1000, 77);
  const int N = 3;
  VectorXd lo = mu.points.rowwise().minCoeff(), hi = mu.points.rowwise().maxCoeff();
  VectorXd width(N);
  for (int a = 0; a < N; ++a) {
    double ref = std::max({hi[a] - lo[a], std::abs(lo[a]), std::abs(hi[a]), 1.0});
    width[a] = (hi[a] - lo[a]) + 1e-9 * ref;
  }
  for (int level = 0; level <= 4; ++level) {
    // brute force: box id per axis by repeated exact dyadic interval halving
    std::map<std::vector<int>, std::set<int>> boxes;
    for (int i = 0; i < 1000; ++i) {
      std::vector<int> id(N, 0);
      for (int a = 0; a < N; ++a) {
        double v = 0.5 + 0.5 * (mu.points(a, i) - lo[a]) / width[a];
        v = std::min(std::max(v, 0.5), std::nextafter(1.0, 0.0));
        double blo = 0.5, bhi = 1.0;
        for (int t = 0; t < level; ++t) {
          double mid = 0.5 * (blo + bhi);
          id[a] <<= 1;
          if (v >= mid) {
            id[a] |= 1;
            blo = mid;
          } else {
            bhi = mid;
          }
        }
      }
      boxes[id].insert(i);
    }
    std::set<std::set<int>> want;
    for (auto& [id, s] : boxes) want.insert(s);
    std::set<std::set<int>> got;
    for (const Patch& p : morton_partition(mu, level))
      got.insert(std::set<int>(p.members.begin(), p.members.end()));
    CHECK(got == want);
  }
}

TEST_CASE("rec at level 0 equals whole-measure reduction; level 1 bounds support") {
  DiscreteMeasure mu = random_cloud(3, 10000, 99);
  DiscreteMeasure whole = rec(mu, 0, 5);
  auto parts = morton_partition(mu, 0);
  DiscreteMeasure ordered;  // patch member order (Morton-sorted), as rec sees it
  ordered.points.resize(3, mu.size());
  ordered.weights.resize(mu.size());
  for (std::size_t k = 0; k < parts[0].members.size(); ++k) {
    ordered.points.col(static_cast<int>(k)) = mu.points.col(parts[0].members[k]);
    ordered.weights[static_cast<int>(k)] = mu.weights[parts[0].members[k]];
  }
  DiscreteMeasure direct = reduce_patch(ordered, 5, parts[0].center, parts[0].radius);
  direct.weights *= mu.mass() / direct.mass();
  REQUIRE(whole.size() == direct.size());
  CHECK(std::memcmp(whole.points.data(), direct.points.data(),
                    sizeof(double) * whole.points.size()) == 0);

  DiscreteMeasure out = rec(mu, 1, 5);
  CHECK(out.size() <= 8 * monomial_count(3, 5));  // 8 * 56 = 448
  CHECK(std::abs(out.mass() - mu.mass()) < 1e-13);
  CHECK(out.weights.minCoeff() >= 0.0);

  // per-patch moment preservation against the partition's own sub-measures
  auto patches = morton_partition(mu, 1);
  int at = 0;
  for (const Patch& p : patches) {
    DiscreteMeasure sub;
    sub.points.resize(3, static_cast<int>(p.members.size()));
    sub.weights.resize(static_cast<int>(p.members.size()));
    for (std::size_t k = 0; k < p.members.size(); ++k) {
      sub.points.col(static_cast<int>(k)) = mu.points.col(p.members[k]);
      sub.weights[static_cast<int>(k)] = mu.weights[p.members[k]];
    }
    DiscreteMeasure red = reduce_patch(sub, 5, p.center, p.radius);
    red.weights *= sub.mass() / red.mass();
    auto before = all_moments(sub, 5, p.center, p.radius);
    auto after = all_moments(red, 5, p.center, p.radius);
    for (std::size_t j = 0; j < before.size(); ++j)
      CHECK(std::abs(before[j] - after[j]) < 1e-10 * std::max(1.0, std::abs(before[j])));
    at += red.size();
  }
  CHECK(at == out.size());
}

TEST_CASE("adaptive_rec searches coarse to fine") {
  DiscreteMeasure mu = random_cloud(3, 2000, 31);
  auto eval = [](const DiscreteMeasure& m) {
    VectorXd v(12);
    v.head(3) = m.mean();
    MatrixXd C = m.covariance();
    v.segment(3, 9) = Eigen::Map<VectorXd>(C.data(), 9);
    return v;
  };

  AdaptiveRecResult coarse = adaptive_rec(mu, 3, std::numeric_limits<double>::infinity(), eval);
  CHECK(coarse.level == 0);
  CHECK(coarse.attained);

  AdaptiveRecResult finest = adaptive_rec(mu, 3, 0.0, eval, 4);
  CHECK(finest.level == 4);
  CHECK(!finest.attained);

  double theta = 1e-8;
  AdaptiveRecResult mid = adaptive_rec(mu, 3, theta, eval);
  CHECK(mid.attained);
  CHECK((eval(mid.measure) - eval(mu)).cwiseAbs().maxCoeff() < theta);
  if (mid.level > 0) {
    DiscreteMeasure prev = rec(mu, mid.level - 1, 3);
    CHECK((eval(prev) - eval(mu)).cwiseAbs().maxCoeff() >= theta);
  }
}

TEST_CASE("rec is deterministic and matches the serial reference bytewise") {
  DiscreteMeasure mu = random_cloud(3, 5000, 404);
  DiscreteMeasure a = rec(mu, 2, 3);
  DiscreteMeasure b = rec(mu, 2, 3);
  DiscreteMeasure s = serial::rec(mu, 2, 3);
  REQUIRE(a.size() == b.size());
  REQUIRE(a.size() == s.size());
  CHECK(std::memcmp(a.points.data(), b.points.data(), sizeof(double) * a.points.size()) == 0);
  CHECK(std::memcmp(a.weights.data(), b.weights.data(), sizeof(double) * a.weights.size()) ==
        0);
  CHECK(std::memcmp(a.points.data(), s.points.data(), sizeof(double) * a.points.size()) == 0);
  CHECK(std::memcmp(a.weights.data(), s.weights.data(), sizeof(double) * a.weights.size()) ==
        0);
}
