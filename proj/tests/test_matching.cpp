#include <algorithm>
#include <numeric>
#include <random>
#include <set>

#include "doctest.h"
#include "oracles.hpp"
#include "vcore/matching.hpp"

using namespace vcore;

namespace {

std::vector<Descriptor> random_descriptors(std::size_t count, std::mt19937_64& rng) {
  std::normal_distribution<double> g;
  std::vector<Descriptor> out(count);
  for (auto& d : out) {
    double n = 0;
    for (float& v : d.values) {
      v = static_cast<float>(std::abs(g(rng)));
      n += double(v) * v;
    }
    for (float& v : d.values) v = static_cast<float>(v / std::sqrt(n));
  }
  return out;
}

CostMatrix random_cost(std::size_t m, std::size_t n, std::mt19937_64& rng, double spread = 3.0) {
  std::uniform_real_distribution<double> u(-spread, spread);
  CostMatrix c;
  c.scores = Matrix(m, n);
  for (double& v : c.scores.values) v = u(rng);
  c.dustbin_score = u(rng);
  return c;
}

}  // namespace

TEST_CASE("similarity scores") {
  Descriptor e0, e1;
  e0.values[0] = 1.0f;
  e1.values[5] = 1.0f;
  const std::vector<Descriptor> left{e0}, right{e0, e1};
  const CostMatrix c = similarity_scores(left, right, 1.0);
  CHECK(c.scores(0, 0) == 1.0);
  CHECK(c.scores(0, 1) == 0.0);
  CHECK_THROWS_AS(similarity_scores(left, right, 0.0), std::invalid_argument);

  std::mt19937_64 rng(5);
  const auto a = random_descriptors(5, rng), b = random_descriptors(7, rng);
  const CostMatrix r = similarity_scores(a, b, 0.1);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 7; ++j) {
      double dot = 0;
      for (std::size_t k = 0; k < 128; ++k) dot += double(a[i].values[k]) * double(b[j].values[k]);
      CHECK(r.scores(i, j) == doctest::Approx(dot / 0.1).epsilon(1e-9));
    }
}

TEST_CASE("sinkhorn small cases") {
  CostMatrix one;
  one.scores = Matrix(1, 1, 12.0);
  one.dustbin_score = 0.3;
  const TransportPlan p = sinkhorn_assign(one, 5000, 1e-9);
  CHECK(p.converged);
  CHECK(p.plan(0, 0) > 0.99);

  CostMatrix sym;
  sym.scores = Matrix(2, 2, 1.5);
  const TransportPlan s = sinkhorn_assign(sym, 100, 1e-9);
  CHECK(s.plan(0, 0) == doctest::Approx(s.plan(1, 1)).epsilon(1e-12));
  CHECK(s.plan(0, 1) == doctest::Approx(s.plan(1, 0)).epsilon(1e-12));
  CHECK(s.plan(0, 0) == doctest::Approx(s.plan(0, 1)).epsilon(1e-12));

  CHECK_THROWS_AS(sinkhorn_assign(sym, 0, 1e-6), std::invalid_argument);
  CostMatrix bad = sym;
  bad.scores(0, 1) = std::nan("");
  CHECK_THROWS_AS(sinkhorn_assign(bad, 10, 1e-6), std::invalid_argument);

  CostMatrix empty;
  empty.scores = Matrix(0, 3);
  const TransportPlan e = sinkhorn_assign(empty, 10, 1e-6);
  CHECK(e.plan.rows == 1);
  CHECK(e.plan(0, 2) == 1.0);
}

TEST_CASE("sinkhorn marginals and reference agreement") {
  std::mt19937_64 rng(42);
  for (int trial = 0; trial < 20; ++trial) {
    const CostMatrix c = random_cost(4, 6, rng);
    const TransportPlan p = sinkhorn_assign(c, 200, 1e-6);
    REQUIRE(p.converged);
    CHECK(oracle::marginal_violation(p.plan) < 1e-6);
    double total = 0;
    for (double v : p.plan.values) {
      REQUIRE(v >= 0.0);
      total += v;
    }
    CHECK(std::abs(total - 10.0) < 1e-6);
    const Matrix ref = oracle::sinkhorn_linear(c, p.iterations);
    for (std::size_t k = 0; k < ref.values.size(); ++k) REQUIRE(std::abs(ref.values[k] - p.plan.values[k]) < 1e-9);
  }
}

TEST_CASE("sinkhorn is invariant to a constant score shift") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    CostMatrix c = random_cost(5, 3, rng);
    const TransportPlan a = sinkhorn_assign(c, 1000, 1e-10);
    for (double& v : c.scores.values) v += 7.25;
    c.dustbin_score += 7.25;
    const TransportPlan b = sinkhorn_assign(c, 1000, 1e-10);
    REQUIRE(a.converged);
    REQUIRE(b.converged);
    for (std::size_t k = 0; k < a.plan.values.size(); ++k) CHECK(std::abs(a.plan.values[k] - b.plan.values[k]) < 1e-6);
  }
}

TEST_CASE("sinkhorn reports non-convergence") {
  std::mt19937_64 rng(8);
  const CostMatrix c = random_cost(6, 6, rng, 8.0);
  const TransportPlan p = sinkhorn_assign(c, 1, 1e-12);
  CHECK_FALSE(p.converged);
  CHECK(p.iterations == 1);
  CHECK(p.max_violation > 0);
}

TEST_CASE("extract matches") {
  SUBCASE("identity-dominant plan") {
    TransportPlan p;
    p.plan = Matrix(4, 4, 0.01);
    for (int i = 0; i < 3; ++i) p.plan(i, i) = 0.9;
    const MatchSet m = extract_matches(p, 0.2);
    REQUIRE(m.pairs.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
      CHECK(m.pairs[i].left == i);
      CHECK(m.pairs[i].right == i);
      CHECK(m.pairs[i].confidence == 0.9);
    }
  }
  SUBCASE("row below threshold") {
    TransportPlan p;
    p.plan = Matrix(3, 3, 0.0);
    p.plan(0, 0) = 0.8;
    p.plan(1, 1) = 0.1;
    const MatchSet m = extract_matches(p, 0.2);
    CHECK(m.pairs.size() == 1);
    CHECK(m.unmatched_left == std::vector<std::size_t>{1});
    CHECK(m.unmatched_right == std::vector<std::size_t>{1});
  }
  SUBCASE("random plans versus exhaustive mutual argmax") {
    std::mt19937_64 rng(77);
    std::uniform_real_distribution<double> u(0, 1);
    for (int trial = 0; trial < 50; ++trial) {
      TransportPlan p;
      p.plan = Matrix(6, 6);
      for (double& v : p.plan.values) v = u(rng);
      const double thresh = 0.3;
      std::set<std::pair<std::size_t, std::size_t>> want;
      for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t j = 0; j < 5; ++j) {
          bool row_max = true, col_max = true;
          for (std::size_t k = 0; k < 5; ++k) {
            if (p.plan(i, k) > p.plan(i, j)) row_max = false;
            if (p.plan(k, j) > p.plan(i, j)) col_max = false;
          }
          if (row_max && col_max && p.plan(i, j) >= thresh) want.insert({i, j});
        }
      const MatchSet m = extract_matches(p, thresh);
      std::set<std::pair<std::size_t, std::size_t>> got;
      std::set<std::size_t> lefts, rights;
      for (const Match& x : m.pairs) {
        got.insert({x.left, x.right});
        CHECK(lefts.insert(x.left).second);
        CHECK(rights.insert(x.right).second);
        CHECK(x.confidence >= thresh);
      }
      CHECK(got == want);
      CHECK(m.pairs.size() + m.unmatched_left.size() == 5);
      CHECK(m.pairs.size() + m.unmatched_right.size() == 5);
    }
  }
}

TEST_CASE("descriptor matchers recover a permutation") {
  std::mt19937_64 rng(12);
  const auto a = random_descriptors(20, rng);
  std::vector<std::size_t> perm(20);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<Descriptor> b(20);
  for (std::size_t i = 0; i < 20; ++i) b[perm[i]] = a[i];
  for (const MatchSet& m : {match_descriptors(a, b), match_ratio_test(a, b)}) {
    REQUIRE(m.pairs.size() == 20);
    for (const Match& x : m.pairs) CHECK(perm[x.left] == x.right);
  }
}
