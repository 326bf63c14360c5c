#include <cmath>

#include "doctest.h"
#include "dfsd/errors.hpp"
#include "dfsd/num_array.hpp"
#include "dfsd/rng.hpp"
#include "oracles.hpp"

using namespace dfsd;

TEST_CASE("temp_softmax examples") {
  auto p = temp_softmax(NumArray::vector({0.0, 0.0}), 1.0);
  CHECK(p[0] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(p[1] == doctest::Approx(0.5).epsilon(1e-15));

  for (double x : {-40.0, 0.0, 3.5, 700.0}) {
    for (double t : {0.1, 1.0, 9.0}) {
      auto u = temp_softmax(NumArray::vector({x, x, x}), t);
      for (double v : u.values()) CHECK(std::abs(v - 1.0 / 3.0) < 1e-15);
    }
  }

  const double e = std::exp(1.0);
  auto q = temp_softmax(NumArray::vector({2.0, 0.0}), 2.0);
  CHECK(std::abs(q[0] - e / (e + 1.0)) < 1e-15);
  CHECK(std::abs(q[1] - 1.0 / (e + 1.0)) < 1e-15);
}

TEST_CASE("temp_softmax rejects bad input") {
  CHECK_THROWS_AS(temp_softmax(NumArray::vector({1.0, 2.0}), 0.0), InvalidArgument);
  CHECK_THROWS_AS(temp_softmax(NumArray::vector({1.0, 2.0}), -1.0), InvalidArgument);
  CHECK_THROWS_AS(temp_softmax(NumArray::vector({1.0, NAN}), 1.0), InvalidArgument);
}

TEST_CASE("temp_softmax rows sum to one on random logits") {
  Rng rng(11);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t rows = 1 + rng.below(4), cols = 1 + rng.below(40);
    NumArray logits = NumArray::matrix(rows, cols);
    const double spread = std::pow(10.0, 3.0 * rng.uniform());
    for (double& v : logits.values()) v = spread * (2.0 * rng.uniform() - 1.0);
    const double t = 0.05 + 5.0 * rng.uniform();
    const auto p = temp_softmax(logits, t);
    for (std::size_t r = 0; r < rows; ++r) {
      double s = 0;
      for (double v : p.row(r)) {
        CHECK(v >= 0.0);
        s += v;
      }
      CHECK(std::abs(s - 1.0) <= 1e-12);
      std::vector<double> row(logits.row(r).begin(), logits.row(r).end());
      const auto ref = oracle::softmax(row, t);
      for (std::size_t c = 0; c < cols; ++c) CHECK(std::abs(p.at(r, c) - ref[c]) < 1e-12);
    }
  }
}

TEST_CASE("mse examples") {
  CHECK(mse(NumArray::vector({4.0, -2.0}), NumArray::vector({4.0, -2.0})) == 0.0);
  CHECK(mse(NumArray::vector({1.0, 0.0}), NumArray::vector({0.0, 0.0})) == 1.0);
  CHECK(mse(NumArray::vector({1.0, 2.0}), NumArray::vector({3.0, 5.0})) == 13.0);
  CHECK_THROWS_AS(mse(NumArray::vector({1.0}), NumArray::vector({1.0, 2.0})), InvalidArgument);
}

TEST_CASE("sym_kl examples") {
  const std::vector<double> p = {0.7, 0.3}, q = {0.3, 0.7};
  // 0.5 * (0.7 ln(7/3) + 0.3 ln(3/7) + 0.3 ln(3/7) + 0.7 ln(7/3)) = 0.4 ln(7/3)
  const double hand = 0.4 * std::log(7.0 / 3.0);
  CHECK(std::abs(sym_kl(p, q) - hand) < 1e-9);
  CHECK(std::abs(sym_kl(p, q) - oracle::sym_kl(p, q)) < 1e-9);
  CHECK(sym_kl(p, p) == 0.0);

  const std::vector<double> a = {1.0, 0.0}, b = {0.0, 1.0};
  const double far = sym_kl(a, b);
  CHECK(far > 15.0);
  CHECK(far == sym_kl(b, a));
  // Clamped oracle: both sides become [1/(1+eps), eps/(1+eps)].
  const double eps = 1e-8;
  const std::vector<double> ac = {1.0 / (1.0 + eps), eps / (1.0 + eps)};
  const std::vector<double> bc = {eps / (1.0 + eps), 1.0 / (1.0 + eps)};
  CHECK(std::abs(far - oracle::sym_kl(ac, bc)) < 1e-9);
}

TEST_CASE("sym_kl contract") {
  const std::vector<double> p = {0.5, 0.5}, three = {0.2, 0.3, 0.5}, neg = {1.2, -0.2}, off = {0.5, 0.6};
  CHECK_THROWS_AS(sym_kl(p, three), InvalidArgument);
  CHECK_THROWS_AS(sym_kl(p, neg), InvalidArgument);
  CHECK_THROWS_AS(sym_kl(off, p), InvalidArgument);
}

TEST_CASE("sym_kl is symmetric, zero on the diagonal and non-negative") {
  Rng rng(5);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t n = 2 + rng.below(30);
    std::vector<double> p(n), q(n);
    for (std::size_t i = 0; i < n; ++i) {
      p[i] = rng.uniform() < 0.2 ? 0.0 : rng.uniform();
      q[i] = rng.uniform();
    }
    p[0] += 1e-3;
    const double sp = std::accumulate(p.begin(), p.end(), 0.0), sq = std::accumulate(q.begin(), q.end(), 0.0);
    for (auto& v : p) v /= sp;
    for (auto& v : q) v /= sq;
    const double pq = sym_kl(p, q);
    CHECK(pq == sym_kl(q, p));
    CHECK(pq >= 0.0);
    CHECK(sym_kl(p, p) == 0.0);
  }
}

TEST_CASE("clamp_normalize") {
  const std::vector<double> p = {1.0, 0.0, 0.0};
  const auto c = clamp_normalize(p, 0.25);
  CHECK(std::abs(c[0] - 1.0 / 1.5) < 1e-15);
  CHECK(std::abs(c[1] - 0.25 / 1.5) < 1e-15);
  CHECK(std::abs(c[0] + c[1] + c[2] - 1.0) < 1e-15);
}

TEST_CASE("NumArray shape bookkeeping") {
  NumArray m = NumArray::matrix(2, 3, 1.5);
  CHECK(m.rows() == 2);
  CHECK(m.cols() == 3);
  CHECK(m.size() == 6);
  m.at(1, 2) = 4.0;
  CHECK(m.row(1)[2] == 4.0);
  CHECK(m.all_finite());
  m[0] = INFINITY;
  CHECK_FALSE(m.all_finite());
  CHECK_THROWS_AS(NumArray({2, 2}, std::vector<double>{1.0, 2.0, 3.0}), InvalidArgument);
  const auto v = NumArray::vector({1.0, 2.0});
  CHECK(v.rows() == 1);
  CHECK(v.cols() == 2);
}

TEST_CASE("rng streams are reproducible") {
  Rng a(42), b(42), c(43);
  for (int i = 0; i < 100; ++i) {
    const double x = a.uniform();
    CHECK(x == b.uniform());
    CHECK(x >= 0.0);
    CHECK(x < 1.0);
  }
  CHECK(a.next_u64() != c.next_u64());
  CHECK(derive_seed(1, 2) != derive_seed(2, 1));
  CHECK(derive_seed(7, 3) == derive_seed(7, 3));

  Rng n(3);
  double s = 0, s2 = 0;
  const int count = 20000;
  for (int i = 0; i < count; ++i) {
    const double x = n.normal();
    s += x;
    s2 += x * x;
  }
  CHECK(std::abs(s / count) < 0.05);
  CHECK(std::abs(s2 / count - 1.0) < 0.05);

  Rng r(9);
  std::vector<int> hits(5, 0);
  for (int i = 0; i < 5000; ++i) ++hits[r.below(5)];
  for (int h : hits) CHECK(h > 850);
}
