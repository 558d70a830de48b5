#include <doctest.h>

#include <cmath>

#include "icl/metrics.hpp"
#include "icl/rng.hpp"

using namespace icl;
using Eigen::Vector2d;
using Eigen::VectorXd;

TEST_CASE("tv on hand examples") {
  const Vector2d p(0.5, 0.5), q(0.25, 0.75);
  CHECK(tv(p, p) == 0.0);
  CHECK(tv(Vector2d(1, 0), Vector2d(0, 1)) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(tv(p, q) == doctest::Approx(0.25).epsilon(1e-15));
  CHECK_THROWS_AS(tv(VectorXd(p), VectorXd(Eigen::Vector3d(0.2, 0.3, 0.5))), SupportMismatch);
}

TEST_CASE("kl on hand examples") {
  const Vector2d p(0.5, 0.5), q(0.25, 0.75);
  CHECK(kl(p, p).value == 0.0);
  const double expected = 0.5 * std::log(2.0) + 0.5 * std::log(2.0 / 3.0);
  CHECK(kl(p, q).value == doctest::Approx(expected).epsilon(1e-14));
  CHECK(std::abs(kl(p, q).value - 0.14384) < 1e-5);
  const Divergence d = kl(Vector2d(1, 0), Vector2d(0, 1));
  CHECK(d.infinite);
  CHECK_THROWS_AS(kl(VectorXd(p), VectorXd(Eigen::Vector3d(0.2, 0.3, 0.5))), SupportMismatch);
}

TEST_CASE("entropy") {
  CHECK(entropy(Eigen::Vector4d::Constant(0.25)) == doctest::Approx(std::log(4.0)).epsilon(1e-15));
  CHECK(entropy(Vector2d(1, 0)) == 0.0);
  const double h = -(0.9 * std::log(0.9) + 0.1 * std::log(0.1));
  CHECK(entropy(Vector2d(0.9, 0.1)) == doctest::Approx(h).epsilon(1e-15));
  CHECK(std::abs(h - 0.32508) < 1e-5);
}

TEST_CASE("tv is a metric and kl is nonnegative on random triples") {
  Rng rng(11);
  for (int i = 0; i < 2000; ++i) {
    const int k = 2 + static_cast<int>(rng.uniform_int(15));
    const VectorXd a = rng.dirichlet(k), b = rng.dirichlet(k), c = rng.dirichlet(k);
    CHECK(tv(a, b) == doctest::Approx(tv(b, a)).epsilon(1e-15));
    CHECK(tv(a, c) <= tv(a, b) + tv(b, c) + 1e-12);
    CHECK(kl(a, b).value >= 0.0);
    CHECK(kl(a, a).value <= 1e-12);
  }
}

TEST_CASE("tv-kl lemma and Pinsker on the hand example") {
  const LemmaReport r = tv_kl_lemma_check(Vector2d(0.5, 0.5), Vector2d(0.25, 0.75));
  CHECK(r.tv == doctest::Approx(0.25));
  CHECK(r.pinsker_bound == doctest::Approx(std::sqrt(r.kl / 2.0)));
  CHECK(std::abs(r.pinsker_bound - 0.2682) < 1e-4);
  CHECK(r.b == doctest::Approx(std::log(2.0)));
  CHECK(r.holds());
  const LemmaReport same = tv_kl_lemma_check(Vector2d(0.3, 0.7), Vector2d(0.3, 0.7));
  CHECK(same.kl == 0.0);
  CHECK(same.tv == 0.0);
  CHECK(same.holds());
}

TEST_CASE("tv-kl lemma on random Dirichlet pairs") {
  Rng rng(5);
  int failures = 0;
  for (int i = 0; i < 10000; ++i) {
    const int k = 2 + static_cast<int>(rng.uniform_int(15));
    const VectorXd p = rng.dirichlet(k), q = rng.dirichlet(k);
    if (!tv_kl_lemma_check(p, q).holds()) ++failures;
  }
  CHECK(failures == 0);
}

TEST_CASE("summaries skip infinite divergences") {
  std::vector<Divergence> d = {{1.0, false}, {3.0, false}, Divergence::inf()};
  const Summary s = summarize(std::span<const Divergence>(d));
  CHECK(s.mean == 2.0);
  CHECK(s.count == 2);
  CHECK(s.flagged == 1);
  CHECK(s.sem == doctest::Approx(1.0));
  CHECK(median({3.0, 1.0, 2.0}) == 2.0);
  CHECK(median({4.0, 1.0, 2.0, 3.0}) == 2.5);
}

TEST_CASE("log_sum_exp") {
  CHECK(log_sum_exp(Vector2d(-1000.0, -1000.0)) == doctest::Approx(-1000.0 + std::log(2.0)));
  const double ninf = -std::numeric_limits<double>::infinity();
  CHECK(log_sum_exp(Vector2d(ninf, ninf)) == ninf);
  CHECK(log_sum_exp(Vector2d(ninf, 0.5)) == 0.5);
}

TEST_CASE("FiniteDistribution validates") {
  CHECK_NOTHROW(FiniteDistribution(Vector2d(0.4, 0.6)));
  CHECK_THROWS(FiniteDistribution(Vector2d(0.4, 0.5)));
  CHECK_THROWS(FiniteDistribution(Vector2d(-0.1, 1.1)));
}
