#include <catch2/catch_amalgamated.hpp>

#include "oaat/theory.hpp"

using namespace oaat;

namespace {

// 3-sigma band for a Monte-Carlo proportion against its closed form.
bool within_3sigma(double closed, double mc, int64_t n) {
  const double var = std::max(closed * (1 - closed), 1e-12);
  return std::abs(mc - closed) <= 3 * std::sqrt(var / static_cast<double>(n));
}

SyntheticDistribution quoted() {
  SyntheticDistribution d;
  d.p = 0.95;
  d.d = 100;
  d.alpha = 3.0 / std::sqrt(100.0);
  return d;
}

}  // namespace

TEST_CASE("sampler marginals match the distribution") {
  SyntheticDistribution d = quoted();
  const int64_t n = 50000;
  TheorySample s = sample(d, n, 99);
  REQUIRE(s.x.shape[0] == n);
  REQUIRE(s.x.shape[1] == d.d + 1);

  int64_t agree = 0;
  double spur_corr = 0;
  for (int64_t i = 0; i < n; ++i) {
    agree += s.x.at(i, 0) == s.y[static_cast<size_t>(i)];
    for (int64_t j = 1; j <= d.d; ++j) spur_corr += s.x.at(i, j) * s.y[static_cast<size_t>(i)];
  }
  const double p_hat = static_cast<double>(agree) / static_cast<double>(n);
  CHECK(within_3sigma(d.p, p_hat, n));
  // each spurious coordinate has mean alpha*y, so the pooled mean is alpha
  const double alpha_hat = spur_corr / static_cast<double>(n * d.d);
  CHECK(alpha_hat == Catch::Approx(d.alpha).margin(3.0 / std::sqrt(static_cast<double>(n * d.d))));
}

TEST_CASE("sampler validates its parameters") {
  SyntheticDistribution d = quoted();
  d.p = 0.4;
  CHECK_THROWS_AS(sample(d, 10, 1), std::invalid_argument);
  d = quoted();
  d.d = 0;
  CHECK_THROWS_AS(sample(d, 10, 1), std::invalid_argument);
}

TEST_CASE("spurious-averaging classifier: closed forms and quoted values") {
  SyntheticDistribution d = quoted();
  // frozen oracle values: Phi(3) and Phi(-3)
  CHECK(spurious_classifier_accuracy(d) == Catch::Approx(0.9986501019683699).margin(1e-12));
  CHECK(spurious_classifier_robust_accuracy(d, 2 * d.alpha) ==
        Catch::Approx(0.0013498980316300957).margin(1e-12));
  CHECK(spurious_classifier_accuracy(d) > 0.99);
  CHECK(spurious_classifier_robust_accuracy(d, 2 * d.alpha) < 0.01);
}

TEST_CASE("closed forms agree with Monte-Carlo within 3 sigma") {
  SyntheticDistribution d = quoted();
  const int64_t n = 100000;
  const double eps = 2 * d.alpha;
  LinearClassifier c1 = case1_classifier(d);
  LinearClassifier orc = oracle_classifier(d);

  CHECK(within_3sigma(spurious_classifier_accuracy(d), mc_accuracy(c1, d, n, 7), n));
  CHECK(within_3sigma(spurious_classifier_robust_accuracy(d, eps),
                      mc_robust_accuracy(c1, d, eps, n, 7), n));
  CHECK(within_3sigma(oracle_accuracy(d), mc_accuracy(orc, d, n, 7), n));
  CHECK(within_3sigma(oracle_robust_accuracy(d, eps), mc_robust_accuracy(orc, d, eps, n, 7), n));
}

TEST_CASE("oracle classifier is robust below eps = 1 and dead at 1") {
  SyntheticDistribution d = quoted();
  CHECK(oracle_accuracy(d) == d.p);
  CHECK(oracle_robust_accuracy(d, 0.99) == d.p);
  CHECK(oracle_robust_accuracy(d, 1.0) == 0.0);
  CHECK(oracle_robust_accuracy(d, 2.0) == 0.0);
}

TEST_CASE("tsipras bound value and domain") {
  CHECK(tsipras_bound(0.9, 0.05) == Catch::Approx(0.45).margin(1e-12));
  CHECK(tsipras_bound(0.9, 0.1) == Catch::Approx(0.9).margin(1e-12));
  CHECK_THROWS_AS(tsipras_bound(0.5, 0.1), std::invalid_argument);
  CHECK_THROWS_AS(tsipras_bound(1.0, 0.1), std::invalid_argument);
  CHECK_THROWS_AS(tsipras_bound(0.9, -0.1), std::invalid_argument);
  CHECK_THROWS_AS(tsipras_bound(0.9, 1.1), std::invalid_argument);
}

TEST_CASE("trained classifiers respect the tsipras bound over 5 seeds") {
  SyntheticDistribution d = quoted();
  d.p = 0.9;
  const double eps = 2 * d.alpha;
  const int64_t n_eval = 50000;
  for (uint64_t seed = 1; seed <= 5; ++seed) {
    LinearClassifier erm = train_linear_erm(d, 2000, seed);
    const double std_acc = mc_accuracy(erm, d, n_eval, seed + 100);
    const double rob_acc = mc_robust_accuracy(erm, d, eps, n_eval, seed + 100);
    const double gamma = 1 - std_acc;
    if (gamma < 1e-12) continue;  // bound degenerates only if accuracy is exactly 1
    CHECK(rob_acc <= tsipras_bound(d.p, gamma) + 0.01);
  }
}

TEST_CASE("erm training is deterministic and accurate") {
  SyntheticDistribution d = quoted();
  LinearClassifier a = train_linear_erm(d, 1000, 3);
  LinearClassifier b = train_linear_erm(d, 1000, 3);
  CHECK(a.b == b.b);
  CHECK(a.w == b.w);
  CHECK(mc_accuracy(a, d, 20000, 11) > 0.97);
}

TEST_CASE("perturbation mass: erm spends its budget on spurious coordinates") {
  SyntheticDistribution d = quoted();
  LinearClassifier erm = train_linear_erm(d, 2000, 1);
  MassProfile mp = perturbation_mass_profile(erm, 2 * d.alpha);
  CHECK(mp.spurious > 0.9);
  CHECK(mp.feature1 + mp.spurious == Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("perturbation mass: the oracle is attacked only through coordinate 1") {
  SyntheticDistribution d = quoted();
  MassProfile mp = perturbation_mass_profile(oracle_classifier(d), 2 * d.alpha);
  CHECK(mp.feature1 == 1.0);
  CHECK(mp.spurious == 0.0);
}

TEST_CASE("robust accuracy equals the exact margin rule") {
  // for a linear model the worst l-inf perturbation costs eps * ||w||_1 margin
  SyntheticDistribution d = quoted();
  LinearClassifier c = case1_classifier(d);
  TheorySample s = sample(d, 2000, 5);
  const double eps = 0.1;
  int64_t ok = 0;
  for (int64_t i = 0; i < 2000; ++i)
    if (margin(c, s.x, i, s.y[static_cast<size_t>(i)]) - eps * l1_norm(c) > 0) ++ok;
  CHECK(mc_robust_accuracy(c, d, eps, 2000, 5) ==
        Catch::Approx(static_cast<double>(ok) / 2000.0).margin(1e-15));
}
