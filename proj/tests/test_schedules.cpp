#include <catch2/catch_amalgamated.hpp>

#include "oaat/schedules.hpp"

using namespace oaat;

namespace {

TrainConfig desk20() {
  TrainConfig c;
  c.total_epochs = 20;
  c.eps_max = 16.0 / 255.0;
  c.eps_ref = 24.0 / 255.0;
  c.lr_max = 0.2;
  return c;
}

}  // namespace

// Oracle constants below were derived independently from the closed forms
// (double precision, evaluated outside this codebase) and are frozen here.

TEST_CASE("epsilon schedule matches the closed form at the probe epochs") {
  TrainConfig c = desk20();
  CHECK(epsilon_at(c, 1) == Catch::Approx(0.015686274509803921).margin(1e-12));
  CHECK(epsilon_at(c, 5) == Catch::Approx(0.015686274509803921).margin(1e-12));
  CHECK(epsilon_at(c, 10) == Catch::Approx(0.031372549019607843).margin(1e-12));
  CHECK(epsilon_at(c, 15) == Catch::Approx(0.047058823529411764).margin(1e-12));
  CHECK(epsilon_at(c, 20) == Catch::Approx(0.062745098039215685).margin(1e-12));
}

TEST_CASE("epsilon schedule properties") {
  TrainConfig c = desk20();
  SECTION("floor holds for the first quarter, ramp afterwards") {
    for (int e = 1; e <= 5; ++e) CHECK(epsilon_at(c, e) == Catch::Approx(c.eps_max / 4));
    for (int e = 6; e <= 20; ++e)
      CHECK(epsilon_at(c, e) == Catch::Approx(c.eps_max * e / 20.0).margin(1e-15));
  }
  SECTION("non-decreasing, capped at eps_max") {
    double prev = 0;
    for (int e = 1; e <= 20; ++e) {
      const double eps = epsilon_at(c, e);
      CHECK(eps >= prev);
      CHECK(eps <= c.eps_max + 1e-15);
      prev = eps;
    }
    CHECK(epsilon_at(c, 20) == Catch::Approx(c.eps_max));
  }
  SECTION("out-of-range epochs throw") {
    CHECK_THROWS_AS(epsilon_at(c, 0), std::invalid_argument);
    CHECK_THROWS_AS(epsilon_at(c, 21), std::invalid_argument);
  }
}

TEST_CASE("phase predicate is integer-exact") {
  TrainConfig c = desk20();
  // oracle-aligned iff 4*epoch >= 3*T, i.e. epoch >= 15 for T = 20
  for (int e = 1; e <= 14; ++e) CHECK(phase_at(c, e) == Phase::standard);
  for (int e = 15; e <= 20; ++e) CHECK(phase_at(c, e) == Phase::oracle_aligned);
  CHECK(ramp_start_epoch(c) == 15);

  // every T in a sweep: the boundary epoch is the smallest e with 4e >= 3T
  for (int T = 1; T <= 200; ++T) {
    TrainConfig s = c;
    s.total_epochs = T;
    const int e0 = ramp_start_epoch(s);
    CHECK(4 * e0 >= 3 * T);
    if (e0 > 1) CHECK(4 * (e0 - 1) < 3 * T);
    CHECK(phase_at(s, e0) == Phase::oracle_aligned);
    if (e0 > 1) CHECK(phase_at(s, e0 - 1) == Phase::standard);
  }
}

TEST_CASE("coefficient ramp endpoints and T=40 midpoint") {
  TrainConfig c = desk20();
  SECTION("before and at the ramp start the start values hold") {
    for (int e : {1, 5, 10, 14, 15}) {
      ScheduleState s = schedule_at(c, e);
      CHECK(s.beta == Catch::Approx(1.5).margin(1e-12));
      CHECK(s.alpha == Catch::Approx(1.0).margin(1e-12));
      CHECK(s.lambda == Catch::Approx(0.0).margin(1e-12));
    }
  }
  SECTION("end values are reached exactly at T") {
    ScheduleState s = schedule_at(c, 20);
    CHECK(s.beta == Catch::Approx(3.0).margin(1e-12));
    CHECK(s.alpha == Catch::Approx(0.8).margin(1e-12));
    CHECK(s.lambda == Catch::Approx(1.0).margin(1e-12));
  }
  SECTION("T=40 ramp midpoint is the arithmetic mean of the endpoints") {
    TrainConfig c40 = desk20();
    c40.total_epochs = 40;
    REQUIRE(ramp_start_epoch(c40) == 30);
    ScheduleState s = schedule_at(c40, 35);  // t = (35-30)/(40-30) = 0.5
    CHECK(s.beta == Catch::Approx(2.25).margin(1e-12));
    CHECK(s.alpha == Catch::Approx(0.9).margin(1e-12));
    CHECK(s.lambda == Catch::Approx(0.5).margin(1e-12));
  }
  SECTION("monotone over the ramp") {
    double beta = 0, lambda = -1, alpha = 2;
    for (int e = 15; e <= 20; ++e) {
      ScheduleState s = schedule_at(c, e);
      CHECK(s.beta >= beta);
      CHECK(s.lambda >= lambda);
      CHECK(s.alpha <= alpha);
      beta = s.beta;
      lambda = s.lambda;
      alpha = s.alpha;
    }
  }
}

TEST_CASE("cosine learning rate matches the closed form at the probe epochs") {
  TrainConfig c = desk20();
  CHECK(lr_at(c, 1) == Catch::Approx(0.20000000000000001).margin(1e-12));
  CHECK(lr_at(c, 5) == Catch::Approx(0.18090169943749476).margin(1e-12));
  CHECK(lr_at(c, 10) == Catch::Approx(0.1156434465040231).margin(1e-12));
  CHECK(lr_at(c, 15) == Catch::Approx(0.041221474770752699).margin(1e-12));
  CHECK(lr_at(c, 20) == Catch::Approx(0.0012311659404862342).margin(1e-12));

  SECTION("strictly decreasing and positive") {
    double prev = c.lr_max + 1;
    for (int e = 1; e <= 20; ++e) {
      const double lr = lr_at(c, e);
      CHECK(lr < prev);
      CHECK(lr > 0);
      prev = lr;
    }
  }
}

TEST_CASE("attack step count switches after the first quarter") {
  TrainConfig c = desk20();
  for (int e = 1; e <= 5; ++e) CHECK(n_attack_steps(c, e) == c.attack_steps_early);
  for (int e = 6; e <= 20; ++e) CHECK(n_attack_steps(c, e) == c.attack_steps_late);
}

TEST_CASE("schedule_at bundles the per-epoch state consistently") {
  TrainConfig c = desk20();
  for (int e = 1; e <= 20; ++e) {
    ScheduleState s = schedule_at(c, e);
    CHECK(s.epoch == e);
    CHECK(s.eps_tilde == epsilon_at(c, e));
    CHECK(s.lr == lr_at(c, e));
    CHECK(s.phase == phase_at(c, e));
    CHECK(s.n_attack_steps == n_attack_steps(c, e));
  }
}

TEST_CASE("degenerate single-epoch run reaches the end values immediately") {
  TrainConfig c = desk20();
  c.total_epochs = 1;
  ScheduleState s = schedule_at(c, 1);
  CHECK(s.phase == Phase::oracle_aligned);
  CHECK(s.beta == Catch::Approx(3.0));
  CHECK(s.alpha == Catch::Approx(0.8));
  CHECK(s.lambda == Catch::Approx(1.0));
  CHECK(s.eps_tilde == Catch::Approx(c.eps_max));
}
