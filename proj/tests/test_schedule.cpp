#include "doctest.h"
#include "oracles.hpp"

#include "maskdiff/error.hpp"
#include "maskdiff/schedule.hpp"

using namespace maskdiff;

TEST_SUITE("schedule") {

TEST_CASE("linear T=1000 alpha_bar matches high-precision product") {
  const auto s = build_schedule(ScheduleKind::linear, 1000, 1e-4, 0.02);
  const auto ref = oracle::linear_alpha_bar(1000, oracle::Real("1e-4"), oracle::Real("0.02"));
  double worst = 0.0;
  for (int t = 0; t <= 1000; ++t) {
    const double r = static_cast<double>(ref[static_cast<std::size_t>(t)]);
    worst = std::max(worst, std::abs(s.alpha_bar(t) - r) / r);
  }
  CHECK(worst < 1e-10);
  // Frozen from the 50-digit oracle: 4.0358297653756833e-05.
  CHECK(s.alpha_bar(1000) == doctest::Approx(4.0358297653756833e-05).epsilon(1e-10));
}

TEST_CASE("type invariants hold for both kinds") {
  for (auto kind : {ScheduleKind::linear, ScheduleKind::cosine}) {
    const auto s = build_schedule(kind, 200, 5e-4, 0.1);
    CHECK(s.alpha_bar(0) == 1.0);
    CHECK(s.posterior_variance(1) == 0.0);
    double product = 1.0;
    for (int t = 1; t <= s.steps(); ++t) {
      CHECK(s.beta(t) > 0.0);
      CHECK(s.beta(t) < 1.0);
      CHECK(s.alpha_bar(t) < s.alpha_bar(t - 1));
      product *= s.alpha(t);
      CHECK(std::abs(s.alpha_bar(t) - product) / s.alpha_bar(t) < 1e-12);
      CHECK(s.posterior_variance(t) >= 0.0);
      CHECK(s.posterior_variance(t) <= s.beta(t));
      if (t > 1) {
        const double snr = s.alpha_bar(t) / (1 - s.alpha_bar(t));
        const double snr_prev = s.alpha_bar(t - 1) / (1 - s.alpha_bar(t - 1));
        CHECK(snr < snr_prev);
      }
    }
  }
}

TEST_CASE("hand-computed constant-beta schedule") {
  const auto s = NoiseSchedule::from_betas({0.5, 0.5});
  CHECK(s.alpha_bar(1) == 0.5);
  CHECK(s.alpha_bar(2) == 0.25);
  CHECK(s.posterior_variance(2) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("vanishing beta leaves the data untouched") {
  const auto s = build_schedule(ScheduleKind::linear, 1, 1e-20, 1e-20);
  CHECK(s.alpha_bar(1) == 1.0);
}

TEST_CASE("construction errors") {
  CHECK_THROWS_AS(build_schedule(ScheduleKind::linear, 0, 1e-4, 0.02), ConfigError);
  CHECK_THROWS_AS(build_schedule(ScheduleKind::linear, -3, 1e-4, 0.02), ConfigError);
  CHECK_THROWS_AS(build_schedule(ScheduleKind::linear, 10, 0.0, 0.02), ConfigError);
  CHECK_THROWS_AS(build_schedule(ScheduleKind::linear, 10, 1e-4, 1.0), ConfigError);
  CHECK_THROWS_AS(build_schedule(ScheduleKind::linear, 10, 0.3, 0.2), ConfigError);
  CHECK_THROWS_AS(NoiseSchedule::from_betas({0.1, 1.2}), ConfigError);
  CHECK_THROWS_AS(parse_schedule_kind("quadratic"), ConfigError);
}

TEST_CASE("T-scaled default endpoints") {
  ScheduleConfig cfg;
  cfg.steps = 1000;
  CHECK(cfg.resolved_beta_start() == doctest::Approx(1e-4));
  CHECK(cfg.resolved_beta_end() == doctest::Approx(0.02));
  cfg.steps = 200;
  CHECK(cfg.resolved_beta_start() == doctest::Approx(5e-4));
  CHECK(cfg.resolved_beta_end() == doctest::Approx(0.1));
  CHECK(cfg.build().alpha_bar(200) < 1e-3);
}

TEST_CASE("timestep range checks") {
  const auto s = build_schedule(ScheduleKind::linear, 10, 1e-4, 0.02);
  CHECK_THROWS_AS(s.beta(0), ConfigError);
  CHECK_THROWS_AS(s.beta(11), ConfigError);
  CHECK_NOTHROW(s.alpha_bar(0));
}

}
