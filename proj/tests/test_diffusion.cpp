#include "doctest.h"
#include "oracles.hpp"

#include "maskdiff/diffusion.hpp"
#include "maskdiff/error.hpp"
#include "maskdiff/rng.hpp"

using namespace maskdiff;

namespace {

double max_abs(const torch::Tensor& a, const torch::Tensor& b) {
  return (a - b).abs().max().item<double>();
}

const auto kDouble = torch::TensorOptions().dtype(torch::kDouble);

}  // namespace

TEST_SUITE("diffusion") {

TEST_CASE("forward_marginal_sample trivial cases") {
  auto gen = make_generator(1);
  const auto x0 = torch::randn({2, 3, 4, 4}, gen, kDouble);
  const auto eps = torch::randn({2, 3, 4, 4}, gen, kDouble);
  const auto identity = build_schedule(ScheduleKind::linear, 1, 1e-20, 1e-20);
  CHECK(max_abs(forward_marginal_sample(x0, 1, eps, identity), x0) < 1e-9);

  const auto quarter = NoiseSchedule::from_betas({0.5, 0.5});
  const auto out = forward_marginal_sample(x0, 2, torch::zeros_like(x0), quarter);
  CHECK(max_abs(out, 0.5 * x0) == 0.0);

  CHECK_THROWS_AS(forward_marginal_sample(x0, 3, eps, quarter), ConfigError);
  CHECK_THROWS_AS(forward_marginal_sample(x0, 1, eps.narrow(0, 0, 1), quarter), ConfigError);
}

TEST_CASE("forward_step_sample trivial cases") {
  auto gen = make_generator(2);
  const auto x = torch::randn({3, 5}, gen, kDouble);
  const auto eps = torch::randn({3, 5}, gen, kDouble);
  const auto zero = NoiseSchedule::from_betas({0.0, 0.19});
  CHECK(max_abs(forward_step_sample(x, 1, eps, zero), x) == 0.0);
  CHECK(max_abs(forward_step_sample(x, 2, torch::zeros_like(x), zero), 0.9 * x) < 1e-15);
  CHECK_THROWS_AS(forward_step_sample(x, 0, eps, zero), ConfigError);
}

TEST_CASE("noise-free composition of single steps equals the marginal") {
  const auto s = build_schedule(ScheduleKind::linear, 1000, 1e-4, 0.02);
  auto gen = make_generator(3);
  const auto x0 = torch::randn({4, 4}, gen, kDouble);
  auto x = x0.clone();
  const auto zero = torch::zeros_like(x0);
  for (int t = 1; t <= 1000; ++t) {
    x = forward_step_sample(x, t, zero, s);
    if (t == 1 || t == 500 || t == 1000) {
      CHECK(max_abs(x, forward_marginal_sample(x0, t, zero, s)) < 1e-12);
    }
  }
}

TEST_CASE("posterior_moments trivial and hand-computed cases") {
  const auto s = NoiseSchedule::from_betas({0.5, 0.5});
  const auto x0 = torch::ones({1}, kDouble);
  const auto xt = torch::full({1}, 0.5, kDouble);
  const auto at1 = posterior_moments(x0, xt, 1, s);
  CHECK(at1.variance == 0.0);
  CHECK(max_abs(at1.mean, x0) == 0.0);

  const auto at2 = posterior_moments(x0, xt, 2, s);
  // 50-digit evaluation of the coefficient formula: 0.7071067811865475244...
  CHECK(at2.mean.item<double>() == doctest::Approx(0.70710678118654752).epsilon(1e-14));
  CHECK(at2.variance == doctest::Approx(1.0 / 3.0));

  const auto degenerate = NoiseSchedule::from_betas({0.0, 0.0});
  CHECK_THROWS_AS(posterior_moments(x0, xt, 2, degenerate), NumericError);
}

TEST_CASE("posterior mean equals the eps-parameterized mean") {
  const auto s = build_schedule(ScheduleKind::linear, 1000, 1e-4, 0.02);
  auto gen = make_generator(4);
  double worst = 0.0;
  for (int i = 0; i < 200; ++i) {
    const int t = 2 + static_cast<int>(torch::randint(999, {1}, gen).item<int64_t>());
    const auto x0 = torch::randn({3, 4, 4}, gen, kDouble);
    const auto eps = torch::randn({3, 4, 4}, gen, kDouble);
    const auto xt = forward_marginal_sample(x0, t, eps, s);
    worst = std::max(worst, max_abs(posterior_moments(x0, xt, t, s).mean,
                                    eps_parameterized_mean(xt, t, eps, s)));
  }
  CHECK(worst < 1e-10);
}

TEST_CASE("batched posterior agrees with the scalar form") {
  const auto s = build_schedule(ScheduleKind::cosine, 100, 0, 0);
  auto gen = make_generator(5);
  const auto x0 = torch::randn({4, 2, 3, 3}, gen, kDouble);
  const auto xt = torch::randn({4, 2, 3, 3}, gen, kDouble);
  const auto t = torch::tensor({1, 2, 50, 100}, torch::kLong);
  const auto batch = posterior_moments(x0, xt, t, s);
  for (int i = 0; i < 4; ++i) {
    const int ti = static_cast<int>(t[i].item<int64_t>());
    const auto single = posterior_moments(x0[i], xt[i], ti, s);
    CHECK(max_abs(batch.mean[i], single.mean) < 1e-14);
    CHECK(batch.variance[i].item<double>() == doctest::Approx(single.variance));
  }
}

TEST_CASE("predict_x0_from_eps inverts the marginal") {
  const auto s = build_schedule(ScheduleKind::linear, 1000, 1e-4, 0.02);
  auto gen = make_generator(6);
  const auto x0 = torch::randn({1000, 1, 2, 2}, gen, kDouble);
  const auto eps = torch::randn({1000, 1, 2, 2}, gen, kDouble);
  const auto t = torch::randint(1, 1001, {1000}, gen, torch::kLong);
  const auto xt = forward_marginal_sample(x0, t, eps, s);
  CHECK(max_abs(predict_x0_from_eps(xt, t, eps, s), x0) < 1e-8);

  const auto quarter = NoiseSchedule::from_betas({0.5, 0.5});
  const auto y = torch::randn({5}, gen, kDouble);
  CHECK(max_abs(predict_x0_from_eps(y, 2, torch::zeros_like(y), quarter), 2.0 * y) == 0.0);
  CHECK(max_abs(predict_x0_from_eps(forward_marginal_sample(x0[0], 700, eps[0], s), 700, eps[0], s), x0[0]) < 1e-10);
}

}
