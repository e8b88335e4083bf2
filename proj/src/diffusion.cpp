#include "maskdiff/diffusion.hpp"

#include <cmath>

#include "maskdiff/error.hpp"

namespace maskdiff {
namespace {

using Table = NoiseSchedule::Table;

void check_same_shape(const torch::Tensor& a, const torch::Tensor& b,
                      const char* what) {
  if (!a.sizes().equals(b.sizes())) {
    throw ConfigError(std::string(what) + ": shape mismatch");
  }
}

torch::Tensor coeff(const NoiseSchedule& s, Table table, const torch::Tensor& t,
                    const torch::Tensor& like) {
  if (t.size(0) != like.size(0)) {
    throw ConfigError("timestep count does not match batch size");
  }
  return s.gather(table, t, like.dim(), like.scalar_type());
}

}  // namespace

torch::Tensor forward_marginal_sample(const torch::Tensor& x0, int t,
                                      const torch::Tensor& eps,
                                      const NoiseSchedule& schedule) {
  schedule.check_timestep(t);
  check_same_shape(x0, eps, "forward_marginal_sample");
  const double ab = schedule.alpha_bar(t);
  return std::sqrt(ab) * x0 + std::sqrt(1.0 - ab) * eps;
}

torch::Tensor forward_marginal_sample(const torch::Tensor& x0,
                                      const torch::Tensor& t,
                                      const torch::Tensor& eps,
                                      const NoiseSchedule& schedule) {
  check_same_shape(x0, eps, "forward_marginal_sample");
  const auto ab = coeff(schedule, Table::alpha_bar, t, x0);
  return ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps;
}

torch::Tensor forward_step_sample(const torch::Tensor& x_prev, int t,
                                  const torch::Tensor& eps,
                                  const NoiseSchedule& schedule) {
  schedule.check_timestep(t);
  check_same_shape(x_prev, eps, "forward_step_sample");
  const double b = schedule.beta(t);
  return std::sqrt(1.0 - b) * x_prev + std::sqrt(b) * eps;
}

PosteriorMoments posterior_moments(const torch::Tensor& x0,
                                   const torch::Tensor& xt, int t,
                                   const NoiseSchedule& schedule) {
  schedule.check_timestep(t);
  check_same_shape(x0, xt, "posterior_moments");
  const double ab = schedule.alpha_bar(t);
  const double ab_prev = schedule.alpha_bar(t - 1);
  if (t == 1) return {x0.clone(), 0.0};
  if (1.0 - ab <= 0.0) {
    throw NumericError("posterior_moments: abar_" + std::to_string(t) +
                       " = 1 makes the posterior degenerate");
  }
  const double c0 = std::sqrt(ab_prev) * schedule.beta(t) / (1.0 - ab);
  const double ct = std::sqrt(schedule.alpha(t)) * (1.0 - ab_prev) / (1.0 - ab);
  return {c0 * x0 + ct * xt, schedule.posterior_variance(t)};
}

BatchPosteriorMoments posterior_moments(const torch::Tensor& x0,
                                        const torch::Tensor& xt,
                                        const torch::Tensor& t,
                                        const NoiseSchedule& schedule) {
  check_same_shape(x0, xt, "posterior_moments");
  const auto ab = coeff(schedule, Table::alpha_bar, t, x0);
  const auto ab_prev = coeff(schedule, Table::alpha_bar, t - 1, x0);
  const auto beta = coeff(schedule, Table::beta, t, x0);
  const auto alpha = coeff(schedule, Table::alpha, t, x0);
  const auto denom = 1.0 - ab;
  if ((denom <= 0.0).any().item<bool>()) {
    throw NumericError("posterior_moments: abar_t = 1 in batch");
  }
  const auto c0 = ab_prev.sqrt() * beta / denom;
  const auto ct = alpha.sqrt() * (1.0 - ab_prev) / denom;
  return {c0 * x0 + ct * xt,
          coeff(schedule, Table::posterior_variance, t, x0),
          coeff(schedule, Table::posterior_log_variance_clipped, t, x0)};
}

torch::Tensor predict_x0_from_eps(const torch::Tensor& xt, int t,
                                  const torch::Tensor& eps_hat,
                                  const NoiseSchedule& schedule) {
  schedule.check_timestep(t);
  check_same_shape(xt, eps_hat, "predict_x0_from_eps");
  const double ab = schedule.alpha_bar(t);
  if (ab <= 1e-12) {
    throw NumericError("predict_x0_from_eps: abar_" + std::to_string(t) +
                       " below numeric floor");
  }
  return (xt - std::sqrt(1.0 - ab) * eps_hat) / std::sqrt(ab);
}

torch::Tensor predict_x0_from_eps(const torch::Tensor& xt,
                                  const torch::Tensor& t,
                                  const torch::Tensor& eps_hat,
                                  const NoiseSchedule& schedule) {
  check_same_shape(xt, eps_hat, "predict_x0_from_eps");
  const auto ab = coeff(schedule, Table::alpha_bar, t, xt);
  if ((ab <= 1e-12).any().item<bool>()) {
    throw NumericError("predict_x0_from_eps: abar_t below numeric floor");
  }
  return (xt - (1.0 - ab).sqrt() * eps_hat) / ab.sqrt();
}

torch::Tensor eps_parameterized_mean(const torch::Tensor& xt, int t,
                                     const torch::Tensor& eps_hat,
                                     const NoiseSchedule& schedule) {
  schedule.check_timestep(t);
  check_same_shape(xt, eps_hat, "eps_parameterized_mean");
  const double ab = schedule.alpha_bar(t);
  if (1.0 - ab <= 0.0) {
    throw NumericError("eps_parameterized_mean: abar_t = 1");
  }
  return (xt - schedule.beta(t) / std::sqrt(1.0 - ab) * eps_hat) /
         std::sqrt(schedule.alpha(t));
}

}  // namespace maskdiff
