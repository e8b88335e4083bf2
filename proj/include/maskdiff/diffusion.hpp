#pragma once

#include <torch/torch.h>

#include "maskdiff/schedule.hpp"

namespace maskdiff {

// Forward process and posterior moments. Every function takes a batch
// tensor with the batch on dim 0 and either one timestep for the whole
// batch or an int64 tensor of per-item timesteps.

/// sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps
torch::Tensor forward_marginal_sample(const torch::Tensor& x0, int t,
                                      const torch::Tensor& eps,
                                      const NoiseSchedule& schedule);
torch::Tensor forward_marginal_sample(const torch::Tensor& x0,
                                      const torch::Tensor& t,
                                      const torch::Tensor& eps,
                                      const NoiseSchedule& schedule);

/// One draw of q(x_t | x_{t-1}): sqrt(1 - beta_t) * x_prev + sqrt(beta_t) * eps
torch::Tensor forward_step_sample(const torch::Tensor& x_prev, int t,
                                  const torch::Tensor& eps,
                                  const NoiseSchedule& schedule);

struct PosteriorMoments {
  torch::Tensor mean;
  double variance = 0.0;
};

/// Mean and variance of q(x_{t-1} | x_t, x0).
PosteriorMoments posterior_moments(const torch::Tensor& x0,
                                   const torch::Tensor& xt, int t,
                                   const NoiseSchedule& schedule);

/// Per-item variant; returns the mean and the (broadcastable) variance.
struct BatchPosteriorMoments {
  torch::Tensor mean;
  torch::Tensor variance;
  torch::Tensor log_variance_clipped;
};
BatchPosteriorMoments posterior_moments(const torch::Tensor& x0,
                                        const torch::Tensor& xt,
                                        const torch::Tensor& t,
                                        const NoiseSchedule& schedule);

/// Inverse of the closed-form marginal given a noise estimate. No clipping.
torch::Tensor predict_x0_from_eps(const torch::Tensor& xt, int t,
                                  const torch::Tensor& eps_hat,
                                  const NoiseSchedule& schedule);
torch::Tensor predict_x0_from_eps(const torch::Tensor& xt,
                                  const torch::Tensor& t,
                                  const torch::Tensor& eps_hat,
                                  const NoiseSchedule& schedule);

/// Reverse-step mean written in terms of the noise estimate:
/// (x_t - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t)
torch::Tensor eps_parameterized_mean(const torch::Tensor& xt, int t,
                                     const torch::Tensor& eps_hat,
                                     const NoiseSchedule& schedule);

}  // namespace maskdiff
