#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <torch/torch.h>

namespace maskdiff {

enum class ScheduleKind { linear, cosine };

std::string_view to_string(ScheduleKind kind);
ScheduleKind parse_schedule_kind(std::string_view text);

/// Per-timestep tables of the forward process. Index 0 of alpha_bar holds
/// the clean-data value 1; all other tables are indexed 1..T.
class NoiseSchedule {
 public:
  /// Builds the tables from explicit variance increments. Accepts
  /// beta in [0, 1) so test fixtures can express noise-free steps;
  /// build_schedule() enforces the strict (0, 1) range.
  static NoiseSchedule from_betas(std::vector<double> betas,
                                  ScheduleKind kind = ScheduleKind::linear);

  int steps() const { return static_cast<int>(beta_.size()) - 1; }
  ScheduleKind kind() const { return kind_; }

  double beta(int t) const;
  double alpha(int t) const;
  double alpha_bar(int t) const;  // valid for t in [0, T]
  double posterior_variance(int t) const;
  /// log of the posterior variance with the t=1 entry (which is 0) replaced
  /// by the t=2 entry, so learned-variance interpolation stays finite.
  double posterior_log_variance_clipped(int t) const;

  /// Gathers a table at per-item timesteps `t` (int64, shape [B]) and
  /// reshapes to [B, 1, ..., 1] with `ndim` total dimensions.
  enum class Table { beta, alpha, alpha_bar, posterior_variance, posterior_log_variance_clipped };
  torch::Tensor gather(Table table, const torch::Tensor& t, int64_t ndim,
                       torch::ScalarType dtype) const;

  void check_timestep(int t, int lo = 1) const;

 private:
  NoiseSchedule() = default;
  const std::vector<double>& table(Table which) const;

  ScheduleKind kind_ = ScheduleKind::linear;
  std::vector<double> beta_;
  std::vector<double> alpha_;
  std::vector<double> alpha_bar_;
  std::vector<double> posterior_variance_;
  std::vector<double> posterior_log_variance_clipped_;
};

NoiseSchedule build_schedule(ScheduleKind kind, int steps, double beta_start,
                             double beta_end);

/// Schedule parameters as stored in configs and checkpoints.
struct ScheduleConfig {
  ScheduleKind kind = ScheduleKind::linear;
  int steps = 200;
  double beta_start = 0.0;  // <= 0 selects the T-scaled default
  double beta_end = 0.0;

  /// Endpoints after applying the T-scaled defaults (1e-4 and 0.02 at
  /// T=1000, scaled by 1000/T for shorter chains).
  double resolved_beta_start() const;
  double resolved_beta_end() const;
  NoiseSchedule build() const;

  bool operator==(const ScheduleConfig&) const = default;
};

}  // namespace maskdiff
