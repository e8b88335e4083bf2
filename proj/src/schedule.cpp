#include "maskdiff/schedule.hpp"

#include <cmath>
#include <numbers>

#include "maskdiff/error.hpp"

namespace maskdiff {

std::string_view to_string(ScheduleKind kind) {
  return kind == ScheduleKind::linear ? "linear" : "cosine";
}

ScheduleKind parse_schedule_kind(std::string_view text) {
  if (text == "linear") return ScheduleKind::linear;
  if (text == "cosine") return ScheduleKind::cosine;
  throw ConfigError("unknown schedule kind '" + std::string(text) + "'");
}

NoiseSchedule NoiseSchedule::from_betas(std::vector<double> betas,
                                        ScheduleKind kind) {
  if (betas.empty()) throw ConfigError("schedule needs at least one step");
  const auto n = betas.size();
  NoiseSchedule s;
  s.kind_ = kind;
  s.beta_.assign(n + 1, 0.0);
  s.alpha_.assign(n + 1, 1.0);
  s.alpha_bar_.assign(n + 1, 1.0);
  s.posterior_variance_.assign(n + 1, 0.0);
  s.posterior_log_variance_clipped_.assign(n + 1, 0.0);
  for (std::size_t t = 1; t <= n; ++t) {
    const double b = betas[t - 1];
    if (!std::isfinite(b) || b < 0.0 || b >= 1.0) {
      throw ConfigError("beta_" + std::to_string(t) + " = " +
                        std::to_string(b) + " outside [0, 1)");
    }
    s.beta_[t] = b;
    s.alpha_[t] = 1.0 - b;
    s.alpha_bar_[t] = s.alpha_bar_[t - 1] * s.alpha_[t];
    const double denom = 1.0 - s.alpha_bar_[t];
    s.posterior_variance_[t] =
        denom > 0.0 ? b * (1.0 - s.alpha_bar_[t - 1]) / denom : 0.0;
  }
  for (std::size_t t = 1; t <= n; ++t) {
    double v = s.posterior_variance_[t];
    if (t == 1 && n >= 2) v = s.posterior_variance_[2];
    s.posterior_log_variance_clipped_[t] =
        v > 0.0 ? std::log(v) : -std::numeric_limits<double>::infinity();
  }
  return s;
}

void NoiseSchedule::check_timestep(int t, int lo) const {
  if (t < lo || t > steps()) {
    throw ConfigError("timestep " + std::to_string(t) + " outside [" +
                      std::to_string(lo) + ", " + std::to_string(steps()) +
                      "]");
  }
}

double NoiseSchedule::beta(int t) const {
  check_timestep(t);
  return beta_[t];
}
double NoiseSchedule::alpha(int t) const {
  check_timestep(t);
  return alpha_[t];
}
double NoiseSchedule::alpha_bar(int t) const {
  check_timestep(t, 0);
  return alpha_bar_[t];
}
double NoiseSchedule::posterior_variance(int t) const {
  check_timestep(t);
  return posterior_variance_[t];
}
double NoiseSchedule::posterior_log_variance_clipped(int t) const {
  check_timestep(t);
  return posterior_log_variance_clipped_[t];
}

const std::vector<double>& NoiseSchedule::table(Table which) const {
  switch (which) {
    case Table::beta: return beta_;
    case Table::alpha: return alpha_;
    case Table::alpha_bar: return alpha_bar_;
    case Table::posterior_variance: return posterior_variance_;
    case Table::posterior_log_variance_clipped:
      return posterior_log_variance_clipped_;
  }
  throw ConfigError("unknown schedule table");
}

torch::Tensor NoiseSchedule::gather(Table which, const torch::Tensor& t,
                                    int64_t ndim,
                                    torch::ScalarType dtype) const {
  if (t.dim() != 1) throw ConfigError("timesteps must be a 1-D tensor");
  auto idx = t.to(torch::kLong).contiguous();
  const auto* p = idx.data_ptr<int64_t>();
  for (int64_t i = 0; i < idx.size(0); ++i) {
    check_timestep(static_cast<int>(p[i]), which == Table::alpha_bar ? 0 : 1);
  }
  const auto& values = table(which);
  auto full = torch::from_blob(const_cast<double*>(values.data()),
                               {static_cast<int64_t>(values.size())},
                               torch::kDouble);
  std::vector<int64_t> shape(static_cast<std::size_t>(ndim), 1);
  shape[0] = idx.size(0);
  return full.index_select(0, idx).to(dtype).reshape(shape);
}

NoiseSchedule build_schedule(ScheduleKind kind, int steps, double beta_start,
                             double beta_end) {
  if (steps < 1) {
    throw ConfigError("schedule step count must be positive, got " +
                      std::to_string(steps));
  }
  std::vector<double> betas(static_cast<std::size_t>(steps));
  if (kind == ScheduleKind::linear) {
    if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
      throw ConfigError("linear schedule needs 0 < beta_start <= beta_end < 1");
    }
    for (int i = 0; i < steps; ++i) {
      const double frac = steps == 1 ? 0.0 : static_cast<double>(i) / (steps - 1);
      betas[static_cast<std::size_t>(i)] = beta_start + (beta_end - beta_start) * frac;
    }
  } else {
    constexpr double offset = 0.008;
    auto f = [&](double t) {
      const double c = std::cos((t / steps + offset) / (1.0 + offset) *
                                std::numbers::pi / 2.0);
      return c * c;
    };
    for (int i = 0; i < steps; ++i) {
      const double b = 1.0 - f(i + 1) / f(i);
      betas[static_cast<std::size_t>(i)] = std::clamp(b, 1e-8, 0.999);
    }
  }
  return NoiseSchedule::from_betas(std::move(betas), kind);
}

double ScheduleConfig::resolved_beta_start() const {
  return beta_start > 0.0 ? beta_start : 1e-4 * 1000.0 / steps;
}

double ScheduleConfig::resolved_beta_end() const {
  return beta_end > 0.0 ? beta_end : 0.02 * 1000.0 / steps;
}

NoiseSchedule ScheduleConfig::build() const {
  if (steps < 1) throw ConfigError("schedule steps must be positive");
  return build_schedule(kind, steps, resolved_beta_start(), resolved_beta_end());
}

}  // namespace maskdiff
