#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "json.hpp"
#include "maskdiff/checkpoint.hpp"
#include "maskdiff/image.hpp"
#include "maskdiff/models.hpp"
#include "maskdiff/phantom.hpp"
#include "maskdiff/schedule.hpp"

namespace maskdiff {

struct GuidanceSpec {
  Label target_class = Label::cml;
  double gradient_scale = 0.0;
  int start_step = 160;  // Z; 0 returns the input unchanged
  int ddim_steps = 50;
  double eta = 0.0;
  ChannelWeights weights;
  bool clip_x0 = true;
  std::uint64_t seed = 0;
  /// Translation normally refuses inputs that are not labelled normal.
  bool allow_non_normal_input = false;

  /// Throws ConfigError listing every violated field.
  void validate(int steps) const;
};

void to_json(nlohmann::json& j, const GuidanceSpec& s);
void from_json(const nlohmann::json& j, GuidanceSpec& s);

struct TrajectoryMetadata {
  int start_step = 0;
  std::vector<int> timesteps;  // visited timesteps, descending
  std::uint64_t noise_seed = 0;
  double gradient_scale = 0.0;
  double eta = 0.0;
  /// L2 norm of the classifier gradient at each visited timestep.
  std::vector<double> guidance_norms;
  /// Lesion pixels removed because the target class is normal.
  int64_t cleared_lesion_pixels = 0;
};

void to_json(nlohmann::json& j, const TrajectoryMetadata& m);

struct SampleResult {
  Image image;
  Mask bone_mask;
  Mask lesion_mask;
  Label target_class = Label::cml;
  std::optional<std::string> source_id;
  TrajectoryMetadata trajectory;
};

/// Synthetic record with provenance=synthetic and the target class as label.
LabeledTriplet to_triplet(const SampleResult& result, std::string id);

/// eps_hat - sqrt(1 - abar_t) * g * grad
torch::Tensor guided_eps(const torch::Tensor& eps_hat, const torch::Tensor& grad, int t,
                         double gradient_scale, const NoiseSchedule& schedule);

/// Ancestral step to t - 1. The variance interpolates between beta_t and the
/// clipped posterior variance using out.v, or is the posterior variance when
/// `learned_variance` is false. No noise is added at t = 1.
torch::Tensor ddpm_step(const torch::Tensor& xt, const DenoiserOutput& out, int t,
                        const torch::Tensor& noise, const NoiseSchedule& schedule,
                        bool learned_variance = true);

/// Implicit step from t to t_prev (0 <= t_prev < t). `noise` is only read when
/// eta > 0. With clip_x0 the clean estimate is clamped to [-1, 1] and the
/// noise estimate is recomputed from it.
torch::Tensor ddim_step(const torch::Tensor& xt, const torch::Tensor& eps_hat, int t,
                        int t_prev, double eta, const NoiseSchedule& schedule,
                        const torch::Tensor& noise = {}, bool clip_x0 = false);

/// Descending timesteps of an implicit chain starting at `start`, spaced
/// uniformly over [1, start]. At most `start` entries.
std::vector<int> ddim_timesteps(int start, int count);

/// Optional guidance pair; the classifier may be null when g = 0.
struct SamplerModels {
  Denoiser denoiser{nullptr};
  GuidanceClassifier classifier{nullptr};
};

/// Throws ConfigError if the networks disagree with each other, the schedule
/// or the image size.
void check_models(const SamplerModels& models, const NoiseSchedule& schedule,
                  int64_t image_size, bool need_classifier);

/// Throws ConfigError if two checkpoints were trained for different
/// schedules, channel weights or resolutions.
void check_checkpoint_pair(const CheckpointMeta& denoiser, const CheckpointMeta& classifier);

/// Normal-to-{normal, CML} translation: noise the inputs to step Z, then run
/// the guided implicit chain back to 0. Items are processed together; each
/// draws its noise from a stream keyed by (spec.seed, id).
std::vector<SampleResult> translate(const std::vector<LabeledTriplet>& inputs,
                                    SamplerModels& models, const NoiseSchedule& schedule,
                                    const GuidanceSpec& spec);
SampleResult translate(const LabeledTriplet& input, SamplerModels& models,
                       const NoiseSchedule& schedule, const GuidanceSpec& spec);

/// Full-chain sampling from pure noise (spec.start_step must equal T).
/// Item i uses the noise stream keyed by (spec.seed, "sample", first_index + i).
std::vector<SampleResult> generate_unconditional(SamplerModels& models,
                                                 const NoiseSchedule& schedule,
                                                 const GuidanceSpec& spec, int count,
                                                 int64_t image_size, int first_index = 0);

/// Ancestral sampling through all T steps with the learned variance.
std::vector<SampleResult> generate_ancestral(Denoiser& denoiser, const NoiseSchedule& schedule,
                                             const ChannelWeights& weights, std::uint64_t seed,
                                             int count, int64_t image_size);

}  // namespace maskdiff
