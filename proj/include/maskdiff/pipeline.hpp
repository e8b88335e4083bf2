#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "maskdiff/evaluation.hpp"
#include "maskdiff/models.hpp"
#include "maskdiff/sampling.hpp"
#include "maskdiff/schedule.hpp"
#include "maskdiff/training.hpp"

namespace maskdiff {

/// Optimizer settings shared by the two diffusion-side trainers.
struct TrainerSettings {
  int iterations = 3000;
  int batch_size = 8;
  double learning_rate = 2e-4;
  double lambda_vlb = 0.001;
  int checkpoint_every = 500;
  double grad_clip = 1.0;
  double ema_decay = 0.995;
};

void to_json(nlohmann::json& j, const TrainerSettings& s);
void from_json(const nlohmann::json& j, TrainerSettings& s);

struct DatasetCounts {
  int normal = 0;
  int cml = 0;
};

void to_json(nlohmann::json& j, const DatasetCounts& c);
void from_json(const nlohmann::json& j, DatasetCounts& c);

/// Everything the end-to-end run depends on. All randomness derives from
/// `seed` through keyed hashing.
struct PipelineConfig {
  std::uint64_t seed = 1234;
  int resolution = 32;
  ScheduleConfig schedule;
  ChannelWeights weights;
  NetConfig net;

  DatasetCounts corpus{141, 59};     // trains the diffusion model and its classifier
  DatasetCounts test{60, 40};        // fixed evaluation split
  DatasetCounts scarce{80, 20};      // downstream training data
  DatasetCounts reference{100, 100}; // trains the independent judge / feature extractor
  int validation_normals = 32;       // inputs for the guidance-scale sweep
  int unconditional_samples = 200;

  TrainerSettings denoiser;
  TrainerSettings classifier{2000, 10, 3e-4, 0.0, 500, 1.0, 0.0};

  double start_fraction = 0.8;  // Z = start_fraction * T
  int ddim_steps = 50;
  double eta = 1.0;
  std::vector<double> gradient_scales{0.0, 1.0, 3.0, 10.0, 30.0, 100.0};
  double fid_tolerance = 0.2;  // allowed FID increase over the smallest scale

  DownstreamConfig reference_model{600, 16, 1e-3, 16, 0};
  DownstreamConfig classifier_eval{600, 16, 1e-3, 16, 0};
  DownstreamConfig segmenter_eval{600, 16, 1e-3, 16, 0};
  int downstream_seeds = 5;

  /// Throws ConfigError listing every violated field.
  void validate() const;
  int start_step() const;
  TrainConfig denoiser_config() const;
  TrainConfig classifier_config() const;
  NetConfig net_config() const;
  GuidanceSpec guidance(double gradient_scale, Label target, std::uint64_t seed) const;
};

void to_json(nlohmann::json& j, const PipelineConfig& c);
void from_json(const nlohmann::json& j, PipelineConfig& c);

/// Applies a (possibly partial) JSON object on top of `base`. Unknown keys
/// and type errors are reported together as one ConfigError.
PipelineConfig apply_config_patch(const PipelineConfig& base, const nlohmann::json& patch);

/// Configuration small enough to run end to end in about a minute.
PipelineConfig smoke_pipeline_config();

struct PipelineHooks {
  std::function<void(const std::string&)> log;
  /// When set, datasets, checkpoints and loss curves are written here.
  std::optional<std::filesystem::path> artifact_dir;
};

/// Runs generation, diffusion training, the guidance sweep, translation,
/// Fréchet scoring and the downstream comparisons.
MetricsReport run_pipeline(const PipelineConfig& config, const PipelineHooks& hooks = {});

/// Outcome of one guidance scale on a set of normal inputs.
struct GuidanceOutcome {
  double gradient_scale = 0.0;
  int total = 0;
  int classified_cml = 0;
  int non_empty_lesion = 0;
  int both = 0;
  double fid = 0.0;

  double rate() const { return total == 0 ? 0.0 : static_cast<double>(both) / total; }
};

/// Picks the scale with the highest success rate whose FID stays within
/// (1 + tolerance) of the smallest scale's FID; ties go to the smaller scale.
double select_gradient_scale(const std::vector<GuidanceOutcome>& outcomes, double tolerance);

}  // namespace maskdiff
