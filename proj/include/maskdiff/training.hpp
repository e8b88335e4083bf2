#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "json.hpp"
#include "maskdiff/dataset.hpp"
#include "maskdiff/error.hpp"
#include "maskdiff/models.hpp"
#include "maskdiff/schedule.hpp"

namespace maskdiff {

struct TrainConfig {
  int iterations = 3000;
  int batch_size = 8;
  double learning_rate = 1e-4;
  double lambda_vlb = 0.001;
  ChannelWeights weights;
  ScheduleConfig schedule;
  std::uint64_t seed = 0;
  int checkpoint_every = 500;
  double grad_clip = 1.0;
  /// Decay of the parameter moving average returned as the trained model;
  /// 0 returns the raw optimizer iterate.
  double ema_decay = 0.0;
  int log_every = 0;  // 0 disables progress callbacks

  /// Throws ConfigError listing every violated field.
  void validate() const;
  std::string hash() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

using DenoiseFn = std::function<DenoiserOutput(const NoisyTriplet&)>;

/// Element-wise KL(N(mean1, exp(logvar1)) || N(mean2, exp(logvar2))) in nats.
torch::Tensor normal_kl(const torch::Tensor& mean1, const torch::Tensor& logvar1,
                        const torch::Tensor& mean2, const torch::Tensor& logvar2);

/// Log-likelihood of targets in [-1, 1] under a Gaussian discretized into
/// 256 bins, element-wise.
torch::Tensor discretized_gaussian_log_likelihood(const torch::Tensor& x,
                                                  const torch::Tensor& mean,
                                                  const torch::Tensor& log_scale);

// The loss functions take clean states x0 ([B, 3, H, W], model range,
// unweighted), per-item timesteps t and noise eps. The model always sees
// the weighted noisy triplet.

/// Mean squared error between eps and eps_hat over the enabled channels.
torch::Tensor simple_loss(const torch::Tensor& x0, const torch::Tensor& t,
                          const torch::Tensor& eps, const DenoiseFn& model,
                          const NoiseSchedule& schedule,
                          const ChannelWeights& weights);

/// Variational term: Gaussian KL to the forward posterior for t > 1 and the
/// discretized decoder negative log-likelihood at t = 1, averaged over
/// items. The model mean is detached so this term only trains the variance.
torch::Tensor vlb_term(const torch::Tensor& x0, const torch::Tensor& t,
                       const torch::Tensor& eps, const DenoiseFn& model,
                       const NoiseSchedule& schedule,
                       const ChannelWeights& weights);

struct LossTerms {
  torch::Tensor simple;
  torch::Tensor vlb;
  torch::Tensor total;
};

/// simple + lambda * vlb from a single model evaluation.
LossTerms hybrid_loss(const torch::Tensor& x0, const torch::Tensor& t,
                      const torch::Tensor& eps, const DenoiseFn& model,
                      const NoiseSchedule& schedule,
                      const ChannelWeights& weights, double lambda_vlb);

/// Same terms from an already-computed model output.
LossTerms loss_terms_from_output(const torch::Tensor& x0, const torch::Tensor& t,
                                 const torch::Tensor& eps, const DenoiserOutput& out,
                                 const NoiseSchedule& schedule,
                                 const ChannelWeights& weights, double lambda_vlb);

struct LossRecord {
  int iteration = 0;
  double simple = 0.0;
  double vlb = 0.0;
  double total = 0.0;
};

struct ClassifierRecord {
  int iteration = 0;
  double loss = 0.0;
  double accuracy = 0.0;
};

/// Raised when the loss becomes non-finite; carries the last parameters
/// that produced a finite loss.
class TrainingDiverged : public NumericError {
 public:
  TrainingDiverged(const std::string& what, int iteration, std::string last_good)
      : NumericError(what), iteration_(iteration), last_good_(std::move(last_good)) {}
  int iteration() const { return iteration_; }
  const std::string& last_good_parameters() const { return last_good_; }

 private:
  int iteration_;
  std::string last_good_;
};

struct TrainHooks {
  std::function<void(const LossRecord&)> on_log;
  std::function<void(const ClassifierRecord&)> on_classifier_log;
  /// Receives the model that would be returned at this point (the moving
  /// average when enabled).
  std::function<void(int iteration, torch::nn::Module&)> on_checkpoint;
  /// Called after every optimizer step with the raw model.
  std::function<void(int iteration, torch::nn::Module&)> on_step;
};

struct DenoiserTrainResult {
  Denoiser model{nullptr};
  std::vector<LossRecord> history;
};

struct ClassifierTrainResult {
  GuidanceClassifier model{nullptr};
  std::vector<ClassifierRecord> history;
};

DenoiserTrainResult train_denoiser(const Dataset& dataset, const TrainConfig& config,
                                   const NetConfig& net, const TrainHooks& hooks = {});

ClassifierTrainResult train_classifier(const Dataset& dataset, const TrainConfig& config,
                                       const NetConfig& net, const TrainHooks& hooks = {});

/// Exponential moving average of a module's parameters and buffers.
/// The effective decay ramps up as min(decay, (1 + n) / (10 + n)).
class ParameterAverage {
 public:
  ParameterAverage(torch::nn::Module& source, double decay);
  void update(torch::nn::Module& source, int step);
  /// Copies the averaged values into a module of the same architecture.
  void copy_to(torch::nn::Module& target) const;

 private:
  double decay_;
  std::vector<torch::Tensor> values_;
};

/// Label accuracy of the guidance classifier on noisy inputs at one timestep.
double classifier_accuracy_at(GuidanceClassifier& classifier, const Dataset& dataset,
                              int t, const NoiseSchedule& schedule,
                              const ChannelWeights& weights, std::uint64_t seed);

/// iteration,simple,vlb,total
void write_loss_csv(const std::filesystem::path& path, const std::vector<LossRecord>& history);
void write_classifier_csv(const std::filesystem::path& path,
                          const std::vector<ClassifierRecord>& history);

/// Mean of the simple loss over iterations [begin, end) of the history.
double mean_simple_loss(const std::vector<LossRecord>& history, std::size_t begin,
                        std::size_t end);

}  // namespace maskdiff
