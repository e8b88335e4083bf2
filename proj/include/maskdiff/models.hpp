#pragma once

#include <cstdint>
#include <vector>

#include <torch/torch.h>

#include "json.hpp"

namespace maskdiff {

/// Per-channel scaling of the concatenated input (image, bone, lesion).
/// A zero mask weight disables that channel (input and loss).
struct ChannelWeights {
  double image = 1.0;
  double bone = 0.8;
  double lesion = 0.8;

  void validate() const;
  /// [1, 3, 1, 1] broadcastable weight tensor.
  torch::Tensor as_tensor(torch::ScalarType dtype = torch::kFloat) const;
  /// [1, 3, 1, 1] tensor with 1 for enabled channels, 0 for disabled ones.
  torch::Tensor active_channels(torch::ScalarType dtype = torch::kFloat) const;
  int active_count() const;

  bool operator==(const ChannelWeights&) const = default;
};

void to_json(nlohmann::json& j, const ChannelWeights& w);
void from_json(const nlohmann::json& j, ChannelWeights& w);

/// Weighted noisy triplet I_t = (w1 x_t, w2 b_t, w3 c_t) with its timestep.
struct NoisyTriplet {
  torch::Tensor channels;  // [B, 3, H, W]
  torch::Tensor t;         // [B] int64

  /// Applies the weights to an unweighted diffusion state.
  static NoisyTriplet from_state(const torch::Tensor& state,
                                 const torch::Tensor& t,
                                 const ChannelWeights& weights);
  static NoisyTriplet from_state(const torch::Tensor& state, int t,
                                 const ChannelWeights& weights);
};

struct NetConfig {
  int64_t image_size = 32;
  int64_t in_channels = 3;
  int64_t base_channels = 40;
  std::vector<int64_t> channel_mult{1, 2, 2};
  int64_t groups = 8;
  int64_t max_timestep = 200;

  void validate() const;
  bool operator==(const NetConfig&) const = default;
};

void to_json(nlohmann::json& j, const NetConfig& c);
void from_json(const nlohmann::json& j, NetConfig& c);

/// Sinusoidal embedding of integer timesteps, [B] -> [B, dim].
torch::Tensor timestep_embedding(const torch::Tensor& t, int64_t dim);

/// GroupNorm -> SiLU -> conv, twice, with the timestep projection added
/// between the convolutions and a 1x1 skip when the width changes.
class ResBlockImpl : public torch::nn::Module {
 public:
  ResBlockImpl(int64_t in_ch, int64_t out_ch, int64_t temb_dim, int64_t groups);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& temb);

 private:
  torch::nn::GroupNorm norm1_{nullptr}, norm2_{nullptr};
  torch::nn::Conv2d conv1_{nullptr}, conv2_{nullptr};
  torch::nn::Linear temb_proj_{nullptr};
  torch::nn::Conv2d skip_{nullptr};
};
TORCH_MODULE(ResBlock);

struct DenoiserOutput {
  torch::Tensor eps_hat;  // [B, 3, H, W] predicted noise per channel
  torch::Tensor v;        // [B, 3, H, W] variance interpolation in [0, 1]
};

/// Time-conditioned encoder-decoder with skip connections. Predicts noise
/// and a variance-interpolation field for all three input channels.
class DenoiserImpl : public torch::nn::Module {
 public:
  explicit DenoiserImpl(NetConfig config);
  DenoiserOutput forward(const NoisyTriplet& input);
  const NetConfig& config() const { return config_; }

 private:
  NetConfig config_;
  int64_t temb_dim_;
  torch::nn::Sequential time_mlp_{nullptr};
  torch::nn::Conv2d in_conv_{nullptr};
  torch::nn::ModuleList down_{nullptr};
  torch::nn::ModuleList downsample_{nullptr};
  ResBlock mid_{nullptr};
  torch::nn::ModuleList up_{nullptr};
  torch::nn::GroupNorm out_norm_{nullptr};
  torch::nn::Conv2d out_conv_{nullptr};
};
TORCH_MODULE(Denoiser);

/// Noisy-input classifier for guidance: the denoiser's encoder half,
/// attention pooling over positions, and a two-way head.
class GuidanceClassifierImpl : public torch::nn::Module {
 public:
  explicit GuidanceClassifierImpl(NetConfig config);
  /// Log-probabilities over {normal, CML}, [B, 2].
  torch::Tensor forward(const NoisyTriplet& input);
  const NetConfig& config() const { return config_; }

 private:
  NetConfig config_;
  int64_t temb_dim_;
  torch::nn::Sequential time_mlp_{nullptr};
  torch::nn::Conv2d in_conv_{nullptr};
  torch::nn::ModuleList down_{nullptr};
  torch::nn::ModuleList downsample_{nullptr};
  ResBlock mid_{nullptr};
  torch::nn::GroupNorm pool_norm_{nullptr};
  torch::nn::Conv2d attention_{nullptr};
  torch::nn::Linear head_{nullptr};
};
TORCH_MODULE(GuidanceClassifier);

/// Gradient of log p(y | I_t) with respect to all three input channels.
/// `labels` is [B] int64 or a single class broadcast over the batch.
torch::Tensor classifier_input_gradient(GuidanceClassifier& classifier,
                                        const NoisyTriplet& input,
                                        const torch::Tensor& labels);

void check_input(const NetConfig& config, const NoisyTriplet& input);

}  // namespace maskdiff
