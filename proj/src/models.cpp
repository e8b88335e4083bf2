#include "maskdiff/models.hpp"

#include <cmath>
#include <sstream>

#include "maskdiff/error.hpp"

namespace maskdiff {

namespace nn = torch::nn;
using nlohmann::json;

void ChannelWeights::validate() const {
  std::vector<std::string> problems;
  if (!(image > 0.0 && image <= 1.0)) problems.push_back("image weight must be in (0, 1]");
  if (!(bone >= 0.0 && bone <= 1.0)) problems.push_back("bone weight must be in [0, 1]");
  if (!(lesion >= 0.0 && lesion <= 1.0)) problems.push_back("lesion weight must be in [0, 1]");
  if (!problems.empty()) {
    std::string msg = "invalid channel weights:";
    for (const auto& p : problems) msg += " " + p + ";";
    throw ConfigError(msg);
  }
}

torch::Tensor ChannelWeights::as_tensor(torch::ScalarType dtype) const {
  return torch::tensor({image, bone, lesion}, torch::kDouble).to(dtype).reshape({1, 3, 1, 1});
}

torch::Tensor ChannelWeights::active_channels(torch::ScalarType dtype) const {
  return torch::tensor({image > 0 ? 1.0 : 0.0, bone > 0 ? 1.0 : 0.0, lesion > 0 ? 1.0 : 0.0},
                       torch::kDouble)
      .to(dtype)
      .reshape({1, 3, 1, 1});
}

int ChannelWeights::active_count() const {
  return (image > 0) + (bone > 0) + (lesion > 0);
}

void to_json(json& j, const ChannelWeights& w) {
  j = json{{"w1", w.image}, {"w2", w.bone}, {"w3", w.lesion}};
}

void from_json(const json& j, ChannelWeights& w) {
  w.image = j.at("w1").get<double>();
  w.bone = j.at("w2").get<double>();
  w.lesion = j.at("w3").get<double>();
}

NoisyTriplet NoisyTriplet::from_state(const torch::Tensor& state,
                                      const torch::Tensor& t,
                                      const ChannelWeights& weights) {
  if (state.dim() != 4 || state.size(1) != 3) {
    throw ConfigError("diffusion state must be [B, 3, H, W]");
  }
  return {state * weights.as_tensor(state.scalar_type()), t};
}

NoisyTriplet NoisyTriplet::from_state(const torch::Tensor& state, int t,
                                      const ChannelWeights& weights) {
  return from_state(state, torch::full({state.size(0)}, t, torch::kLong), weights);
}

void NetConfig::validate() const {
  const auto levels = static_cast<int64_t>(channel_mult.size());
  if (levels < 1) throw ConfigError("network needs at least one resolution level");
  if (image_size % (int64_t{1} << (levels - 1)) != 0) {
    throw ConfigError("image size must be divisible by 2^(levels-1)");
  }
  for (auto m : channel_mult) {
    if (m < 1 || (base_channels * m) % groups != 0) {
      throw ConfigError("channel widths must be multiples of the group count");
    }
  }
  if (max_timestep < 1) throw ConfigError("max_timestep must be positive");
}

void to_json(json& j, const NetConfig& c) {
  j = json{{"image_size", c.image_size}, {"in_channels", c.in_channels},
           {"base_channels", c.base_channels}, {"channel_mult", c.channel_mult},
           {"groups", c.groups}, {"max_timestep", c.max_timestep}};
}

void from_json(const json& j, NetConfig& c) {
  c.image_size = j.at("image_size").get<int64_t>();
  c.in_channels = j.value("in_channels", int64_t{3});
  c.base_channels = j.at("base_channels").get<int64_t>();
  c.channel_mult = j.at("channel_mult").get<std::vector<int64_t>>();
  c.groups = j.at("groups").get<int64_t>();
  c.max_timestep = j.at("max_timestep").get<int64_t>();
}

torch::Tensor timestep_embedding(const torch::Tensor& t, int64_t dim) {
  const int64_t half = dim / 2;
  auto freqs = torch::exp(-std::log(10000.0) *
                          torch::arange(half, torch::kFloat) / static_cast<double>(half));
  auto args = t.to(torch::kFloat).unsqueeze(1) * freqs.unsqueeze(0);
  auto emb = torch::cat({torch::cos(args), torch::sin(args)}, 1);
  if (dim % 2) emb = torch::cat({emb, torch::zeros({t.size(0), 1})}, 1);
  return emb;
}

ResBlockImpl::ResBlockImpl(int64_t in_ch, int64_t out_ch, int64_t temb_dim,
                           int64_t groups) {
  norm1_ = register_module("norm1", nn::GroupNorm(groups, in_ch));
  conv1_ = register_module("conv1", nn::Conv2d(nn::Conv2dOptions(in_ch, out_ch, 3).padding(1)));
  temb_proj_ = register_module("temb_proj", nn::Linear(temb_dim, out_ch));
  norm2_ = register_module("norm2", nn::GroupNorm(groups, out_ch));
  conv2_ = register_module("conv2", nn::Conv2d(nn::Conv2dOptions(out_ch, out_ch, 3).padding(1)));
  if (in_ch != out_ch) {
    skip_ = register_module("skip", nn::Conv2d(nn::Conv2dOptions(in_ch, out_ch, 1)));
  }
}

torch::Tensor ResBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& temb) {
  auto h = conv1_(torch::silu(norm1_(x)));
  h = h + temb_proj_(torch::silu(temb)).unsqueeze(-1).unsqueeze(-1);
  h = conv2_(torch::silu(norm2_(h)));
  return h + (skip_ ? skip_(x) : x);
}

namespace {

nn::Sequential make_time_mlp(int64_t base, int64_t temb_dim) {
  return nn::Sequential(nn::Linear(base, temb_dim), nn::SiLU(), nn::Linear(temb_dim, temb_dim));
}

}  // namespace

void check_input(const NetConfig& config, const NoisyTriplet& input) {
  const auto& x = input.channels;
  if (x.dim() != 4 || x.size(1) != config.in_channels ||
      x.size(2) != config.image_size || x.size(3) != config.image_size) {
    std::ostringstream msg;
    msg << "network expects [B, " << config.in_channels << ", " << config.image_size
        << ", " << config.image_size << "], got " << x.sizes();
    throw ConfigError(msg.str());
  }
  if (input.t.dim() != 1 || input.t.size(0) != x.size(0)) {
    throw ConfigError("timestep tensor must be [B]");
  }
  const auto lo = input.t.min().item<int64_t>();
  const auto hi = input.t.max().item<int64_t>();
  if (lo < 1 || hi > config.max_timestep) {
    throw ConfigError("timestep outside [1, " + std::to_string(config.max_timestep) + "]");
  }
}

DenoiserImpl::DenoiserImpl(NetConfig config) : config_(std::move(config)) {
  config_.validate();
  const int64_t base = config_.base_channels;
  temb_dim_ = 4 * base;
  time_mlp_ = register_module("time_mlp", make_time_mlp(base, temb_dim_));
  in_conv_ = register_module(
      "in_conv", nn::Conv2d(nn::Conv2dOptions(config_.in_channels, base, 3).padding(1)));

  down_ = register_module("down", nn::ModuleList());
  downsample_ = register_module("downsample", nn::ModuleList());
  up_ = register_module("up", nn::ModuleList());
  std::vector<int64_t> widths;
  int64_t ch = base;
  const auto levels = config_.channel_mult.size();
  for (std::size_t i = 0; i < levels; ++i) {
    const int64_t out = base * config_.channel_mult[i];
    down_->push_back(ResBlock(ch, out, temb_dim_, config_.groups));
    widths.push_back(out);
    ch = out;
    if (i + 1 < levels) {
      downsample_->push_back(nn::Conv2d(nn::Conv2dOptions(ch, ch, 3).stride(2).padding(1)));
    }
  }
  mid_ = register_module("mid", ResBlock(ch, ch, temb_dim_, config_.groups));
  for (std::size_t k = 0; k < levels; ++k) {
    const auto i = levels - 1 - k;
    up_->push_back(ResBlock(ch + widths[i], widths[i], temb_dim_, config_.groups));
    ch = widths[i];
  }
  out_norm_ = register_module("out_norm", nn::GroupNorm(config_.groups, ch));
  out_conv_ = register_module(
      "out_conv", nn::Conv2d(nn::Conv2dOptions(ch, 2 * config_.in_channels, 3).padding(1)));
}

DenoiserOutput DenoiserImpl::forward(const NoisyTriplet& input) {
  check_input(config_, input);
  const auto temb = time_mlp_->forward(timestep_embedding(input.t, config_.base_channels)
                                           .to(input.channels.scalar_type()));
  auto h = in_conv_(input.channels);
  std::vector<torch::Tensor> skips;
  const auto levels = down_->size();
  for (std::size_t i = 0; i < levels; ++i) {
    h = down_[i]->as<ResBlock>()->forward(h, temb);
    skips.push_back(h);
    if (i + 1 < levels) h = downsample_[i]->as<nn::Conv2d>()->forward(h);
  }
  h = mid_(h, temb);
  for (std::size_t k = 0; k < levels; ++k) {
    const auto i = levels - 1 - k;
    h = up_[k]->as<ResBlock>()->forward(torch::cat({h, skips[i]}, 1), temb);
    if (i > 0) {
      h = torch::upsample_nearest2d(h, {skips[i - 1].size(2), skips[i - 1].size(3)});
    }
  }
  const auto out = out_conv_(torch::silu(out_norm_(h)));
  const auto c = config_.in_channels;
  return {out.narrow(1, 0, c), torch::sigmoid(out.narrow(1, c, c))};
}

GuidanceClassifierImpl::GuidanceClassifierImpl(NetConfig config) : config_(std::move(config)) {
  config_.validate();
  const int64_t base = config_.base_channels;
  temb_dim_ = 4 * base;
  time_mlp_ = register_module("time_mlp", make_time_mlp(base, temb_dim_));
  in_conv_ = register_module(
      "in_conv", nn::Conv2d(nn::Conv2dOptions(config_.in_channels, base, 3).padding(1)));
  down_ = register_module("down", nn::ModuleList());
  downsample_ = register_module("downsample", nn::ModuleList());
  int64_t ch = base;
  const auto levels = config_.channel_mult.size();
  for (std::size_t i = 0; i < levels; ++i) {
    const int64_t out = base * config_.channel_mult[i];
    down_->push_back(ResBlock(ch, out, temb_dim_, config_.groups));
    ch = out;
    if (i + 1 < levels) {
      downsample_->push_back(nn::Conv2d(nn::Conv2dOptions(ch, ch, 3).stride(2).padding(1)));
    }
  }
  mid_ = register_module("mid", ResBlock(ch, ch, temb_dim_, config_.groups));
  pool_norm_ = register_module("pool_norm", nn::GroupNorm(config_.groups, ch));
  attention_ = register_module("attention", nn::Conv2d(nn::Conv2dOptions(ch, 1, 1)));
  head_ = register_module("head", nn::Linear(ch, 2));
}

torch::Tensor GuidanceClassifierImpl::forward(const NoisyTriplet& input) {
  check_input(config_, input);
  const auto temb = time_mlp_->forward(timestep_embedding(input.t, config_.base_channels)
                                           .to(input.channels.scalar_type()));
  auto h = in_conv_(input.channels);
  const auto levels = down_->size();
  for (std::size_t i = 0; i < levels; ++i) {
    h = down_[i]->as<ResBlock>()->forward(h, temb);
    if (i + 1 < levels) h = downsample_[i]->as<nn::Conv2d>()->forward(h);
  }
  h = torch::silu(pool_norm_(mid_(h, temb)));
  // Attention pooling: softmax over spatial positions of a 1x1 score map.
  const auto scores = attention_(h).flatten(2);                  // [B, 1, HW]
  const auto weights = torch::softmax(scores, 2);
  const auto pooled = (h.flatten(2) * weights).sum(2);          // [B, C]
  return torch::log_softmax(head_(pooled), 1);
}

torch::Tensor classifier_input_gradient(GuidanceClassifier& classifier,
                                        const NoisyTriplet& input,
                                        const torch::Tensor& labels) {
  torch::AutoGradMode enable(true);
  auto x = input.channels.detach().clone().set_requires_grad(true);
  const auto log_probs = classifier->forward({x, input.t});
  auto y = labels.to(torch::kLong);
  if (y.dim() == 0 || y.numel() == 1) y = y.reshape({1}).expand({x.size(0)});
  if (y.size(0) != x.size(0)) throw ConfigError("label count does not match batch size");
  if ((y < 0).any().item<bool>() || (y > 1).any().item<bool>()) {
    throw ConfigError("class label must be 0 or 1");
  }
  const auto selected = log_probs.gather(1, y.unsqueeze(1)).sum();
  auto grad = torch::autograd::grad({selected}, {x})[0];
  if (!torch::isfinite(grad).all().item<bool>()) {
    std::ostringstream msg;
    msg << "non-finite classifier gradient (t in [" << input.t.min().item<int64_t>() << ", "
        << input.t.max().item<int64_t>() << "], input range [" << x.min().item<double>()
        << ", " << x.max().item<double>() << "], log-probs finite: "
        << torch::isfinite(log_probs).all().item<bool>() << ")";
    throw NumericError(msg.str());
  }
  return grad;
}

}  // namespace maskdiff
