#include "maskdiff/sampling.hpp"

#include <algorithm>
#include <cmath>

#include "maskdiff/diffusion.hpp"
#include "maskdiff/error.hpp"
#include "maskdiff/rng.hpp"

namespace maskdiff {

using nlohmann::json;

namespace {

constexpr std::size_t kChunk = 32;

void require_finite(const torch::Tensor& x, const std::string& what) {
  if (!torch::isfinite(x).all().item<bool>()) throw NumericError("non-finite " + what);
}

}  // namespace

void GuidanceSpec::validate(int steps) const {
  std::vector<std::string> problems;
  if (!(gradient_scale >= 0.0) || !std::isfinite(gradient_scale)) {
    problems.push_back("gradient_scale must be a finite value >= 0");
  }
  if (start_step < 0 || start_step > steps) {
    problems.push_back("start_step must be in [0, " + std::to_string(steps) + "]");
  }
  if (start_step >= 1 && ddim_steps < 1) problems.push_back("ddim_steps must be >= 1");
  if (!(eta >= 0.0 && eta <= 1.0)) problems.push_back("eta must be in [0, 1]");
  try {
    weights.validate();
  } catch (const ConfigError& e) {
    problems.push_back(e.what());
  }
  if (!problems.empty()) {
    std::string msg = "invalid guidance spec:";
    for (const auto& p : problems) msg += "\n  - " + p;
    throw ConfigError(msg);
  }
}

void to_json(json& j, const GuidanceSpec& s) {
  j = json{{"target_class", to_string(s.target_class)},
           {"gradient_scale", s.gradient_scale},
           {"start_step", s.start_step},
           {"ddim_steps", s.ddim_steps},
           {"eta", s.eta},
           {"weights", s.weights},
           {"clip_x0", s.clip_x0},
           {"seed", s.seed},
           {"allow_non_normal_input", s.allow_non_normal_input}};
}

void from_json(const json& j, GuidanceSpec& s) {
  s.target_class = parse_label(j.at("target_class").get<std::string>());
  s.gradient_scale = j.at("gradient_scale").get<double>();
  s.start_step = j.at("start_step").get<int>();
  s.ddim_steps = j.at("ddim_steps").get<int>();
  s.eta = j.at("eta").get<double>();
  s.weights = j.at("weights").get<ChannelWeights>();
  s.clip_x0 = j.value("clip_x0", true);
  s.seed = j.at("seed").get<std::uint64_t>();
  s.allow_non_normal_input = j.value("allow_non_normal_input", false);
}

void to_json(json& j, const TrajectoryMetadata& m) {
  j = json{{"start_step", m.start_step},         {"timesteps", m.timesteps},
           {"noise_seed", m.noise_seed},         {"gradient_scale", m.gradient_scale},
           {"eta", m.eta},                       {"guidance_norms", m.guidance_norms},
           {"cleared_lesion_pixels", m.cleared_lesion_pixels}};
}

LabeledTriplet to_triplet(const SampleResult& result, std::string id) {
  LabeledTriplet t;
  t.id = std::move(id);
  t.image = result.image;
  t.bone_mask = result.bone_mask;
  t.lesion_mask = result.lesion_mask;
  t.label = result.target_class;
  t.provenance = Provenance::synthetic;
  t.source_id = result.source_id;
  if (t.label == Label::normal) {
    std::fill(t.lesion_mask.pixels.begin(), t.lesion_mask.pixels.end(), 0);
  }
  return t;
}

torch::Tensor guided_eps(const torch::Tensor& eps_hat, const torch::Tensor& grad, int t,
                         double gradient_scale, const NoiseSchedule& schedule) {
  if (!eps_hat.sizes().equals(grad.sizes())) {
    throw ConfigError("guided_eps: noise estimate and gradient shapes differ");
  }
  if (!(gradient_scale >= 0.0)) throw ConfigError("guided_eps: gradient scale must be >= 0");
  schedule.check_timestep(t);
  require_finite(eps_hat, "noise estimate in guided_eps");
  require_finite(grad, "classifier gradient in guided_eps");
  const double coef = std::sqrt(1.0 - schedule.alpha_bar(t)) * gradient_scale;
  return eps_hat - coef * grad;
}

torch::Tensor ddpm_step(const torch::Tensor& xt, const DenoiserOutput& out, int t,
                        const torch::Tensor& noise, const NoiseSchedule& schedule,
                        bool learned_variance) {
  schedule.check_timestep(t);
  auto mean = eps_parameterized_mean(xt, t, out.eps_hat, schedule);
  if (t == 1) return mean;
  if (!noise.sizes().equals(xt.sizes())) throw ConfigError("ddpm_step: noise shape differs");
  torch::Tensor stddev;
  if (learned_variance) {
    const auto logvar = out.v * std::log(schedule.beta(t)) +
                        (1.0 - out.v) * schedule.posterior_log_variance_clipped(t);
    stddev = torch::exp(0.5 * logvar);
  } else {
    stddev = torch::full({}, std::sqrt(schedule.posterior_variance(t)), xt.options());
  }
  return mean + stddev * noise;
}

torch::Tensor ddim_step(const torch::Tensor& xt, const torch::Tensor& eps_hat, int t,
                        int t_prev, double eta, const NoiseSchedule& schedule,
                        const torch::Tensor& noise, bool clip_x0) {
  schedule.check_timestep(t);
  if (t_prev < 0 || t_prev >= t) {
    throw ConfigError("ddim_step: need 0 <= t_prev < t, got t=" + std::to_string(t) +
                      ", t_prev=" + std::to_string(t_prev));
  }
  if (!(eta >= 0.0 && eta <= 1.0)) throw ConfigError("ddim_step: eta must be in [0, 1]");
  const double ab = schedule.alpha_bar(t);
  const double ab_prev = schedule.alpha_bar(t_prev);
  auto x0 = predict_x0_from_eps(xt, t, eps_hat, schedule);
  auto eps = eps_hat;
  if (clip_x0) {
    x0 = x0.clamp(-1.0, 1.0);
    eps = (xt - std::sqrt(ab) * x0) / std::sqrt(1.0 - ab);
  }
  const double sigma =
      eta * std::sqrt((1.0 - ab_prev) / (1.0 - ab)) * std::sqrt(1.0 - ab / ab_prev);
  auto out = std::sqrt(ab_prev) * x0 + std::sqrt(std::max(0.0, 1.0 - ab_prev - sigma * sigma)) * eps;
  if (sigma > 0.0) {
    if (!noise.defined() || !noise.sizes().equals(xt.sizes())) {
      throw ConfigError("ddim_step: eta > 0 needs a noise tensor shaped like x_t");
    }
    out = out + sigma * noise;
  }
  return out;
}

std::vector<int> ddim_timesteps(int start, int count) {
  if (start < 1) throw ConfigError("ddim_timesteps: start must be >= 1");
  if (count < 1) throw ConfigError("ddim_timesteps: count must be >= 1");
  count = std::min(count, start);
  std::vector<int> ts;
  if (count == 1) {
    ts.push_back(start);
  } else {
    for (int i = count - 1; i >= 0; --i) {
      ts.push_back(1 + static_cast<int>((static_cast<int64_t>(i) * (start - 1)) / (count - 1)));
    }
  }
  return ts;
}

void check_models(const SamplerModels& models, const NoiseSchedule& schedule,
                  int64_t image_size, bool need_classifier) {
  if (!models.denoiser) throw ConfigError("sampler needs a denoiser");
  const auto& dc = models.denoiser->config();
  if (dc.max_timestep != schedule.steps()) {
    throw ConfigError("denoiser was built for T=" + std::to_string(dc.max_timestep) +
                      " but the schedule has T=" + std::to_string(schedule.steps()));
  }
  if (dc.image_size != image_size) {
    throw ConfigError("denoiser resolution " + std::to_string(dc.image_size) +
                      " does not match inputs of size " + std::to_string(image_size));
  }
  if (need_classifier && !models.classifier) {
    throw ConfigError("gradient_scale > 0 needs a guidance classifier");
  }
  if (models.classifier) {
    const auto& cc = models.classifier->config();
    if (cc.max_timestep != dc.max_timestep || cc.image_size != dc.image_size) {
      throw ConfigError("guidance classifier and denoiser disagree on T or resolution");
    }
  }
}

void check_checkpoint_pair(const CheckpointMeta& denoiser, const CheckpointMeta& classifier) {
  std::vector<std::string> problems;
  if (!(denoiser.schedule == classifier.schedule)) problems.push_back("noise schedules differ");
  if (!(denoiser.weights == classifier.weights)) problems.push_back("channel weights differ");
  if (denoiser.architecture.value("image_size", -1) !=
      classifier.architecture.value("image_size", -1)) {
    problems.push_back("resolutions differ");
  }
  if (!problems.empty()) {
    std::string msg = "denoiser and guidance classifier checkpoints are incompatible:";
    for (const auto& p : problems) msg += "\n  - " + p;
    throw ConfigError(msg);
  }
}

namespace {

struct ChainState {
  torch::Tensor x;  // [B, 3, H, W] unweighted state
  std::vector<at::Generator> gens;
  std::vector<std::vector<double>> norms;
};

torch::Tensor per_item_noise(std::vector<at::Generator>& gens, int64_t h, int64_t w) {
  std::vector<torch::Tensor> parts;
  parts.reserve(gens.size());
  for (auto& g : gens) parts.push_back(torch::randn({3, h, w}, g));
  return torch::stack(parts);
}

void run_implicit_chain(ChainState& state, const std::vector<int>& ts, SamplerModels& models,
                        const NoiseSchedule& schedule, const GuidanceSpec& spec) {
  const auto h = state.x.size(2), w = state.x.size(3);
  const auto labels = torch::full({state.x.size(0)}, static_cast<int64_t>(spec.target_class),
                                  torch::kLong);
  const bool guided = static_cast<bool>(models.classifier);
  for (std::size_t k = 0; k < ts.size(); ++k) {
    const int t = ts[k];
    const int t_prev = k + 1 < ts.size() ? ts[k + 1] : 0;
    const auto input = NoisyTriplet::from_state(state.x, t, spec.weights);
    torch::Tensor eps;
    {
      torch::NoGradGuard no_grad;
      eps = models.denoiser->forward(input).eps_hat;
    }
    require_finite(eps, "noise estimate at t=" + std::to_string(t));
    if (guided) {
      const auto grad = classifier_input_gradient(models.classifier, input, labels);
      const auto norms = grad.flatten(1).norm(2, 1);
      for (int64_t i = 0; i < norms.size(0); ++i) {
        state.norms[static_cast<std::size_t>(i)].push_back(norms[i].item<double>());
      }
      eps = guided_eps(eps, grad, t, spec.gradient_scale, schedule);
    }
    torch::Tensor noise;
    if (spec.eta > 0.0 && t_prev > 0) noise = per_item_noise(state.gens, h, w);
    torch::NoGradGuard no_grad;
    state.x = ddim_step(state.x, eps, t, t_prev, spec.eta, schedule, noise, spec.clip_x0);
    require_finite(state.x, "sample at t=" + std::to_string(t_prev));
  }
}

torch::Tensor stack_inputs(const std::vector<LabeledTriplet>& items, std::size_t begin,
                           std::size_t end) {
  std::vector<torch::Tensor> parts;
  for (std::size_t i = begin; i < end; ++i) {
    parts.push_back(torch::stack({image_to_tensor(items[i].image),
                                  mask_to_tensor(items[i].bone_mask),
                                  mask_to_tensor(items[i].lesion_mask)}));
  }
  return torch::stack(parts);
}

int64_t clear_if_normal(SampleResult& r) {
  if (r.target_class != Label::normal) return 0;
  const auto n = r.lesion_mask.count();
  std::fill(r.lesion_mask.pixels.begin(), r.lesion_mask.pixels.end(), 0);
  return static_cast<int64_t>(n);
}

void set_eval(SamplerModels& models) {
  models.denoiser->eval();
  if (models.classifier) models.classifier->eval();
}

}  // namespace

std::vector<SampleResult> translate(const std::vector<LabeledTriplet>& inputs,
                                    SamplerModels& models, const NoiseSchedule& schedule,
                                    const GuidanceSpec& spec) {
  spec.validate(schedule.steps());
  if (inputs.empty()) return {};
  const auto h = inputs.front().image.height, w = inputs.front().image.width;
  for (const auto& in : inputs) {
    validate_triplet(in);
    if (in.image.height != h || in.image.width != w) {
      throw ConfigError("translate: inputs have mixed resolutions ('" + in.id + "')");
    }
    if (in.label != Label::normal && !spec.allow_non_normal_input) {
      throw ConfigError("translate: input '" + in.id +
                        "' is not labelled normal (set allow_non_normal_input to override)");
    }
  }

  std::vector<SampleResult> results;
  results.reserve(inputs.size());
  if (spec.start_step == 0) {
    for (const auto& in : inputs) {
      SampleResult r{in.image, in.bone_mask, in.lesion_mask, spec.target_class, in.id, {}};
      r.trajectory.noise_seed = derive_seed(spec.seed, in.id);
      r.trajectory.gradient_scale = spec.gradient_scale;
      r.trajectory.eta = spec.eta;
      r.trajectory.cleared_lesion_pixels = clear_if_normal(r);
      results.push_back(std::move(r));
    }
    return results;
  }

  if (h != w) throw ConfigError("translate: inputs must be square");
  check_models(models, schedule, h, spec.gradient_scale > 0.0);
  set_eval(models);
  const auto ts = ddim_timesteps(spec.start_step, spec.ddim_steps);

  for (std::size_t begin = 0; begin < inputs.size(); begin += kChunk) {
    const std::size_t end = std::min(inputs.size(), begin + kChunk);
    ChainState state;
    std::vector<std::uint64_t> seeds;
    for (std::size_t i = begin; i < end; ++i) {
      seeds.push_back(derive_seed(spec.seed, inputs[i].id));
      state.gens.push_back(make_generator(seeds.back()));
    }
    state.norms.resize(end - begin);
    const auto x0 = stack_inputs(inputs, begin, end);
    const auto eps = per_item_noise(state.gens, h, w);
    state.x = forward_marginal_sample(x0, spec.start_step, eps, schedule);
    run_implicit_chain(state, ts, models, schedule, spec);

    for (std::size_t i = begin; i < end; ++i) {
      const auto j = static_cast<int64_t>(i - begin);
      const auto& in = inputs[i];
      SampleResult r;
      r.image = image_from_tensor(state.x[j][0]);
      r.bone_mask = spec.weights.bone > 0.0 ? mask_from_tensor(state.x[j][1]) : in.bone_mask;
      r.lesion_mask =
          spec.weights.lesion > 0.0 ? mask_from_tensor(state.x[j][2]) : in.lesion_mask;
      r.target_class = spec.target_class;
      r.source_id = in.id;
      r.trajectory.start_step = spec.start_step;
      r.trajectory.timesteps = ts;
      r.trajectory.noise_seed = seeds[static_cast<std::size_t>(j)];
      r.trajectory.gradient_scale = spec.gradient_scale;
      r.trajectory.eta = spec.eta;
      r.trajectory.guidance_norms = std::move(state.norms[static_cast<std::size_t>(j)]);
      r.trajectory.cleared_lesion_pixels = clear_if_normal(r);
      results.push_back(std::move(r));
    }
  }
  return results;
}

SampleResult translate(const LabeledTriplet& input, SamplerModels& models,
                       const NoiseSchedule& schedule, const GuidanceSpec& spec) {
  return translate(std::vector<LabeledTriplet>{input}, models, schedule, spec).front();
}

std::vector<SampleResult> generate_unconditional(SamplerModels& models,
                                                 const NoiseSchedule& schedule,
                                                 const GuidanceSpec& spec, int count,
                                                 int64_t image_size, int first_index) {
  spec.validate(schedule.steps());
  if (spec.start_step != schedule.steps()) {
    throw ConfigError("generate_unconditional: start_step must equal T=" +
                      std::to_string(schedule.steps()));
  }
  if (count < 0) throw ConfigError("generate_unconditional: count must be >= 0");
  check_models(models, schedule, image_size, spec.gradient_scale > 0.0);
  set_eval(models);
  const auto ts = ddim_timesteps(spec.start_step, spec.ddim_steps);

  std::vector<SampleResult> results;
  results.reserve(static_cast<std::size_t>(count));
  for (int begin = 0; begin < count; begin += static_cast<int>(kChunk)) {
    const int end = std::min(count, begin + static_cast<int>(kChunk));
    ChainState state;
    std::vector<std::uint64_t> seeds;
    for (int i = begin; i < end; ++i) {
      seeds.push_back(derive_seed(spec.seed, "sample", static_cast<std::uint64_t>(first_index + i)));
      state.gens.push_back(make_generator(seeds.back()));
    }
    state.norms.resize(static_cast<std::size_t>(end - begin));
    state.x = per_item_noise(state.gens, image_size, image_size);
    run_implicit_chain(state, ts, models, schedule, spec);
    for (int i = begin; i < end; ++i) {
      const auto j = static_cast<int64_t>(i - begin);
      SampleResult r;
      r.image = image_from_tensor(state.x[j][0]);
      r.bone_mask = spec.weights.bone > 0.0 ? mask_from_tensor(state.x[j][1])
                                            : Mask(image_size, image_size);
      r.lesion_mask = spec.weights.lesion > 0.0 ? mask_from_tensor(state.x[j][2])
                                                : Mask(image_size, image_size);
      r.target_class = spec.target_class;
      r.trajectory.start_step = spec.start_step;
      r.trajectory.timesteps = ts;
      r.trajectory.noise_seed = seeds[static_cast<std::size_t>(j)];
      r.trajectory.gradient_scale = spec.gradient_scale;
      r.trajectory.eta = spec.eta;
      r.trajectory.guidance_norms = std::move(state.norms[static_cast<std::size_t>(j)]);
      r.trajectory.cleared_lesion_pixels = clear_if_normal(r);
      results.push_back(std::move(r));
    }
  }
  return results;
}

std::vector<SampleResult> generate_ancestral(Denoiser& denoiser, const NoiseSchedule& schedule,
                                             const ChannelWeights& weights, std::uint64_t seed,
                                             int count, int64_t image_size) {
  SamplerModels models{denoiser, nullptr};
  check_models(models, schedule, image_size, false);
  weights.validate();
  denoiser->eval();
  torch::NoGradGuard no_grad;
  std::vector<SampleResult> results;
  for (int begin = 0; begin < count; begin += static_cast<int>(kChunk)) {
    const int end = std::min(count, begin + static_cast<int>(kChunk));
    std::vector<at::Generator> gens;
    std::vector<std::uint64_t> seeds;
    for (int i = begin; i < end; ++i) {
      seeds.push_back(derive_seed(seed, "ancestral", static_cast<std::uint64_t>(i)));
      gens.push_back(make_generator(seeds.back()));
    }
    auto x = per_item_noise(gens, image_size, image_size);
    for (int t = schedule.steps(); t >= 1; --t) {
      const auto out = denoiser->forward(NoisyTriplet::from_state(x, t, weights));
      const auto noise = t > 1 ? per_item_noise(gens, image_size, image_size) : torch::Tensor();
      x = ddpm_step(x, out, t, noise, schedule);
      require_finite(x, "ancestral sample at t=" + std::to_string(t - 1));
    }
    for (int i = begin; i < end; ++i) {
      const auto j = static_cast<int64_t>(i - begin);
      SampleResult r;
      r.image = image_from_tensor(x[j][0]);
      r.bone_mask = mask_from_tensor(x[j][1]);
      r.lesion_mask = mask_from_tensor(x[j][2]);
      r.trajectory.start_step = schedule.steps();
      r.trajectory.noise_seed = seeds[static_cast<std::size_t>(j)];
      results.push_back(std::move(r));
    }
  }
  return results;
}

}  // namespace maskdiff
