#include "maskdiff/training.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <optional>
#include <sstream>

#include "maskdiff/checkpoint.hpp"
#include "maskdiff/diffusion.hpp"
#include "maskdiff/rng.hpp"

namespace maskdiff {

using nlohmann::json;
using Table = NoiseSchedule::Table;

void TrainConfig::validate() const {
  std::vector<std::string> problems;
  if (iterations <= 0) problems.push_back("iterations must be > 0");
  if (batch_size <= 0) problems.push_back("batch_size must be > 0");
  if (!(learning_rate > 0.0)) problems.push_back("learning_rate must be > 0");
  if (!(lambda_vlb >= 0.0)) problems.push_back("lambda_vlb must be >= 0");
  if (checkpoint_every < 0) problems.push_back("checkpoint_every must be >= 0");
  if (!(grad_clip > 0.0)) problems.push_back("grad_clip must be > 0");
  if (!(ema_decay >= 0.0 && ema_decay < 1.0)) problems.push_back("ema_decay must be in [0, 1)");
  if (schedule.steps < 1) problems.push_back("schedule.steps must be >= 1");
  try {
    weights.validate();
  } catch (const ConfigError& e) {
    problems.push_back(e.what());
  }
  if (!problems.empty()) {
    std::string msg = "invalid training config:";
    for (const auto& p : problems) msg += "\n  - " + p;
    throw ConfigError(msg);
  }
}

void to_json(json& j, const TrainConfig& c) {
  j = json{{"iterations", c.iterations},     {"batch_size", c.batch_size},
           {"learning_rate", c.learning_rate}, {"lambda_vlb", c.lambda_vlb},
           {"weights", c.weights},           {"schedule", c.schedule},
           {"seed", c.seed},                 {"checkpoint_every", c.checkpoint_every},
           {"grad_clip", c.grad_clip},       {"ema_decay", c.ema_decay}};
}

void from_json(const json& j, TrainConfig& c) {
  c.iterations = j.at("iterations").get<int>();
  c.batch_size = j.at("batch_size").get<int>();
  c.learning_rate = j.at("learning_rate").get<double>();
  c.lambda_vlb = j.at("lambda_vlb").get<double>();
  c.weights = j.at("weights").get<ChannelWeights>();
  c.schedule = j.at("schedule").get<ScheduleConfig>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.checkpoint_every = j.value("checkpoint_every", 500);
  c.grad_clip = j.value("grad_clip", 1.0);
  c.ema_decay = j.value("ema_decay", 0.0);
}

std::string TrainConfig::hash() const {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(fnv1a64(json(*this).dump())));
  return buf;
}

torch::Tensor normal_kl(const torch::Tensor& mean1, const torch::Tensor& logvar1,
                        const torch::Tensor& mean2, const torch::Tensor& logvar2) {
  return 0.5 * (-1.0 + logvar2 - logvar1 + torch::exp(logvar1 - logvar2) +
                (mean1 - mean2).pow(2) * torch::exp(-logvar2));
}

namespace {

torch::Tensor approx_standard_normal_cdf(const torch::Tensor& x) {
  return 0.5 * (1.0 + torch::tanh(std::sqrt(2.0 / std::numbers::pi) *
                                  (x + 0.044715 * x.pow(3))));
}

// Mean over the enabled channels and all pixels of each item: [B, C, H, W] -> [B].
torch::Tensor mean_over_active(const torch::Tensor& v, const ChannelWeights& weights) {
  const auto mask = weights.active_channels(v.scalar_type());
  const double denom = static_cast<double>(weights.active_count() * v.size(2) * v.size(3));
  return (v * mask).sum({1, 2, 3}) / denom;
}

void check_batch(const torch::Tensor& x0, const torch::Tensor& t, const torch::Tensor& eps) {
  if (x0.dim() != 4 || x0.size(1) != 3) throw ConfigError("loss expects [B, 3, H, W] states");
  if (x0.size(0) == 0) throw ConfigError("loss batch is empty");
  if (!x0.sizes().equals(eps.sizes())) throw ConfigError("noise shape differs from batch");
  if (t.dim() != 1 || t.size(0) != x0.size(0)) throw ConfigError("need one timestep per item");
}

void require_finite(const torch::Tensor& value, const char* name, const torch::Tensor& t) {
  if (!torch::isfinite(value).all().item<bool>()) {
    std::ostringstream msg;
    msg << "non-finite " << name << " (batch of " << t.size(0) << ", t in ["
        << t.min().item<int64_t>() << ", " << t.max().item<int64_t>() << "])";
    throw NumericError(msg.str());
  }
}

torch::Tensor simple_from_output(const torch::Tensor& eps, const DenoiserOutput& out,
                                 const ChannelWeights& weights) {
  return mean_over_active((eps - out.eps_hat).pow(2), weights).mean();
}

torch::Tensor vlb_from_output(const torch::Tensor& x0, const torch::Tensor& xt,
                              const torch::Tensor& t, const DenoiserOutput& out,
                              const NoiseSchedule& schedule,
                              const ChannelWeights& weights) {
  const auto dtype = x0.scalar_type();
  const auto nd = x0.dim();
  const auto true_post = posterior_moments(x0, xt, t, schedule);

  // Model mean from the (detached) noise estimate; learned log-variance
  // interpolates between log beta_t and the clipped log posterior variance.
  const auto eps_hat = out.eps_hat.detach();
  const auto beta = schedule.gather(Table::beta, t, nd, dtype);
  const auto alpha = schedule.gather(Table::alpha, t, nd, dtype);
  const auto ab = schedule.gather(Table::alpha_bar, t, nd, dtype);
  const auto model_mean = (xt - beta / (1.0 - ab).sqrt() * eps_hat) / alpha.sqrt();
  const auto log_beta = beta.log();
  const auto log_post = true_post.log_variance_clipped;
  if (!torch::isfinite(log_beta).all().item<bool>() ||
      !torch::isfinite(log_post).all().item<bool>()) {
    throw NumericError("vlb_term: degenerate variance (beta_t or posterior variance is 0)");
  }
  const auto model_logvar = out.v * log_beta + (1.0 - out.v) * log_post;

  const auto kl = mean_over_active(
      normal_kl(true_post.mean, true_post.log_variance_clipped, model_mean, model_logvar),
      weights);
  const auto nll = mean_over_active(
      -discretized_gaussian_log_likelihood(x0, model_mean, 0.5 * model_logvar), weights);
  return torch::where(t == 1, nll, kl).mean();
}

torch::Tensor make_xt(const torch::Tensor& x0, const torch::Tensor& t, const torch::Tensor& eps,
                      const NoiseSchedule& schedule) {
  return forward_marginal_sample(x0, t, eps, schedule);
}

}  // namespace

torch::Tensor discretized_gaussian_log_likelihood(const torch::Tensor& x,
                                                  const torch::Tensor& mean,
                                                  const torch::Tensor& log_scale) {
  const auto centered = x - mean;
  const auto inv_stdv = torch::exp(-log_scale);
  const auto cdf_plus = approx_standard_normal_cdf(inv_stdv * (centered + 1.0 / 255.0));
  const auto cdf_min = approx_standard_normal_cdf(inv_stdv * (centered - 1.0 / 255.0));
  const auto log_cdf_plus = torch::log(cdf_plus.clamp_min(1e-12));
  const auto log_one_minus_cdf_min = torch::log((1.0 - cdf_min).clamp_min(1e-12));
  const auto cdf_delta = cdf_plus - cdf_min;
  return torch::where(x < -0.999, log_cdf_plus,
                      torch::where(x > 0.999, log_one_minus_cdf_min,
                                   torch::log(cdf_delta.clamp_min(1e-12))));
}

torch::Tensor simple_loss(const torch::Tensor& x0, const torch::Tensor& t,
                          const torch::Tensor& eps, const DenoiseFn& model,
                          const NoiseSchedule& schedule, const ChannelWeights& weights) {
  check_batch(x0, t, eps);
  const auto xt = make_xt(x0, t, eps, schedule);
  const auto out = model(NoisyTriplet::from_state(xt, t, weights));
  auto loss = simple_from_output(eps, out, weights);
  require_finite(loss, "simple loss", t);
  return loss;
}

torch::Tensor vlb_term(const torch::Tensor& x0, const torch::Tensor& t,
                       const torch::Tensor& eps, const DenoiseFn& model,
                       const NoiseSchedule& schedule, const ChannelWeights& weights) {
  check_batch(x0, t, eps);
  const auto xt = make_xt(x0, t, eps, schedule);
  const auto out = model(NoisyTriplet::from_state(xt, t, weights));
  auto loss = vlb_from_output(x0, xt, t, out, schedule, weights);
  require_finite(loss, "vlb term", t);
  return loss;
}

LossTerms loss_terms_from_output(const torch::Tensor& x0, const torch::Tensor& t,
                                 const torch::Tensor& eps, const DenoiserOutput& out,
                                 const NoiseSchedule& schedule,
                                 const ChannelWeights& weights, double lambda_vlb) {
  check_batch(x0, t, eps);
  const auto xt = make_xt(x0, t, eps, schedule);
  LossTerms terms;
  terms.simple = simple_from_output(eps, out, weights);
  terms.vlb = lambda_vlb > 0.0 ? vlb_from_output(x0, xt, t, out, schedule, weights)
                               : torch::zeros({}, x0.options());
  terms.total = lambda_vlb > 0.0 ? terms.simple + lambda_vlb * terms.vlb : terms.simple;
  require_finite(terms.total, "hybrid loss", t);
  return terms;
}

LossTerms hybrid_loss(const torch::Tensor& x0, const torch::Tensor& t,
                      const torch::Tensor& eps, const DenoiseFn& model,
                      const NoiseSchedule& schedule, const ChannelWeights& weights,
                      double lambda_vlb) {
  check_batch(x0, t, eps);
  const auto xt = make_xt(x0, t, eps, schedule);
  const auto out = model(NoisyTriplet::from_state(xt, t, weights));
  return loss_terms_from_output(x0, t, eps, out, schedule, weights, lambda_vlb);
}

namespace {

void check_training_set(const Dataset& dataset, const NetConfig& net) {
  if (dataset.records.empty()) throw ConfigError("training set is empty");
  for (const auto& r : dataset.records) {
    validate_triplet(r);
    if (r.image.height != net.image_size || r.image.width != net.image_size) {
      throw ConfigError("record '" + r.id + "' resolution does not match the network");
    }
  }
}

torch::Tensor all_states(const Dataset& dataset) {
  std::vector<std::size_t> idx(dataset.records.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  return stack_triplets(dataset, idx);
}

}  // namespace

ParameterAverage::ParameterAverage(torch::nn::Module& source, double decay) : decay_(decay) {
  torch::NoGradGuard no_grad;
  for (const auto& p : source.parameters()) values_.push_back(p.detach().clone());
  for (const auto& b : source.buffers()) values_.push_back(b.detach().clone());
}

void ParameterAverage::update(torch::nn::Module& source, int step) {
  torch::NoGradGuard no_grad;
  const double d = std::min(decay_, (1.0 + step) / (10.0 + step));
  std::size_t i = 0;
  for (const auto& p : source.parameters()) values_[i++].mul_(d).add_(p.detach(), 1.0 - d);
  for (const auto& b : source.buffers()) values_[i++].copy_(b);
}

void ParameterAverage::copy_to(torch::nn::Module& target) const {
  torch::NoGradGuard no_grad;
  std::size_t i = 0;
  auto params = target.parameters();
  auto buffers = target.buffers();
  if (params.size() + buffers.size() != values_.size()) {
    throw ConfigError("parameter average: module layout differs");
  }
  for (auto& p : params) p.copy_(values_[i++]);
  for (auto& b : buffers) b.copy_(values_[i++]);
}

DenoiserTrainResult train_denoiser(const Dataset& dataset, const TrainConfig& config,
                                   const NetConfig& net, const TrainHooks& hooks) {
  config.validate();
  if (net.max_timestep != config.schedule.steps) {
    throw ConfigError("network max_timestep must equal schedule steps");
  }
  check_training_set(dataset, net);
  const auto schedule = config.schedule.build();
  const auto states = all_states(dataset);
  const auto n = states.size(0);

  torch::manual_seed(derive_seed(config.seed, "denoiser-init"));
  DenoiserTrainResult result{Denoiser(net), {}};
  auto& model = result.model;
  model->train();
  std::optional<ParameterAverage> average;
  if (config.ema_decay > 0.0) average.emplace(*model, config.ema_decay);
  torch::optim::Adam optimizer(model->parameters(),
                               torch::optim::AdamOptions(config.learning_rate));
  auto gen = make_generator(derive_seed(config.seed, "denoiser-train"));
  std::string last_good = module_to_bytes(*model);
  const int T = config.schedule.steps;

  for (int it = 1; it <= config.iterations; ++it) {
    const auto idx = torch::randint(n, {config.batch_size}, gen, torch::kLong);
    const auto x0 = states.index_select(0, idx);
    const auto t = torch::randint(1, T + 1, {config.batch_size}, gen, torch::kLong);
    const auto eps = torch::randn(x0.sizes(), gen, x0.options());

    optimizer.zero_grad();
    LossTerms terms;
    try {
      const auto xt = make_xt(x0, t, eps, schedule);
      const auto out = model->forward(NoisyTriplet::from_state(xt, t, config.weights));
      terms = loss_terms_from_output(x0, t, eps, out, schedule, config.weights,
                                     config.lambda_vlb);
    } catch (const NumericError& e) {
      module_from_bytes(*model, last_good);
      throw TrainingDiverged("denoiser training diverged at iteration " +
                                 std::to_string(it) + ": " + e.what(),
                             it, last_good);
    }
    terms.total.backward();
    torch::nn::utils::clip_grad_norm_(model->parameters(), config.grad_clip);
    optimizer.step();
    if (average) average->update(*model, it);
    if (hooks.on_step) hooks.on_step(it, *model);

    LossRecord rec{it, terms.simple.item<double>(), terms.vlb.item<double>(),
                   terms.total.item<double>()};
    result.history.push_back(rec);
    if (config.log_every > 0 && it % config.log_every == 0 && hooks.on_log) hooks.on_log(rec);
    if (config.checkpoint_every > 0 && it % config.checkpoint_every == 0) {
      last_good = module_to_bytes(*model);
      if (hooks.on_checkpoint) {
        if (average) {
          Denoiser snapshot(net);
          average->copy_to(*snapshot);
          hooks.on_checkpoint(it, *snapshot);
        } else {
          hooks.on_checkpoint(it, *model);
        }
      }
    }
  }
  if (average) average->copy_to(*model);
  model->eval();
  return result;
}

ClassifierTrainResult train_classifier(const Dataset& dataset, const TrainConfig& config,
                                       const NetConfig& net, const TrainHooks& hooks) {
  config.validate();
  if (net.max_timestep != config.schedule.steps) {
    throw ConfigError("network max_timestep must equal schedule steps");
  }
  check_training_set(dataset, net);
  if (dataset.count(Label::normal) == 0 || dataset.count(Label::cml) == 0) {
    throw ConfigError("guidance classifier needs both classes in the training set");
  }
  const auto schedule = config.schedule.build();
  const auto states = all_states(dataset);
  std::vector<std::size_t> all(dataset.records.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  const auto labels = stack_labels(dataset, all);
  const auto n = states.size(0);

  torch::manual_seed(derive_seed(config.seed, "classifier-init"));
  ClassifierTrainResult result{GuidanceClassifier(net), {}};
  auto& model = result.model;
  model->train();
  std::optional<ParameterAverage> average;
  if (config.ema_decay > 0.0) average.emplace(*model, config.ema_decay);
  torch::optim::Adam optimizer(model->parameters(),
                               torch::optim::AdamOptions(config.learning_rate));
  auto gen = make_generator(derive_seed(config.seed, "classifier-train"));
  std::string last_good = module_to_bytes(*model);
  const int T = config.schedule.steps;

  for (int it = 1; it <= config.iterations; ++it) {
    const auto idx = torch::randint(n, {config.batch_size}, gen, torch::kLong);
    const auto x0 = states.index_select(0, idx);
    const auto y = labels.index_select(0, idx);
    const auto t = torch::randint(1, T + 1, {config.batch_size}, gen, torch::kLong);
    const auto eps = torch::randn(x0.sizes(), gen, x0.options());
    const auto xt = forward_marginal_sample(x0, t, eps, schedule);

    optimizer.zero_grad();
    const auto log_probs = model->forward(NoisyTriplet::from_state(xt, t, config.weights));
    const auto loss = torch::nll_loss(log_probs, y);
    if (!std::isfinite(loss.item<double>())) {
      module_from_bytes(*model, last_good);
      throw TrainingDiverged("classifier training diverged at iteration " + std::to_string(it),
                             it, last_good);
    }
    loss.backward();
    torch::nn::utils::clip_grad_norm_(model->parameters(), config.grad_clip);
    optimizer.step();
    if (average) average->update(*model, it);
    if (hooks.on_step) hooks.on_step(it, *model);

    const double acc = log_probs.argmax(1).eq(y).to(torch::kDouble).mean().item<double>();
    ClassifierRecord rec{it, loss.item<double>(), acc};
    result.history.push_back(rec);
    if (config.log_every > 0 && it % config.log_every == 0 && hooks.on_classifier_log) {
      hooks.on_classifier_log(rec);
    }
    if (config.checkpoint_every > 0 && it % config.checkpoint_every == 0) {
      last_good = module_to_bytes(*model);
      if (hooks.on_checkpoint) {
        if (average) {
          GuidanceClassifier snapshot(net);
          average->copy_to(*snapshot);
          hooks.on_checkpoint(it, *snapshot);
        } else {
          hooks.on_checkpoint(it, *model);
        }
      }
    }
  }
  if (average) average->copy_to(*model);
  model->eval();
  return result;
}

double classifier_accuracy_at(GuidanceClassifier& classifier, const Dataset& dataset, int t,
                              const NoiseSchedule& schedule, const ChannelWeights& weights,
                              std::uint64_t seed) {
  if (dataset.records.empty()) throw ConfigError("evaluation set is empty");
  torch::NoGradGuard no_grad;
  classifier->eval();
  auto gen = make_generator(derive_seed(seed, "classifier-eval", static_cast<std::uint64_t>(t)));
  std::int64_t correct = 0;
  const std::size_t chunk = 64;
  for (std::size_t start = 0; start < dataset.records.size(); start += chunk) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(dataset.records.size(), start + chunk); ++i) {
      idx.push_back(i);
    }
    const auto x0 = stack_triplets(dataset, idx);
    const auto y = stack_labels(dataset, idx);
    const auto eps = torch::randn(x0.sizes(), gen, x0.options());
    const auto xt = forward_marginal_sample(x0, t, eps, schedule);
    const auto pred = classifier->forward(NoisyTriplet::from_state(xt, t, weights)).argmax(1);
    correct += pred.eq(y).sum().item<int64_t>();
  }
  return static_cast<double>(correct) / static_cast<double>(dataset.records.size());
}

void write_loss_csv(const std::filesystem::path& path, const std::vector<LossRecord>& history) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "iteration,simple,vlb,total\n";
  out.precision(9);
  for (const auto& r : history) {
    out << r.iteration << ',' << r.simple << ',' << r.vlb << ',' << r.total << '\n';
  }
}

void write_classifier_csv(const std::filesystem::path& path,
                          const std::vector<ClassifierRecord>& history) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "iteration,loss,accuracy\n";
  out.precision(9);
  for (const auto& r : history) out << r.iteration << ',' << r.loss << ',' << r.accuracy << '\n';
}

double mean_simple_loss(const std::vector<LossRecord>& history, std::size_t begin,
                        std::size_t end) {
  end = std::min(end, history.size());
  if (begin >= end) throw ConfigError("empty loss window");
  double acc = 0.0;
  for (std::size_t i = begin; i < end; ++i) acc += history[i].simple;
  return acc / static_cast<double>(end - begin);
}

}  // namespace maskdiff
