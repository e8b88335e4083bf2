#include "doctest.h"
#include "oracles.hpp"
#include "scratch_dir.hpp"

#include <cmath>
#include <fstream>

#include "maskdiff/dataset.hpp"
#include "maskdiff/diffusion.hpp"
#include "maskdiff/error.hpp"
#include "maskdiff/rng.hpp"
#include "maskdiff/training.hpp"

using namespace maskdiff;

namespace {

const auto kDouble = torch::TensorOptions().dtype(torch::kDouble);

NoiseSchedule test_schedule() { return build_schedule(ScheduleKind::linear, 50, 1e-3, 0.05); }

struct Batch {
  torch::Tensor x0, t, eps;
};

Batch random_batch(std::uint64_t seed, int64_t b = 4, int64_t size = 6, int t_lo = 1) {
  auto gen = make_generator(seed);
  return {torch::rand({b, 3, size, size}, gen, kDouble) * 2.0 - 1.0,
          torch::randint(t_lo, 51, {b}, gen, torch::kLong),
          torch::randn({b, 3, size, size}, gen, kDouble)};
}

DenoiseFn constant_model(torch::Tensor eps_hat, torch::Tensor v) {
  return [eps_hat, v](const NoisyTriplet&) { return DenoiserOutput{eps_hat, v}; };
}

NetConfig tiny_net(int steps) {
  NetConfig c;
  c.image_size = 16;
  c.base_channels = 8;
  c.channel_mult = {1, 2};
  c.groups = 4;
  c.max_timestep = steps;
  return c;
}

TrainConfig tiny_train(int steps) {
  TrainConfig c;
  c.iterations = 4;
  c.batch_size = 4;
  c.schedule.steps = steps;
  c.seed = 99;
  c.checkpoint_every = 2;
  return c;
}

}  // namespace

TEST_SUITE("training") {

TEST_CASE("simple loss hand cases") {
  const auto sched = test_schedule();
  const auto b = random_batch(1);
  const auto v = torch::zeros_like(b.x0);
  CHECK(simple_loss(b.x0, b.t, b.eps, constant_model(b.eps, v), sched, {}).item<double>() ==
        doctest::Approx(0.0).epsilon(1e-15));
  CHECK(simple_loss(b.x0, b.t, b.eps, constant_model(b.eps + 1.0, v), sched, {})
            .item<double>() == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("simple loss matches an explicit loop over enabled channels") {
  const auto sched = test_schedule();
  const auto b = random_batch(2, 3, 5);
  auto gen = make_generator(3);
  const auto eps_hat = torch::randn(b.x0.sizes(), gen, kDouble);
  const auto model = constant_model(eps_hat, torch::zeros_like(eps_hat));

  for (const ChannelWeights w : {ChannelWeights{}, ChannelWeights{1.0, 0.0, 0.8},
                                 ChannelWeights{1.0, 0.0, 0.0}}) {
    const bool active[3] = {w.image > 0, w.bone > 0, w.lesion > 0};
    const auto e = b.eps.accessor<double, 4>();
    const auto h = eps_hat.accessor<double, 4>();
    double per_item_sum = 0.0;
    for (int64_t i = 0; i < 3; ++i) {
      double acc = 0.0;
      int count = 0;
      for (int64_t c = 0; c < 3; ++c) {
        if (!active[c]) continue;
        for (int64_t y = 0; y < 5; ++y) {
          for (int64_t x = 0; x < 5; ++x) {
            const double d = e[i][c][y][x] - h[i][c][y][x];
            acc += d * d;
            ++count;
          }
        }
      }
      per_item_sum += acc / count;
    }
    const double expected = per_item_sum / 3.0;
    const double got = simple_loss(b.x0, b.t, b.eps, model, sched, w).item<double>();
    CHECK(std::abs(got - expected) < 1e-10);
  }
}

TEST_CASE("disabled channels are zeroed in the model input and excluded from the loss") {
  const auto sched = test_schedule();
  const auto b = random_batch(4);
  const ChannelWeights image_only{1.0, 0.0, 0.0};
  torch::Tensor seen;
  DenoiseFn spy = [&](const NoisyTriplet& in) {
    seen = in.channels;
    auto eps_hat = b.eps.clone();
    eps_hat.select(1, 1).add_(5.0);
    eps_hat.select(1, 2).add_(-3.0);
    return DenoiserOutput{eps_hat, torch::zeros_like(eps_hat)};
  };
  const double loss = simple_loss(b.x0, b.t, b.eps, spy, sched, image_only).item<double>();
  CHECK(loss == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(seen.select(1, 1).abs().max().item<double>() == 0.0);
  CHECK(seen.select(1, 2).abs().max().item<double>() == 0.0);
  const auto xt = forward_marginal_sample(b.x0, b.t, b.eps, sched);
  CHECK(torch::allclose(seen.select(1, 0), xt.select(1, 0)));
}

TEST_CASE("model input carries the configured channel weights") {
  const auto sched = test_schedule();
  const auto b = random_batch(5);
  torch::Tensor seen;
  DenoiseFn spy = [&](const NoisyTriplet& in) {
    seen = in.channels;
    return DenoiserOutput{b.eps, torch::zeros_like(b.eps)};
  };
  (void)simple_loss(b.x0, b.t, b.eps, spy, sched, ChannelWeights{1.0, 0.8, 0.8});
  const auto xt = forward_marginal_sample(b.x0, b.t, b.eps, sched);
  CHECK(torch::allclose(seen.select(1, 0), xt.select(1, 0), 0.0, 1e-12));
  CHECK(torch::allclose(seen.select(1, 1), 0.8 * xt.select(1, 1), 0.0, 1e-12));
  CHECK(torch::allclose(seen.select(1, 2), 0.8 * xt.select(1, 2), 0.0, 1e-12));
}

TEST_CASE("normal_kl hand case and quadrature oracle") {
  const auto zero = torch::zeros({1}, kDouble);
  const auto one = torch::ones({1}, kDouble);
  CHECK(normal_kl(zero, zero, one, zero).item<double>() == doctest::Approx(0.5).epsilon(1e-14));
  CHECK(normal_kl(one, zero, one, zero).item<double>() == doctest::Approx(0.0));

  const double cases[][4] = {{0.3, 0.5, -0.2, 1.7}, {1.0, 2.0, 0.0, 0.3}, {-0.4, 0.05, -0.1, 0.04}};
  for (const auto& c : cases) {
    const double got = normal_kl(torch::full({1}, c[0], kDouble), torch::full({1}, std::log(c[1]), kDouble),
                                 torch::full({1}, c[2], kDouble), torch::full({1}, std::log(c[3]), kDouble))
                           .item<double>();
    CHECK(std::abs(got - oracle::kl_quadrature(c[0], c[1], c[2], c[3])) < 1e-4);
  }
}

TEST_CASE("discretized likelihood sums to one over the 256 bins") {
  const auto centers = torch::linspace(-1.0, 1.0, 256, kDouble);
  for (const double mean : {-0.7, 0.0, 0.35}) {
    for (const double log_scale : {-4.0, -2.0, -0.5}) {
      const auto ll = discretized_gaussian_log_likelihood(
          centers, torch::full_like(centers, mean), torch::full_like(centers, log_scale));
      CHECK(ll.exp().sum().item<double>() == doctest::Approx(1.0).epsilon(1e-9));
    }
  }
  // Interior bin against the exact Gaussian CDF.
  const double x = 0.2, m = 0.18, s = 0.03;
  auto cdf = [](double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); };
  const double exact = std::log(cdf((x - m + 1.0 / 255.0) / s) - cdf((x - m - 1.0 / 255.0) / s));
  const double got = discretized_gaussian_log_likelihood(torch::full({1}, x, kDouble),
                                                         torch::full({1}, m, kDouble),
                                                         torch::full({1}, std::log(s), kDouble))
                         .item<double>();
  CHECK(std::abs(got - exact) < 5e-3);
}

TEST_CASE("vlb term vanishes when the model matches the forward posterior") {
  const auto sched = test_schedule();
  const auto b = random_batch(6, 4, 6, 2);
  const auto model = constant_model(b.eps, torch::zeros_like(b.eps));
  CHECK(std::abs(vlb_term(b.x0, b.t, b.eps, model, sched, {}).item<double>()) < 1e-10);

  // A wrong mean gives a strictly positive KL.
  const auto off = constant_model(b.eps + 0.5, torch::zeros_like(b.eps));
  CHECK(vlb_term(b.x0, b.t, b.eps, off, sched, {}).item<double>() > 1e-3);
}

TEST_CASE("vlb term at t = 1 is the decoder negative log-likelihood") {
  const auto sched = test_schedule();
  auto b = random_batch(7, 2, 4);
  b.t = torch::ones({2}, torch::kLong);
  auto gen = make_generator(8);
  const auto v = torch::rand(b.x0.sizes(), gen, kDouble);
  const auto model = constant_model(b.eps, v);
  const auto xt = forward_marginal_sample(b.x0, b.t, b.eps, sched);
  const double beta1 = sched.beta(1);
  const auto mean = (xt - beta1 / std::sqrt(1.0 - sched.alpha_bar(1)) * b.eps) / std::sqrt(1.0 - beta1);
  const auto logvar = v * std::log(beta1) + (1.0 - v) * sched.posterior_log_variance_clipped(1);
  const double expected =
      (-discretized_gaussian_log_likelihood(b.x0, mean, 0.5 * logvar)).mean().item<double>();
  CHECK(vlb_term(b.x0, b.t, b.eps, model, sched, {}).item<double>() ==
        doctest::Approx(expected).epsilon(1e-10));
}

TEST_CASE("hybrid loss composition") {
  const auto sched = test_schedule();
  const auto b = random_batch(9);
  auto gen = make_generator(10);
  const auto eps_hat = torch::randn(b.x0.sizes(), gen, kDouble);
  const auto v = torch::rand(b.x0.sizes(), gen, kDouble);
  const auto model = constant_model(eps_hat, v);

  const double simple = simple_loss(b.x0, b.t, b.eps, model, sched, {}).item<double>();
  const double vlb = vlb_term(b.x0, b.t, b.eps, model, sched, {}).item<double>();
  const auto zero_lambda = hybrid_loss(b.x0, b.t, b.eps, model, sched, {}, 0.0);
  CHECK(zero_lambda.total.item<double>() == simple);
  for (const double lambda : {0.001, 1.0}) {
    const auto h = hybrid_loss(b.x0, b.t, b.eps, model, sched, {}, lambda);
    CHECK(h.total.item<double>() == doctest::Approx(simple + lambda * vlb).epsilon(1e-12));
  }

  // Perfect eps and a unit-offset mean half the time: 0.5 * (0 + 1) hand case.
  auto half = b.eps.clone();
  half.narrow(0, 0, 2).add_(1.0);
  const auto hm = constant_model(half, v);
  CHECK(hybrid_loss(b.x0, b.t, b.eps, hm, sched, {}, 0.0).total.item<double>() ==
        doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("vlb gradient reaches only the variance head") {
  const auto sched = test_schedule();
  const auto b = random_batch(11, 2, 4, 2);
  auto eps_hat = (b.eps + 0.3).requires_grad_();
  auto v = torch::full(b.x0.sizes(), 0.4, kDouble).requires_grad_();
  const auto model = constant_model(eps_hat, v);
  vlb_term(b.x0, b.t, b.eps, model, sched, {}).backward();
  CHECK(!eps_hat.grad().defined());
  REQUIRE(v.grad().defined());
  CHECK(v.grad().abs().sum().item<double>() > 0.0);
}

TEST_CASE("loss input validation") {
  const auto sched = test_schedule();
  const auto b = random_batch(12);
  const auto model = constant_model(b.eps, torch::zeros_like(b.eps));
  CHECK_THROWS_AS(simple_loss(b.x0, b.t.narrow(0, 0, 2), b.eps, model, sched, {}), ConfigError);
  CHECK_THROWS_AS(simple_loss(b.x0.narrow(1, 0, 2), b.t, b.eps, model, sched, {}), ConfigError);
  const auto nan_model = constant_model(b.eps * std::nan(""), torch::zeros_like(b.eps));
  CHECK_THROWS_AS(simple_loss(b.x0, b.t, b.eps, nan_model, sched, {}), NumericError);
}

TEST_CASE("training config validation") {
  auto cfg = tiny_train(50);
  cfg.iterations = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = tiny_train(50);
  cfg.learning_rate = -1.0;
  cfg.batch_size = 0;
  try {
    cfg.validate();
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("learning_rate") != std::string::npos);
    CHECK(msg.find("batch_size") != std::string::npos);
  }
  cfg = tiny_train(50);
  CHECK(nlohmann::json(cfg).get<TrainConfig>().hash() == cfg.hash());
  auto other = cfg;
  other.lambda_vlb = 0.01;
  CHECK(other.hash() != cfg.hash());

  const auto data = generate_corpus(3, 2, 16, 1);
  CHECK_THROWS_AS(train_denoiser(data, cfg, tiny_net(40)), ConfigError);
  cfg.iterations = 0;
  CHECK_THROWS_AS(train_denoiser(data, cfg, tiny_net(50)), ConfigError);
}

TEST_CASE("denoiser training is reproducible and reports every iteration") {
  const auto data = generate_corpus(4, 2, 16, 5);
  const auto cfg = tiny_train(50);
  int checkpoints = 0;
  TrainHooks hooks;
  hooks.on_checkpoint = [&](int, torch::nn::Module&) { ++checkpoints; };
  auto a = train_denoiser(data, cfg, tiny_net(50), hooks);
  auto b = train_denoiser(data, cfg, tiny_net(50));
  REQUIRE(a.history.size() == 4);
  CHECK(checkpoints == 2);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(a.history[i].iteration == static_cast<int>(i) + 1);
    CHECK(a.history[i].total == b.history[i].total);
    CHECK(std::isfinite(a.history[i].vlb));
  }
  const auto pa = a.model->parameters();
  const auto pb = b.model->parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(torch::equal(pa[i], pb[i]));

  auto c_cfg = cfg;
  c_cfg.seed = 100;
  auto c = train_denoiser(data, c_cfg, tiny_net(50));
  CHECK(c.history[0].total != a.history[0].total);

  test::ScratchDir dir("training-csv");
  std::filesystem::create_directories(dir.path());
  write_loss_csv(dir.path() / "loss.csv", a.history);
  std::ifstream in(dir.path() / "loss.csv");
  std::string header;
  std::getline(in, header);
  CHECK(header == "iteration,simple,vlb,total");
  CHECK(mean_simple_loss(a.history, 0, 4) > 0.0);
  CHECK_THROWS_AS(mean_simple_loss(a.history, 4, 4), ConfigError);
}

TEST_CASE("moving average matches an independent recurrence") {
  const auto data = generate_corpus(4, 2, 16, 5);
  auto cfg = tiny_train(50);
  cfg.ema_decay = 0.9;
  // Double-precision recurrence over the raw iterates, seeded with the
  // initial parameters.
  std::vector<torch::Tensor> oracle;
  TrainHooks hooks;
  hooks.on_step = [&](int it, torch::nn::Module& m) {
    auto params = m.parameters();
    const double d = std::min(0.9, (1.0 + it) / (10.0 + it));
    for (std::size_t i = 0; i < params.size(); ++i) {
      oracle[i] = d * oracle[i] + (1.0 - d) * params[i].detach().to(torch::kDouble);
    }
  };
  torch::manual_seed(derive_seed(cfg.seed, "denoiser-init"));
  Denoiser init(tiny_net(50));
  for (const auto& p : init->parameters()) oracle.push_back(p.detach().to(torch::kDouble).clone());
  const auto averaged = train_denoiser(data, cfg, tiny_net(50), hooks);
  auto raw_cfg = cfg;
  raw_cfg.ema_decay = 0.0;
  const auto raw = train_denoiser(data, raw_cfg, tiny_net(50));

  const auto pa = averaged.model->parameters();
  const auto pr = raw.model->parameters();
  double worst = 0.0;
  bool differs = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    worst = std::max(worst, (pa[i].to(torch::kDouble) - oracle[i]).abs().max().item<double>());
    differs = differs || !torch::equal(pa[i], pr[i]);
  }
  CHECK(worst < 1e-5);
  CHECK(differs);
  CHECK(averaged.history.size() == raw.history.size());
  for (std::size_t i = 0; i < raw.history.size(); ++i) {
    CHECK(averaged.history[i].total == raw.history[i].total);
  }
  cfg.ema_decay = 1.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("classifier training rejects a single-class set and is reproducible") {
  auto cfg = tiny_train(50);
  CHECK_THROWS_AS(train_classifier(generate_corpus(5, 0, 16, 2), cfg, tiny_net(50)),
                  ConfigError);
  const auto data = generate_corpus(3, 3, 16, 3);
  auto a = train_classifier(data, cfg, tiny_net(50));
  auto b = train_classifier(data, cfg, tiny_net(50));
  REQUIRE(a.history.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(a.history[i].loss == b.history[i].loss);
    CHECK(a.history[i].accuracy >= 0.0);
    CHECK(a.history[i].accuracy <= 1.0);
  }
  const auto sched = cfg.schedule.build();
  const double acc = classifier_accuracy_at(a.model, data, 5, sched, cfg.weights, 1);
  CHECK(acc == classifier_accuracy_at(b.model, data, 5, sched, cfg.weights, 1));
}

}
