#include "doctest.h"
#include "scratch_dir.hpp"

#include <fstream>

#include "maskdiff/checkpoint.hpp"
#include "maskdiff/error.hpp"
#include "maskdiff/models.hpp"
#include "maskdiff/rng.hpp"

using namespace maskdiff;

namespace {

NetConfig small_config() {
  NetConfig c;
  c.image_size = 16;
  c.base_channels = 8;
  c.channel_mult = {1, 2};
  c.groups = 4;
  c.max_timestep = 50;
  return c;
}

NoisyTriplet random_input(at::Generator& gen, int64_t batch, int64_t size,
                          torch::ScalarType dtype = torch::kFloat) {
  return {torch::randn({batch, 3, size, size}, gen, torch::TensorOptions().dtype(dtype)),
          torch::randint(1, 51, {batch}, gen, torch::kLong)};
}

}  // namespace

TEST_SUITE("models") {

TEST_CASE("untrained denoiser output is finite and shape-correct") {
  torch::manual_seed(0);
  Denoiser net(small_config());
  net->eval();
  auto gen = make_generator(1);
  const auto in = random_input(gen, 3, 16);
  torch::NoGradGuard ng;
  const auto out = net->forward(in);
  CHECK(out.eps_hat.sizes() == in.channels.sizes());
  CHECK(out.v.sizes() == in.channels.sizes());
  CHECK(torch::isfinite(out.eps_hat).all().item<bool>());
  CHECK(out.v.min().item<float>() >= 0.0f);
  CHECK(out.v.max().item<float>() <= 1.0f);

  const auto again = net->forward(in);
  CHECK(torch::equal(out.eps_hat, again.eps_hat));
  CHECK(torch::equal(out.v, again.v));
}

TEST_CASE("denoiser responds to a single-pixel perturbation") {
  torch::manual_seed(3);
  Denoiser net(small_config());
  net->eval();
  auto gen = make_generator(2);
  auto in = random_input(gen, 1, 16);
  torch::NoGradGuard ng;
  const auto base = net->forward(in).eps_hat;
  auto bumped = in.channels.clone();
  bumped[0][1][7][5] += 0.5;
  const auto moved = net->forward({bumped, in.t}).eps_hat;
  CHECK((moved - base).abs().max().item<float>() > 0.0f);
}

TEST_CASE("desk-scale denoiser size") {
  Denoiser net(NetConfig{});
  int64_t params = 0;
  for (const auto& p : net->parameters()) params += p.numel();
  MESSAGE("denoiser parameters: " << params);
  CHECK(params > 800000);
  CHECK(params < 1200000);
}

TEST_CASE("input validation") {
  Denoiser net(small_config());
  auto gen = make_generator(4);
  auto in = random_input(gen, 2, 16);
  CHECK_THROWS_AS(net->forward({in.channels.narrow(1, 0, 2), in.t}), ConfigError);
  CHECK_THROWS_AS(net->forward({in.channels, torch::tensor({0, 3}, torch::kLong)}), ConfigError);
  CHECK_THROWS_AS(net->forward({in.channels, torch::tensor({1, 51}, torch::kLong)}), ConfigError);
  CHECK_THROWS_AS(net->forward({in.channels, torch::tensor({1}, torch::kLong)}), ConfigError);
  NetConfig bad = small_config();
  bad.image_size = 15;
  CHECK_THROWS_AS(Denoiser{bad}, ConfigError);
}

TEST_CASE("classifier log-probabilities normalize") {
  torch::manual_seed(5);
  GuidanceClassifier clf(small_config());
  clf->eval();
  auto gen = make_generator(6);
  torch::NoGradGuard ng;
  const auto lp = clf->forward(random_input(gen, 8, 16));
  CHECK(lp.sizes() == torch::IntArrayRef({8, 2}));
  CHECK((lp.exp().sum(1) - 1.0).abs().max().item<float>() < 1e-6f);
}

TEST_CASE("zero head yields zero gradient") {
  torch::manual_seed(7);
  GuidanceClassifier clf(small_config());
  {
    torch::NoGradGuard ng;
    for (auto& p : clf->named_parameters()) {
      if (p.key().rfind("head.", 0) == 0) p.value().zero_();
    }
  }
  auto gen = make_generator(8);
  const auto g = classifier_input_gradient(clf, random_input(gen, 2, 16), torch::tensor(1));
  CHECK(g.abs().max().item<float>() == 0.0f);
}

TEST_CASE("classifier gradient matches central differences") {
  torch::manual_seed(9);
  GuidanceClassifier clf(small_config());
  clf->to(torch::kDouble);
  clf->eval();
  auto gen = make_generator(10);
  double worst = 0.0;
  for (int trial = 0; trial < 3; ++trial) {
    const auto in = random_input(gen, 1, 16, torch::kDouble);
    const int64_t y = trial % 2;
    const auto grad = classifier_input_gradient(clf, in, torch::tensor(y));
    torch::NoGradGuard ng;
    for (int k = 0; k < 10; ++k) {
      const auto flat = torch::randint(3 * 16 * 16, {1}, gen).item<int64_t>();
      const double h = 1e-5;
      auto plus = in.channels.clone();
      auto minus = in.channels.clone();
      plus.view({-1})[flat] += h;
      minus.view({-1})[flat] -= h;
      const double fp = clf->forward({plus, in.t})[0][y].item<double>();
      const double fm = clf->forward({minus, in.t})[0][y].item<double>();
      const double fd = (fp - fm) / (2 * h);
      const double an = grad.view({-1})[flat].item<double>();
      worst = std::max(worst, std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-6}));
    }
  }
  CHECK(worst < 1e-3);
}

TEST_CASE("a small step along the gradient raises the target probability") {
  torch::manual_seed(11);
  GuidanceClassifier clf(small_config());
  clf->to(torch::kDouble);
  clf->eval();
  auto gen = make_generator(12);
  int increased = 0;
  for (int trial = 0; trial < 10; ++trial) {
    const auto in = random_input(gen, 1, 16, torch::kDouble);
    const int64_t y = trial % 2;
    const auto grad = classifier_input_gradient(clf, in, torch::tensor(y));
    torch::NoGradGuard ng;
    const double before = clf->forward(in)[0][y].item<double>();
    const double after = clf->forward({in.channels + 1e-3 * grad, in.t})[0][y].item<double>();
    increased += after > before;
  }
  CHECK(increased == 10);
}

TEST_CASE("checkpoint round trip is bitwise") {
  test::ScratchDir dir("ckpt");
  torch::manual_seed(13);
  Denoiser net(small_config());
  net->eval();
  CheckpointMeta meta;
  meta.kind = "denoiser";
  meta.architecture = net->config();
  meta.schedule.steps = 50;
  meta.seed = 77;
  save_checkpoint(dir.path() / "den", *net, meta);

  CheckpointMeta back_meta;
  auto back = load_denoiser(dir.path() / "den", &back_meta);
  CHECK(back_meta.seed == 77);
  CHECK(back_meta.schedule.steps == 50);
  CHECK(back_meta.weights == ChannelWeights{});
  auto gen = make_generator(14);
  const auto in = random_input(gen, 2, 16);
  torch::NoGradGuard ng;
  CHECK(torch::equal(net->forward(in).eps_hat, back->forward(in).eps_hat));

  CHECK_THROWS_AS(load_guidance_classifier(dir.path() / "den"), ConfigError);
  {
    std::ofstream out(dir.path() / "den.pt", std::ios::binary | std::ios::app);
    out << "x";
  }
  CHECK_THROWS_AS(load_denoiser(dir.path() / "den"), IoError);
}

TEST_CASE("channel weights validation") {
  CHECK_NOTHROW(ChannelWeights{}.validate());
  CHECK_NOTHROW((ChannelWeights{1.0, 0.0, 0.0}.validate()));
  CHECK_THROWS_AS((ChannelWeights{0.0, 0.8, 0.8}.validate()), ConfigError);
  CHECK_THROWS_AS((ChannelWeights{1.0, 1.5, 0.8}.validate()), ConfigError);
  CHECK(ChannelWeights{1.0, 0.0, 0.8}.active_count() == 2);
}

}
