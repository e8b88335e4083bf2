#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <sys/wait.h>

#include "CLI11.hpp"
#include "json.hpp"
#include "maskdiff/diffusion.hpp"
#include "maskdiff/evaluation.hpp"
#include "maskdiff/models.hpp"
#include "maskdiff/pipeline.hpp"
#include "maskdiff/rng.hpp"
#include "maskdiff/sampling.hpp"
#include "maskdiff/schedule.hpp"
#include "oracles.hpp"

using namespace maskdiff;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

const auto kDouble = torch::TensorOptions().dtype(torch::kDouble);

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int precision = 4) {
  std::ostringstream ss;
  ss << std::setprecision(precision) << v;
  return ss.str();
}

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

NetConfig tiny_net() {
  NetConfig c;
  c.image_size = 16;
  c.base_channels = 8;
  c.channel_mult = {1, 2};
  c.groups = 4;
  c.max_timestep = 50;
  return c;
}

Verdict schedule_math() {
  const auto start = std::chrono::steady_clock::now();
  const auto s = build_schedule(ScheduleKind::linear, 1000, 1e-4, 0.02);
  const double build_s = seconds_since(start);
  const auto ref = oracle::linear_alpha_bar(1000, oracle::Real("1e-4"), oracle::Real("0.02"));
  double worst = 0.0;
  for (int t = 1; t <= 1000; ++t) {
    const double r = static_cast<double>(ref[static_cast<std::size_t>(t)]);
    worst = std::max(worst, std::abs(s.alpha_bar(t) - r) / r);
  }
  return {worst < 1e-10 && build_s < 1.0,
          "max rel err " + fmt(worst) + ", build " + fmt(build_s) + " s"};
}

Verdict forward_consistency() {
  const auto start = std::chrono::steady_clock::now();
  const int T = 1000;
  const int64_t n = 10000;
  const auto s = build_schedule(ScheduleKind::linear, T, 1e-4, 0.02);
  const auto x0 = torch::tensor({-0.8, 0.3, 0.9, -0.1}, kDouble).view({1, 1, 2, 2});
  auto gen = make_generator(derive_seed(2024, "forward-chains"));
  auto x = x0.expand({n, 1, 2, 2}).clone();
  int worst_checked = 0;
  double worst_z = 0.0;
  for (int t = 1; t <= T; ++t) {
    x = forward_step_sample(x, t, torch::randn(x.sizes(), gen, kDouble), s);
    if (t != 1 && t != T / 2 && t != T) continue;
    const double ab = s.alpha_bar(t);
    const auto mean = x.mean(0);
    const auto var = x.var(0);
    const double sd = std::sqrt(1.0 - ab);
    const double se_mean = sd / std::sqrt(static_cast<double>(n));
    const double se_var = (1.0 - ab) * std::sqrt(2.0 / static_cast<double>(n - 1));
    const auto z_mean = ((mean - std::sqrt(ab) * x0[0]).abs() / se_mean).max().item<double>();
    const auto z_var = ((var - (1.0 - ab)).abs() / se_var).max().item<double>();
    worst_z = std::max({worst_z, z_mean, z_var});
    ++worst_checked;
  }
  const double elapsed = seconds_since(start);
  return {worst_checked == 3 && worst_z < 3.0 && elapsed < 30.0,
          "max |z| " + fmt(worst_z) + " over mean and variance at t=1,500,1000; " +
              fmt(elapsed) + " s"};
}

Verdict posterior_identity() {
  const auto s = build_schedule(ScheduleKind::linear, 1000, 1e-4, 0.02);
  auto gen = make_generator(derive_seed(2024, "posterior"));
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const int t = 2 + static_cast<int>(torch::randint(999, {1}, gen).item<int64_t>());
    const auto x0 = torch::randn({1, 3, 4, 4}, gen, kDouble);
    const auto eps = torch::randn({1, 3, 4, 4}, gen, kDouble);
    const auto xt = forward_marginal_sample(x0, t, eps, s);
    const auto diff = posterior_moments(x0, xt, t, s).mean - eps_parameterized_mean(xt, t, eps, s);
    worst = std::max(worst, diff.abs().max().item<double>());
  }
  return {worst < 1e-10, "max abs diff " + fmt(worst) + " over 1000 instances"};
}

Verdict classifier_gradient() {
  torch::manual_seed(derive_seed(2024, "gradient-net"));
  GuidanceClassifier clf(tiny_net());
  clf->to(torch::kDouble);
  clf->eval();
  auto gen = make_generator(derive_seed(2024, "gradient-inputs"));
  double worst = 0.0;
  int checked = 0;
  for (int input = 0; input < 10; ++input) {
    const NoisyTriplet in{torch::randn({1, 3, 16, 16}, gen, kDouble),
                          torch::randint(1, 51, {1}, gen, torch::kLong)};
    const int64_t y = input % 2;
    const auto grad = classifier_input_gradient(clf, in, torch::tensor(y));
    torch::NoGradGuard ng;
    for (int k = 0; k < 10; ++k) {
      const auto flat = torch::randint(3 * 16 * 16, {1}, gen).item<int64_t>();
      const double h = 1e-5;
      auto plus = in.channels.clone();
      auto minus = in.channels.clone();
      plus.view({-1})[flat] += h;
      minus.view({-1})[flat] -= h;
      const double fd = (clf->forward({plus, in.t})[0][y].item<double>() -
                         clf->forward({minus, in.t})[0][y].item<double>()) /
                        (2 * h);
      const double an = grad.view({-1})[flat].item<double>();
      worst = std::max(worst, std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-6}));
      ++checked;
    }
  }
  return {worst < 1e-3, "max rel err " + fmt(worst) + " over " + std::to_string(checked) + " pixels"};
}

SamplerModels tiny_models() {
  torch::manual_seed(derive_seed(2024, "sampler-nets"));
  return {Denoiser(tiny_net()), GuidanceClassifier(tiny_net())};
}

bool same_outputs(const std::vector<SampleResult>& a, const std::vector<SampleResult>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!(a[i].image == b[i].image) || !(a[i].bone_mask == b[i].bone_mask) ||
        !(a[i].lesion_mask == b[i].lesion_mask)) {
      return false;
    }
  }
  return true;
}

Verdict guidance_neutrality() {
  auto guided = tiny_models();
  SamplerModels unguided{guided.denoiser, nullptr};
  const auto sched = build_schedule(ScheduleKind::linear, 50, 1e-3, 0.05);
  const auto inputs = generate_corpus(4, 0, 16, 5).records;
  int equal = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    GuidanceSpec spec;
    spec.start_step = 40;
    spec.ddim_steps = 8;
    spec.seed = seed;
    equal += same_outputs(translate(inputs, guided, sched, spec),
                          translate(inputs, unguided, sched, spec));
  }
  return {equal == 20, std::to_string(equal) + "/20 seeded runs bitwise equal"};
}

Verdict ddim_determinism() {
  auto models = tiny_models();
  const auto sched = build_schedule(ScheduleKind::linear, 50, 1e-3, 0.05);
  const auto inputs = generate_corpus(4, 0, 16, 6).records;
  GuidanceSpec spec;
  spec.start_step = 40;
  spec.ddim_steps = 10;
  spec.gradient_scale = 3.0;
  spec.eta = 0.0;
  spec.seed = 17;
  const bool translated = same_outputs(translate(inputs, models, sched, spec),
                                       translate(inputs, models, sched, spec));
  spec.start_step = 50;
  const bool generated = same_outputs(generate_unconditional(models, sched, spec, 4, 16),
                                      generate_unconditional(models, sched, spec, 4, 16));
  return {translated && generated, std::string("translation ") + (translated ? "equal" : "differs") +
                                       ", full-chain sampling " + (generated ? "equal" : "differs")};
}

Verdict oracle_recovery() {
  double worst = 0.0;
  for (auto kind : {ScheduleKind::linear, ScheduleKind::cosine}) {
    const auto sched = ScheduleConfig{kind, 1000}.build();
    auto gen = make_generator(derive_seed(2024, "oracle-recovery"));
    const auto x0 = torch::rand({2, 3, 8, 8}, gen, kDouble) * 2 - 1;
    const auto eps = torch::randn({2, 3, 8, 8}, gen, kDouble);
    for (int t = 1; t <= 1000; ++t) {
      const auto xt = forward_marginal_sample(x0, t, eps, sched);
      worst = std::max(worst, (ddim_step(xt, eps, t, 0, 0.0, sched) - x0).abs().max().item<double>());
    }
  }
  return {worst < 1e-8, "max abs err " + fmt(worst) + " over t=1..1000, linear and cosine"};
}

Verdict metric_oracles() {
  const ConfusionCounts c{7, 4, 41, 1};
  const auto m = classification_metrics(c);
  auto round1 = [](double v) { return std::round(v * 1000.0) / 10.0; };
  const bool triple = round1(m.sensitivity) == 87.5 && std::abs(round1(m.specificity) - 91.1) < 1e-9 &&
                      std::abs(round1(m.accuracy) - 90.6) < 1e-9;
  Mask empty(4, 4), a(4, 4), b(4, 4);
  a.at(0, 0) = a.at(0, 1) = 1;
  b.at(0, 1) = b.at(1, 1) = 1;
  const bool dice_ok = dice(empty, empty) == 1.0 && dice(a, a) == 1.0 && dice(a, empty) == 0.0 &&
                       dice(a, b) == 0.5;
  Eigen::MatrixXd x(4, 2);
  x << 0, 1, 2, 3, 4, 5, 6, 8;
  Eigen::MatrixXd shifted = x.array() + 3.0;
  const Eigen::VectorXd m1 = Eigen::VectorXd::Constant(1, 0.0), m2 = Eigen::VectorXd::Constant(1, 2.0);
  const Eigen::MatrixXd c1 = Eigen::MatrixXd::Constant(1, 1, 1.0), c2 = Eigen::MatrixXd::Constant(1, 1, 4.0);
  const double analytic = frechet_distance(m1, c1, m2, c2);  // 4 + 1 + 4 - 2 * 2
  const bool fid_ok = frechet_distance(x, x, 0.0) < 1e-9 && std::abs(analytic - 5.0) < 1e-12 &&
                      std::abs(frechet_distance(x, shifted, 0.0) - 18.0) < 1e-9;
  return {triple && dice_ok && fid_ok,
          "sens " + fmt(100 * m.sensitivity) + "%, spec " + fmt(100 * m.specificity) + "%, acc " +
              fmt(100 * m.accuracy) + "%; dice " + (dice_ok ? "ok" : "FAIL") + "; frechet " +
              (fid_ok ? "ok" : "FAIL")};
}

int run_command(const std::string& cmd) {
  std::cerr << "[acceptance] $ " << cmd << std::endl;
  const int rc = std::system((cmd + " 1>&2").c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw std::runtime_error("missing " + p.string());
  return json::parse(in);
}

struct FullRun {
  MetricsReport report;
  std::string error;
};

FullRun full_pipeline(const std::string& cli, const fs::path& work, bool reuse) {
  const auto dir = work / "full";
  FullRun out;
  if (!(reuse && fs::exists(dir / "report" / "metrics.json"))) {
    const int rc = run_command(cli + " repro-all --out " + dir.string() + " --force");
    if (rc != 0) {
      out.error = "repro-all exited with " + std::to_string(rc);
      return out;
    }
  }
  out.report = MetricsReport::from_json(read_json(dir / "report" / "metrics.json"));
  return out;
}

double fid_of(const MetricsReport& r, const std::string& name) {
  for (const auto& row : r.fid) {
    if (row.name == name) return row.value;
  }
  throw std::runtime_error("no FID row " + name);
}

Verdict training_health(const FullRun& run) {
  if (!run.error.empty()) return {false, run.error};
  const auto& s = run.report.summary;
  const double ratio = s.at("denoiser_loss_ratio").get<double>();
  const double minutes = run.report.timing.value("denoiser_training", 0.0) / 60.0;
  return {ratio < 0.5 && minutes <= 20.0,
          "final/initial simple loss " + fmt(s.at("denoiser_loss_final").get<double>()) + "/" +
              fmt(s.at("denoiser_loss_initial").get<double>()) + " = " + fmt(ratio) + ", " +
              fmt(minutes, 3) + " min"};
}

Verdict generative_quality(const FullRun& run) {
  if (!run.error.empty()) return {false, run.error};
  const double samples = fid_of(run.report, "unconditional_vs_real");
  const double noise = fid_of(run.report, "noise_vs_real");
  return {samples < 0.2 * noise, "FID samples " + fmt(samples) + " vs noise " + fmt(noise) +
                                     " (ratio " + fmt(samples / noise) + ")"};
}

Verdict guidance_efficacy(const FullRun& run) {
  if (!run.error.empty()) return {false, run.error};
  const auto& g = run.report.summary.at("guidance_test");
  const double rate = g.at("rate").get<double>();
  return {rate >= 0.8, std::to_string(g.at("both").get<int>()) + "/" +
                           std::to_string(g.at("total").get<int>()) + " CML with lesion (" +
                           std::to_string(g.at("classified_cml").get<int>()) + " classified CML, " +
                           std::to_string(g.at("non_empty_lesion").get<int>()) +
                           " non-empty) at g=" + fmt(g.at("gradient_scale").get<double>())};
}

template <typename Row, typename Value>
Verdict per_seed_trend(const std::vector<Row>& rows, const std::string& base_name,
                       const std::string& aug_name, Value value, const std::string& what) {
  std::map<std::uint64_t, double> base, aug;
  for (const auto& r : rows) {
    if (r.condition == base_name) base[r.seed] = value(r);
    if (r.condition == aug_name) aug[r.seed] = value(r);
  }
  int wins = 0;
  double mb = 0.0, ma = 0.0;
  for (const auto& [seed, v] : base) {
    ma += aug.at(seed);
    mb += v;
    wins += aug.at(seed) >= v;
  }
  const auto n = static_cast<int>(base.size());
  mb /= std::max(n, 1);
  ma /= std::max(n, 1);
  return {n == 5 && wins >= 4, what + " " + aug_name + " >= " + base_name + " in " +
                                   std::to_string(wins) + "/" + std::to_string(n) + " seeds (mean " +
                                   fmt(ma) + " vs " + fmt(mb) + ")"};
}

Verdict segmentation_value(const FullRun& run) {
  if (!run.error.empty()) return {false, run.error};
  return per_seed_trend(run.report.segmentation, "real", "real+augmented",
                        [](const SegmentationRow& r) { return r.dice.mean; }, "Dice");
}

Verdict classification_value(const FullRun& run) {
  if (!run.error.empty()) return {false, run.error};
  return per_seed_trend(run.report.classification, "baseline", "augmented",
                        [](const ClassificationRow& r) { return accuracy(r.counts); }, "accuracy");
}

Verdict end_to_end_reproducibility(const std::string& cli, const fs::path& work) {
  const auto seed_file = work / "pinned_seed.json";
  std::ofstream(seed_file) << json{{"seed", 20240601}}.dump() << "\n";
  std::vector<json> reports;
  for (const char* name : {"repro_a", "repro_b"}) {
    const auto dir = work / name;
    const int rc = run_command(cli + " -q -c " + seed_file.string() + " repro-all --smoke --out " +
                               dir.string() + " --force");
    if (rc != 0) return {false, "repro-all exited with " + std::to_string(rc)};
    reports.push_back(MetricsReport::from_json(read_json(dir / "report" / "metrics.json")).comparable_json());
  }
  const bool same = reports[0] == reports[1];
  return {same, std::string("metrics JSON (timing excluded) ") + (same ? "identical" : "differs") +
                    " across two executions"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance checks; prints one PASS/FAIL line per criterion"};
  std::string cli;
  std::string work = "acceptance_work";
  bool reuse = false;
  bool skip_full = false;
  app.add_option("--cli", cli, "Path to the maskdiff executable")->required();
  app.add_option("--work", work, "Scratch directory for pipeline outputs");
  app.add_flag("--reuse", reuse, "Reuse an existing full-pipeline report in the work directory");
  app.add_flag("--skip-full", skip_full, "Skip the desk-scale pipeline (criteria 8-12 fail)");
  CLI11_PARSE(app, argc, argv);
  fs::create_directories(work);
  enable_deterministic_mode();

  std::vector<std::pair<std::string, std::function<Verdict()>>> criteria;
  FullRun full;
  bool full_done = false;
  auto full_run = [&]() -> const FullRun& {
    if (!full_done) {
      if (skip_full) {
        full.error = "skipped";
      } else {
        try {
          full = full_pipeline(cli, work, reuse);
        } catch (const std::exception& e) {
          full.error = e.what();
        }
      }
      full_done = true;
    }
    return full;
  };
  criteria.emplace_back("schedule math", schedule_math);
  criteria.emplace_back("forward-process consistency", forward_consistency);
  criteria.emplace_back("posterior identity", posterior_identity);
  criteria.emplace_back("classifier gradient vs finite differences", classifier_gradient);
  criteria.emplace_back("guidance neutrality", guidance_neutrality);
  criteria.emplace_back("DDIM determinism", ddim_determinism);
  criteria.emplace_back("oracle-denoiser recovery", oracle_recovery);
  criteria.emplace_back("desk-scale training health", [&] { return training_health(full_run()); });
  criteria.emplace_back("generative quality", [&] { return generative_quality(full_run()); });
  criteria.emplace_back("guidance efficacy", [&] { return guidance_efficacy(full_run()); });
  criteria.emplace_back("augmentation value, segmentation", [&] { return segmentation_value(full_run()); });
  criteria.emplace_back("augmentation value, classification",
                        [&] { return classification_value(full_run()); });
  criteria.emplace_back("metric oracles", metric_oracles);
  criteria.emplace_back("end-to-end reproducibility", [&] { return end_to_end_reproducibility(cli, work); });

  int failed = 0;
  std::vector<std::string> lines;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Verdict v;
    const auto start = std::chrono::steady_clock::now();
    try {
      v = criteria[i].second();
    } catch (const std::exception& e) {
      v = {false, std::string("error: ") + e.what()};
    }
    std::ostringstream line;
    line << (v.pass ? "PASS" : "FAIL") << "  " << std::setw(2) << i + 1 << ". " << criteria[i].first
         << ": " << v.detail << " [" << fmt(seconds_since(start), 3) << " s]";
    std::cout << line.str() << std::endl;
    lines.push_back(line.str());
    failed += !v.pass;
  }
  std::cout << "\n" << criteria.size() - failed << "/" << criteria.size() << " criteria passed\n";
  std::ofstream(fs::path(work) / "acceptance_summary.txt") << [&] {
    std::string s;
    for (const auto& l : lines) s += l + "\n";
    return s;
  }();
  return failed == 0 ? 0 : 1;
}
