#include "maskdiff/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>

#include "maskdiff/checkpoint.hpp"
#include "maskdiff/dataset.hpp"
#include "maskdiff/error.hpp"
#include "maskdiff/rng.hpp"

namespace maskdiff {

using nlohmann::json;
namespace fs = std::filesystem;

void to_json(json& j, const TrainerSettings& s) {
  j = json{{"iterations", s.iterations},     {"batch_size", s.batch_size},
           {"learning_rate", s.learning_rate}, {"lambda_vlb", s.lambda_vlb},
           {"checkpoint_every", s.checkpoint_every}, {"grad_clip", s.grad_clip},
           {"ema_decay", s.ema_decay}};
}

void from_json(const json& j, TrainerSettings& s) {
  s.iterations = j.at("iterations").get<int>();
  s.batch_size = j.at("batch_size").get<int>();
  s.learning_rate = j.at("learning_rate").get<double>();
  s.lambda_vlb = j.at("lambda_vlb").get<double>();
  s.checkpoint_every = j.at("checkpoint_every").get<int>();
  s.grad_clip = j.at("grad_clip").get<double>();
  s.ema_decay = j.at("ema_decay").get<double>();
}

void to_json(json& j, const DatasetCounts& c) { j = json{{"normal", c.normal}, {"cml", c.cml}}; }

void from_json(const json& j, DatasetCounts& c) {
  c.normal = j.at("normal").get<int>();
  c.cml = j.at("cml").get<int>();
}

void to_json(json& j, const PipelineConfig& c) {
  j = json{
      {"seed", c.seed},
      {"resolution", c.resolution},
      {"schedule",
       {{"kind", to_string(c.schedule.kind)},
        {"steps", c.schedule.steps},
        {"beta_start", c.schedule.beta_start},
        {"beta_end", c.schedule.beta_end}}},
      {"weights", c.weights},
      {"net",
       {{"base_channels", c.net.base_channels},
        {"channel_mult", c.net.channel_mult},
        {"groups", c.net.groups}}},
      {"corpus", c.corpus},
      {"test", c.test},
      {"scarce", c.scarce},
      {"reference", c.reference},
      {"validation_normals", c.validation_normals},
      {"unconditional_samples", c.unconditional_samples},
      {"denoiser", c.denoiser},
      {"classifier", c.classifier},
      {"start_fraction", c.start_fraction},
      {"ddim_steps", c.ddim_steps},
      {"eta", c.eta},
      {"gradient_scales", c.gradient_scales},
      {"fid_tolerance", c.fid_tolerance},
      {"reference_model", c.reference_model},
      {"classifier_eval", c.classifier_eval},
      {"segmenter_eval", c.segmenter_eval},
      {"downstream_seeds", c.downstream_seeds},
  };
}

void from_json(const json& j, PipelineConfig& c) {
  c.seed = j.at("seed").get<std::uint64_t>();
  c.resolution = j.at("resolution").get<int>();
  const auto& s = j.at("schedule");
  c.schedule.kind = parse_schedule_kind(s.at("kind").get<std::string>());
  c.schedule.steps = s.at("steps").get<int>();
  c.schedule.beta_start = s.at("beta_start").get<double>();
  c.schedule.beta_end = s.at("beta_end").get<double>();
  c.weights = j.at("weights").get<ChannelWeights>();
  const auto& n = j.at("net");
  c.net.base_channels = n.at("base_channels").get<int64_t>();
  c.net.channel_mult = n.at("channel_mult").get<std::vector<int64_t>>();
  c.net.groups = n.at("groups").get<int64_t>();
  c.corpus = j.at("corpus").get<DatasetCounts>();
  c.test = j.at("test").get<DatasetCounts>();
  c.scarce = j.at("scarce").get<DatasetCounts>();
  c.reference = j.at("reference").get<DatasetCounts>();
  c.validation_normals = j.at("validation_normals").get<int>();
  c.unconditional_samples = j.at("unconditional_samples").get<int>();
  c.denoiser = j.at("denoiser").get<TrainerSettings>();
  c.classifier = j.at("classifier").get<TrainerSettings>();
  c.start_fraction = j.at("start_fraction").get<double>();
  c.ddim_steps = j.at("ddim_steps").get<int>();
  c.eta = j.at("eta").get<double>();
  c.gradient_scales = j.at("gradient_scales").get<std::vector<double>>();
  c.fid_tolerance = j.at("fid_tolerance").get<double>();
  c.reference_model = j.at("reference_model").get<DownstreamConfig>();
  c.classifier_eval = j.at("classifier_eval").get<DownstreamConfig>();
  c.segmenter_eval = j.at("segmenter_eval").get<DownstreamConfig>();
  c.downstream_seeds = j.at("downstream_seeds").get<int>();
}

int PipelineConfig::start_step() const {
  return static_cast<int>(std::lround(start_fraction * schedule.steps));
}

NetConfig PipelineConfig::net_config() const {
  NetConfig n = net;
  n.image_size = resolution;
  n.max_timestep = schedule.steps;
  return n;
}

namespace {

TrainConfig to_train_config(const TrainerSettings& s, const PipelineConfig& c,
                            std::string_view key) {
  TrainConfig t;
  t.iterations = s.iterations;
  t.batch_size = s.batch_size;
  t.learning_rate = s.learning_rate;
  t.lambda_vlb = s.lambda_vlb;
  t.checkpoint_every = s.checkpoint_every;
  t.grad_clip = s.grad_clip;
  t.ema_decay = s.ema_decay;
  t.weights = c.weights;
  t.schedule = c.schedule;
  t.seed = derive_seed(c.seed, key);
  return t;
}

void collect(std::vector<std::string>& problems, const std::string& prefix,
             const std::function<void()>& check) {
  try {
    check();
  } catch (const ConfigError& e) {
    std::string msg = e.what();
    // Nested validators already list their fields; keep them on one line each.
    std::size_t pos = 0;
    while ((pos = msg.find("\n  - ", pos)) != std::string::npos) msg.replace(pos, 5, "; ");
    problems.push_back(prefix + ": " + msg);
  }
}

}  // namespace

TrainConfig PipelineConfig::denoiser_config() const {
  return to_train_config(denoiser, *this, "denoiser");
}

TrainConfig PipelineConfig::classifier_config() const {
  return to_train_config(classifier, *this, "guidance-classifier");
}

GuidanceSpec PipelineConfig::guidance(double gradient_scale, Label target,
                                      std::uint64_t stream_seed) const {
  GuidanceSpec g;
  g.target_class = target;
  g.gradient_scale = gradient_scale;
  g.start_step = start_step();
  g.ddim_steps = ddim_steps;
  g.eta = eta;
  g.weights = weights;
  g.seed = stream_seed;
  return g;
}

void PipelineConfig::validate() const {
  std::vector<std::string> problems;
  if (resolution < kMinPhantomSize || resolution % 4 != 0) {
    problems.push_back("resolution must be a multiple of 4 and >= " +
                       std::to_string(kMinPhantomSize));
  }
  collect(problems, "schedule", [&] { (void)schedule.build(); });
  collect(problems, "weights", [&] { weights.validate(); });
  collect(problems, "net", [&] { net_config().validate(); });
  auto counts = [&](const char* name, const DatasetCounts& c, int min_normal, int min_cml) {
    if (c.normal < min_normal || c.cml < min_cml) {
      problems.push_back(std::string(name) + " needs at least " + std::to_string(min_normal) +
                         " normal and " + std::to_string(min_cml) + " CML records");
    }
  };
  counts("corpus", corpus, 1, 1);
  counts("test", test, 1, 1);
  counts("scarce", scarce, 1, 1);
  counts("reference", reference, 1, 1);
  if (validation_normals < 2) problems.push_back("validation_normals must be >= 2");
  if (unconditional_samples < 2) problems.push_back("unconditional_samples must be >= 2");
  collect(problems, "denoiser", [&] { denoiser_config().validate(); });
  collect(problems, "classifier", [&] { classifier_config().validate(); });
  if (!(start_fraction > 0.0 && start_fraction <= 1.0)) {
    problems.push_back("start_fraction must be in (0, 1]");
  }
  if (ddim_steps < 1) problems.push_back("ddim_steps must be >= 1");
  if (!(eta >= 0.0 && eta <= 1.0)) problems.push_back("eta must be in [0, 1]");
  if (gradient_scales.empty()) problems.push_back("gradient_scales must not be empty");
  for (double g : gradient_scales) {
    if (!(g >= 0.0) || !std::isfinite(g)) {
      problems.push_back("gradient_scales entries must be finite and >= 0");
      break;
    }
  }
  if (!(fid_tolerance >= 0.0)) problems.push_back("fid_tolerance must be >= 0");
  collect(problems, "reference_model", [&] { reference_model.validate(); });
  collect(problems, "classifier_eval", [&] { classifier_eval.validate(); });
  collect(problems, "segmenter_eval", [&] { segmenter_eval.validate(); });
  if (downstream_seeds < 1) problems.push_back("downstream_seeds must be >= 1");
  if (!problems.empty()) {
    std::string msg = "invalid pipeline config:";
    for (const auto& p : problems) msg += "\n  - " + p;
    throw ConfigError(msg);
  }
}

namespace {

bool same_kind(const json& expected, const json& given) {
  if (expected.is_number() && given.is_number()) {
    return !expected.is_number_integer() || given.is_number_integer();
  }
  return expected.type() == given.type();
}

void unknown_keys(const json& base, const json& patch, const std::string& path,
                  std::vector<std::string>& out) {
  if (!patch.is_object()) return;
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    const auto key = path.empty() ? it.key() : path + "." + it.key();
    if (!base.is_object() || !base.contains(it.key())) {
      out.push_back("unknown key '" + key + "'");
    } else if (base.at(it.key()).is_object()) {
      unknown_keys(base.at(it.key()), it.value(), key, out);
    } else if (!same_kind(base.at(it.key()), it.value())) {
      out.push_back("key '" + key + "' has the wrong type: " + it.value().dump());
    }
  }
}

}  // namespace

PipelineConfig apply_config_patch(const PipelineConfig& base, const json& patch) {
  if (!patch.is_object()) throw ConfigError("config must be a JSON object");
  json merged = base;
  std::vector<std::string> problems;
  unknown_keys(merged, patch, "", problems);
  merged.merge_patch(patch);
  PipelineConfig out = base;
  try {
    out = merged.get<PipelineConfig>();
  } catch (const json::exception& e) {
    problems.push_back(std::string("type error: ") + e.what());
  } catch (const ConfigError& e) {
    problems.push_back(e.what());
  }
  if (!problems.empty()) {
    std::string msg = "invalid config:";
    for (const auto& p : problems) msg += "\n  - " + p;
    throw ConfigError(msg);
  }
  out.validate();
  return out;
}

PipelineConfig smoke_pipeline_config() {
  PipelineConfig c;
  c.seed = 7;
  c.resolution = 16;
  c.schedule.steps = 40;
  c.net.base_channels = 8;
  c.net.channel_mult = {1, 2};
  c.net.groups = 4;
  c.corpus = {12, 8};
  c.test = {6, 6};
  c.scarce = {8, 4};
  c.reference = {10, 10};
  c.validation_normals = 4;
  c.unconditional_samples = 8;
  c.denoiser = {30, 4, 1e-3, 0.001, 10, 1.0};
  c.classifier = {20, 4, 1e-3, 0.0, 10, 1.0};
  c.ddim_steps = 4;
  c.gradient_scales = {0.0, 2.0};
  c.reference_model = {40, 8, 1e-3, 8, 0};
  c.classifier_eval = {30, 8, 1e-3, 8, 0};
  c.segmenter_eval = {30, 8, 1e-3, 8, 0};
  c.downstream_seeds = 2;
  return c;
}

double select_gradient_scale(const std::vector<GuidanceOutcome>& outcomes, double tolerance) {
  if (outcomes.empty()) throw ConfigError("no guidance outcomes to select from");
  const auto base = std::min_element(outcomes.begin(), outcomes.end(), [](auto& a, auto& b) {
    return a.gradient_scale < b.gradient_scale;
  });
  const double limit = base->fid * (1.0 + tolerance);
  const GuidanceOutcome* best = nullptr;
  for (const auto& o : outcomes) {
    if (o.fid > limit && &o != &*base) continue;
    if (!best || o.rate() > best->rate() ||
        (o.rate() == best->rate() && o.gradient_scale < best->gradient_scale)) {
      best = &o;
    }
  }
  return best->gradient_scale;
}

namespace {

using Clock = std::chrono::steady_clock;

Dataset make_dataset(std::vector<LabeledTriplet> records, int resolution, std::string description) {
  Dataset d;
  d.info.resolution = resolution;
  d.info.generator_version = std::string(kPhantomGeneratorVersion);
  d.info.description = std::move(description);
  d.records = std::move(records);
  return d;
}

Dataset concat(const Dataset& a, const Dataset& b, std::string description) {
  auto records = a.records;
  records.insert(records.end(), b.records.begin(), b.records.end());
  return make_dataset(std::move(records), static_cast<int>(a.info.resolution), std::move(description));
}

std::vector<Image> images_of(const std::vector<SampleResult>& results) {
  std::vector<Image> out;
  for (const auto& r : results) out.push_back(r.image);
  return out;
}

std::vector<Image> cml_images(const Dataset& d) {
  std::vector<Image> out;
  for (const auto& r : d.records) {
    if (r.label == Label::cml) out.push_back(r.image);
  }
  return out;
}

std::vector<Image> noise_images(int count, int size, std::uint64_t seed) {
  std::vector<Image> out;
  for (int i = 0; i < count; ++i) {
    auto gen = make_generator(derive_seed(seed, "noise-image", static_cast<std::uint64_t>(i)));
    out.push_back(image_from_tensor(torch::randn({size, size}, gen)));
  }
  return out;
}

GuidanceOutcome score_translations(const std::vector<SampleResult>& results, double g,
                                   PhantomClassifier& judge, const std::vector<Image>& real_cml) {
  GuidanceOutcome o;
  o.gradient_scale = g;
  o.total = static_cast<int>(results.size());
  const auto labels = classify_images(judge, images_of(results));
  for (std::size_t i = 0; i < results.size(); ++i) {
    const bool cml = labels[i] == Label::cml;
    const bool lesion = results[i].lesion_mask.count() > 0;
    o.classified_cml += cml;
    o.non_empty_lesion += lesion;
    o.both += cml && lesion;
  }
  o.fid = fid_images(real_cml, images_of(results), judge);
  return o;
}

json outcome_json(const GuidanceOutcome& o) {
  return json{{"gradient_scale", o.gradient_scale}, {"total", o.total},
              {"classified_cml", o.classified_cml}, {"non_empty_lesion", o.non_empty_lesion},
              {"both", o.both},                     {"rate", o.rate()},
              {"fid", o.fid}};
}

class Stopwatch {
 public:
  explicit Stopwatch(json& timing) : timing_(timing), start_(Clock::now()), lap_(start_) {}
  void lap(const std::string& name) {
    const auto now = Clock::now();
    timing_[name] = std::chrono::duration<double>(now - lap_).count();
    lap_ = now;
  }
  void total() { timing_["total"] = std::chrono::duration<double>(Clock::now() - start_).count(); }

 private:
  json& timing_;
  Clock::time_point start_, lap_;
};

}  // namespace

MetricsReport run_pipeline(const PipelineConfig& config, const PipelineHooks& hooks) {
  config.validate();
  enable_deterministic_mode();
  auto log = [&](const std::string& msg) {
    if (hooks.log) hooks.log(msg);
  };
  const auto& art = hooks.artifact_dir;
  if (art) fs::create_directories(*art);

  MetricsReport report;
  Stopwatch watch(report.timing);
  const int res = config.resolution;
  const int T = config.schedule.steps;
  const auto schedule = config.schedule.build();
  report.provenance["config"] = config;
  report.provenance["generator_version"] = std::string(kPhantomGeneratorVersion);

  // Data.
  log("generating phantom datasets");
  auto gen = [&](const DatasetCounts& c, const char* key) {
    auto d = generate_corpus(c.normal, c.cml, res, derive_seed(config.seed, key), key);
    d.info.description = key;
    return d;
  };
  const auto corpus = gen(config.corpus, "corpus");
  const auto test = gen(config.test, "test");
  const auto scarce = gen(config.scarce, "scarce");
  const auto reference = gen(config.reference, "reference");
  const auto validation = gen({config.validation_normals, 0}, "validation");
  for (const auto* d : {&corpus, &test, &scarce, &reference, &validation}) {
    report.provenance["dataset_hashes"][d->info.description] = dataset_hash(*d);
    if (art) save_dataset(*d, *art / "datasets" / d->info.description);
  }
  watch.lap("data");

  // Independent judge and feature extractor.
  log("training reference classifier");
  auto ref_cfg = config.reference_model;
  ref_cfg.seed = derive_seed(config.seed, "reference-model");
  auto judge = train_phantom_classifier(reference, ref_cfg);
  const auto judge_counts = evaluate_phantom_classifier(judge, test);
  report.summary["reference_classifier_test_accuracy"] = accuracy(judge_counts);
  report.provenance["feature_extractor"] = {{"kind", "phantom-classifier"},
                                            {"base_channels", ref_cfg.base_channels},
                                            {"parameter_hash", parameter_hash(*judge)}};
  if (art) {
    save_phantom_classifier(*art / "checkpoints" / "reference-classifier", judge, ref_cfg.seed, res);
  }
  watch.lap("reference_classifier");

  // Diffusion model.
  const auto net = config.net_config();
  const auto dcfg = config.denoiser_config();
  log("training denoiser (" + std::to_string(dcfg.iterations) + " iterations)");
  TrainHooks th;
  th.on_log = [&](const LossRecord& r) {
    log("  denoiser iteration " + std::to_string(r.iteration) + " simple=" + std::to_string(r.simple));
  };
  auto dtc = dcfg;
  dtc.log_every = std::max(1, dcfg.iterations / 10);
  auto trained = train_denoiser(corpus, dtc, net, th);
  const auto n_hist = trained.history.size();
  const std::size_t window = std::max<std::size_t>(1, std::min<std::size_t>(100, n_hist / 3));
  const double loss_initial = mean_simple_loss(trained.history, 0, window);
  const double loss_final = mean_simple_loss(trained.history, n_hist - window, n_hist);
  report.summary["denoiser_loss_window"] = window;
  report.summary["denoiser_loss_initial"] = loss_initial;
  report.summary["denoiser_loss_final"] = loss_final;
  report.summary["denoiser_loss_ratio"] = loss_final / loss_initial;
  report.provenance["checkpoints"]["denoiser"] = parameter_hash(*trained.model);
  CheckpointMeta dmeta;
  dmeta.kind = "denoiser";
  dmeta.architecture = net;
  dmeta.schedule = config.schedule;
  dmeta.weights = config.weights;
  dmeta.config_hash = dcfg.hash();
  dmeta.seed = dcfg.seed;
  if (art) {
    save_checkpoint(*art / "checkpoints" / "denoiser", *trained.model, dmeta);
    write_loss_csv(*art / "denoiser_loss.csv", trained.history);
  }
  watch.lap("denoiser_training");

  const auto ccfg = config.classifier_config();
  log("training guidance classifier (" + std::to_string(ccfg.iterations) + " iterations)");
  auto clf = train_classifier(corpus, ccfg, net);
  report.provenance["checkpoints"]["guidance_classifier"] = parameter_hash(*clf.model);
  for (int t : {1, std::max(1, T / 10), std::max(1, T / 2), T}) {
    report.summary["guidance_classifier_accuracy"]["t" + std::to_string(t)] =
        classifier_accuracy_at(clf.model, test, t, schedule, config.weights,
                               derive_seed(config.seed, "classifier-eval"));
  }
  if (art) {
    auto cmeta = dmeta;
    cmeta.kind = "guidance-classifier";
    cmeta.config_hash = ccfg.hash();
    cmeta.seed = ccfg.seed;
    save_checkpoint(*art / "checkpoints" / "guidance-classifier", *clf.model, cmeta);
    write_classifier_csv(*art / "guidance_classifier_loss.csv", clf.history);
  }
  watch.lap("guidance_classifier_training");

  SamplerModels models{trained.model, clf.model};
  SamplerModels unguided{trained.model, nullptr};

  // Fréchet scoring of full-chain samples against the training corpus.
  log("sampling " + std::to_string(config.unconditional_samples) + " unconditional images");
  auto uspec = config.guidance(0.0, Label::normal, derive_seed(config.seed, "unconditional"));
  uspec.start_step = T;
  const auto samples =
      generate_unconditional(unguided, schedule, uspec, config.unconditional_samples, res);
  const auto real = dataset_images(corpus);
  const double fid_samples = fid_images(real, images_of(samples), judge);
  const double fid_noise = fid_images(
      real, noise_images(config.unconditional_samples, res, config.seed), judge);
  std::vector<Image> half_a, half_b;
  for (std::size_t i = 0; i < real.size(); ++i) (i % 2 ? half_b : half_a).push_back(real[i]);
  report.fid.push_back({"unconditional_vs_real", fid_samples});
  report.fid.push_back({"noise_vs_real", fid_noise});
  if (half_a.size() >= 2 && half_b.size() >= 2) {
    report.fid.push_back({"real_half_vs_half", fid_images(half_a, half_b, judge)});
  }
  int empty_bone = 0;
  for (const auto& s : samples) empty_bone += s.bone_mask.count() == 0;
  report.summary["unconditional_empty_bone_masks"] = empty_bone;
  watch.lap("unconditional_sampling");

  // Guidance-scale sweep on held-out validation normals.
  const auto real_cml = cml_images(reference);
  std::vector<GuidanceOutcome> sweep;
  for (double g : config.gradient_scales) {
    log("guidance sweep: g=" + std::to_string(g));
    const auto out = translate(validation.records, models, schedule,
                               config.guidance(g, Label::cml, derive_seed(config.seed, "sweep")));
    sweep.push_back(score_translations(out, g, judge, real_cml));
    report.summary["guidance_sweep"].push_back(outcome_json(sweep.back()));
  }
  const double g_star = select_gradient_scale(sweep, config.fid_tolerance);
  report.summary["gradient_scale"] = g_star;
  report.summary["start_step"] = config.start_step();
  watch.lap("guidance_sweep");

  // Guidance efficacy on the test normals.
  log("translating test normals with g=" + std::to_string(g_star));
  std::vector<LabeledTriplet> test_normals;
  for (const auto& r : test.records) {
    if (r.label == Label::normal) test_normals.push_back(r);
  }
  const auto test_out = translate(test_normals, models, schedule,
                                  config.guidance(g_star, Label::cml,
                                                  derive_seed(config.seed, "guidance-test")));
  const auto efficacy = score_translations(test_out, g_star, judge, real_cml);
  report.summary["guidance_test"] = outcome_json(efficacy);
  report.fid.push_back({"translated_cml_vs_real_cml", efficacy.fid});
  watch.lap("guidance_test");

  // Augmentation: translate the scarce normals to CML.
  log("translating scarce normals for augmentation");
  std::vector<LabeledTriplet> scarce_normals;
  for (const auto& r : scarce.records) {
    if (r.label == Label::normal) scarce_normals.push_back(r);
  }
  const auto aug_out = translate(scarce_normals, models, schedule,
                                 config.guidance(g_star, Label::cml,
                                                 derive_seed(config.seed, "augment")));
  std::vector<LabeledTriplet> synthetic_records;
  json trajectories = json::array();
  for (const auto& r : aug_out) {
    if (r.lesion_mask.count() == 0) continue;
    synthetic_records.push_back(to_triplet(r, "synthetic-" + *r.source_id));
    trajectories.push_back({{"id", synthetic_records.back().id}, {"trajectory", r.trajectory}});
  }
  auto synthetic = make_dataset(std::move(synthetic_records), res, "synthetic");
  report.summary["augmentation_translated"] = aug_out.size();
  report.summary["augmentation_kept"] = synthetic.records.size();
  report.provenance["dataset_hashes"]["synthetic"] = dataset_hash(synthetic);
  if (art) {
    save_dataset(synthetic, *art / "datasets" / "synthetic");
    std::ofstream(*art / "datasets" / "synthetic" / "trajectories.json") << trajectories.dump(2);
  }
  watch.lap("augmentation");

  // Downstream comparisons on the fixed test split.
  const auto augmented_cls = concat(scarce, synthetic, "scarce+synthetic");
  for (int k = 0; k < config.downstream_seeds; ++k) {
    const auto seed_k = derive_seed(config.seed, "downstream", static_cast<std::uint64_t>(k));
    log("downstream seed " + std::to_string(k + 1) + "/" + std::to_string(config.downstream_seeds));
    auto ccls = config.classifier_eval;
    ccls.seed = seed_k;
    report.classification.push_back(
        {"baseline", seed_k, train_eval_downstream_classifier(scarce, test, ccls)});
    if (synthetic.count(Label::cml) > 0) {
      report.classification.push_back(
          {"augmented", seed_k, train_eval_downstream_classifier(augmented_cls, test, ccls)});
    }
    auto cseg = config.segmenter_eval;
    cseg.seed = seed_k;
    report.segmentation.push_back({"real", seed_k, train_eval_segmenter(scarce, test, cseg)});
    if (!synthetic.records.empty()) {
      report.segmentation.push_back(
          {"augmented", seed_k, train_eval_segmenter(synthetic, test, cseg)});
      report.segmentation.push_back(
          {"real+augmented", seed_k, train_eval_segmenter(augmented_cls, test, cseg)});
    }
  }
  watch.lap("downstream");
  watch.total();
  if (art) report.write(*art / "report");
  log("done");
  return report;
}

}  // namespace maskdiff
