#include <chrono>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "maskdiff/checkpoint.hpp"
#include "maskdiff/dataset.hpp"
#include "maskdiff/error.hpp"
#include "maskdiff/evaluation.hpp"
#include "maskdiff/pipeline.hpp"
#include "maskdiff/rng.hpp"
#include "maskdiff/run_manifest.hpp"
#include "maskdiff/sampling.hpp"
#include "maskdiff/training.hpp"

using namespace maskdiff;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

enum ExitCode { kOk = 0, kUnexpected = 1, kConfig = 2, kNumeric = 3, kIo = 4 };

bool g_quiet = false;
const auto g_started = std::chrono::steady_clock::now();

double elapsed_seconds() {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - g_started).count();
}

void log(const std::string& msg) {
  if (!g_quiet) std::cerr << "[maskdiff] " << msg << std::endl;
}

void write_manifest(maskdiff::RunManifest& manifest, const std::filesystem::path& dir) {
  manifest.wall_clock_seconds = elapsed_seconds();
  manifest.write(dir / "run_manifest.json");
}

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config file " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
  }
}

/// Section of a config file that applies to `command`: the object stored
/// under the command's name if present, otherwise the whole file.
json config_section(const std::optional<fs::path>& file, const std::string& command) {
  if (!file) return json::object();
  auto j = read_json_file(*file);
  if (!j.is_object()) throw ConfigError("config file must hold a JSON object");
  if (j.contains(command) && j[command].is_object()) return j[command];
  return j;
}

std::string flag_name(const std::string& key) {
  std::string out = "--";
  for (char c : key) out += c == '_' ? '-' : c;
  return out;
}

bool same_kind(const json& expected, const json& given) {
  if (expected.is_null() || given.is_null()) return true;
  if (expected.is_number() && given.is_number()) {
    return !expected.is_number_integer() || given.is_number_integer();
  }
  return expected.type() == given.type();
}

/// Flat key-value settings of one subcommand with layered resolution:
/// built-in defaults, then the config file, then explicit flags.
class Settings {
 public:
  explicit Settings(CLI::App* app) : app_(app) {}

  template <typename T>
  void add(const std::string& key, const T& fallback, const std::string& help) {
    defaults_[key] = fallback;
    app_->add_option_function<T>(
        flag_name(key), [this, key](const T& v) { flags_[key] = v; }, help);
  }
  /// Required unless supplied by the config file.
  template <typename T>
  void require(const std::string& key, const std::string& help) {
    defaults_[key] = nullptr;
    required_.insert(key);
    app_->add_option_function<T>(
        flag_name(key), [this, key](const T& v) { flags_[key] = v; }, help);
  }
  void flag(const std::string& key, bool fallback, const std::string& help) {
    defaults_[key] = fallback;
    app_->add_flag_function(
        flag_name(key), [this, key](std::int64_t n) { flags_[key] = n > 0; }, help);
  }
  void positional(const std::string& key, const std::string& help) {
    defaults_[key] = nullptr;
    required_.insert(key);
    app_->add_option_function<std::string>(
        key, [this, key](const std::string& v) { flags_[key] = v; }, help);
  }

  json resolve(const json& file_section) const {
    std::vector<std::string> problems;
    json out = defaults_;
    for (auto it = file_section.begin(); it != file_section.end(); ++it) {
      if (!defaults_.contains(it.key())) {
        problems.push_back("unknown key '" + it.key() + "'");
      } else if (!same_kind(defaults_[it.key()], it.value())) {
        problems.push_back("key '" + it.key() + "' has the wrong type: " + it.value().dump());
      } else {
        out[it.key()] = it.value();
      }
    }
    for (auto it = flags_.begin(); it != flags_.end(); ++it) out[it.key()] = it.value();
    for (const auto& key : required_) {
      if (out[key].is_null()) problems.push_back("missing required setting '" + key + "'");
    }
    if (!problems.empty()) {
      std::string msg = "invalid settings for '" + app_->get_name() + "':";
      for (const auto& p : problems) msg += "\n  - " + p;
      throw ConfigError(msg);
    }
    return out;
  }

 private:
  CLI::App* app_;
  json defaults_ = json::object();
  json flags_ = json::object();
  std::set<std::string> required_;
};

/// Typed access that turns JSON type errors into a config error naming the key.
template <typename T>
T get(const json& cfg, const std::string& key) {
  try {
    return cfg.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("setting '" + key + "' has the wrong type: " + cfg.at(key).dump());
  }
}

std::optional<std::string> get_optional(const json& cfg, const std::string& key) {
  if (!cfg.contains(key) || cfg.at(key).is_null()) return std::nullopt;
  return get<std::string>(cfg, key);
}

/// Accepts either a checkpoint stem or a training output directory.
fs::path checkpoint_stem(const fs::path& p) {
  if (fs::is_directory(p)) return p / "model";
  return p;
}

struct Command {
  std::string name;
  CLI::App* app = nullptr;
  std::unique_ptr<Settings> settings;
  std::function<void(const json& cfg, RunManifest& manifest)> run;
};

void add_train_settings(Settings& s, int iterations, int batch, double lr, double lambda,
                        double ema) {
  s.require<std::string>("data", "Training dataset directory");
  s.require<std::string>("out", "Output directory (created atomically)");
  s.add<std::uint64_t>("seed", 0, "Root seed");
  s.add<int>("iterations", iterations, "Optimizer iterations");
  s.add<int>("batch_size", batch, "Batch size");
  s.add<double>("learning_rate", lr, "Adam learning rate");
  s.add<double>("lambda_vlb", lambda, "Weight of the variational term");
  s.add<int>("checkpoint_every", 500, "Intermediate checkpoint interval (0 disables)");
  s.add<double>("grad_clip", 1.0, "Gradient norm clip");
  s.add<double>("ema_decay", ema, "Parameter moving-average decay (0 disables)");
  s.add<int>("log_every", 100, "Progress interval (0 disables)");
  s.add<std::string>("schedule", "linear", "Noise schedule: linear or cosine");
  s.add<int>("steps", 200, "Diffusion steps T");
  s.add<double>("beta_start", 0.0, "Linear schedule start (0 selects the T-scaled default)");
  s.add<double>("beta_end", 0.0, "Linear schedule end (0 selects the T-scaled default)");
  s.add<double>("w1", 1.0, "Image channel weight");
  s.add<double>("w2", 0.8, "Bone mask channel weight");
  s.add<double>("w3", 0.8, "Lesion mask channel weight");
  s.add<int>("base_channels", 40, "Network width");
  s.add<std::vector<int64_t>>("channel_mult", {1, 2, 2}, "Width multiplier per level");
  s.add<int>("groups", 8, "Group-norm groups");
  s.flag("force", false, "Replace an existing output directory");
}

TrainConfig train_config_from(const json& cfg) {
  TrainConfig t;
  t.iterations = get<int>(cfg, "iterations");
  t.batch_size = get<int>(cfg, "batch_size");
  t.learning_rate = get<double>(cfg, "learning_rate");
  t.lambda_vlb = get<double>(cfg, "lambda_vlb");
  t.checkpoint_every = get<int>(cfg, "checkpoint_every");
  t.grad_clip = get<double>(cfg, "grad_clip");
  t.ema_decay = get<double>(cfg, "ema_decay");
  t.log_every = get<int>(cfg, "log_every");
  t.schedule.kind = parse_schedule_kind(get<std::string>(cfg, "schedule"));
  t.schedule.steps = get<int>(cfg, "steps");
  t.schedule.beta_start = get<double>(cfg, "beta_start");
  t.schedule.beta_end = get<double>(cfg, "beta_end");
  t.weights = {get<double>(cfg, "w1"), get<double>(cfg, "w2"), get<double>(cfg, "w3")};
  t.seed = get<std::uint64_t>(cfg, "seed");
  t.validate();
  return t;
}

NetConfig net_config_from(const json& cfg, int64_t resolution, int steps) {
  NetConfig n;
  n.image_size = resolution;
  n.base_channels = get<int>(cfg, "base_channels");
  n.channel_mult = get<std::vector<int64_t>>(cfg, "channel_mult");
  n.groups = get<int>(cfg, "groups");
  n.max_timestep = steps;
  n.validate();
  return n;
}

int64_t dataset_resolution(const Dataset& ds) {
  if (ds.records.empty()) throw ConfigError("dataset is empty");
  return ds.records.front().image.height;
}

CheckpointMeta train_meta(const std::string& kind, const NetConfig& net, const TrainConfig& t) {
  CheckpointMeta m;
  m.kind = kind;
  m.architecture = net;
  m.schedule = t.schedule;
  m.weights = t.weights;
  m.config_hash = t.hash();
  m.seed = t.seed;
  return m;
}

template <typename Model>
void save_last_good(const fs::path& out, Model model, const TrainingDiverged& e,
                    const CheckpointMeta& meta) {
  const auto dir = fs::path(out.string() + ".last-good");
  fs::create_directories(dir);
  module_from_bytes(*model, e.last_good_parameters());
  auto m = meta;
  m.extra["diverged_at_iteration"] = e.iteration();
  save_checkpoint(dir / "model", *model, m);
  log("saved last finite parameters to " + dir.string());
}

void run_train_diffusion(const json& cfg, RunManifest& manifest) {
  const auto data = load_dataset(get<std::string>(cfg, "data"));
  const auto t = train_config_from(cfg);
  const auto net = net_config_from(cfg, dataset_resolution(data), t.schedule.steps);
  AtomicOutputDir out(get<std::string>(cfg, "out"), get<bool>(cfg, "force"));
  manifest.seeds["train"] = t.seed;
  manifest.inputs["data"] = dataset_hash(data);
  const auto meta = train_meta("denoiser", net, t);
  TrainHooks hooks;
  hooks.on_log = [](const LossRecord& r) {
    log("iteration " + std::to_string(r.iteration) + " simple=" + std::to_string(r.simple) +
        " vlb=" + std::to_string(r.vlb));
  };
  hooks.on_checkpoint = [&](int it, torch::nn::Module& m) {
    auto im = meta;
    im.extra["iteration"] = it;
    save_checkpoint(out.path() / "checkpoints" / ("iter-" + std::to_string(it)), m, im);
  };
  DenoiserTrainResult result;
  try {
    result = train_denoiser(data, t, net, hooks);
  } catch (const TrainingDiverged& e) {
    save_last_good(out.target(), Denoiser(net), e, meta);
    throw;
  }
  save_checkpoint(out.path() / "model", *result.model, meta);
  write_loss_csv(out.path() / "loss.csv", result.history);
  manifest.outputs["model"] = parameter_hash(*result.model);
  manifest.outputs["final_simple_loss"] = result.history.back().simple;
  write_manifest(manifest, out.path());
  out.commit();
  log("wrote " + out.target().string());
}

void run_train_classifier(const json& cfg, RunManifest& manifest) {
  const auto data = load_dataset(get<std::string>(cfg, "data"));
  const auto t = train_config_from(cfg);
  const auto net = net_config_from(cfg, dataset_resolution(data), t.schedule.steps);
  AtomicOutputDir out(get<std::string>(cfg, "out"), get<bool>(cfg, "force"));
  manifest.seeds["train"] = t.seed;
  manifest.inputs["data"] = dataset_hash(data);
  const auto meta = train_meta("guidance-classifier", net, t);
  TrainHooks hooks;
  hooks.on_classifier_log = [](const ClassifierRecord& r) {
    log("iteration " + std::to_string(r.iteration) + " loss=" + std::to_string(r.loss) +
        " batch_accuracy=" + std::to_string(r.accuracy));
  };
  hooks.on_checkpoint = [&](int it, torch::nn::Module& m) {
    auto im = meta;
    im.extra["iteration"] = it;
    save_checkpoint(out.path() / "checkpoints" / ("iter-" + std::to_string(it)), m, im);
  };
  ClassifierTrainResult result;
  try {
    result = train_classifier(data, t, net, hooks);
  } catch (const TrainingDiverged& e) {
    save_last_good(out.target(), GuidanceClassifier(net), e, meta);
    throw;
  }
  save_checkpoint(out.path() / "model", *result.model, meta);
  write_classifier_csv(out.path() / "loss.csv", result.history);
  const auto schedule = t.schedule.build();
  for (int step : {1, t.schedule.steps / 2, t.schedule.steps}) {
    if (step < 1) continue;
    manifest.outputs["train_accuracy_t" + std::to_string(step)] =
        classifier_accuracy_at(result.model, data, step, schedule, t.weights,
                               derive_seed(t.seed, "accuracy-probe"));
  }
  manifest.outputs["model"] = parameter_hash(*result.model);
  write_manifest(manifest, out.path());
  out.commit();
  log("wrote " + out.target().string());
}

void run_phantom_gen(const json& cfg, RunManifest& manifest) {
  const auto seed = get<std::uint64_t>(cfg, "seed");
  auto ds = generate_corpus(get<int>(cfg, "normal"), get<int>(cfg, "cml"), get<int>(cfg, "size"),
                            seed, get<std::string>(cfg, "prefix"));
  ds.info.description = get<std::string>(cfg, "description");
  const int folds = get<int>(cfg, "folds");
  if (folds > 0) split_folds(ds, folds, derive_seed(seed, "folds"));
  AtomicOutputDir out(get<std::string>(cfg, "out"), get<bool>(cfg, "force"));
  save_dataset(ds, out.path());
  manifest.seeds["generator"] = seed;
  manifest.outputs["dataset"] = dataset_hash(ds);
  write_manifest(manifest, out.path());
  out.commit();
  log("wrote " + std::to_string(ds.records.size()) + " records to " + out.target().string());
}

void run_translate(const json& cfg, RunManifest& manifest) {
  const auto data = load_dataset(get<std::string>(cfg, "data"));
  CheckpointMeta dmeta, cmeta;
  const auto dstem = checkpoint_stem(get<std::string>(cfg, "denoiser"));
  SamplerModels models{load_denoiser(dstem, &dmeta), nullptr};
  manifest.inputs["data"] = dataset_hash(data);
  manifest.inputs["denoiser"] = parameter_hash(*models.denoiser);
  if (const auto c = get_optional(cfg, "classifier")) {
    models.classifier = load_guidance_classifier(checkpoint_stem(*c), &cmeta);
    check_checkpoint_pair(dmeta, cmeta);
    manifest.inputs["classifier"] = parameter_hash(*models.classifier);
  }
  const auto schedule = dmeta.schedule.build();

  GuidanceSpec spec;
  spec.target_class = parse_label(get<std::string>(cfg, "target"));
  spec.gradient_scale = get<double>(cfg, "scale");
  const int start = get<int>(cfg, "start");
  spec.start_step = start >= 0 ? start : static_cast<int>(std::lround(0.8 * schedule.steps()));
  spec.ddim_steps = get<int>(cfg, "ddim_steps");
  spec.eta = get<double>(cfg, "eta");
  spec.weights = dmeta.weights;
  spec.clip_x0 = get<bool>(cfg, "clip_x0");
  spec.seed = get<std::uint64_t>(cfg, "seed");
  spec.allow_non_normal_input = get<bool>(cfg, "allow_non_normal");
  spec.validate(schedule.steps());
  manifest.config["resolved_guidance"] = spec;
  manifest.seeds["noise"] = spec.seed;

  std::vector<LabeledTriplet> inputs;
  for (const auto& r : data.records) {
    if (r.label == Label::normal || spec.allow_non_normal_input) inputs.push_back(r);
  }
  const int limit = get<int>(cfg, "limit");
  if (limit > 0 && inputs.size() > static_cast<std::size_t>(limit)) inputs.resize(static_cast<std::size_t>(limit));
  if (inputs.empty()) throw ConfigError("no eligible inputs in " + get<std::string>(cfg, "data"));

  AtomicOutputDir out(get<std::string>(cfg, "out"), get<bool>(cfg, "force"));
  log("translating " + std::to_string(inputs.size()) + " records to " +
      std::string(to_string(spec.target_class)));
  const auto results = translate(inputs, models, schedule, spec);
  Dataset ds;
  ds.info.resolution = data.info.resolution;
  ds.info.generator_version = data.info.generator_version;
  ds.info.seed = spec.seed;
  ds.info.description = "translated to " + std::string(to_string(spec.target_class));
  json trajectories = json::array();
  const auto prefix = get<std::string>(cfg, "id_prefix");
  const bool drop_empty = get<bool>(cfg, "drop_empty_lesions");
  int dropped = 0;
  for (const auto& r : results) {
    if (drop_empty && spec.target_class == Label::cml && r.lesion_mask.count() == 0) {
      ++dropped;
      continue;
    }
    ds.records.push_back(to_triplet(r, prefix + "-" + *r.source_id));
    trajectories.push_back({{"id", ds.records.back().id}, {"trajectory", r.trajectory}});
  }
  if (const auto judge_stem = get_optional(cfg, "judge")) {
    auto judge = load_phantom_classifier(checkpoint_stem(*judge_stem));
    std::vector<Image> images;
    for (const auto& r : results) images.push_back(r.image);
    const auto labels = classify_images(judge, images);
    int as_target = 0, with_lesion = 0, both = 0;
    for (std::size_t i = 0; i < results.size(); ++i) {
      const bool hit = labels[i] == spec.target_class;
      const bool lesion = results[i].lesion_mask.count() > 0;
      as_target += hit;
      with_lesion += lesion;
      both += hit && lesion;
    }
    manifest.inputs["judge"] = parameter_hash(*judge);
    manifest.outputs["judge"] = {{"total", results.size()},
                                 {"classified_as_target", as_target},
                                 {"non_empty_lesion", with_lesion},
                                 {"both", both}};
  }
  save_dataset(ds, out.path());
  std::ofstream(out.path() / "trajectories.json") << trajectories.dump(2) << "\n";
  manifest.outputs["dataset"] = dataset_hash(ds);
  manifest.outputs["records"] = ds.records.size();
  manifest.outputs["dropped_empty_lesion"] = dropped;
  write_manifest(manifest, out.path());
  out.commit();
  log("wrote " + std::to_string(ds.records.size()) + " records to " + out.target().string());
}

void add_downstream_settings(Settings& s) {
  s.add<int>("iterations", 600, "Downstream training iterations");
  s.add<int>("batch_size", 16, "Downstream batch size");
  s.add<double>("learning_rate", 1e-3, "Downstream learning rate");
  s.add<int>("base_channels", 16, "Downstream network width");
}

DownstreamConfig downstream_from(const json& cfg, std::uint64_t seed) {
  DownstreamConfig d;
  d.iterations = get<int>(cfg, "iterations");
  d.batch_size = get<int>(cfg, "batch_size");
  d.learning_rate = get<double>(cfg, "learning_rate");
  d.base_channels = get<int>(cfg, "base_channels");
  d.seed = seed;
  d.validate();
  return d;
}

Dataset merged(const Dataset& a, const Dataset& b) {
  Dataset out = a;
  out.records.insert(out.records.end(), b.records.begin(), b.records.end());
  return out;
}

void write_report(const MetricsReport& report, AtomicOutputDir& out, RunManifest& manifest) {
  report.write(out.path());
  manifest.outputs["metrics"] = file_hash(out.path() / "metrics.json");
  write_manifest(manifest, out.path());
  std::cout << report.text_tables();
  out.commit();
  log("wrote " + out.target().string());
}

void run_eval_classify(const json& cfg, RunManifest& manifest) {
  auto train = load_dataset(get<std::string>(cfg, "train"));
  std::optional<Dataset> test, augment;
  if (const auto p = get_optional(cfg, "test")) test = load_dataset(*p);
  if (const auto p = get_optional(cfg, "augment")) augment = load_dataset(*p);
  const int folds = get<int>(cfg, "folds");
  const int seeds = get<int>(cfg, "seeds");
  const auto root = get<std::uint64_t>(cfg, "seed");
  if (seeds < 1) throw ConfigError("seeds must be >= 1");
  if (folds == 1 || folds < 0) throw ConfigError("folds must be 0 (disabled) or >= 2");
  if (folds == 0 && !test) throw ConfigError("nothing to evaluate: set folds >= 2 or a test set");
  manifest.inputs["train"] = dataset_hash(train);
  if (test) manifest.inputs["test"] = dataset_hash(*test);
  if (augment) manifest.inputs["augment"] = dataset_hash(*augment);
  AtomicOutputDir out(get<std::string>(cfg, "out"), get<bool>(cfg, "force"));

  MetricsReport report;
  report.provenance["inputs"] = manifest.inputs;
  std::vector<std::string> conditions{"baseline"};
  if (augment) conditions.push_back("augmented");
  for (int k = 0; k < seeds; ++k) {
    const auto seed_k = derive_seed(root, "downstream", static_cast<std::uint64_t>(k));
    manifest.seeds["run" + std::to_string(k)] = seed_k;
    const auto dcfg = downstream_from(cfg, seed_k);
    if (folds >= 2) {
      split_folds(train, folds, derive_seed(seed_k, "folds"));
      for (const auto& cond : conditions) {
        ConfusionCounts total;
        for (int f = 0; f < folds; ++f) {
          const auto held = train.subset(train.in_fold(f));
          auto fit = train.subset(train.outside_fold(f));
          if (cond == "augmented") {
            // Synthetic records derived from held-out inputs would leak the fold.
            std::set<std::string> held_ids;
            for (const auto& r : held.records) held_ids.insert(r.id);
            for (const auto& r : augment->records) {
              if (!r.source_id || !held_ids.count(*r.source_id)) fit.records.push_back(r);
            }
          }
          log("cv " + cond + " seed " + std::to_string(k + 1) + " fold " + std::to_string(f + 1));
          const auto c = train_eval_downstream_classifier(fit, held, dcfg);
          total.tp += c.tp;
          total.fp += c.fp;
          total.tn += c.tn;
          total.fn += c.fn;
        }
        report.classification.push_back({"cv/" + cond, seed_k, total});
      }
    }
    if (test) {
      for (const auto& cond : conditions) {
        log("test " + cond + " seed " + std::to_string(k + 1));
        const auto fit = cond == "augmented" ? merged(train, *augment) : train;
        report.classification.push_back(
            {"test/" + cond, seed_k, train_eval_downstream_classifier(fit, *test, dcfg)});
      }
    }
  }
  write_report(report, out, manifest);
}

void run_eval_segment(const json& cfg, RunManifest& manifest) {
  const auto train = load_dataset(get<std::string>(cfg, "train"));
  const auto test = load_dataset(get<std::string>(cfg, "test"));
  std::optional<Dataset> augment;
  if (const auto p = get_optional(cfg, "augment")) augment = load_dataset(*p);
  const int seeds = get<int>(cfg, "seeds");
  if (seeds < 1) throw ConfigError("seeds must be >= 1");
  manifest.inputs["train"] = dataset_hash(train);
  manifest.inputs["test"] = dataset_hash(test);
  if (augment) manifest.inputs["augment"] = dataset_hash(*augment);
  AtomicOutputDir out(get<std::string>(cfg, "out"), get<bool>(cfg, "force"));
  MetricsReport report;
  report.provenance["inputs"] = manifest.inputs;
  const auto root = get<std::uint64_t>(cfg, "seed");
  for (int k = 0; k < seeds; ++k) {
    const auto seed_k = derive_seed(root, "downstream", static_cast<std::uint64_t>(k));
    manifest.seeds["run" + std::to_string(k)] = seed_k;
    const auto dcfg = downstream_from(cfg, seed_k);
    log("segmentation seed " + std::to_string(k + 1));
    report.segmentation.push_back({"real", seed_k, train_eval_segmenter(train, test, dcfg)});
    if (augment) {
      report.segmentation.push_back(
          {"augmented", seed_k, train_eval_segmenter(*augment, test, dcfg)});
      report.segmentation.push_back(
          {"real+augmented", seed_k, train_eval_segmenter(merged(train, *augment), test, dcfg)});
    }
  }
  write_report(report, out, manifest);
}

void run_fid(const json& cfg, RunManifest& manifest) {
  const auto a = load_dataset(get<std::string>(cfg, "a"));
  const auto b = load_dataset(get<std::string>(cfg, "b"));
  manifest.inputs["a"] = dataset_hash(a);
  manifest.inputs["b"] = dataset_hash(b);
  const auto seed = get<std::uint64_t>(cfg, "seed");
  PhantomClassifier extractor{nullptr};
  json extractor_info;
  if (const auto stem = get_optional(cfg, "extractor")) {
    extractor = load_phantom_classifier(checkpoint_stem(*stem));
    extractor_info["source"] = *stem;
  } else {
    const auto train_path = get_optional(cfg, "extractor_data").value_or(get<std::string>(cfg, "a"));
    const auto train = train_path == get<std::string>(cfg, "a") ? a : load_dataset(train_path);
    const auto dcfg = downstream_from(cfg, derive_seed(seed, "extractor"));
    if (train.count(Label::normal) > 0 && train.count(Label::cml) > 0) {
      log("training feature extractor on " + train_path);
      extractor = train_phantom_classifier(train, dcfg);
      extractor_info["trained_on"] = dataset_hash(train);
    } else {
      log("extractor data has a single class; using a seeded untrained extractor");
      torch::manual_seed(dcfg.seed);
      extractor = PhantomClassifier(dcfg.base_channels);
      extractor_info["untrained_seed"] = dcfg.seed;
    }
  }
  extractor_info["parameter_hash"] = parameter_hash(*extractor);
  const double value = fid_images(dataset_images(a), dataset_images(b), extractor);
  std::cout.precision(10);
  std::cout << value << "\n";
  manifest.outputs["fid"] = value;
  manifest.outputs["extractor"] = extractor_info;
  if (const auto out_path = get_optional(cfg, "out")) {
    AtomicOutputDir out(*out_path, get<bool>(cfg, "force"));
    MetricsReport report;
    report.fid.push_back({"a_vs_b", value});
    report.provenance["feature_extractor"] = extractor_info;
    report.provenance["inputs"] = manifest.inputs;
    write_report(report, out, manifest);
  }
}

void run_repro_all(const json& cfg, RunManifest& manifest, const json& pipeline_patch) {
  if (!get<bool>(cfg, "print_config") && get<std::string>(cfg, "out").empty()) {
    throw ConfigError("invalid settings for 'repro-all':\n  - missing required setting 'out'");
  }
  auto base = get<bool>(cfg, "smoke") ? smoke_pipeline_config() : PipelineConfig{};
  auto config = apply_config_patch(base, pipeline_patch);
  if (cfg.contains("seed") && !cfg.at("seed").is_null()) config.seed = get<std::uint64_t>(cfg, "seed");
  config.validate();
  if (get<bool>(cfg, "print_config")) {
    std::cout << json(config).dump(2) << "\n";
    return;
  }
  manifest.config["pipeline"] = config;
  manifest.seeds["root"] = config.seed;
  AtomicOutputDir out(get<std::string>(cfg, "out"), get<bool>(cfg, "force"));
  PipelineHooks hooks;
  hooks.log = log;
  hooks.artifact_dir = out.path();
  const auto report = run_pipeline(config, hooks);
  manifest.inputs = report.provenance.value("dataset_hashes", json::object());
  manifest.outputs["checkpoints"] = report.provenance.value("checkpoints", json::object());
  manifest.outputs["metrics"] = file_hash(out.path() / "report" / "metrics.json");
  write_manifest(manifest, out.path());
  std::cout << report.text_tables();
  out.commit();
  log("wrote " + out.target().string());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mask-conditioned diffusion for phantom radiograph augmentation"};
  app.require_subcommand(1);
  app.fallthrough();
  std::optional<std::string> config_file;
  app.add_option("-c,--config", config_file,
                 "JSON config file; keys mirror the long flags (a section named after the "
                 "subcommand is used when present)");
  app.add_flag("-q,--quiet", g_quiet, "Suppress progress output");

  std::vector<Command> commands;
  auto make = [&](const std::string& name, const std::string& help) -> Command& {
    Command c;
    c.name = name;
    c.app = app.add_subcommand(name, help);
    c.settings = std::make_unique<Settings>(c.app);
    commands.push_back(std::move(c));
    return commands.back();
  };
  commands.reserve(8);

  {
    auto& c = make("phantom-gen", "Generate a phantom dataset");
    auto& s = *c.settings;
    s.require<std::string>("out", "Output dataset directory");
    s.add<int>("normal", 141, "Number of normal records");
    s.add<int>("cml", 59, "Number of CML records");
    s.add<int>("size", 32, "Image size in pixels");
    s.add<std::uint64_t>("seed", 0, "Generator seed");
    s.add<std::string>("prefix", "phantom", "Record id prefix");
    s.add<std::string>("description", "", "Free-text dataset description");
    s.add<int>("folds", 0, "Assign stratified folds (0 disables)");
    s.flag("force", false, "Replace an existing output directory");
    c.run = run_phantom_gen;
  }
  {
    auto& c = make("train-diffusion", "Train the mask-conditioned denoiser");
    add_train_settings(*c.settings, 3000, 8, 2e-4, 0.001, 0.995);
    c.run = run_train_diffusion;
  }
  {
    auto& c = make("train-guidance-classifier", "Train the noisy-input guidance classifier");
    add_train_settings(*c.settings, 2000, 10, 3e-4, 0.0, 0.0);
    c.run = run_train_classifier;
  }
  {
    auto& c = make("translate", "Translate normal records to a target class");
    auto& s = *c.settings;
    s.require<std::string>("data", "Input dataset directory");
    s.require<std::string>("denoiser", "Denoiser checkpoint (directory or stem)");
    s.add<std::string>("classifier", "", "Guidance classifier checkpoint (directory or stem)");
    s.require<std::string>("out", "Output dataset directory");
    s.add<std::string>("target", "cml", "Target class: normal or cml");
    s.add<double>("scale", 0.0, "Guidance gradient scale g");
    s.add<int>("start", -1, "Start step Z (negative selects 0.8 T)");
    s.add<int>("ddim_steps", 50, "Implicit sampling steps");
    s.add<double>("eta", 0.0, "Sampling stochasticity in [0, 1]");
    s.add<std::uint64_t>("seed", 0, "Noise seed");
    s.add<bool>("clip_x0", true, "Clamp the clean estimate to the data range");
    s.flag("allow_non_normal", false, "Also translate records not labelled normal");
    s.add<int>("limit", 0, "Translate at most this many records (0 = all)");
    s.add<std::string>("id_prefix", "synthetic", "Id prefix of generated records");
    s.flag("drop_empty_lesions", false, "Skip CML translations whose lesion mask is empty");
    s.add<std::string>("judge", "", "Reference classifier used to score the translations");
    s.flag("force", false, "Replace an existing output directory");
    c.run = [](const json& cfg, RunManifest& m) {
      json adjusted = cfg;
      for (const char* k : {"classifier", "judge"}) {
        if (adjusted[k] == "") adjusted[k] = nullptr;
      }
      run_translate(adjusted, m);
    };
  }
  {
    auto& c = make("eval-classify", "Cross-validated and independent-test classification");
    auto& s = *c.settings;
    s.require<std::string>("train", "Real training dataset");
    s.add<std::string>("test", "", "Independent test dataset");
    s.add<std::string>("augment", "", "Synthetic dataset added in the augmented condition");
    s.require<std::string>("out", "Report directory");
    s.add<int>("folds", 5, "Cross-validation folds (0 disables)");
    s.add<int>("seeds", 5, "Repetitions with different seeds");
    s.add<std::uint64_t>("seed", 0, "Root seed");
    add_downstream_settings(s);
    s.flag("force", false, "Replace an existing output directory");
    c.run = [](const json& cfg, RunManifest& m) {
      json adjusted = cfg;
      for (const char* k : {"test", "augment"}) {
        if (adjusted[k] == "") adjusted[k] = nullptr;
      }
      run_eval_classify(adjusted, m);
    };
  }
  {
    auto& c = make("eval-segment", "Lesion segmentation: real, augmented, real+augmented");
    auto& s = *c.settings;
    s.require<std::string>("train", "Real training dataset");
    s.require<std::string>("test", "Test dataset");
    s.add<std::string>("augment", "", "Synthetic dataset");
    s.require<std::string>("out", "Report directory");
    s.add<int>("seeds", 5, "Repetitions with different seeds");
    s.add<std::uint64_t>("seed", 0, "Root seed");
    add_downstream_settings(s);
    s.flag("force", false, "Replace an existing output directory");
    c.run = [](const json& cfg, RunManifest& m) {
      json adjusted = cfg;
      if (adjusted["augment"] == "") adjusted["augment"] = nullptr;
      run_eval_segment(adjusted, m);
    };
  }
  {
    auto& c = make("fid", "Frechet distance between two datasets");
    auto& s = *c.settings;
    s.positional("a", "First dataset");
    s.positional("b", "Second dataset");
    s.add<std::string>("extractor", "", "Reference classifier checkpoint");
    s.add<std::string>("extractor_data", "", "Dataset to train an extractor on (default: a)");
    s.add<std::string>("out", "", "Optional report directory");
    s.add<std::uint64_t>("seed", 0, "Extractor training seed");
    add_downstream_settings(s);
    s.flag("force", false, "Replace an existing output directory");
    c.run = [](const json& cfg, RunManifest& m) {
      json adjusted = cfg;
      for (const char* k : {"extractor", "extractor_data", "out"}) {
        if (adjusted[k] == "") adjusted[k] = nullptr;
      }
      run_fid(adjusted, m);
    };
  }
  json pipeline_patch = json::object();
  {
    auto& c = make("repro-all", "Run the full pipeline with pinned seeds");
    auto& s = *c.settings;
    s.add<std::string>("out", "", "Output directory");
    s.flag("smoke", false, "Start from the small smoke configuration");
    s.flag("print_config", false, "Print the resolved pipeline configuration and exit");
    s.add<std::uint64_t>("seed", 0, "Override the root seed");
    s.flag("force", false, "Replace an existing output directory");
    c.run = [&pipeline_patch](const json& cfg, RunManifest& m) {
      run_repro_all(cfg, m, pipeline_patch);
    };
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    enable_deterministic_mode();
    for (auto& c : commands) {
      if (!c.app->parsed()) continue;
      json section = config_section(config_file ? std::optional<fs::path>(*config_file) : std::nullopt,
                                    c.name);
      json resolved;
      if (c.name == "repro-all") {
        // The config file holds pipeline settings; flags hold the run options.
        pipeline_patch = section;
        resolved = c.settings->resolve(json::object());
        if (!c.app->get_option("--seed")->count()) resolved["seed"] = nullptr;
      } else {
        resolved = c.settings->resolve(section);
      }
      RunManifest manifest;
      manifest.command = c.name;
      manifest.arguments.assign(argv, argv + argc);
      manifest.config = resolved;
      if (config_file) manifest.config["config_file"] = *config_file;
      c.run(resolved, manifest);
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const UndefinedMetricError& e) {
    std::cerr << "undefined metric: " << e.what() << "\n";
    return kNumeric;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kNumeric;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUnexpected;
  }
  log("finished in " + std::to_string(elapsed_seconds()) + " s");
  return kOk;
}
