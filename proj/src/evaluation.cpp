#include "maskdiff/evaluation.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <sstream>

#include <Eigen/Eigenvalues>

#include "maskdiff/checkpoint.hpp"
#include "maskdiff/error.hpp"
#include "maskdiff/rng.hpp"

namespace maskdiff {

using nlohmann::json;

void to_json(json& j, const ConfusionCounts& c) {
  j = json{{"tp", c.tp}, {"fp", c.fp}, {"tn", c.tn}, {"fn", c.fn}};
}

void from_json(const json& j, ConfusionCounts& c) {
  c.tp = j.at("tp").get<int64_t>();
  c.fp = j.at("fp").get<int64_t>();
  c.tn = j.at("tn").get<int64_t>();
  c.fn = j.at("fn").get<int64_t>();
}

namespace {

void check_counts(const ConfusionCounts& c) {
  if (c.tp < 0 || c.fp < 0 || c.tn < 0 || c.fn < 0) {
    throw ConfigError("confusion counts must be non-negative");
  }
}

double ratio(int64_t num, int64_t den, const char* name) {
  if (den == 0) throw UndefinedMetricError(std::string(name) + " is undefined: zero denominator");
  return static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace

double accuracy(const ConfusionCounts& c) {
  check_counts(c);
  return ratio(c.tp + c.tn, c.total(), "accuracy");
}

double sensitivity(const ConfusionCounts& c) {
  check_counts(c);
  return ratio(c.tp, c.tp + c.fn, "sensitivity");
}

double specificity(const ConfusionCounts& c) {
  check_counts(c);
  return ratio(c.tn, c.tn + c.fp, "specificity");
}

ClassificationMetrics classification_metrics(const ConfusionCounts& c) {
  return {accuracy(c), sensitivity(c), specificity(c)};
}

double dice(const Mask& a, const Mask& b) {
  if (a.height != b.height || a.width != b.width) {
    throw ConfigError("dice: mask shapes differ");
  }
  int64_t inter = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.pixels.size(); ++i) {
    const bool pa = a.pixels[i] != 0, pb = b.pixels[i] != 0;
    na += pa;
    nb += pb;
    inter += pa && pb;
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(na + nb);
}

DiceSummary summarize_dice(const std::vector<double>& scores) {
  DiceSummary s;
  s.count = static_cast<int64_t>(scores.size());
  if (scores.empty()) return s;
  s.mean = std::accumulate(scores.begin(), scores.end(), 0.0) / static_cast<double>(s.count);
  if (s.count > 1) {
    double acc = 0.0;
    for (double v : scores) acc += (v - s.mean) * (v - s.mean);
    s.stdev = std::sqrt(acc / static_cast<double>(s.count - 1));
  }
  return s;
}

double frechet_distance(const Eigen::VectorXd& mean_a, const Eigen::MatrixXd& cov_a,
                        const Eigen::VectorXd& mean_b, const Eigen::MatrixXd& cov_b) {
  const auto d = mean_a.size();
  if (mean_b.size() != d || cov_a.rows() != d || cov_a.cols() != d || cov_b.rows() != d ||
      cov_b.cols() != d) {
    throw ConfigError("frechet_distance: dimension mismatch");
  }
  if (!mean_a.allFinite() || !mean_b.allFinite() || !cov_a.allFinite() || !cov_b.allFinite()) {
    throw NumericError("frechet_distance: non-finite moments");
  }
  // Tr((A B)^(1/2)) = Tr((A^(1/2) B A^(1/2))^(1/2)), which stays symmetric.
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ea(cov_a);
  if (ea.info() != Eigen::Success) throw NumericError("frechet_distance: eigensolver failed");
  const Eigen::VectorXd roots = ea.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  const Eigen::MatrixXd sqrt_a = ea.eigenvectors() * roots.asDiagonal() * ea.eigenvectors().transpose();
  Eigen::MatrixXd inner = sqrt_a * cov_b * sqrt_a;
  inner = 0.5 * (inner + inner.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ei(inner, Eigen::EigenvaluesOnly);
  if (ei.info() != Eigen::Success) throw NumericError("frechet_distance: eigensolver failed");
  const double tr_sqrt = ei.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double value =
      (mean_a - mean_b).squaredNorm() + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt;
  if (!std::isfinite(value)) throw NumericError("frechet_distance: non-finite result");
  return std::max(0.0, value);
}

double frechet_distance(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, double shrinkage) {
  if (a.cols() != b.cols()) throw ConfigError("frechet_distance: feature dimensions differ");
  if (a.rows() < 2 || b.rows() < 2) {
    throw ConfigError("frechet_distance: each set needs at least two samples");
  }
  if (!a.allFinite() || !b.allFinite()) throw NumericError("frechet_distance: non-finite features");
  auto moments = [&](const Eigen::MatrixXd& x, Eigen::VectorXd& mean, Eigen::MatrixXd& cov) {
    mean = x.colwise().mean().transpose();
    const Eigen::MatrixXd centered = x.rowwise() - mean.transpose();
    cov = centered.transpose() * centered / static_cast<double>(x.rows() - 1);
    cov.diagonal().array() += shrinkage;
  };
  Eigen::VectorXd ma, mb;
  Eigen::MatrixXd ca, cb;
  moments(a, ma, ca);
  moments(b, mb, cb);
  return frechet_distance(ma, ca, mb, cb);
}

void DownstreamConfig::validate() const {
  std::vector<std::string> problems;
  if (iterations <= 0) problems.push_back("iterations must be > 0");
  if (batch_size <= 0) problems.push_back("batch_size must be > 0");
  if (!(learning_rate > 0.0)) problems.push_back("learning_rate must be > 0");
  if (base_channels < 4 || base_channels % 4 != 0) {
    problems.push_back("base_channels must be a positive multiple of 4");
  }
  if (!problems.empty()) {
    std::string msg = "invalid downstream config:";
    for (const auto& p : problems) msg += "\n  - " + p;
    throw ConfigError(msg);
  }
}

void to_json(json& j, const DownstreamConfig& c) {
  j = json{{"iterations", c.iterations},
           {"batch_size", c.batch_size},
           {"learning_rate", c.learning_rate},
           {"base_channels", c.base_channels},
           {"seed", c.seed}};
}

void from_json(const json& j, DownstreamConfig& c) {
  c.iterations = j.at("iterations").get<int>();
  c.batch_size = j.at("batch_size").get<int>();
  c.learning_rate = j.at("learning_rate").get<double>();
  c.base_channels = j.at("base_channels").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
}

namespace {

namespace nn = torch::nn;

nn::Sequential conv_norm(int64_t in, int64_t out, int64_t stride, bool relu) {
  nn::Sequential s(nn::Conv2d(nn::Conv2dOptions(in, out, 3).stride(stride).padding(1)),
                   nn::GroupNorm(nn::GroupNormOptions(4, out)));
  if (relu) s->push_back(nn::ReLU());
  return s;
}

class BasicBlockImpl : public nn::Module {
 public:
  BasicBlockImpl(int64_t in, int64_t out, int64_t stride) {
    a_ = register_module("a", conv_norm(in, out, stride, true));
    b_ = register_module("b", conv_norm(out, out, 1, false));
    if (in != out || stride != 1) {
      skip_ = register_module(
          "skip", nn::Sequential(nn::Conv2d(nn::Conv2dOptions(in, out, 1).stride(stride)),
                                 nn::GroupNorm(nn::GroupNormOptions(4, out))));
    }
  }
  torch::Tensor forward(const torch::Tensor& x) {
    auto h = b_->forward(a_->forward(x));
    return torch::relu(h + (skip_ ? skip_->forward(x) : x));
  }

 private:
  nn::Sequential a_{nullptr}, b_{nullptr}, skip_{nullptr};
};
TORCH_MODULE(BasicBlock);

nn::Sequential double_conv(int64_t in, int64_t out) {
  return nn::Sequential(nn::Conv2d(nn::Conv2dOptions(in, out, 3).padding(1)),
                        nn::GroupNorm(nn::GroupNormOptions(4, out)), nn::ReLU(),
                        nn::Conv2d(nn::Conv2dOptions(out, out, 3).padding(1)),
                        nn::GroupNorm(nn::GroupNormOptions(4, out)), nn::ReLU());
}

}  // namespace

PhantomClassifierImpl::PhantomClassifierImpl(int64_t base_channels)
    : base_channels_(base_channels), feature_dim_(4 * base_channels) {
  const auto c = base_channels;
  stem_ = register_module("stem", conv_norm(1, c, 1, true));
  blocks_ = register_module("blocks", nn::ModuleList());
  blocks_->push_back(BasicBlock(c, c, 1));
  blocks_->push_back(BasicBlock(c, 2 * c, 2));
  blocks_->push_back(BasicBlock(2 * c, 4 * c, 2));
  head_ = register_module("head", nn::Linear(4 * c, 2));
}

torch::Tensor PhantomClassifierImpl::features(const torch::Tensor& x) {
  auto h = stem_->forward(x);
  for (auto& b : *blocks_) h = b->as<BasicBlock>()->forward(h);
  return std::get<0>(h.flatten(2).max(2));
}

torch::Tensor PhantomClassifierImpl::forward(const torch::Tensor& x) {
  return head_->forward(features(x));
}

SegmenterImpl::SegmenterImpl(int64_t base_channels) {
  const auto c = base_channels;
  enc1_ = register_module("enc1", double_conv(1, c));
  enc2_ = register_module("enc2", double_conv(c, 2 * c));
  mid_ = register_module("mid", double_conv(2 * c, 4 * c));
  dec2_ = register_module("dec2", double_conv(6 * c, 2 * c));
  dec1_ = register_module("dec1", double_conv(3 * c, c));
  out_ = register_module("out", nn::Conv2d(nn::Conv2dOptions(c, 1, 1)));
  // Lesion pixels are rare; start from a 1% foreground prior.
  torch::NoGradGuard no_grad;
  out_->bias.fill_(std::log(0.01 / 0.99));
}

torch::Tensor SegmenterImpl::forward(const torch::Tensor& x) {
  namespace F = torch::nn::functional;
  const auto up = F::InterpolateFuncOptions().scale_factor(std::vector<double>{2.0, 2.0}).mode(torch::kNearest);
  const auto e1 = enc1_->forward(x);
  const auto e2 = enc2_->forward(F::max_pool2d(e1, F::MaxPool2dFuncOptions(2)));
  const auto m = mid_->forward(F::max_pool2d(e2, F::MaxPool2dFuncOptions(2)));
  const auto d2 = dec2_->forward(torch::cat({F::interpolate(m, up), e2}, 1));
  const auto d1 = dec1_->forward(torch::cat({F::interpolate(d2, up), e1}, 1));
  return out_->forward(d1);
}

torch::Tensor stack_images(const std::vector<Image>& images) {
  std::vector<torch::Tensor> parts;
  parts.reserve(images.size());
  for (const auto& im : images) parts.push_back(image_to_tensor(im).unsqueeze(0));
  if (parts.empty()) throw ConfigError("no images to stack");
  return torch::stack(parts);
}

std::vector<Image> dataset_images(const Dataset& dataset) {
  std::vector<Image> out;
  out.reserve(dataset.records.size());
  for (const auto& r : dataset.records) out.push_back(r.image);
  return out;
}

namespace {

torch::Tensor label_tensor(const Dataset& ds) {
  std::vector<int64_t> v;
  for (const auto& r : ds.records) v.push_back(static_cast<int64_t>(r.label));
  return torch::tensor(v, torch::kLong);
}

torch::Tensor lesion_tensor(const Dataset& ds) {
  std::vector<torch::Tensor> parts;
  for (const auto& r : ds.records) {
    parts.push_back(
        torch::from_blob(const_cast<uint8_t*>(r.lesion_mask.pixels.data()),
                         {1, r.lesion_mask.height, r.lesion_mask.width}, torch::kUInt8)
            .to(torch::kFloat)
            .clamp_max(1.0));
  }
  return torch::stack(parts);
}

void check_train_set(const Dataset& train) {
  if (train.records.empty()) throw ConfigError("downstream training set is empty");
  const auto h = train.records.front().image.height;
  for (const auto& r : train.records) {
    if (r.image.height != h || r.image.width != h) {
      throw ConfigError("downstream training set mixes resolutions ('" + r.id + "')");
    }
  }
}

template <typename Fn>
void for_chunks(int64_t n, Fn fn) {
  constexpr int64_t chunk = 64;
  for (int64_t b = 0; b < n; b += chunk) fn(b, std::min(n, b + chunk));
}

}  // namespace

PhantomClassifier train_phantom_classifier(const Dataset& train, const DownstreamConfig& config) {
  config.validate();
  check_train_set(train);
  if (train.count(Label::normal) == 0 || train.count(Label::cml) == 0) {
    throw ConfigError("downstream classifier needs both classes in the training set");
  }
  const auto x = stack_images(dataset_images(train));
  const auto y = label_tensor(train);
  torch::manual_seed(derive_seed(config.seed, "phantom-classifier-init"));
  PhantomClassifier model(config.base_channels);
  model->train();
  torch::optim::Adam opt(model->parameters(), torch::optim::AdamOptions(config.learning_rate));
  auto gen = make_generator(derive_seed(config.seed, "phantom-classifier-train"));
  for (int it = 0; it < config.iterations; ++it) {
    const auto idx = torch::randint(x.size(0), {config.batch_size}, gen, torch::kLong);
    opt.zero_grad();
    const auto loss = torch::cross_entropy_loss(model->forward(x.index_select(0, idx)),
                                                y.index_select(0, idx));
    if (!std::isfinite(loss.item<double>())) {
      throw NumericError("downstream classifier loss became non-finite at iteration " +
                         std::to_string(it + 1));
    }
    loss.backward();
    torch::nn::utils::clip_grad_norm_(model->parameters(), 1.0);
    opt.step();
  }
  model->eval();
  return model;
}

std::vector<Label> classify_images(PhantomClassifier& model, const std::vector<Image>& images) {
  if (images.empty()) return {};
  torch::NoGradGuard no_grad;
  model->eval();
  const auto x = stack_images(images);
  std::vector<Label> out;
  for_chunks(x.size(0), [&](int64_t b, int64_t e) {
    const auto pred = model->forward(x.slice(0, b, e)).argmax(1);
    for (int64_t i = 0; i < pred.size(0); ++i) out.push_back(static_cast<Label>(pred[i].item<int64_t>()));
  });
  return out;
}

ConfusionCounts evaluate_phantom_classifier(PhantomClassifier& model, const Dataset& test) {
  const auto pred = classify_images(model, dataset_images(test));
  ConfusionCounts c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool truth = test.records[i].label == Label::cml;
    const bool p = pred[i] == Label::cml;
    if (truth && p) ++c.tp;
    if (truth && !p) ++c.fn;
    if (!truth && p) ++c.fp;
    if (!truth && !p) ++c.tn;
  }
  return c;
}

void save_phantom_classifier(const std::filesystem::path& stem, PhantomClassifier& model,
                             std::uint64_t seed, int64_t image_size) {
  CheckpointMeta meta;
  meta.kind = "reference-classifier";
  meta.architecture = {{"base_channels", model->base_channels()}, {"image_size", image_size}};
  meta.seed = seed;
  save_checkpoint(stem, *model, meta);
}

PhantomClassifier load_phantom_classifier(const std::filesystem::path& stem) {
  const auto meta = read_checkpoint_meta(stem);
  if (meta.kind != "reference-classifier") {
    throw ConfigError("checkpoint " + stem.string() + " holds a '" + meta.kind +
                      "', expected a reference-classifier");
  }
  PhantomClassifier model(meta.architecture.at("base_channels").get<int64_t>());
  load_checkpoint_params(stem, *model);
  model->eval();
  return model;
}

ConfusionCounts train_eval_downstream_classifier(const Dataset& train, const Dataset& test,
                                                 const DownstreamConfig& config) {
  auto model = train_phantom_classifier(train, config);
  return evaluate_phantom_classifier(model, test);
}

Segmenter train_segmenter(const Dataset& train, const DownstreamConfig& config) {
  config.validate();
  check_train_set(train);
  std::vector<std::size_t> lesion_idx;
  for (std::size_t i = 0; i < train.records.size(); ++i) {
    if (train.records[i].lesion_mask.count() > 0) lesion_idx.push_back(i);
  }
  if (lesion_idx.empty()) throw ConfigError("segmenter training set contains no lesion pixels");
  if (train.records.front().image.height % 4 != 0) {
    throw ConfigError("segmenter needs image sizes divisible by 4");
  }
  const auto lesions = train.subset(lesion_idx);
  const auto x = stack_images(dataset_images(lesions));
  const auto y = lesion_tensor(lesions);
  torch::manual_seed(derive_seed(config.seed, "segmenter-init"));
  Segmenter model(config.base_channels);
  model->train();
  torch::optim::Adam opt(model->parameters(), torch::optim::AdamOptions(config.learning_rate));
  auto gen = make_generator(derive_seed(config.seed, "segmenter-train"));
  for (int it = 0; it < config.iterations; ++it) {
    const auto idx = torch::randint(x.size(0), {config.batch_size}, gen, torch::kLong);
    const auto target = y.index_select(0, idx);
    opt.zero_grad();
    const auto logits = model->forward(x.index_select(0, idx));
    const auto prob = torch::sigmoid(logits);
    const auto soft_dice =
        (2.0 * (prob * target).sum() + 1.0) / (prob.sum() + target.sum() + 1.0);
    const auto loss =
        torch::binary_cross_entropy_with_logits(logits, target) + (1.0 - soft_dice);
    if (!std::isfinite(loss.item<double>())) {
      throw NumericError("segmenter loss became non-finite at iteration " +
                         std::to_string(it + 1));
    }
    loss.backward();
    torch::nn::utils::clip_grad_norm_(model->parameters(), 1.0);
    opt.step();
  }
  model->eval();
  return model;
}

DiceSummary evaluate_segmenter(Segmenter& model, const Dataset& test) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < test.records.size(); ++i) {
    if (test.records[i].lesion_mask.count() > 0) idx.push_back(i);
  }
  if (idx.empty()) throw ConfigError("segmentation test set has no lesion-bearing items");
  const auto sub = test.subset(idx);
  torch::NoGradGuard no_grad;
  model->eval();
  const auto x = stack_images(dataset_images(sub));
  std::vector<double> scores;
  for_chunks(x.size(0), [&](int64_t b, int64_t e) {
    const auto logits = model->forward(x.slice(0, b, e));
    for (int64_t i = b; i < e; ++i) {
      const auto pred = mask_from_tensor(logits[i - b][0]);
      scores.push_back(dice(pred, sub.records[static_cast<std::size_t>(i)].lesion_mask));
    }
  });
  return summarize_dice(scores);
}

DiceSummary train_eval_segmenter(const Dataset& train, const Dataset& test,
                                 const DownstreamConfig& config) {
  auto model = train_segmenter(train, config);
  return evaluate_segmenter(model, test);
}

Eigen::MatrixXd extract_features(PhantomClassifier& model, const std::vector<Image>& images) {
  if (images.empty()) throw ConfigError("no images to extract features from");
  torch::NoGradGuard no_grad;
  model->eval();
  const auto x = stack_images(images);
  Eigen::MatrixXd out(x.size(0), model->feature_dim());
  for_chunks(x.size(0), [&](int64_t b, int64_t e) {
    const auto f = model->features(x.slice(0, b, e)).to(torch::kDouble).contiguous();
    const auto acc = f.accessor<double, 2>();
    for (int64_t i = 0; i < f.size(0); ++i) {
      for (int64_t k = 0; k < f.size(1); ++k) out(b + i, k) = acc[i][k];
    }
  });
  return out;
}

double fid_images(const std::vector<Image>& real, const std::vector<Image>& synthetic,
                  PhantomClassifier& extractor) {
  return frechet_distance(extract_features(extractor, real),
                          extract_features(extractor, synthetic));
}

namespace {

json optional_metric(double (*fn)(const ConfusionCounts&), const ConfusionCounts& c) {
  try {
    return fn(c);
  } catch (const UndefinedMetricError&) {
    return nullptr;
  }
}

std::string fmt(double v, int precision = 4) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(precision) << v;
  return s.str();
}

std::string pct_cell(const std::vector<double>& values) {
  if (values.empty()) return "n/a";
  const auto s = summarize_dice(values);
  return fmt(100.0 * s.mean, 2) + " +/- " + fmt(100.0 * s.stdev, 2);
}

}  // namespace

json MetricsReport::to_json() const {
  auto j = comparable_json();
  j["timing"] = timing;
  return j;
}

json MetricsReport::comparable_json() const {
  json cls = json::array();
  for (const auto& r : classification) {
    cls.push_back({{"condition", r.condition},
                   {"seed", r.seed},
                   {"counts", r.counts},
                   {"accuracy", optional_metric(&accuracy, r.counts)},
                   {"sensitivity", optional_metric(&sensitivity, r.counts)},
                   {"specificity", optional_metric(&specificity, r.counts)}});
  }
  json seg = json::array();
  for (const auto& r : segmentation) {
    seg.push_back({{"condition", r.condition},
                   {"seed", r.seed},
                   {"dice_mean", r.dice.mean},
                   {"dice_stdev", r.dice.stdev},
                   {"count", r.dice.count}});
  }
  json fids = json::array();
  for (const auto& r : fid) fids.push_back({{"name", r.name}, {"value", r.value}});
  return json{{"schema_version", 1}, {"classification", cls}, {"segmentation", seg},
              {"fid", fids},         {"summary", summary},    {"provenance", provenance}};
}

MetricsReport MetricsReport::from_json(const json& j) {
  MetricsReport r;
  for (const auto& c : j.at("classification")) {
    r.classification.push_back(
        {c.at("condition").get<std::string>(), c.at("seed").get<std::uint64_t>(),
         c.at("counts").get<ConfusionCounts>()});
  }
  for (const auto& s : j.at("segmentation")) {
    r.segmentation.push_back({s.at("condition").get<std::string>(),
                              s.at("seed").get<std::uint64_t>(),
                              {s.at("dice_mean").get<double>(), s.at("dice_stdev").get<double>(),
                               s.at("count").get<int64_t>()}});
  }
  for (const auto& f : j.at("fid")) {
    r.fid.push_back({f.at("name").get<std::string>(), f.at("value").get<double>()});
  }
  r.summary = j.value("summary", json::object());
  r.provenance = j.value("provenance", json::object());
  r.timing = j.value("timing", json::object());
  return r;
}

std::string MetricsReport::text_tables() const {
  std::ostringstream out;
  if (!classification.empty()) {
    std::map<std::string, std::array<std::vector<double>, 3>> by_condition;
    std::vector<std::string> order;
    for (const auto& r : classification) {
      if (!by_condition.count(r.condition)) order.push_back(r.condition);
      auto& cell = by_condition[r.condition];
      const auto push = [&](std::vector<double>& v, double (*fn)(const ConfusionCounts&)) {
        try {
          v.push_back(fn(r.counts));
        } catch (const UndefinedMetricError&) {
        }
      };
      push(cell[0], &accuracy);
      push(cell[1], &sensitivity);
      push(cell[2], &specificity);
    }
    out << "Classification (mean +/- stdev over seeds, %)\n";
    out << std::left << std::setw(22) << "condition" << std::setw(20) << "accuracy"
        << std::setw(20) << "sensitivity" << "specificity\n";
    for (const auto& name : order) {
      const auto& cell = by_condition[name];
      out << std::left << std::setw(22) << name << std::setw(20) << pct_cell(cell[0])
          << std::setw(20) << pct_cell(cell[1]) << pct_cell(cell[2]) << "\n";
    }
    out << "\n";
  }
  if (!segmentation.empty()) {
    std::map<std::string, std::vector<double>> by_condition;
    std::vector<std::string> order;
    for (const auto& r : segmentation) {
      if (!by_condition.count(r.condition)) order.push_back(r.condition);
      by_condition[r.condition].push_back(r.dice.mean);
    }
    out << "Segmentation (mean Dice over seeds)\n";
    out << std::left << std::setw(22) << "condition" << "dice\n";
    for (const auto& name : order) {
      const auto s = summarize_dice(by_condition[name]);
      out << std::left << std::setw(22) << name << fmt(s.mean, 3) << " +/- " << fmt(s.stdev, 3)
          << "\n";
    }
    out << "\n";
  }
  if (!fid.empty()) {
    out << "Frechet distance (phantom-classifier features)\n";
    for (const auto& f : fid) out << std::left << std::setw(32) << f.name << fmt(f.value) << "\n";
  }
  return out.str();
}

void MetricsReport::write(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  auto open = [&](const char* name) {
    std::ofstream f(dir / name);
    if (!f) throw IoError("cannot write " + (dir / name).string());
    return f;
  };
  {
    auto f = open("metrics.json");
    f << to_json().dump(2) << "\n";
  }
  {
    auto f = open("classification.csv");
    f << "condition,seed,tp,fp,tn,fn,accuracy,sensitivity,specificity\n";
    for (const auto& r : classification) {
      const auto cell = [&](double (*fn)(const ConfusionCounts&)) {
        const auto v = optional_metric(fn, r.counts);
        return v.is_null() ? std::string() : fmt(v.get<double>(), 6);
      };
      f << r.condition << ',' << r.seed << ',' << r.counts.tp << ',' << r.counts.fp << ','
        << r.counts.tn << ',' << r.counts.fn << ',' << cell(&accuracy) << ','
        << cell(&sensitivity) << ',' << cell(&specificity) << "\n";
    }
  }
  {
    auto f = open("segmentation.csv");
    f << "condition,seed,dice_mean,dice_stdev,count\n";
    for (const auto& r : segmentation) {
      f << r.condition << ',' << r.seed << ',' << fmt(r.dice.mean, 6) << ','
        << fmt(r.dice.stdev, 6) << ',' << r.dice.count << "\n";
    }
  }
  {
    auto f = open("fid.csv");
    f << "name,value\n";
    for (const auto& r : fid) f << r.name << ',' << fmt(r.value, 6) << "\n";
  }
  {
    auto f = open("tables.txt");
    f << text_tables();
  }
}

}  // namespace maskdiff
