#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <torch/torch.h>

#include "json.hpp"
#include "maskdiff/dataset.hpp"
#include "maskdiff/image.hpp"

namespace maskdiff {

/// Binary confusion counts with CML as the positive class.
struct ConfusionCounts {
  int64_t tp = 0;
  int64_t fp = 0;
  int64_t tn = 0;
  int64_t fn = 0;

  int64_t total() const { return tp + fp + tn + fn; }
  bool operator==(const ConfusionCounts&) const = default;
};

void to_json(nlohmann::json& j, const ConfusionCounts& c);
void from_json(const nlohmann::json& j, ConfusionCounts& c);

/// Each throws UndefinedMetricError when its denominator is zero.
double accuracy(const ConfusionCounts& c);
double sensitivity(const ConfusionCounts& c);
double specificity(const ConfusionCounts& c);

struct ClassificationMetrics {
  double accuracy = 0.0;
  double sensitivity = 0.0;
  double specificity = 0.0;
};

ClassificationMetrics classification_metrics(const ConfusionCounts& c);

/// 2|A and B| / (|A| + |B|); 1 when both masks are empty.
double dice(const Mask& a, const Mask& b);

struct DiceSummary {
  double mean = 0.0;
  double stdev = 0.0;  // sample standard deviation, 0 for a single item
  int64_t count = 0;
};

DiceSummary summarize_dice(const std::vector<double>& scores);

/// Fréchet distance between Gaussians fitted to two feature sets (rows are
/// samples). A ridge of `shrinkage` is added to both covariances.
double frechet_distance(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b,
                        double shrinkage = 1e-6);
/// Fréchet distance between two Gaussians given their moments.
double frechet_distance(const Eigen::VectorXd& mean_a, const Eigen::MatrixXd& cov_a,
                        const Eigen::VectorXd& mean_b, const Eigen::MatrixXd& cov_b);

struct DownstreamConfig {
  int iterations = 600;
  int batch_size = 16;
  double learning_rate = 1e-3;
  int base_channels = 16;
  std::uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const DownstreamConfig& c);
void from_json(const nlohmann::json& j, DownstreamConfig& c);

/// Small residual image classifier (image channel only). Its pooled
/// penultimate activations serve as the feature space for Fréchet scoring.
class PhantomClassifierImpl : public torch::nn::Module {
 public:
  explicit PhantomClassifierImpl(int64_t base_channels = 16);
  /// [B, 1, H, W] -> [B, feature_dim]
  torch::Tensor features(const torch::Tensor& x);
  /// [B, 1, H, W] -> logits [B, 2]
  torch::Tensor forward(const torch::Tensor& x);
  int64_t feature_dim() const { return feature_dim_; }
  int64_t base_channels() const { return base_channels_; }

 private:
  int64_t base_channels_;
  int64_t feature_dim_;
  torch::nn::Sequential stem_{nullptr};
  torch::nn::ModuleList blocks_{nullptr};
  torch::nn::Linear head_{nullptr};
};
TORCH_MODULE(PhantomClassifier);

/// Two-level encoder-decoder predicting lesion logits from the image.
class SegmenterImpl : public torch::nn::Module {
 public:
  explicit SegmenterImpl(int64_t base_channels = 16);
  /// [B, 1, H, W] -> logits [B, 1, H, W]
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Sequential enc1_{nullptr}, enc2_{nullptr}, mid_{nullptr};
  torch::nn::Sequential dec2_{nullptr}, dec1_{nullptr};
  torch::nn::Conv2d out_{nullptr};
};
TORCH_MODULE(Segmenter);

/// [B, 1, H, W] image tensor in model range.
torch::Tensor stack_images(const std::vector<Image>& images);
std::vector<Image> dataset_images(const Dataset& dataset);

PhantomClassifier train_phantom_classifier(const Dataset& train, const DownstreamConfig& config);
ConfusionCounts evaluate_phantom_classifier(PhantomClassifier& model, const Dataset& test);
/// Predicted labels for arbitrary images.
std::vector<Label> classify_images(PhantomClassifier& model, const std::vector<Image>& images);

/// Checkpoint as `<stem>.pt` / `<stem>.json` with kind "reference-classifier".
void save_phantom_classifier(const std::filesystem::path& stem, PhantomClassifier& model,
                             std::uint64_t seed, int64_t image_size);
PhantomClassifier load_phantom_classifier(const std::filesystem::path& stem);

ConfusionCounts train_eval_downstream_classifier(const Dataset& train, const Dataset& test,
                                                 const DownstreamConfig& config);

/// Trains on the lesion-bearing items of `train` only.
Segmenter train_segmenter(const Dataset& train, const DownstreamConfig& config);
/// Dice over the test items that carry a lesion.
DiceSummary evaluate_segmenter(Segmenter& model, const Dataset& test);
DiceSummary train_eval_segmenter(const Dataset& train, const Dataset& test,
                                 const DownstreamConfig& config);

/// Feature matrix (rows = images) from the classifier's pooled activations.
Eigen::MatrixXd extract_features(PhantomClassifier& model, const std::vector<Image>& images);
double fid_images(const std::vector<Image>& real, const std::vector<Image>& synthetic,
                  PhantomClassifier& extractor);

struct ClassificationRow {
  std::string condition;
  std::uint64_t seed = 0;
  ConfusionCounts counts;
};

struct SegmentationRow {
  std::string condition;
  std::uint64_t seed = 0;
  DiceSummary dice;
};

struct FidRow {
  std::string name;
  double value = 0.0;
};

struct MetricsReport {
  std::vector<ClassificationRow> classification;
  std::vector<SegmentationRow> segmentation;
  std::vector<FidRow> fid;
  /// Named scalar outcomes of the pipeline (rates, losses, chosen settings).
  nlohmann::json summary = nlohmann::json::object();
  /// Seeds, dataset hashes, checkpoint hashes, feature extractor identity.
  nlohmann::json provenance = nlohmann::json::object();
  /// Wall-clock seconds per stage; excluded from reproducibility comparisons.
  nlohmann::json timing = nlohmann::json::object();

  /// Full JSON including timing.
  nlohmann::json to_json() const;
  /// JSON without the timing section.
  nlohmann::json comparable_json() const;
  static MetricsReport from_json(const nlohmann::json& j);

  /// Writes metrics.json, classification.csv, segmentation.csv, fid.csv and
  /// tables.txt into `dir`.
  void write(const std::filesystem::path& dir) const;
  /// Plain-text tables: per-condition classification and Dice means, FID.
  std::string text_tables() const;
};

}  // namespace maskdiff
