#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "maskdiff/phantom.hpp"

namespace maskdiff {

inline constexpr int kManifestSchemaVersion = 1;

struct DatasetInfo {
  int64_t resolution = 0;
  std::string generator_version;
  std::uint64_t seed = 0;
  std::string description;
};

/// In-memory dataset. Serialized as a directory holding manifest.json and
/// images/<id>.png, bone/<id>.png, lesion/<id>.png.
struct Dataset {
  DatasetInfo info;
  std::vector<LabeledTriplet> records;

  std::size_t count(Label label) const;
  /// Records (by index) in the given fold / not in it.
  std::vector<std::size_t> in_fold(int fold) const;
  std::vector<std::size_t> outside_fold(int fold) const;
  Dataset subset(std::span<const std::size_t> indices) const;
};

/// Batched phantom generation; per-record seeds are keyed hashes of
/// (seed, id), so records are independent of generation order.
Dataset generate_corpus(int n_normal, int n_cml, int size, std::uint64_t seed,
                        std::string_view id_prefix = "phantom");

void save_dataset(const Dataset& dataset, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

/// Stratified k-fold assignment, written into each record's `fold`.
void split_folds(Dataset& dataset, int k, std::uint64_t seed);

/// Content hash over ids, labels and pixel data.
std::string dataset_hash(const Dataset& dataset);

/// Stacks records into a [B, 3, H, W] model-range tensor
/// (image, bone mask, lesion mask).
torch::Tensor stack_triplets(const Dataset& dataset,
                             std::span<const std::size_t> indices);
torch::Tensor stack_labels(const Dataset& dataset,
                           std::span<const std::size_t> indices);

}  // namespace maskdiff
