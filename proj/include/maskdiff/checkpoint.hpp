#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <torch/torch.h>

#include "json.hpp"
#include "maskdiff/models.hpp"
#include "maskdiff/schedule.hpp"

namespace maskdiff {

void to_json(nlohmann::json& j, const ScheduleConfig& c);
void from_json(const nlohmann::json& j, ScheduleConfig& c);

/// Sidecar metadata stored next to the parameter blob.
struct CheckpointMeta {
  std::string kind;  // "denoiser", "guidance-classifier", "reference-classifier", ...
  nlohmann::json architecture;
  ScheduleConfig schedule;
  ChannelWeights weights;
  std::string config_hash;
  std::uint64_t seed = 0;
  nlohmann::json extra = nlohmann::json::object();
};

/// Writes `<stem>.pt` (parameters and buffers) and `<stem>.json`.
void save_checkpoint(const std::filesystem::path& stem,
                     torch::nn::Module& module, const CheckpointMeta& meta);
CheckpointMeta read_checkpoint_meta(const std::filesystem::path& stem);
/// Loads parameters into an already-constructed module; verifies the blob
/// checksum recorded in the sidecar.
void load_checkpoint_params(const std::filesystem::path& stem,
                            torch::nn::Module& module);

/// Serializes parameters to/from an in-memory buffer.
std::string module_to_bytes(torch::nn::Module& module);
void module_from_bytes(torch::nn::Module& module, const std::string& bytes);

/// Content hash over parameter and buffer names and values.
std::string parameter_hash(torch::nn::Module& module);

Denoiser load_denoiser(const std::filesystem::path& stem, CheckpointMeta* meta = nullptr);
GuidanceClassifier load_guidance_classifier(const std::filesystem::path& stem,
                                            CheckpointMeta* meta = nullptr);

}  // namespace maskdiff
