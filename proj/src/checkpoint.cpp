#include "maskdiff/checkpoint.hpp"

#include <cstdio>
#include <sstream>

#include "maskdiff/error.hpp"
#include "maskdiff/rng.hpp"
#include "png_io.hpp"

namespace maskdiff {

namespace fs = std::filesystem;
using nlohmann::json;

void to_json(json& j, const ScheduleConfig& c) {
  j = json{{"kind", to_string(c.kind)},
           {"steps", c.steps},
           {"beta_start", c.resolved_beta_start()},
           {"beta_end", c.resolved_beta_end()}};
}

void from_json(const json& j, ScheduleConfig& c) {
  c.kind = parse_schedule_kind(j.at("kind").get<std::string>());
  c.steps = j.at("steps").get<int>();
  c.beta_start = j.at("beta_start").get<double>();
  c.beta_end = j.at("beta_end").get<double>();
}

namespace {

fs::path with_suffix(const fs::path& stem, const char* suffix) {
  return fs::path(stem.string() + suffix);
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

std::string module_to_bytes(torch::nn::Module& module) {
  torch::serialize::OutputArchive archive;
  module.save(archive);
  std::ostringstream out;
  archive.save_to(out);
  return out.str();
}

void module_from_bytes(torch::nn::Module& module, const std::string& bytes) {
  torch::serialize::InputArchive archive;
  std::istringstream in(bytes);
  archive.load_from(in);
  module.load(archive);
}

void save_checkpoint(const fs::path& stem, torch::nn::Module& module,
                     const CheckpointMeta& meta) {
  if (stem.has_parent_path()) fs::create_directories(stem.parent_path());
  const auto blob = module_to_bytes(module);
  detail::write_file(with_suffix(stem, ".pt"), blob);
  json sidecar = {
      {"kind", meta.kind},
      {"architecture", meta.architecture},
      {"schedule", meta.schedule},
      {"weights", meta.weights},
      {"config_hash", meta.config_hash},
      {"seed", meta.seed},
      {"blob_checksum", hex64(fnv1a64(blob))},
      {"extra", meta.extra},
  };
  detail::write_file(with_suffix(stem, ".json"), sidecar.dump(2) + "\n");
}

CheckpointMeta read_checkpoint_meta(const fs::path& stem) {
  const auto path = with_suffix(stem, ".json");
  if (!fs::exists(path)) throw IoError("missing checkpoint sidecar " + path.string());
  try {
    const auto j = json::parse(detail::read_file(path));
    CheckpointMeta meta;
    meta.kind = j.at("kind").get<std::string>();
    meta.architecture = j.at("architecture");
    meta.schedule = j.at("schedule").get<ScheduleConfig>();
    meta.weights = j.at("weights").get<ChannelWeights>();
    meta.config_hash = j.value("config_hash", "");
    meta.seed = j.value("seed", std::uint64_t{0});
    meta.extra = j.value("extra", json::object());
    return meta;
  } catch (const json::exception& e) {
    throw IoError("malformed checkpoint sidecar " + path.string() + ": " + e.what());
  }
}

void load_checkpoint_params(const fs::path& stem, torch::nn::Module& module) {
  const auto blob_path = with_suffix(stem, ".pt");
  if (!fs::exists(blob_path)) throw IoError("missing checkpoint blob " + blob_path.string());
  const auto blob = detail::read_file(blob_path);
  const auto sidecar = json::parse(detail::read_file(with_suffix(stem, ".json")), nullptr, false);
  if (sidecar.is_discarded() || !sidecar.contains("blob_checksum")) {
    throw IoError("checkpoint sidecar for " + blob_path.string() + " is unreadable");
  }
  if (sidecar["blob_checksum"].get<std::string>() != hex64(fnv1a64(blob))) {
    throw IoError("checkpoint blob checksum mismatch: " + blob_path.string());
  }
  try {
    module_from_bytes(module, blob);
  } catch (const c10::Error& e) {
    throw IoError("cannot load " + blob_path.string() + ": " + e.what_without_backtrace());
  }
}

Denoiser load_denoiser(const fs::path& stem, CheckpointMeta* meta) {
  auto m = read_checkpoint_meta(stem);
  if (m.kind != "denoiser") throw ConfigError(stem.string() + " is not a denoiser checkpoint");
  Denoiser model(m.architecture.get<NetConfig>());
  load_checkpoint_params(stem, *model);
  model->eval();
  if (meta) *meta = std::move(m);
  return model;
}

GuidanceClassifier load_guidance_classifier(const fs::path& stem, CheckpointMeta* meta) {
  auto m = read_checkpoint_meta(stem);
  if (m.kind != "guidance-classifier") {
    throw ConfigError(stem.string() + " is not a guidance classifier checkpoint");
  }
  GuidanceClassifier model(m.architecture.get<NetConfig>());
  load_checkpoint_params(stem, *model);
  model->eval();
  if (meta) *meta = std::move(m);
  return model;
}

std::string parameter_hash(torch::nn::Module& module) {
  std::string acc;
  auto add = [&](const std::string& name, const torch::Tensor& t) {
    const auto c = t.detach().contiguous().to(torch::kCPU);
    acc += name;
    acc.append(static_cast<const char*>(c.data_ptr()), c.numel() * c.element_size());
  };
  for (const auto& p : module.named_parameters()) add(p.key(), p.value());
  for (const auto& b : module.named_buffers()) add(b.key(), b.value());
  return hex64(fnv1a64(acc));
}

}  // namespace maskdiff
