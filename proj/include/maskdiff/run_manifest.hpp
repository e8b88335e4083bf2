#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

namespace maskdiff {

inline constexpr std::string_view kArtifactVersion = "maskdiff/1.0.0";

/// Record of one command invocation, written next to its outputs.
struct RunManifest {
  std::string command;
  std::vector<std::string> arguments;
  nlohmann::json config = nlohmann::json::object();  // fully resolved
  nlohmann::json seeds = nlohmann::json::object();
  nlohmann::json inputs = nlohmann::json::object();   // name -> content hash
  nlohmann::json outputs = nlohmann::json::object();  // name -> content hash
  double wall_clock_seconds = 0.0;
  std::string artifact_version{kArtifactVersion};

  nlohmann::json to_json() const;
  void write(const std::filesystem::path& path) const;
};

/// Output directory that only appears under its final name once committed.
/// Files are written into a sibling staging directory; commit() renames it.
/// An uncommitted staging directory is removed on destruction.
class AtomicOutputDir {
 public:
  /// Throws IoError if `target` exists and `overwrite` is false.
  AtomicOutputDir(std::filesystem::path target, bool overwrite);
  ~AtomicOutputDir();
  AtomicOutputDir(const AtomicOutputDir&) = delete;
  AtomicOutputDir& operator=(const AtomicOutputDir&) = delete;

  const std::filesystem::path& path() const { return staging_; }
  const std::filesystem::path& target() const { return target_; }
  void commit();

 private:
  std::filesystem::path target_;
  std::filesystem::path staging_;
  bool overwrite_;
  bool committed_ = false;
};

/// Hex content hash of a file.
std::string file_hash(const std::filesystem::path& path);

}  // namespace maskdiff
