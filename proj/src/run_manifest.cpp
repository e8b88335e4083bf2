#include "maskdiff/run_manifest.hpp"

#include <fstream>
#include <sstream>

#include <unistd.h>

#include "maskdiff/error.hpp"
#include "maskdiff/rng.hpp"

namespace maskdiff {

namespace fs = std::filesystem;
using nlohmann::json;

json RunManifest::to_json() const {
  return json{{"command", command},
              {"arguments", arguments},
              {"config", config},
              {"seeds", seeds},
              {"inputs", inputs},
              {"outputs", outputs},
              {"wall_clock_seconds", wall_clock_seconds},
              {"artifact_version", artifact_version}};
}

void RunManifest::write(const fs::path& path) const {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write run manifest " + path.string());
  out << to_json().dump(2) << "\n";
}

AtomicOutputDir::AtomicOutputDir(fs::path target, bool overwrite)
    : target_(std::move(target)), overwrite_(overwrite) {
  if (target_.empty()) throw ConfigError("output directory must not be empty");
  if (fs::exists(target_) && !overwrite_) {
    throw IoError("output " + target_.string() + " already exists (use --force to replace it)");
  }
  const auto parent = target_.has_parent_path() ? target_.parent_path() : fs::path(".");
  std::error_code ec;
  fs::create_directories(parent, ec);
  if (ec) throw IoError("cannot create " + parent.string() + ": " + ec.message());
  staging_ = parent / ("." + target_.filename().string() + ".staging-" + std::to_string(::getpid()));
  fs::remove_all(staging_, ec);
  fs::create_directories(staging_, ec);
  if (ec) throw IoError("cannot create staging directory " + staging_.string() + ": " + ec.message());
}

AtomicOutputDir::~AtomicOutputDir() {
  if (!committed_) {
    std::error_code ec;
    fs::remove_all(staging_, ec);
  }
}

void AtomicOutputDir::commit() {
  std::error_code ec;
  if (fs::exists(target_)) {
    if (!overwrite_) throw IoError("output " + target_.string() + " appeared while running");
    fs::remove_all(target_, ec);
    if (ec) throw IoError("cannot replace " + target_.string() + ": " + ec.message());
  }
  fs::rename(staging_, target_, ec);
  if (ec) throw IoError("cannot move outputs into " + target_.string() + ": " + ec.message());
  committed_ = true;
}

std::string file_hash(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fnv1a64(ss.str())));
  return buf;
}

}  // namespace maskdiff
