#include "maskdiff/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <random>
#include <set>

#include "json.hpp"

#include "maskdiff/error.hpp"
#include "maskdiff/rng.hpp"
#include "png_io.hpp"

namespace maskdiff {

namespace fs = std::filesystem;
using nlohmann::json;

std::size_t Dataset::count(Label label) const {
  return static_cast<std::size_t>(std::count_if(
      records.begin(), records.end(),
      [label](const LabeledTriplet& r) { return r.label == label; }));
}

std::vector<std::size_t> Dataset::in_fold(int fold) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (records[i].fold == fold) out.push_back(i);
  }
  return out;
}

std::vector<std::size_t> Dataset::outside_fold(int fold) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (records[i].fold != fold) out.push_back(i);
  }
  return out;
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Dataset out;
  out.info = info;
  out.records.reserve(indices.size());
  for (auto i : indices) out.records.push_back(records.at(i));
  return out;
}

Dataset generate_corpus(int n_normal, int n_cml, int size, std::uint64_t seed,
                        std::string_view id_prefix) {
  if (n_normal < 0 || n_cml < 0) throw ConfigError("class counts must be >= 0");
  Dataset ds;
  ds.info.resolution = size;
  ds.info.generator_version = std::string(kPhantomGeneratorVersion);
  ds.info.seed = seed;
  const int total = n_normal + n_cml;
  ds.records.reserve(static_cast<std::size_t>(total));
  char buf[32];
  for (int i = 0; i < total; ++i) {
    std::snprintf(buf, sizeof(buf), "-%05d", i);
    std::string id = std::string(id_prefix) + buf;
    const Label label = i < n_normal ? Label::normal : Label::cml;
    ds.records.push_back(generate_phantom(derive_seed(seed, id), label, size, id));
  }
  return ds;
}

namespace {

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string encode_image(const Image& image) {
  detail::GrayPng png{image.height, image.width, {}};
  png.pixels.resize(image.pixels.size());
  for (std::size_t i = 0; i < image.pixels.size(); ++i) {
    png.pixels[i] = static_cast<std::uint8_t>(
        std::lround(std::clamp(image.pixels[i], 0.0f, 1.0f) * 255.0f));
  }
  return detail::encode_png(png);
}

std::string encode_mask(const Mask& mask) {
  detail::GrayPng png{mask.height, mask.width, {}};
  png.pixels.resize(mask.pixels.size());
  for (std::size_t i = 0; i < mask.pixels.size(); ++i) {
    png.pixels[i] = mask.pixels[i] ? 255 : 0;
  }
  return detail::encode_png(png);
}

void check_id(const std::string& id) {
  if (id.empty() || id.find_first_of("/\\") != std::string::npos || id == "." || id == "..") {
    throw ConfigError("record id '" + id + "' is not a valid file stem");
  }
}

}  // namespace

void save_dataset(const Dataset& dataset, const fs::path& dir) {
  std::set<std::string> seen;
  for (const auto& r : dataset.records) {
    check_id(r.id);
    validate_triplet(r);
    if (!seen.insert(r.id).second) throw ConfigError("duplicate record id '" + r.id + "'");
  }
  for (const char* sub : {"images", "bone", "lesion"}) fs::create_directories(dir / sub);

  json entries = json::array();
  for (const auto& r : dataset.records) {
    const std::string name = r.id + ".png";
    const auto image_bytes = encode_image(r.image);
    const auto bone_bytes = encode_mask(r.bone_mask);
    const auto lesion_bytes = encode_mask(r.lesion_mask);
    detail::write_file(dir / "images" / name, image_bytes);
    detail::write_file(dir / "bone" / name, bone_bytes);
    detail::write_file(dir / "lesion" / name, lesion_bytes);
    json e = {
        {"id", r.id},
        {"label", to_string(r.label)},
        {"provenance", to_string(r.provenance)},
        {"image", "images/" + name},
        {"bone", "bone/" + name},
        {"lesion", "lesion/" + name},
        {"checksums",
         {{"image", hex64(fnv1a64(image_bytes))},
          {"bone", hex64(fnv1a64(bone_bytes))},
          {"lesion", hex64(fnv1a64(lesion_bytes))}}},
        {"fold", r.fold ? json(*r.fold) : json(nullptr)},
    };
    if (r.source_id) e["source_id"] = *r.source_id;
    entries.push_back(std::move(e));
  }
  json manifest = {
      {"schema_version", kManifestSchemaVersion},
      {"resolution", dataset.info.resolution},
      {"value_range", {0.0, 1.0}},
      {"generator_version", dataset.info.generator_version},
      {"seed", dataset.info.seed},
      {"description", dataset.info.description},
      {"records", std::move(entries)},
  };
  detail::write_file(dir / "manifest.json", manifest.dump(2) + "\n");
}

Dataset load_dataset(const fs::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  if (!fs::exists(manifest_path)) throw IoError("missing " + manifest_path.string());
  json manifest;
  try {
    manifest = json::parse(detail::read_file(manifest_path));
  } catch (const json::exception& e) {
    throw IoError("malformed manifest " + manifest_path.string() + ": " + e.what());
  }
  Dataset ds;
  try {
    if (manifest.at("schema_version").get<int>() != kManifestSchemaVersion) {
      throw IoError("unsupported manifest schema_version");
    }
    ds.info.resolution = manifest.at("resolution").get<int64_t>();
    ds.info.generator_version = manifest.value("generator_version", "");
    ds.info.seed = manifest.value("seed", std::uint64_t{0});
    ds.info.description = manifest.value("description", "");
    std::set<std::string> seen;
    for (const auto& e : manifest.at("records")) {
      LabeledTriplet r;
      r.id = e.at("id").get<std::string>();
      check_id(r.id);
      if (!seen.insert(r.id).second) throw IoError("duplicate record id '" + r.id + "'");
      r.label = parse_label(e.at("label").get<std::string>());
      r.provenance = parse_provenance(e.at("provenance").get<std::string>());
      if (!e.at("fold").is_null()) r.fold = e.at("fold").get<int>();
      if (e.contains("source_id")) r.source_id = e.at("source_id").get<std::string>();

      auto load_png = [&](const char* key) {
        const auto path = dir / e.at(key).get<std::string>();
        const std::string context = "record '" + r.id + "' " + key;
        if (!fs::exists(path)) throw IoError(context + ": missing file " + path.string());
        auto bytes = detail::read_file(path);
        if (hex64(fnv1a64(bytes)) != e.at("checksums").at(key).get<std::string>()) {
          throw IoError(context + ": checksum mismatch");
        }
        return detail::decode_png(bytes, context);
      };
      const auto img = load_png("image");
      r.image = Image(img.height, img.width);
      for (std::size_t i = 0; i < img.pixels.size(); ++i) {
        r.image.pixels[i] = static_cast<float>(img.pixels[i]) / 255.0f;
      }
      for (auto [key, mask] : {std::pair{"bone", &r.bone_mask}, std::pair{"lesion", &r.lesion_mask}}) {
        const auto png = load_png(key);
        *mask = Mask(png.height, png.width);
        for (std::size_t i = 0; i < png.pixels.size(); ++i) {
          mask->pixels[i] = png.pixels[i] >= 128 ? 1 : 0;
        }
      }
      try {
        validate_triplet(r);
      } catch (const ConfigError& err) {
        throw IoError(err.what());
      }
      ds.records.push_back(std::move(r));
    }
  } catch (const json::exception& e) {
    throw IoError("malformed manifest " + manifest_path.string() + ": " + e.what());
  } catch (const ConfigError& e) {
    throw IoError("malformed manifest " + manifest_path.string() + ": " + e.what());
  }
  return ds;
}

void split_folds(Dataset& dataset, int k, std::uint64_t seed) {
  if (k < 2) throw ConfigError("fold count must be >= 2");
  for (Label label : {Label::normal, Label::cml}) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < dataset.records.size(); ++i) {
      if (dataset.records[i].label == label) members.push_back(i);
    }
    if (members.size() < static_cast<std::size_t>(k)) {
      throw ConfigError("class '" + std::string(to_string(label)) + "' has " +
                        std::to_string(members.size()) + " records, fewer than " +
                        std::to_string(k) + " folds");
    }
    std::mt19937_64 engine(derive_seed(seed, "folds", static_cast<std::uint64_t>(label)));
    std::shuffle(members.begin(), members.end(), engine);
    for (std::size_t j = 0; j < members.size(); ++j) {
      dataset.records[members[j]].fold = static_cast<int>(j % static_cast<std::size_t>(k));
    }
  }
}

std::string dataset_hash(const Dataset& dataset) {
  std::uint64_t h = fnv1a64("dataset");
  auto mix = [&h](std::string_view bytes) { h = fnv1a64(std::string(reinterpret_cast<const char*>(&h), sizeof(h)) + std::string(bytes)); };
  for (const auto& r : dataset.records) {
    mix(r.id);
    mix(to_string(r.label));
    mix(std::string_view(reinterpret_cast<const char*>(r.image.pixels.data()),
                         r.image.pixels.size() * sizeof(float)));
    mix(std::string_view(reinterpret_cast<const char*>(r.bone_mask.pixels.data()),
                         r.bone_mask.pixels.size()));
    mix(std::string_view(reinterpret_cast<const char*>(r.lesion_mask.pixels.data()),
                         r.lesion_mask.pixels.size()));
  }
  return hex64(h);
}

torch::Tensor stack_triplets(const Dataset& dataset,
                             std::span<const std::size_t> indices) {
  std::vector<torch::Tensor> items;
  items.reserve(indices.size());
  for (auto i : indices) {
    const auto& r = dataset.records.at(i);
    items.push_back(torch::stack({image_to_tensor(r.image), mask_to_tensor(r.bone_mask),
                                  mask_to_tensor(r.lesion_mask)}));
  }
  if (items.empty()) throw ConfigError("stack_triplets: empty selection");
  return torch::stack(items);
}

torch::Tensor stack_labels(const Dataset& dataset,
                           std::span<const std::size_t> indices) {
  auto out = torch::empty({static_cast<int64_t>(indices.size())}, torch::kLong);
  auto* p = out.data_ptr<int64_t>();
  for (std::size_t j = 0; j < indices.size(); ++j) {
    p[j] = static_cast<int64_t>(dataset.records.at(indices[j]).label);
  }
  return out;
}

}  // namespace maskdiff
