#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

#include "maskdiff/image.hpp"

namespace maskdiff {

enum class Label : int { normal = 0, cml = 1 };
enum class Provenance { real, synthetic, phantom };

std::string_view to_string(Label label);
std::string_view to_string(Provenance provenance);
Label parse_label(std::string_view text);
Provenance parse_provenance(std::string_view text);

/// One dataset record: image, bone mask, lesion mask, class label.
struct LabeledTriplet {
  std::string id;
  Image image;
  Mask bone_mask;
  Mask lesion_mask;
  Label label = Label::normal;
  Provenance provenance = Provenance::phantom;
  std::optional<int> fold;
  /// For synthetic records: id of the record the translation started from.
  std::optional<std::string> source_id;

  int64_t size() const { return image.height; }
};

/// Throws ConfigError if shapes disagree or a normal record carries a lesion.
void validate_triplet(const LabeledTriplet& triplet);

inline constexpr int kMinPhantomSize = 16;
inline constexpr std::string_view kPhantomGeneratorVersion = "bone-phantom/2";

/// Procedural distal-shaft phantom. Deterministic in (seed, label, size).
/// CML phantoms carry one or two crescent defects at the metaphyseal
/// corners; the lesion covers 0.5%..5% of the bone area.
LabeledTriplet generate_phantom(std::uint64_t seed, Label label, int size,
                                std::string id = {});

}  // namespace maskdiff
