#include "doctest.h"

#include <cmath>

#include "maskdiff/error.hpp"
#include "maskdiff/phantom.hpp"

using namespace maskdiff;

namespace {

// Lesion pixels must lie in the bone, within a band of the bone boundary.
bool lesion_in_boundary_band(const LabeledTriplet& t, double band) {
  const auto& bone = t.bone_mask;
  for (int64_t r = 0; r < bone.height; ++r) {
    for (int64_t c = 0; c < bone.width; ++c) {
      if (!t.lesion_mask.at(r, c)) continue;
      if (!bone.at(r, c)) return false;
      double best = 1e9;
      for (int64_t y = -1; y <= bone.height; ++y) {
        for (int64_t x = -1; x <= bone.width; ++x) {
          const bool outside = y < 0 || x < 0 || y >= bone.height || x >= bone.width || !bone.at(y, x);
          if (outside) best = std::min(best, std::hypot(double(y - r), double(x - c)));
        }
      }
      if (best > band) return false;
    }
  }
  return true;
}

}  // namespace

TEST_SUITE("phantom") {

TEST_CASE("deterministic in seed, label and size") {
  for (auto label : {Label::normal, Label::cml}) {
    const auto a = generate_phantom(42, label, 32, "x");
    const auto b = generate_phantom(42, label, 32, "x");
    CHECK(a.image == b.image);
    CHECK(a.bone_mask == b.bone_mask);
    CHECK(a.lesion_mask == b.lesion_mask);
    CHECK_FALSE(generate_phantom(43, label, 32, "x").image == a.image);
  }
}

TEST_CASE("normal phantoms carry no lesion") {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto t = generate_phantom(seed, Label::normal, 32);
    CHECK(t.lesion_mask.empty());
    CHECK(t.bone_mask.count() > 0);
    CHECK_NOTHROW(validate_triplet(t));
  }
}

TEST_CASE("image range and shapes") {
  const auto t = generate_phantom(9, Label::cml, 48);
  CHECK(t.image.height == 48);
  CHECK(t.bone_mask.width == 48);
  for (float v : t.image.pixels) {
    CHECK(std::isfinite(v));
    CHECK(v >= 0.0f);
    CHECK(v <= 1.0f);
  }
}

TEST_CASE("lesion area fraction sweep over 1000 CML phantoms") {
  int in_range = 0;
  int in_band = 0;
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const auto t = generate_phantom(seed * 7919 + 1, Label::cml, 32);
    const double frac = double(t.lesion_mask.count()) / double(t.bone_mask.count());
    if (frac >= 0.005 && frac <= 0.05) ++in_range;
    if (seed < 100 && lesion_in_boundary_band(t, 0.22 * 32)) ++in_band;
  }
  CHECK(in_range == 1000);
  CHECK(in_band == 100);
}

TEST_CASE("invalid size") {
  CHECK_THROWS_AS(generate_phantom(1, Label::normal, 15), ConfigError);
  CHECK_THROWS_AS(generate_phantom(1, Label::normal, 0), ConfigError);
}

TEST_CASE("validate_triplet rejects lesion on normal") {
  auto t = generate_phantom(3, Label::cml, 32);
  t.label = Label::normal;
  CHECK_THROWS_AS(validate_triplet(t), ConfigError);
}

}
