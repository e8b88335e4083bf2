#include "maskdiff/phantom.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <random>

#include "maskdiff/error.hpp"
#include "maskdiff/rng.hpp"

namespace maskdiff {

std::string_view to_string(Label label) {
  return label == Label::normal ? "normal" : "cml";
}

std::string_view to_string(Provenance provenance) {
  switch (provenance) {
    case Provenance::real: return "real";
    case Provenance::synthetic: return "synthetic";
    case Provenance::phantom: return "phantom";
  }
  return "unknown";
}

Label parse_label(std::string_view text) {
  if (text == "normal" || text == "0") return Label::normal;
  if (text == "cml" || text == "CML" || text == "1") return Label::cml;
  throw ConfigError("unknown label '" + std::string(text) + "'");
}

Provenance parse_provenance(std::string_view text) {
  if (text == "real") return Provenance::real;
  if (text == "synthetic") return Provenance::synthetic;
  if (text == "phantom") return Provenance::phantom;
  throw ConfigError("unknown provenance '" + std::string(text) + "'");
}

void validate_triplet(const LabeledTriplet& t) {
  const auto h = t.image.height, w = t.image.width;
  if (h <= 0 || w <= 0 ||
      t.image.pixels.size() != static_cast<std::size_t>(h * w)) {
    throw ConfigError("record '" + t.id + "': malformed image");
  }
  if (t.bone_mask.height != h || t.bone_mask.width != w ||
      t.lesion_mask.height != h || t.lesion_mask.width != w) {
    throw ConfigError("record '" + t.id + "': mask shape differs from image");
  }
  if (t.label == Label::normal && !t.lesion_mask.empty()) {
    throw ConfigError("record '" + t.id + "': normal record with lesion pixels");
  }
}

namespace {

struct Point {
  double x;
  double y;
};

double smoothstep(double e0, double e1, double x) {
  const double u = std::clamp((x - e0) / (e1 - e0), 0.0, 1.0);
  return u * u * (3.0 - 2.0 * u);
}

// Geometry in normalized coordinates (x right, y down, both in [0, 1]).
struct BoneShape {
  double center_x;
  double tilt;
  double shaft_half_width;
  double flare;
  double flare_start;
  double physis;
  double bulge;
  double cortex;

  double center(double y) const { return center_x + tilt * (y - physis); }
  double half_width(double y) const {
    return shaft_half_width + flare * smoothstep(flare_start, physis, y);
  }
  bool contains(double x, double y) const {
    const double hw = half_width(std::min(y, physis));
    const double d = (x - center(y)) / hw;
    if (std::abs(d) > 1.0) return false;
    return y <= physis + bulge * (1.0 - d * d);
  }
  Point corner(int side) const {
    const double hw = half_width(physis);
    return {center(physis) + side * hw, physis};
  }
};

// Crescent: inside the outer disk, outside the inner disk.
struct Crescent {
  Point outer;
  double outer_r;
  Point inner;
  double inner_r;

  bool contains(double x, double y) const {
    const double dxo = x - outer.x, dyo = y - outer.y;
    const double dxi = x - inner.x, dyi = y - inner.y;
    return dxo * dxo + dyo * dyo <= outer_r * outer_r &&
           dxi * dxi + dyi * dyi > inner_r * inner_r;
  }
};

class Sampler {
 public:
  explicit Sampler(std::uint64_t seed) : engine_(seed) {}
  double uniform(double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(engine_);
  }
  double normal() { return std::normal_distribution<double>(0.0, 1.0)(engine_); }
  bool coin() { return uniform(0.0, 1.0) < 0.5; }

 private:
  std::mt19937_64 engine_;
};

BoneShape sample_bone(Sampler& s) {
  BoneShape b{};
  b.center_x = 0.5 + s.uniform(-0.06, 0.06);
  b.tilt = s.uniform(-0.08, 0.08);
  b.shaft_half_width = s.uniform(0.13, 0.17);
  b.flare = s.uniform(0.07, 0.11);
  b.physis = s.uniform(0.80, 0.88);
  b.flare_start = b.physis - s.uniform(0.25, 0.35);
  b.bulge = s.uniform(0.0, 0.03);
  b.cortex = s.uniform(0.03, 0.05);
  return b;
}

Crescent sample_crescent(Sampler& s, const BoneShape& bone, int side,
                         double scale) {
  const Point k = bone.corner(side);
  // Outer disk sits just inside the corner; the inner disk is pushed
  // toward the shaft interior so the remaining sliver hugs the margin.
  const double r = scale * s.uniform(0.09, 0.13);
  const double inward = -side;
  Crescent c{};
  c.outer = {k.x + inward * r * s.uniform(0.35, 0.6), k.y - r * s.uniform(0.25, 0.5)};
  c.outer_r = r;
  const double shift = r * s.uniform(0.45, 0.6);
  c.inner = {c.outer.x + inward * shift * 0.8, c.outer.y - shift * 0.6};
  c.inner_r = r;
  return c;
}

double boundary_distance(const Mask& bone, int64_t r, int64_t c) {
  double best = std::numeric_limits<double>::infinity();
  for (int64_t y = -1; y <= bone.height; ++y) {
    for (int64_t x = -1; x <= bone.width; ++x) {
      const bool outside = y < 0 || x < 0 || y >= bone.height ||
                           x >= bone.width || bone.at(y, x) == 0;
      if (!outside) continue;
      const double d = std::hypot(static_cast<double>(y - r), static_cast<double>(x - c));
      best = std::min(best, d);
    }
  }
  return best;
}

}  // namespace

LabeledTriplet generate_phantom(std::uint64_t seed, Label label, int size,
                                std::string id) {
  if (size < kMinPhantomSize) {
    throw ConfigError("phantom size must be >= " +
                      std::to_string(kMinPhantomSize) + ", got " +
                      std::to_string(size));
  }
  Sampler s(derive_seed(seed, "phantom", static_cast<std::uint64_t>(label)));
  const BoneShape bone = sample_bone(s);
  const double n = size;
  auto px = [&](int64_t i) { return (static_cast<double>(i) + 0.5) / n; };

  LabeledTriplet out;
  out.id = id.empty() ? "phantom-" + std::to_string(seed) : std::move(id);
  out.label = label;
  out.provenance = Provenance::phantom;
  out.bone_mask = Mask(size, size);
  out.lesion_mask = Mask(size, size);
  for (int64_t r = 0; r < size; ++r) {
    for (int64_t c = 0; c < size; ++c) {
      out.bone_mask.at(r, c) = bone.contains(px(c), px(r)) ? 1 : 0;
    }
  }
  const auto bone_area = static_cast<double>(out.bone_mask.count());

  // Lesions: resample until the total area lands inside the target band.
  std::vector<Crescent> lesions;
  if (label == Label::cml) {
    const double band = 0.22 * n;
    constexpr double min_frac = 0.005, max_frac = 0.05;
    const double target = s.uniform(0.02, 0.045);
    const int count = s.uniform(0.0, 1.0) < 0.3 ? 2 : 1;
    const int first_side = s.coin() ? 1 : -1;
    double scale = 1.0;
    for (int attempt = 0; attempt < 200; ++attempt) {
      lesions.clear();
      for (int i = 0; i < count; ++i) {
        lesions.push_back(sample_crescent(s, bone, i == 0 ? first_side : -first_side, scale));
      }
      Mask m(size, size);
      for (int64_t r = 0; r < size; ++r) {
        for (int64_t c = 0; c < size; ++c) {
          if (!out.bone_mask.at(r, c)) continue;
          const bool hit = std::any_of(lesions.begin(), lesions.end(), [&](const Crescent& cr) {
            return cr.contains(px(c), px(r));
          });
          if (hit && boundary_distance(out.bone_mask, r, c) <= band) m.at(r, c) = 1;
        }
      }
      const double frac = static_cast<double>(m.count()) / bone_area;
      // Prefer areas near the sampled target; late attempts accept the band.
      const bool near_target = std::abs(frac - target) <= 0.35 * target;
      if (frac >= min_frac && frac <= max_frac && (near_target || attempt >= 150)) {
        out.lesion_mask = std::move(m);
        break;
      }
      // Steer the crescent radius toward the target area.
      scale *= frac <= 0.0 ? 1.3 : std::clamp(std::sqrt(target / frac), 0.7, 1.4);
    }
    if (out.lesion_mask.empty()) {
      throw NumericError("phantom '" + out.id + "': failed to place lesion");
    }
  }

  // Intensity model, rendered with 2x2 supersampling.
  const double bg = s.uniform(0.05, 0.22);
  const double grad_x = s.uniform(-0.08, 0.08), grad_y = s.uniform(-0.08, 0.08);
  const double soft = s.uniform(0.05, 0.12);
  const double soft_extra = s.uniform(0.08, 0.14);
  const double bone_level = s.uniform(0.50, 0.72);
  const double cortex_gain = s.uniform(0.10, 0.20);
  const double metaphysis_drop = s.uniform(0.02, 0.08);
  const double lesion_dark = s.uniform(0.03, 0.08);
  const double rim_gain = s.uniform(0.12, 0.2);
  const double rim_width = 0.03;
  const double texture_amp = s.uniform(0.0, 0.04);
  const double texture_freq = s.uniform(10.0, 18.0);
  const double texture_phase = s.uniform(0.0, 6.28);
  const double epi_gap = s.uniform(0.045, 0.07);
  const double epi_level = bone_level * s.uniform(0.8, 0.95);

  auto intensity = [&](double x, double y) {
    double v = bg + grad_x * (x - 0.5) + grad_y * (y - 0.5);
    const double hw = bone.half_width(std::min(y, bone.physis));
    const double dx = std::abs(x - bone.center(y));
    if (dx < hw + soft_extra) v += soft;
    const double ey = bone.physis + epi_gap + 0.035;
    const double ex = (x - bone.center(bone.physis)) / (bone.half_width(bone.physis) * 0.8);
    const double eyn = (y - ey) / 0.035;
    if (ex * ex + eyn * eyn <= 1.0) v = epi_level;
    if (bone.contains(x, y)) {
      const double edge = hw - dx;
      double b = bone_level;
      if (edge < bone.cortex) b += cortex_gain;
      if (y > bone.flare_start) b -= metaphysis_drop * smoothstep(bone.flare_start, bone.physis, y);
      b += texture_amp * std::sin(texture_freq * x + texture_phase) *
           std::cos(texture_freq * 0.7 * y);
      const bool in_lesion = std::any_of(lesions.begin(), lesions.end(), [&](const Crescent& cr) {
        return cr.contains(x, y);
      });
      // Lucent defect with a sclerotic rim around it.
      const bool on_rim = !in_lesion && std::any_of(lesions.begin(), lesions.end(), [&](const Crescent& cr) {
        const double d = std::hypot(x - cr.outer.x, y - cr.outer.y);
        return d <= cr.outer_r + rim_width &&
               std::hypot(x - cr.inner.x, y - cr.inner.y) > cr.inner_r - rim_width;
      });
      if (in_lesion) b = std::max(0.0, bg - lesion_dark);
      if (on_rim) b += rim_gain;
      v = b;
    }
    return v;
  };

  Image raw(size, size);
  for (int64_t r = 0; r < size; ++r) {
    for (int64_t c = 0; c < size; ++c) {
      double acc = 0.0;
      for (double oy : {0.25, 0.75}) {
        for (double ox : {0.25, 0.75}) {
          acc += intensity((c + ox) / n, (r + oy) / n);
        }
      }
      raw.at(r, c) = static_cast<float>(acc / 4.0);
    }
  }

  // 3x3 Gaussian blur with replicated borders.
  const double sigma = s.uniform(0.45, 0.8);
  std::array<double, 3> k1{};
  for (int i = -1; i <= 1; ++i) k1[static_cast<std::size_t>(i + 1)] = std::exp(-(i * i) / (2 * sigma * sigma));
  const double ksum = k1[0] + k1[1] + k1[2];
  for (auto& k : k1) k /= ksum;
  Image blurred(size, size);
  for (int64_t r = 0; r < size; ++r) {
    for (int64_t c = 0; c < size; ++c) {
      double acc = 0.0;
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          const auto rr = std::clamp<int64_t>(r + dy, 0, size - 1);
          const auto cc = std::clamp<int64_t>(c + dx, 0, size - 1);
          acc += k1[static_cast<std::size_t>(dy + 1)] * k1[static_cast<std::size_t>(dx + 1)] * raw.at(rr, cc);
        }
      }
      blurred.at(r, c) = static_cast<float>(acc);
    }
  }

  const double noise_sigma = s.uniform(0.01, 0.035);
  const double contrast = s.uniform(0.8, 1.2);
  const double brightness = s.uniform(-0.05, 0.05);
  const double gamma = s.uniform(0.8, 1.25);
  out.image = Image(size, size);
  for (std::size_t i = 0; i < out.image.pixels.size(); ++i) {
    double v = blurred.pixels[i] + noise_sigma * s.normal();
    v = std::clamp((v - 0.5) * contrast + 0.5 + brightness, 0.0, 1.0);
    out.image.pixels[i] = static_cast<float>(std::pow(v, gamma));
  }
  return out;
}

}  // namespace maskdiff
