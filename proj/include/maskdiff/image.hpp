#pragma once

#include <cstdint>
#include <vector>

#include <torch/torch.h>

namespace maskdiff {

/// Grayscale image with intensities in [0, 1], row-major.
struct Image {
  int64_t height = 0;
  int64_t width = 0;
  std::vector<float> pixels;

  Image() = default;
  Image(int64_t h, int64_t w, float fill = 0.0f)
      : height(h), width(w), pixels(static_cast<std::size_t>(h * w), fill) {}

  float& at(int64_t r, int64_t c) { return pixels[static_cast<std::size_t>(r * width + c)]; }
  float at(int64_t r, int64_t c) const { return pixels[static_cast<std::size_t>(r * width + c)]; }
  bool operator==(const Image&) const = default;
};

/// Binary mask; every pixel is 0 or 1.
struct Mask {
  int64_t height = 0;
  int64_t width = 0;
  std::vector<std::uint8_t> pixels;

  Mask() = default;
  Mask(int64_t h, int64_t w)
      : height(h), width(w), pixels(static_cast<std::size_t>(h * w), 0) {}

  std::uint8_t& at(int64_t r, int64_t c) { return pixels[static_cast<std::size_t>(r * width + c)]; }
  std::uint8_t at(int64_t r, int64_t c) const { return pixels[static_cast<std::size_t>(r * width + c)]; }
  int64_t count() const;
  bool empty() const { return count() == 0; }
  bool operator==(const Mask&) const = default;
};

// Dataset files use [0, 1]; networks see [-1, 1]. These are the only two
// places the affine map is applied.
inline float to_model_range(float v) { return 2.0f * v - 1.0f; }
inline float from_model_range(float u) { return 0.5f * (u + 1.0f); }

/// [H, W] float tensor in model range.
torch::Tensor image_to_tensor(const Image& image);
torch::Tensor mask_to_tensor(const Mask& mask);

/// Inverse maps: clamps the image to [0, 1]; thresholds masks at 0.
Image image_from_tensor(const torch::Tensor& channel);
Mask mask_from_tensor(const torch::Tensor& channel);

}  // namespace maskdiff
