#include "maskdiff/image.hpp"

#include <algorithm>

#include "maskdiff/error.hpp"

namespace maskdiff {

int64_t Mask::count() const {
  return std::count_if(pixels.begin(), pixels.end(),
                       [](std::uint8_t v) { return v != 0; });
}

torch::Tensor image_to_tensor(const Image& image) {
  auto out = torch::empty({image.height, image.width}, torch::kFloat);
  auto* p = out.data_ptr<float>();
  for (std::size_t i = 0; i < image.pixels.size(); ++i) {
    p[i] = to_model_range(image.pixels[i]);
  }
  return out;
}

torch::Tensor mask_to_tensor(const Mask& mask) {
  auto out = torch::empty({mask.height, mask.width}, torch::kFloat);
  auto* p = out.data_ptr<float>();
  for (std::size_t i = 0; i < mask.pixels.size(); ++i) {
    p[i] = mask.pixels[i] ? 1.0f : -1.0f;
  }
  return out;
}

Image image_from_tensor(const torch::Tensor& channel) {
  if (channel.dim() != 2) throw ConfigError("image_from_tensor expects [H, W]");
  auto c = channel.to(torch::kFloat).contiguous();
  Image image(c.size(0), c.size(1));
  const auto* p = c.data_ptr<float>();
  for (std::size_t i = 0; i < image.pixels.size(); ++i) {
    image.pixels[i] = std::clamp(from_model_range(p[i]), 0.0f, 1.0f);
  }
  return image;
}

Mask mask_from_tensor(const torch::Tensor& channel) {
  if (channel.dim() != 2) throw ConfigError("mask_from_tensor expects [H, W]");
  auto c = channel.to(torch::kFloat).contiguous();
  Mask mask(c.size(0), c.size(1));
  const auto* p = c.data_ptr<float>();
  for (std::size_t i = 0; i < mask.pixels.size(); ++i) {
    mask.pixels[i] = p[i] > 0.0f ? 1 : 0;
  }
  return mask;
}

}  // namespace maskdiff
