#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace maskdiff::detail {

struct GrayPng {
  int64_t height = 0;
  int64_t width = 0;
  std::vector<std::uint8_t> pixels;
};

std::string encode_png(const GrayPng& image);
GrayPng decode_png(const std::string& bytes, const std::string& context);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::string& bytes);

}  // namespace maskdiff::detail
