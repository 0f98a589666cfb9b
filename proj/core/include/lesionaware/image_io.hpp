#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace lesionaware {

struct GrayImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;  // row-major
};

// 8-bit grayscale PNG I/O. Reading converts RGB/palette/16-bit inputs to gray.
GrayImage png_read_gray8(const std::filesystem::path& path);
void png_write_gray8(const std::filesystem::path& path, const GrayImage& image);

}  // namespace lesionaware
