#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace pmdet {

// 8-bit RGB raster, interleaved row-major (r, g, b per pixel).
struct Image8 {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> pixels;  // size = 3 * height * width

  std::uint8_t& at(int y, int x, int c) {
    return pixels[(y * width + x) * 3 + c];
  }
  std::uint8_t at(int y, int x, int c) const {
    return pixels[(y * width + x) * 3 + c];
  }
};

// Binary PPM (P6), the portable lossless 3-channel 8-bit format used for all
// emitted rasters. Writes are byte-deterministic.
void write_ppm(const std::string& path, const Image8& image);
Image8 read_ppm(const std::string& path);

}  // namespace pmdet
