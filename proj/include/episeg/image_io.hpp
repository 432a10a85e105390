#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace episeg {

// Minimal binary netpbm support: P6 for RGB images, P5 for single-channel
// rasters (labels, masks). Pixel buffers are planar ([channel][row][col]) on
// the RGB side and row-major on the gray side; files use the interleaved
// layout netpbm mandates. Readers tolerate header comments and throw
// std::runtime_error naming the file on any malformed input.

struct RgbBuffer {
  std::int64_t height = 0, width = 0;
  std::vector<std::uint8_t> planar;  // 3 * height * width
};

struct GrayBuffer {
  std::int64_t height = 0, width = 0;
  std::vector<std::uint8_t> values;  // height * width
};

void write_ppm(const std::string& path, const RgbBuffer& image);
RgbBuffer read_ppm(const std::string& path);

void write_pgm(const std::string& path, const GrayBuffer& raster);
GrayBuffer read_pgm(const std::string& path);

}  // namespace episeg
