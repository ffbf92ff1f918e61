#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace eviscrib::raster {

/// 8-bit single-channel raster (binary PGM on disk).
struct Gray8 {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;  // row-major
};

void write_pgm(const std::filesystem::path& path, const Gray8& image);
Gray8 read_pgm(const std::filesystem::path& path);
/// Reads only the header; returns {width, height}.
std::pair<int, int> read_pgm_size(const std::filesystem::path& path);

}  // namespace eviscrib::raster
