#pragma once

#include "metdet/core.hpp"

#include <cstdint>
#include <filesystem>
#include <utility>
#include <vector>

namespace metdet::png {

void write_rgb8(const std::filesystem::path& path, const Rgb8Image& img);
/// Throws FormatError if the file is not decodable.
Rgb8Image read_rgb8(const std::filesystem::path& path);

/// Writes a 1-bit grayscale PNG; nonzero bytes are set pixels.
void write_bitmask(const std::filesystem::path& path, int width, int height, const std::vector<std::uint8_t>& bits);

struct Gray8 {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> data;
};

/// Reads any PNG as 8-bit gray.
Gray8 read_gray8(const std::filesystem::path& path);

void write_gray8(const std::filesystem::path& path, const Gray8& img);

/// Header-only probe; returns {width, height}. Throws FormatError.
std::pair<int, int> read_dimensions(const std::filesystem::path& path);

}  // namespace metdet::png
