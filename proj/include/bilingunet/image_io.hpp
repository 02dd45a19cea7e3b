// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace bilingunet {

// 8-bit interleaved image, 1 (gray) or 3 (RGB) channels.
struct Image8 {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  std::vector<std::uint8_t> pixels;
};

// PNG, binary PPM (P6) or PGM (P5), chosen by file extension. Gray PNGs
// and PGMs decode with one channel, everything else with three.
Image8 read_image(const std::filesystem::path& path);
void write_image(const std::filesystem::path& path, const Image8& image);

}  // namespace bilingunet
