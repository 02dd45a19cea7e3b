// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace bilingunet {

// Row-major binary image; every byte is 0 or 1.
struct BinaryMask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> bits;

  BinaryMask() = default;
  BinaryMask(std::size_t h, std::size_t w, std::uint8_t fill = 0)
      : height(h), width(w), bits(h * w, fill) {}

  std::uint8_t& at(std::size_t y, std::size_t x) { return bits[y * width + x]; }
  std::uint8_t at(std::size_t y, std::size_t x) const { return bits[y * width + x]; }
  std::size_t count() const {
    std::size_t c = 0;
    for (auto b : bits) c += b;
    return c;
  }
  bool empty() const { return bits.empty(); }

  friend bool operator==(const BinaryMask&, const BinaryMask&) = default;
};

}  // namespace bilingunet
