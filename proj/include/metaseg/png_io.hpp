#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "metaseg/mask.hpp"

namespace metaseg {

/// Interleaved RGB, 8 bits per channel, row-major.
struct Image {
  int h = 0, w = 0;
  std::vector<uint8_t> rgb;

  Image() = default;
  Image(int h_, int w_) : h(h_), w(w_), rgb(static_cast<size_t>(h_) * w_ * 3, 0) {}

  uint8_t& at(int y, int x, int c) { return rgb[(static_cast<size_t>(y) * w + x) * 3 + c]; }
  uint8_t at(int y, int x, int c) const { return rgb[(static_cast<size_t>(y) * w + x) * 3 + c]; }

  bool operator==(const Image& o) const { return h == o.h && w == o.w && rgb == o.rgb; }
};

// 8-bit PNG IO. Gray rasters carry object ids / binary masks.
Image read_png_rgb(const std::string& path);
void write_png_rgb(const std::string& path, const Image& img);
Mask read_png_gray(const std::string& path);
void write_png_gray(const std::string& path, const Mask& m);

}  // namespace metaseg
