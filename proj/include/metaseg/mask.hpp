#pragma once

#include <cstdint>
#include <vector>

#include "metaseg/box.hpp"
#include "metaseg/common.hpp"

namespace metaseg {

/// Single-channel uint8 raster. Binary masks hold {0,1}; annotation rasters
/// hold object ids with 0 = background.
struct Mask {
  int h = 0, w = 0;
  std::vector<uint8_t> v;

  Mask() = default;
  Mask(int h_, int w_, uint8_t fill = 0) : h(h_), w(w_), v(static_cast<size_t>(h_) * w_, fill) {}

  uint8_t& at(int y, int x) { return v[static_cast<size_t>(y) * w + x]; }
  uint8_t at(int y, int x) const { return v[static_cast<size_t>(y) * w + x]; }

  size_t area() const {
    size_t n = 0;
    for (uint8_t p : v) n += (p != 0);
    return n;
  }
  bool empty() const { return area() == 0; }

  bool operator==(const Mask& o) const { return h == o.h && w == o.w && v == o.v; }

  /// Mask of pixels equal to `id` (for annotation rasters).
  Mask equals(uint8_t id) const {
    Mask m(h, w);
    for (size_t i = 0; i < v.size(); ++i) m.v[i] = (v[i] == id) ? 1 : 0;
    return m;
  }
  size_t equals_area(uint8_t id) const {
    size_t n = 0;
    for (uint8_t p : v) n += (p == id);
    return n;
  }
};

/// Intersection over union of binary masks; both empty counts as 1.
inline double mask_iou(const Mask& a, const Mask& b) {
  require<SizeError>(a.h == b.h && a.w == b.w, "mask_iou: size mismatch");
  size_t inter = 0, uni = 0;
  for (size_t i = 0; i < a.v.size(); ++i) {
    const bool pa = a.v[i] != 0, pb = b.v[i] != 0;
    inter += pa && pb;
    uni += pa || pb;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

/// Tight bounding box of the nonzero pixels. Pixel (x,y) spans [x,x+1)x[y,y+1).
inline Box tight_box(const Mask& m) {
  int xmin = m.w, xmax = -1, ymin = m.h, ymax = -1;
  for (int y = 0; y < m.h; ++y)
    for (int x = 0; x < m.w; ++x)
      if (m.at(y, x)) {
        xmin = std::min(xmin, x);
        xmax = std::max(xmax, x);
        ymin = std::min(ymin, y);
        ymax = std::max(ymax, y);
      }
  require<BoxError>(xmax >= 0, "tight_box of an empty mask");
  return box_from_corners(xmin, ymin, xmax + 1, ymax + 1);
}

}  // namespace metaseg
