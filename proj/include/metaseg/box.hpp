#pragma once

#include <algorithm>
#include <cmath>
#include <optional>

#include "metaseg/common.hpp"

namespace metaseg {

/// Axis-aligned box, center-size form, continuous pixel coordinates
/// (pixel p spans [p, p+1)). Valid boxes have w > 0 and h > 0.
struct Box {
  double cx = 0, cy = 0, w = 0, h = 0;
  std::optional<double> score;

  Box() = default;
  Box(double cx_, double cy_, double w_, double h_, std::optional<double> score_ = std::nullopt)
      : cx(cx_), cy(cy_), w(w_), h(h_), score(score_) {}

  double x0() const { return cx - 0.5 * w; }
  double y0() const { return cy - 0.5 * h; }
  double x1() const { return cx + 0.5 * w; }
  double y1() const { return cy + 0.5 * h; }
  double area() const { return w * h; }
  bool valid() const { return w > 0 && h > 0; }
};

inline Box box_from_corners(double x0, double y0, double x1, double y1) {
  return Box{0.5 * (x0 + x1), 0.5 * (y0 + y1), x1 - x0, y1 - y0, std::nullopt};
}

inline double box_iou(const Box& a, const Box& b) {
  const double ix = std::max(0.0, std::min(a.x1(), b.x1()) - std::max(a.x0(), b.x0()));
  const double iy = std::max(0.0, std::min(a.y1(), b.y1()) - std::max(a.y0(), b.y0()));
  const double inter = ix * iy;
  const double uni = a.area() + b.area() - inter;
  return uni <= 0 ? 0.0 : inter / uni;
}

/// Clips to [0,W]x[0,H] while keeping at least `min_size` px of extent, so the
/// result is always valid for non-degenerate frames.
inline Box clip_box(const Box& b, double W, double H, double min_size = 1.0) {
  double w = std::clamp(b.w, min_size, W);
  double h = std::clamp(b.h, min_size, H);
  double cx = std::clamp(b.cx, 0.5 * w, W - 0.5 * w);
  double cy = std::clamp(b.cy, 0.5 * h, H - 0.5 * h);
  Box out{cx, cy, w, h, b.score};
  return out;
}

inline Box full_frame_box(double W, double H) { return Box{0.5 * W, 0.5 * H, W, H, std::nullopt}; }

}  // namespace metaseg
