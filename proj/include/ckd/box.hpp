#pragma once

#include <algorithm>
#include <cmath>

namespace ckd {

// Axis-aligned box, top-left corner + size, in pixels. Coordinates are
// continuous; pixel (i, j) covers [j, j+1) x [i, i+1).
struct BBox {
  double x = 0, y = 0, w = 0, h = 0;

  double cx() const { return x + 0.5 * w; }
  double cy() const { return y + 0.5 * h; }
  double area() const { return w * h; }
  bool degenerate() const { return !(w > 0.0) || !(h > 0.0); }
};

inline double center_distance(const BBox& a, const BBox& b) {
  const double dx = a.cx() - b.cx();
  const double dy = a.cy() - b.cy();
  return std::sqrt(dx * dx + dy * dy);
}

inline double intersection_area(const BBox& a, const BBox& b) {
  const double iw = std::min(a.x + a.w, b.x + b.w) - std::max(a.x, b.x);
  const double ih = std::min(a.y + a.h, b.y + b.h) - std::max(a.y, b.y);
  return (iw > 0 && ih > 0) ? iw * ih : 0.0;
}

// Clamped at 1: corner arithmetic can overshoot by an ulp on identical boxes,
// and the metrics compare against thresholds with strict inequalities.
inline double iou(const BBox& a, const BBox& b) {
  const double inter = intersection_area(a, b);
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? std::min(1.0, inter / uni) : 0.0;
}

// Generalized IoU: IoU - (hull - union) / hull. In (-1, 1], 1 iff equal.
inline double giou(const BBox& a, const BBox& b) {
  const double inter = intersection_area(a, b);
  const double uni = a.area() + b.area() - inter;
  const double hw = std::max(a.x + a.w, b.x + b.w) - std::min(a.x, b.x);
  const double hh = std::max(a.y + a.h, b.y + b.h) - std::min(a.y, b.y);
  const double hull = hw * hh;
  const double i = uni > 0 ? inter / uni : 0.0;
  return hull > 0 ? std::min(1.0, i - (hull - uni) / hull) : std::min(1.0, i);
}

// Clip to the [0,W]x[0,H] frame, preserving a minimum size so downstream
// crops never see an empty box.
inline BBox clip_to_frame(const BBox& b, int width, int height,
                          double min_size = 1.0) {
  BBox r = b;
  r.w = std::min(std::max(r.w, min_size), static_cast<double>(width));
  r.h = std::min(std::max(r.h, min_size), static_cast<double>(height));
  r.x = std::min(std::max(r.x, 0.0), width - r.w);
  r.y = std::min(std::max(r.y, 0.0), height - r.h);
  return r;
}

}  // namespace ckd
