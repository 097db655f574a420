#include "ciec/box.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>

namespace ciec {

bool is_valid(const Box& b) {
  if (!(b.cx >= 0.0 && b.cx <= 1.0 && b.cy >= 0.0 && b.cy <= 1.0)) return false;
  if (!(b.w > 0.0 && b.w <= 1.0 && b.h > 0.0 && b.h <= 1.0)) return false;
  double x0 = std::max(0.0, b.cx - b.w / 2), x1 = std::min(1.0, b.cx + b.w / 2);
  double y0 = std::max(0.0, b.cy - b.h / 2), y1 = std::min(1.0, b.cy + b.h / 2);
  return x1 > x0 && y1 > y0;
}

double iou(const Box& a, const Box& b) {
  if (!(a.w > 0 && a.h > 0 && b.w > 0 && b.h > 0)) {
    spdlog::warn("iou: degenerate zero-area box, returning 0");
    return 0.0;
  }
  // Areas from the same corner arithmetic as the overlap, so identical boxes give exactly 1.
  const double ax0 = a.cx - a.w / 2, ax1 = a.cx + a.w / 2, ay0 = a.cy - a.h / 2, ay1 = a.cy + a.h / 2;
  const double bx0 = b.cx - b.w / 2, bx1 = b.cx + b.w / 2, by0 = b.cy - b.h / 2, by1 = b.cy + b.h / 2;
  const double ix = std::min(ax1, bx1) - std::max(ax0, bx0);
  const double iy = std::min(ay1, by1) - std::max(ay0, by0);
  if (ix <= 0 || iy <= 0) return 0.0;
  const double inter = ix * iy;
  const double area_a = (ax1 - ax0) * (ay1 - ay0);
  const double area_b = (bx1 - bx0) * (by1 - by0);
  return std::clamp(inter / (area_a + area_b - inter), 0.0, 1.0);
}

}  // namespace ciec
