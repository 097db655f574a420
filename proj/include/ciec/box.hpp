#pragma once

namespace ciec {

/// Axis-aligned box in normalized image coordinates (center, width, height).
struct Box {
  double cx = 0.5;
  double cy = 0.5;
  double w = 1.0;
  double h = 1.0;

  friend bool operator==(const Box&, const Box&) = default;
};

/// True when 0 <= cx,cy <= 1, 0 < w,h <= 1 and the box overlaps the unit square.
bool is_valid(const Box& b);

/// Intersection over union; disjoint boxes give 0, degenerate boxes give 0
/// and log a warning.
double iou(const Box& a, const Box& b);

}  // namespace ciec
