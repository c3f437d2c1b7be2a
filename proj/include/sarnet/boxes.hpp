#pragma once

#include <vector>

namespace sarnet {

/// Axis-aligned box in pixels.
struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() > 0 && height() > 0 ? width() * height() : 0.0; }
  double cx() const { return 0.5 * (x1 + x2); }
  double cy() const { return 0.5 * (y1 + y2); }
  bool operator==(const Box&) const = default;
};

struct GtBox {
  Box box;
  int cls = 0;
  bool operator==(const GtBox&) const = default;
};

struct DetBox {
  Box box;
  double score = 0;
  int cls = 0;
  bool operator==(const DetBox&) const = default;
};

/// Intersection over union; 0 when either box has zero area.
double iou(const Box& a, const Box& b);

/// Class-wise greedy suppression. Boxes are visited by descending score
/// (lower index first on ties); a box survives iff its IoU with every
/// surviving box of the same class is <= iou_thr. Output is in visit order.
std::vector<DetBox> nms(const std::vector<DetBox>& boxes, double iou_thr);

}  // namespace sarnet
