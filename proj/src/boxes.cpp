#include "sarnet/boxes.hpp"

#include <algorithm>
#include <numeric>

namespace sarnet {

double iou(const Box& a, const Box& b) {
  const double aa = a.area(), ab = b.area();
  if (aa <= 0 || ab <= 0) return 0.0;
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0 || ih <= 0) return 0.0;
  const double inter = iw * ih;
  return inter / (aa + ab - inter);
}

std::vector<DetBox> nms(const std::vector<DetBox>& boxes, double iou_thr) {
  std::vector<std::size_t> order(boxes.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return boxes[a].score > boxes[b].score; });
  std::vector<DetBox> kept;
  for (std::size_t i : order) {
    const DetBox& d = boxes[i];
    const bool clear = std::none_of(kept.begin(), kept.end(), [&](const DetBox& k) {
      return k.cls == d.cls && iou(k.box, d.box) > iou_thr;
    });
    if (clear) kept.push_back(d);
  }
  return kept;
}

}  // namespace sarnet
