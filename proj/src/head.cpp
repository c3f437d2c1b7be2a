#include "sarnet/head.hpp"

#include <algorithm>
#include <cmath>

namespace sarnet {

template <typename T>
Head<T> Head<T>::make(Builder<T> b, const HeadConfig& cfg, const std::array<Index, 3>& channels,
                      const std::array<Index, 3>& strides) {
  if (cfg.num_classes < 1) throw ConfigError("head needs at least one class");
  if (cfg.reg_max < 1) throw ConfigError("reg_max must be >= 1");
  Head h;
  h.cfg = cfg;
  const T prior = static_cast<T>(-std::log((1.0 - 0.01) / 0.01));
  for (int i = 0; i < 3; ++i) {
    const Index c = channels[i];
    auto lb = b.child("level" + std::to_string(i));
    HeadLevel<T> l;
    l.stride = strides[i];
    l.stem = ConvBn<T>::make(lb.child("stem"), c, c, 1);
    l.cls_conv = ConvBn<T>::make(lb.child("cls_conv"), c, c, 3);
    l.reg_conv = ConvBn<T>::make(lb.child("reg_conv"), c, c, 3);
    auto cb = lb.child("cls_pred");
    l.cls_pred.weight = cb.constant_param("weight", Shape(cfg.num_classes, c, 1, 1), T(0));
    l.cls_pred.bias = cb.constant_param("bias", Shape(1, cfg.num_classes, 1, 1), prior);
    auto rb = lb.child("reg_pred");
    l.reg_pred.weight = rb.constant_param("weight", Shape(4 * (cfg.reg_max + 1), c, 1, 1), T(0));
    l.reg_pred.bias = rb.constant_param("bias", Shape(1, 4 * (cfg.reg_max + 1), 1, 1), T(1));
    h.levels.push_back(std::move(l));
  }
  return h;
}

template <typename T>
HeadOutput<T> Head<T>::operator()(const FeaturePyramid<T>& x, RunMode mode) {
  if (x.size() != levels.size())
    throw ContractError("head expects " + std::to_string(levels.size()) + " levels, got " + std::to_string(x.size()));
  HeadOutput<T> out;
  out.num_classes = cfg.num_classes;
  out.reg_max = cfg.reg_max;
  for (std::size_t i = 0; i < levels.size(); ++i) {
    auto& l = levels[i];
    auto s = l.stem(x.levels()[i].second, mode);
    out.levels.push_back({l.cls_pred(l.cls_conv(s, mode)), l.reg_pred(l.reg_conv(s, mode)), l.stride});
  }
  return out;
}

template <typename T>
std::vector<Anchor> make_anchors(const HeadOutput<T>& h) {
  std::vector<Anchor> a;
  for (std::size_t l = 0; l < h.levels.size(); ++l) {
    const auto& lv = h.levels[l];
    const double s = static_cast<double>(lv.stride);
    for (Index y = 0; y < lv.cls.dim(2); ++y)
      for (Index x = 0; x < lv.cls.dim(3); ++x) a.push_back({(x + 0.5) * s, (y + 0.5) * s, s, int(l), y, x});
  }
  return a;
}

template <typename T>
std::array<double, 4> expected_distances(const HeadOutput<T>& h, Index n, const Anchor& a) {
  const auto& reg = h.levels[a.level].reg;
  const Index bins = h.reg_max + 1, H = reg.dim(2), W = reg.dim(3);
  std::array<double, 4> d{};
  std::vector<double> p(bins);
  for (int side = 0; side < 4; ++side) {
    double mx = -INFINITY;
    for (Index i = 0; i < bins; ++i) {
      p[i] = reg[((n * reg.dim(1) + side * bins + i) * H + a.y) * W + a.x];
      mx = std::max(mx, p[i]);
    }
    double z = 0, e = 0;
    for (Index i = 0; i < bins; ++i) {
      const double w = std::exp(p[i] - mx);
      z += w;
      e += w * static_cast<double>(i);
    }
    d[side] = e / z;
  }
  return d;
}

template <typename T>
std::vector<double> class_scores(const HeadOutput<T>& h, Index n) {
  std::vector<double> s;
  const Index K = h.num_classes;
  for (const auto& lv : h.levels) {
    const Index H = lv.cls.dim(2), W = lv.cls.dim(3);
    for (Index y = 0; y < H; ++y)
      for (Index x = 0; x < W; ++x)
        for (Index c = 0; c < K; ++c) {
          const double v = lv.cls[((n * K + c) * H + y) * W + x];
          s.push_back(1.0 / (1.0 + std::exp(-v)));
        }
  }
  return s;
}

template <typename T>
std::vector<Box> decode_all(const HeadOutput<T>& h, Index n) {
  std::vector<Box> out;
  for (const auto& a : make_anchors(h)) {
    const auto d = expected_distances(h, n, a);
    out.push_back({a.cx - d[0] * a.stride, a.cy - d[1] * a.stride, a.cx + d[2] * a.stride, a.cy + d[3] * a.stride});
  }
  return out;
}

template <typename T>
std::vector<DetBox> decode_boxes(const HeadOutput<T>& h, Index n, double conf_thr) {
  const auto anchors = make_anchors(h);
  const auto boxes = decode_all(h, n);
  const auto scores = class_scores(h, n);
  const Index K = h.num_classes;
  const double W = static_cast<double>(h.image_w()), H = static_cast<double>(h.image_h());
  std::vector<DetBox> out;
  for (std::size_t a = 0; a < anchors.size(); ++a) {
    Index best = 0;
    for (Index c = 1; c < K; ++c)
      if (scores[a * K + c] > scores[a * K + best]) best = c;
    const double s = scores[a * K + best];
    if (!(s > conf_thr)) continue;
    Box b = boxes[a];
    b.x1 = std::clamp(b.x1, 0.0, W);
    b.x2 = std::clamp(b.x2, 0.0, W);
    b.y1 = std::clamp(b.y1, 0.0, H);
    b.y2 = std::clamp(b.y2, 0.0, H);
    out.push_back({b, s, static_cast<int>(best)});
  }
  return out;
}

std::array<double, 4> encode_ltrb(const Anchor& a, const Box& b) {
  return {(a.cx - b.x1) / a.stride, (a.cy - b.y1) / a.stride, (b.x2 - a.cx) / a.stride, (b.y2 - a.cy) / a.stride};
}

#define SARNET_INSTANTIATE_HEAD(T)                                                               \
  template struct Head<T>;                                                                       \
  template std::vector<Anchor> make_anchors(const HeadOutput<T>&);                               \
  template std::array<double, 4> expected_distances(const HeadOutput<T>&, Index, const Anchor&); \
  template std::vector<double> class_scores(const HeadOutput<T>&, Index);                        \
  template std::vector<Box> decode_all(const HeadOutput<T>&, Index);                             \
  template std::vector<DetBox> decode_boxes(const HeadOutput<T>&, Index, double);

SARNET_INSTANTIATE_HEAD(float)
SARNET_INSTANTIATE_HEAD(double)

}  // namespace sarnet
