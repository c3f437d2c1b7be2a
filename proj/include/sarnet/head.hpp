#pragma once

#include <array>
#include <vector>

#include "sarnet/backbone.hpp"
#include "sarnet/boxes.hpp"

namespace sarnet {

struct HeadConfig {
  Index num_classes = 3;
  /// Distances are distributions over bins 0..reg_max.
  Index reg_max = 16;
};

template <typename T>
struct HeadLevel {
  ConvBn<T> stem;      // 1x1
  ConvBn<T> cls_conv;  // 3x3
  ConvBn<T> reg_conv;  // 3x3
  Conv<T> cls_pred;    // 1x1 -> num_classes
  Conv<T> reg_pred;    // 1x1 -> 4 (reg_max + 1)
  Index stride = 0;
};

template <typename T>
struct LevelOutput {
  Tensor<T> cls;  // (N, num_classes, H, W) logits
  Tensor<T> reg;  // (N, 4 (reg_max + 1), H, W) logits, side-major: l, t, r, b
  Index stride = 0;
};

template <typename T>
struct HeadOutput {
  std::vector<LevelOutput<T>> levels;
  Index num_classes = 0;
  Index reg_max = 0;

  Index batch() const { return levels.front().cls.dim(0); }
  Index image_h() const { return levels.front().cls.dim(2) * levels.front().stride; }
  Index image_w() const { return levels.front().cls.dim(3) * levels.front().stride; }
};

template <typename T>
struct Head {
  HeadConfig cfg;
  std::vector<HeadLevel<T>> levels;

  static Head make(Builder<T> b, const HeadConfig& cfg, const std::array<Index, 3>& channels,
                   const std::array<Index, 3>& strides = {8, 16, 32});
  /// {K3, B4, B5} -> per-level logits.
  HeadOutput<T> operator()(const FeaturePyramid<T>& x, RunMode mode);
};

template <typename T>
HeadOutput<T> head_forward(const FeaturePyramid<T>& x, Head<T>& head, RunMode mode) {
  return head(x, mode);
}

/// Prediction site: pixel center times stride.
struct Anchor {
  double cx = 0, cy = 0;
  double stride = 0;
  int level = 0;
  Index y = 0, x = 0;
};

/// Anchors of one image, level by level, row-major within a level.
template <typename T>
std::vector<Anchor> make_anchors(const HeadOutput<T>& h);

/// Expected (l, t, r, b) in stride units for one anchor of image n.
template <typename T>
std::array<double, 4> expected_distances(const HeadOutput<T>& h, Index n, const Anchor& a);

/// Class probabilities of image n, anchors x classes, row-major.
template <typename T>
std::vector<double> class_scores(const HeadOutput<T>& h, Index n);

/// Unclipped decoded box per anchor of image n.
template <typename T>
std::vector<Box> decode_all(const HeadOutput<T>& h, Index n);

/// Best-class detections of image n with score > conf_thr, clipped to the image.
template <typename T>
std::vector<DetBox> decode_boxes(const HeadOutput<T>& h, Index n, double conf_thr);

/// (l, t, r, b) from the anchor center to the box edges, in stride units.
std::array<double, 4> encode_ltrb(const Anchor& a, const Box& b);

}  // namespace sarnet
