#pragma once

#include <array>
#include <string>
#include <utility>
#include <vector>

#include "sarnet/dam.hpp"

namespace sarnet {

/// Where the direction-aware attention sits inside each backbone stage.
enum class DamMode { davgg, behind_relu, behind_erblock, off };

DamMode parse_dam_mode(const std::string& s);
std::string to_string(DamMode m);

struct BackboneConfig {
  Index width = 16;
  std::array<Index, 4> depths{1, 1, 2, 1};
  DamMode dam_mode = DamMode::davgg;
  Index dam_kernel = 3;
  Index dam_reduction = 16;

  Index stem_channels() const { return std::max<Index>(1, width / 2); }
  Index stage_channels(int i) const { return width << i; }
};

/// Ordered (level id, map) pairs, finest first.
template <typename T>
class FeaturePyramid {
 public:
  void add(std::string level, Tensor<T> t);
  const Tensor<T>& at(const std::string& level) const;
  bool contains(const std::string& level) const;
  std::size_t size() const { return levels_.size(); }
  const std::vector<std::pair<std::string, Tensor<T>>>& levels() const { return levels_; }

 private:
  std::vector<std::pair<std::string, Tensor<T>>> levels_;
};

template <typename T>
struct BackboneStage {
  ConvBn<T> down;
  std::optional<DamParams<T>> dam_after_down;  // behind_relu
  DaBlock<T> blocks;
  std::optional<DamParams<T>> dam_after_stage;  // behind_erblock
};

template <typename T>
struct Backbone {
  BackboneConfig cfg;
  ConvBn<T> stem;
  std::vector<BackboneStage<T>> stages;

  static Backbone make(Builder<T> b, const BackboneConfig& cfg);
  /// image (N,1,H,W) with H, W divisible by 32 -> {C2, C3, C4, C5}.
  FeaturePyramid<T> operator()(const Tensor<T>& image, RunMode mode);
};

template <typename T>
FeaturePyramid<T> backbone_forward(const Tensor<T>& image, Backbone<T>& net, RunMode mode) {
  return net(image, mode);
}

}  // namespace sarnet
