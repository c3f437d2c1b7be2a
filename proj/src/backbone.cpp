#include "sarnet/backbone.hpp"

#include <algorithm>

namespace sarnet {

DamMode parse_dam_mode(const std::string& s) {
  if (s == "davgg") return DamMode::davgg;
  if (s == "behind_relu") return DamMode::behind_relu;
  if (s == "behind_erblock") return DamMode::behind_erblock;
  if (s == "off") return DamMode::off;
  throw ConfigError("unknown dam_mode '" + s + "' (expected davgg, behind_relu, behind_erblock or off)");
}

std::string to_string(DamMode m) {
  switch (m) {
    case DamMode::davgg: return "davgg";
    case DamMode::behind_relu: return "behind_relu";
    case DamMode::behind_erblock: return "behind_erblock";
    case DamMode::off: return "off";
  }
  return "?";
}

template <typename T>
void FeaturePyramid<T>::add(std::string level, Tensor<T> t) {
  if (contains(level)) throw ContractError("pyramid already has level " + level);
  levels_.emplace_back(std::move(level), std::move(t));
}

template <typename T>
bool FeaturePyramid<T>::contains(const std::string& level) const {
  return std::any_of(levels_.begin(), levels_.end(), [&](const auto& e) { return e.first == level; });
}

template <typename T>
const Tensor<T>& FeaturePyramid<T>::at(const std::string& level) const {
  for (const auto& [name, t] : levels_)
    if (name == level) return t;
  throw ContractError("pyramid has no level " + level);
}

template <typename T>
Backbone<T> Backbone<T>::make(Builder<T> b, const BackboneConfig& cfg) {
  if (cfg.width < 1) throw ConfigError("backbone width must be >= 1");
  Backbone net;
  net.cfg = cfg;
  net.stem = ConvBn<T>::make(b.child("stem"), 1, cfg.stem_channels(), 3, 2);
  Index cin = cfg.stem_channels();
  for (int i = 0; i < 4; ++i) {
    const Index c = cfg.stage_channels(i);
    auto sb = b.child("stage" + std::to_string(i + 2));
    BackboneStage<T> st;
    st.down = ConvBn<T>::make(sb.child("down"), cin, c, 3, 2);
    if (cfg.dam_mode == DamMode::behind_relu)
      st.dam_after_down = DamParams<T>::make(sb.child("dam"), c, cfg.dam_kernel, cfg.dam_reduction);
    st.blocks = DaBlock<T>::make(sb.child("blocks"), c, c, cfg.depths[i], cfg.dam_mode == DamMode::davgg,
                                 cfg.dam_kernel, cfg.dam_reduction);
    if (cfg.dam_mode == DamMode::behind_erblock)
      st.dam_after_stage = DamParams<T>::make(sb.child("dam"), c, cfg.dam_kernel, cfg.dam_reduction);
    net.stages.push_back(std::move(st));
    cin = c;
  }
  return net;
}

template <typename T>
FeaturePyramid<T> Backbone<T>::operator()(const Tensor<T>& image, RunMode mode) {
  if (image.dim(1) != 1) throw ShapeError("backbone expects a single-channel image, got C=" + std::to_string(image.dim(1)));
  if (image.dim(2) % 32 != 0 || image.dim(3) % 32 != 0)
    throw ShapeError("image H and W must be divisible by 32, got " + image.shape().str());
  FeaturePyramid<T> out;
  auto y = stem(image, mode);
  for (int i = 0; i < 4; ++i) {
    auto& st = stages[i];
    y = st.down(y, mode);
    if (st.dam_after_down) y = dam_forward(y, *st.dam_after_down, mode);
    y = st.blocks(y, mode);
    if (st.dam_after_stage) y = dam_forward(y, *st.dam_after_stage, mode);
    out.add("C" + std::to_string(i + 2), y);
  }
  return out;
}

template class FeaturePyramid<float>;
template class FeaturePyramid<double>;
template struct Backbone<float>;
template struct Backbone<double>;

}  // namespace sarnet
