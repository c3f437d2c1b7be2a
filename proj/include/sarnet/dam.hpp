#pragma once

#include <optional>
#include <vector>

#include "sarnet/layers.hpp"

namespace sarnet {

/// Deformable convolution along one spatial axis with a learned offset branch.
///
/// The offset branch is a standard convolution over x (same 1xk / kx1 kernel
/// footprint) emitting one scalar offset per tap and pixel. It starts at zero
/// so a fresh module behaves as a plain 1xk / kx1 convolution.
template <typename T>
struct DirectionalDeform {
  Conv<T> offset;
  Tensor<T> weight;
  Tensor<T> bias;
  ConvAxis axis = ConvAxis::row;

  static DirectionalDeform make(Builder<T> b, Index channels, Index k, ConvAxis axis);
  Tensor<T> operator()(const Tensor<T>& x) const;
  Index kernel() const { return axis == ConvAxis::row ? weight.dim(3) : weight.dim(2); }
};

/// Direction-aware attention parameters.
template <typename T>
struct DamParams {
  DirectionalDeform<T> row_deform;
  DirectionalDeform<T> col_deform;
  ConvBn<T> cbr;  // 1x1, C -> reduced, ReLU
  Conv<T> conv_h; // 1x1, reduced -> C
  Conv<T> conv_w; // 1x1, reduced -> C
  Index channels = 0;
  Index reduced = 0;

  /// reduced = max(8, channels / reduction).
  static DamParams make(Builder<T> b, Index channels, Index k = 3, Index reduction = 16);
};

/// Row and column descriptors: z_h (N,C,H,1), z_w (N,C,1,W).
template <typename T>
struct DirectionalDescriptors {
  Tensor<T> z_h;
  Tensor<T> z_w;
};

/// sigmoid(row(x) + column(x)) * x.
template <typename T>
Tensor<T> direction_aware_generation(const Tensor<T>& x, const DamParams<T>& p);

/// Means over width (z_h) and over height (z_w).
template <typename T>
DirectionalDescriptors<T> directional_pool(const Tensor<T>& x_dir);

/// Result of channel_attention_embedding with its intermediates exposed.
template <typename T>
struct EmbeddingTrace {
  Tensor<T> out;
  Tensor<T> stacked;  // (N, C, H+W, 1)
  Tensor<T> gate_h;   // (N, C, H, 1)
  Tensor<T> gate_w;   // (N, C, 1, W)
};

/// Y = x * sigmoid(conv_h(g_h)) * sigmoid(conv_w(g_w)), where g = CBR of the
/// descriptors stacked along the spatial axis and split back into rows/columns.
template <typename T>
EmbeddingTrace<T> channel_attention_embedding_trace(const Tensor<T>& x, const DirectionalDescriptors<T>& d,
                                                    DamParams<T>& p, RunMode mode);

template <typename T>
Tensor<T> channel_attention_embedding(const Tensor<T>& x, const DirectionalDescriptors<T>& d, DamParams<T>& p,
                                      RunMode mode) {
  return channel_attention_embedding_trace(x, d, p, mode).out;
}

/// Full attention: gates are computed from the direction-aware map and
/// applied to the original x.
template <typename T>
Tensor<T> dam_forward(const Tensor<T>& x, DamParams<T>& p, RunMode mode);

/// conv3x3 + BN + ReLU, followed by direction-aware attention when enabled.
template <typename T>
struct DaVggBlock {
  ConvBn<T> conv;
  std::optional<DamParams<T>> dam;

  static DaVggBlock make(Builder<T> b, Index cin, Index cout, bool with_dam, Index k = 3, Index reduction = 16);
  Tensor<T> operator()(const Tensor<T>& x, RunMode mode);
};

/// A sequence of DAVgg blocks; the first maps cin -> cout, the rest keep cout.
template <typename T>
struct DaBlock {
  std::vector<DaVggBlock<T>> blocks;

  static DaBlock make(Builder<T> b, Index cin, Index cout, Index depth, bool with_dam = true, Index k = 3,
                      Index reduction = 16);
  Tensor<T> operator()(const Tensor<T>& x, RunMode mode);
};

template <typename T>
Tensor<T> da_block(const Tensor<T>& x, DaBlock<T>& block, RunMode mode) {
  return block(x, mode);
}

}  // namespace sarnet
