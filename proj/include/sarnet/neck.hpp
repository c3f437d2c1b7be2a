#pragma once

#include <array>
#include <string>
#include <vector>

#include "sarnet/backbone.hpp"

namespace sarnet {

enum class AlignOp { concat, add };
enum class Compensation { mem, add };

AlignOp parse_align_op(const std::string& s);
Compensation parse_compensation(const std::string& s);
std::string to_string(AlignOp a);
std::string to_string(Compensation c);

struct NeckConfig {
  /// false turns the neck into a pass-through (C3, C4, C5) -> (K3, B4, B5).
  bool ucm = true;
  AlignOp align_op = AlignOp::concat;
  Compensation compensation = Compensation::mem;
  Index n_blocks = 2;
  Index heads = 4;
  /// DAM inside the neck's DA blocks.
  bool dam = true;
  Index dam_kernel = 3;
  Index dam_reduction = 16;
};

/// Channels [begin, begin+length) of the fused map came from `level`,
/// whose own spatial size was (h, w).
struct ChannelSpan {
  std::string level;
  Index begin = 0;
  Index length = 0;
  Index h = 0;
  Index w = 0;
};

template <typename T>
struct AlignedBundle {
  Tensor<T> fused;
  std::vector<ChannelSpan> layout;
  Index aligned_h = 0;
  Index aligned_w = 0;

  const ChannelSpan& span(const std::string& level) const;
};

/// Per-level 1x1 projections used only by add-mode alignment.
template <typename T>
struct MamParams {
  AlignOp op = AlignOp::concat;
  std::vector<Conv<T>> proj;

  static MamParams make(Builder<T> b, AlignOp op, const std::vector<Index>& channels);
  /// Channel count of the fused map.
  Index fused_channels(const std::vector<Index>& channels) const;
};

/// Target size: second-smallest level for 4 inputs, smallest for 3.
std::array<Index, 2> alignment_size(const std::vector<Shape>& shapes);

template <typename T>
AlignedBundle<T> mam_align(const FeaturePyramid<T>& features, const MamParams<T>& p);

/// The slice of `fused` recorded for `level`. In add mode every level owns the whole map.
template <typename T>
Tensor<T> separate(const Tensor<T>& fused, const AlignedBundle<T>& bundle, const std::string& level);

/// (F_emb_K3, F_emb_K4): DA block over the fused C2..C5 map, C3/C4 slices resized to C3/C4.
template <typename T>
std::array<Tensor<T>, 2> shallow_mfm(const AlignedBundle<T>& bundle, DaBlock<T>& block, RunMode mode);

template <typename T>
struct TransformerBlock {
  Index heads = 1;
  Conv<T> q, k, v, out;
  ConvBn<T> cb1;  // 1x1, C -> 2C
  Conv<T> dw;     // 3x3 depthwise on 2C
  ConvBn<T> cb2;  // 1x1, 2C -> C

  static TransformerBlock make(Builder<T> b, Index channels, Index heads);
  /// softmax(q^T k / sqrt(d)) per head, (N, heads, HW, HW).
  Tensor<T> attention_weights(const Tensor<T>& x) const;
  Tensor<T> attention(const Tensor<T>& x) const;
  Tensor<T> ffn(const Tensor<T>& x, RunMode mode);
  /// x + MHA(x), then + FFN; tokens are the HW pixels of the map.
  Tensor<T> operator()(const Tensor<T>& x, RunMode mode);
};

template <typename T>
Tensor<T> transformer_block(const Tensor<T>& x, TransformerBlock<T>& blk, RunMode mode) {
  return blk(x, mode);
}

/// (F_emb_B3, F_emb_B4): transformer stack over the fused K3..K5 map; the K3
/// slice is resized to K4, the K4 slice to K5.
template <typename T>
std::array<Tensor<T>, 2> deep_mfm(const AlignedBundle<T>& bundle, std::vector<TransformerBlock<T>>& blocks,
                                  RunMode mode);

template <typename T>
struct MemParams {
  Compensation mode = Compensation::mem;
  Conv<T> local;     // 1x1, Cl -> Cl
  Conv<T> global;    // 1x1, Cg -> Cl
  DaBlock<T> block;  // mem only
  Conv<T> proj;      // add only, 1x1 without bias

  static MemParams make(Builder<T> b, Compensation mode, Index local_channels, Index global_channels,
                        const NeckConfig& cfg);
};

/// mem: DA(local + conv_L(local) * sigmoid(conv_G(global))); add: local + proj(global).
template <typename T>
Tensor<T> mem_embed(const Tensor<T>& local, const Tensor<T>& global_emb, MemParams<T>& p, RunMode mode);

template <typename T>
struct Neck {
  NeckConfig cfg;
  MamParams<T> shallow_align;
  DaBlock<T> shallow;
  MemParams<T> mem_k3, mem_k4;
  MamParams<T> deep_align;
  std::vector<TransformerBlock<T>> deep;
  MemParams<T> mem_b4, mem_b5;

  /// channels = C2..C5 widths.
  static Neck make(Builder<T> b, const NeckConfig& cfg, const std::array<Index, 4>& channels);
  /// {C2..C5} -> {K3, B4, B5}.
  FeaturePyramid<T> operator()(const FeaturePyramid<T>& c, RunMode mode);
};

template <typename T>
FeaturePyramid<T> neck_forward(const FeaturePyramid<T>& c, Neck<T>& neck, RunMode mode) {
  return neck(c, mode);
}

}  // namespace sarnet
