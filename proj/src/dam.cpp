#include "sarnet/dam.hpp"

#include <algorithm>

namespace sarnet {

template <typename T>
DirectionalDeform<T> DirectionalDeform<T>::make(Builder<T> b, Index channels, Index k, ConvAxis axis) {
  if (k < 1 || k % 2 == 0) throw ConfigError("deformable kernel length must be odd, got " + std::to_string(k));
  DirectionalDeform d;
  d.axis = axis;
  const bool row = axis == ConvAxis::row;
  const Shape tap_shape = row ? Shape(k, channels, 1, k) : Shape(k, channels, k, 1);
  d.offset.weight = b.constant_param("offset.weight", tap_shape, T(0));
  d.offset.bias = b.constant_param("offset.bias", Shape(1, k, 1, 1), T(0));
  d.offset.opt = row ? Conv2dOptions::same(1, k) : Conv2dOptions::same(k, 1);
  d.weight = b.uniform_param("weight", row ? Shape(channels, channels, 1, k) : Shape(channels, channels, k, 1),
                             channels * k);
  d.bias = b.uniform_param("bias", Shape(1, channels, 1, 1), channels * k);
  return d;
}

template <typename T>
Tensor<T> DirectionalDeform<T>::operator()(const Tensor<T>& x) const {
  return deform_conv_axis(x, offset(x), weight, bias, axis);
}

template <typename T>
DamParams<T> DamParams<T>::make(Builder<T> b, Index channels, Index k, Index reduction) {
  if (reduction < 1) throw ConfigError("DAM reduction ratio must be >= 1");
  DamParams p;
  p.channels = channels;
  p.reduced = std::max<Index>(8, channels / reduction);
  p.row_deform = DirectionalDeform<T>::make(b.child("row_deform"), channels, k, ConvAxis::row);
  p.col_deform = DirectionalDeform<T>::make(b.child("col_deform"), channels, k, ConvAxis::column);
  p.cbr = ConvBn<T>::make(b.child("cbr"), channels, p.reduced, 1);
  p.conv_h = Conv<T>::make(b.child("conv_h"), p.reduced, channels, 1, 1);
  p.conv_w = Conv<T>::make(b.child("conv_w"), p.reduced, channels, 1, 1);
  return p;
}

namespace {

template <typename T>
void check_channels(const Tensor<T>& x, const DamParams<T>& p, const char* op) {
  if (x.dim(1) != p.channels)
    throw ShapeError(std::string(op) + ": input axis C=" + std::to_string(x.dim(1)) + " but module has " +
                     std::to_string(p.channels) + " channels");
}

}  // namespace

template <typename T>
Tensor<T> direction_aware_generation(const Tensor<T>& x, const DamParams<T>& p) {
  check_channels(x, p, "direction_aware_generation");
  auto gate = sigmoid(add(p.row_deform(x), p.col_deform(x)));
  return mul(gate, x);
}

template <typename T>
DirectionalDescriptors<T> directional_pool(const Tensor<T>& x_dir) {
  return {adaptive_avg_pool(x_dir, x_dir.dim(2), 1), adaptive_avg_pool(x_dir, 1, x_dir.dim(3))};
}

template <typename T>
EmbeddingTrace<T> channel_attention_embedding_trace(const Tensor<T>& x, const DirectionalDescriptors<T>& d,
                                                    DamParams<T>& p, RunMode mode) {
  check_channels(x, p, "channel_attention_embedding");
  const Index H = x.dim(2), W = x.dim(3);
  if (d.z_h.shape() != Shape(x.dim(0), x.dim(1), H, 1) || d.z_w.shape() != Shape(x.dim(0), x.dim(1), 1, W))
    throw ContractError("channel_attention_embedding: descriptors do not decompose as H=" + std::to_string(H) +
                        " rows + W=" + std::to_string(W) + " columns of the input");
  EmbeddingTrace<T> t;
  t.stacked = concat(std::vector<Tensor<T>>{d.z_h, transpose_hw(d.z_w)}, 2);
  auto g = p.cbr(t.stacked, mode);
  if (g.dim(2) != H + W) throw ContractError("channel_attention_embedding: H+W decomposition mismatch");
  auto parts = split(g, 2, {H, W});
  t.gate_h = sigmoid(p.conv_h(parts[0]));
  t.gate_w = sigmoid(p.conv_w(transpose_hw(parts[1])));
  t.out = mul(mul(x, t.gate_h), t.gate_w);
  return t;
}

template <typename T>
Tensor<T> dam_forward(const Tensor<T>& x, DamParams<T>& p, RunMode mode) {
  auto x_dir = direction_aware_generation(x, p);
  return channel_attention_embedding(x, directional_pool(x_dir), p, mode);
}

template <typename T>
DaVggBlock<T> DaVggBlock<T>::make(Builder<T> b, Index cin, Index cout, bool with_dam, Index k, Index reduction) {
  DaVggBlock blk;
  blk.conv = ConvBn<T>::make(b.child("conv"), cin, cout, 3);
  if (with_dam) blk.dam = DamParams<T>::make(b.child("dam"), cout, k, reduction);
  return blk;
}

template <typename T>
Tensor<T> DaVggBlock<T>::operator()(const Tensor<T>& x, RunMode mode) {
  auto y = conv(x, mode);
  return dam ? dam_forward(y, *dam, mode) : y;
}

template <typename T>
DaBlock<T> DaBlock<T>::make(Builder<T> b, Index cin, Index cout, Index depth, bool with_dam, Index k,
                            Index reduction) {
  if (depth < 1) throw ConfigError("DA block depth must be >= 1");
  DaBlock blk;
  for (Index i = 0; i < depth; ++i)
    blk.blocks.push_back(
        DaVggBlock<T>::make(b.child(std::to_string(i)), i == 0 ? cin : cout, cout, with_dam, k, reduction));
  return blk;
}

template <typename T>
Tensor<T> DaBlock<T>::operator()(const Tensor<T>& x, RunMode mode) {
  Tensor<T> y = x;
  for (auto& blk : blocks) y = blk(y, mode);
  return y;
}

#define SARNET_INSTANTIATE_DAM(T)                                                                                \
  template struct DirectionalDeform<T>;                                                                          \
  template struct DamParams<T>;                                                                                  \
  template struct DaVggBlock<T>;                                                                                 \
  template struct DaBlock<T>;                                                                                    \
  template Tensor<T> direction_aware_generation(const Tensor<T>&, const DamParams<T>&);                          \
  template DirectionalDescriptors<T> directional_pool(const Tensor<T>&);                                         \
  template EmbeddingTrace<T> channel_attention_embedding_trace(const Tensor<T>&, const DirectionalDescriptors<T>&, \
                                                               DamParams<T>&, RunMode);                          \
  template Tensor<T> dam_forward(const Tensor<T>&, DamParams<T>&, RunMode);

SARNET_INSTANTIATE_DAM(float)
SARNET_INSTANTIATE_DAM(double)

}  // namespace sarnet
