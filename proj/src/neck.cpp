#include "sarnet/neck.hpp"

#include <algorithm>
#include <cmath>

namespace sarnet {

AlignOp parse_align_op(const std::string& s) {
  if (s == "concat") return AlignOp::concat;
  if (s == "add") return AlignOp::add;
  throw ConfigError("unknown align_op '" + s + "' (expected concat or add)");
}

Compensation parse_compensation(const std::string& s) {
  if (s == "mem") return Compensation::mem;
  if (s == "add") return Compensation::add;
  throw ConfigError("unknown compensation '" + s + "' (expected mem or add)");
}

std::string to_string(AlignOp a) { return a == AlignOp::concat ? "concat" : "add"; }
std::string to_string(Compensation c) { return c == Compensation::mem ? "mem" : "add"; }

template <typename T>
const ChannelSpan& AlignedBundle<T>::span(const std::string& level) const {
  for (const auto& s : layout)
    if (s.level == level) return s;
  throw ContractError("aligned bundle has no span for level " + level);
}

template <typename T>
MamParams<T> MamParams<T>::make(Builder<T> b, AlignOp op, const std::vector<Index>& channels) {
  MamParams p;
  p.op = op;
  if (op == AlignOp::add) {
    const Index common = *std::min_element(channels.begin(), channels.end());
    for (std::size_t i = 0; i < channels.size(); ++i)
      p.proj.push_back(Conv<T>::make(b.child("proj" + std::to_string(i)), channels[i], common, 1, 1, 1, 1, false));
  }
  return p;
}

template <typename T>
Index MamParams<T>::fused_channels(const std::vector<Index>& channels) const {
  if (op == AlignOp::add) return *std::min_element(channels.begin(), channels.end());
  Index s = 0;
  for (Index c : channels) s += c;
  return s;
}

std::array<Index, 2> alignment_size(const std::vector<Shape>& shapes) {
  if (shapes.size() != 3 && shapes.size() != 4)
    throw ContractError("alignment needs 3 or 4 levels, got " + std::to_string(shapes.size()));
  for (std::size_t i = 1; i < shapes.size(); ++i)
    if (shapes[i].h() * shapes[i].w() >= shapes[i - 1].h() * shapes[i - 1].w())
      throw ContractError("alignment levels must shrink strictly, level " + std::to_string(i) + " is " +
                          shapes[i].str() + " after " + shapes[i - 1].str());
  std::vector<Shape> by_area = shapes;
  std::sort(by_area.begin(), by_area.end(),
            [](const Shape& a, const Shape& b) { return a.h() * a.w() < b.h() * b.w(); });
  const Shape& t = by_area[shapes.size() == 4 ? 1 : 0];
  return {t.h(), t.w()};
}

template <typename T>
AlignedBundle<T> mam_align(const FeaturePyramid<T>& features, const MamParams<T>& p) {
  std::vector<Shape> shapes;
  for (const auto& [name, t] : features.levels()) shapes.push_back(t.shape());
  const auto [ha, wa] = alignment_size(shapes);
  if (p.op == AlignOp::add && p.proj.size() != features.size())
    throw ContractError("add alignment has " + std::to_string(p.proj.size()) + " projections for " +
                        std::to_string(features.size()) + " levels");

  AlignedBundle<T> out;
  out.aligned_h = ha;
  out.aligned_w = wa;
  std::vector<Tensor<T>> parts;
  Index begin = 0;
  for (std::size_t i = 0; i < features.size(); ++i) {
    const auto& [name, t] = features.levels()[i];
    auto r = resize_to(t, ha, wa);
    if (p.op == AlignOp::concat) {
      out.layout.push_back({name, begin, t.dim(1), t.dim(2), t.dim(3)});
      begin += t.dim(1);
      parts.push_back(r);
    } else {
      auto q = p.proj[i](r);
      out.layout.push_back({name, 0, q.dim(1), t.dim(2), t.dim(3)});
      parts.push_back(q);
    }
  }
  if (p.op == AlignOp::concat) {
    out.fused = concat_channels(parts);
  } else {
    out.fused = parts[0];
    for (std::size_t i = 1; i < parts.size(); ++i) out.fused = add(out.fused, parts[i]);
  }
  return out;
}

template <typename T>
Tensor<T> separate(const Tensor<T>& fused, const AlignedBundle<T>& bundle, const std::string& level) {
  const auto& s = bundle.span(level);
  if (s.begin == 0 && s.length == fused.dim(1)) return fused;
  return slice(fused, 1, s.begin, s.length);
}

template <typename T>
std::array<Tensor<T>, 2> shallow_mfm(const AlignedBundle<T>& bundle, DaBlock<T>& block, RunMode mode) {
  const auto& s3 = bundle.span("C3");
  const auto& s4 = bundle.span("C4");
  auto fused = block(bundle.fused, mode);
  return {resize_to(separate(fused, bundle, "C3"), s3.h, s3.w), resize_to(separate(fused, bundle, "C4"), s4.h, s4.w)};
}

template <typename T>
TransformerBlock<T> TransformerBlock<T>::make(Builder<T> b, Index channels, Index heads) {
  if (heads < 1 || channels % heads != 0)
    throw ConfigError("transformer channels " + std::to_string(channels) + " not divisible by heads " +
                      std::to_string(heads));
  TransformerBlock t;
  t.heads = heads;
  t.q = Conv<T>::make(b.child("q"), channels, channels, 1, 1, 1, 1, false);
  t.k = Conv<T>::make(b.child("k"), channels, channels, 1, 1, 1, 1, false);
  t.v = Conv<T>::make(b.child("v"), channels, channels, 1, 1, 1, 1, false);
  t.out = Conv<T>::make(b.child("out"), channels, channels, 1, 1, 1, 1, false);
  t.cb1 = ConvBn<T>::make(b.child("cb1"), channels, 2 * channels, 1, 1, false);
  t.dw = Conv<T>::make(b.child("dw"), 2 * channels, 2 * channels, 3, 3, 1, 2 * channels, false);
  t.cb2 = ConvBn<T>::make(b.child("cb2"), 2 * channels, channels, 1, 1, false);
  return t;
}

namespace {

// (N,C,H,W) -> (N, heads, C/heads, HW)
template <typename T>
Tensor<T> split_heads(const Tensor<T>& x, Index heads) {
  return reshape(x, Shape(x.dim(0), heads, x.dim(1) / heads, x.dim(2) * x.dim(3)));
}

}  // namespace

template <typename T>
Tensor<T> TransformerBlock<T>::attention_weights(const Tensor<T>& x) const {
  auto qh = split_heads(q(x), heads);
  auto kh = split_heads(k(x), heads);
  const T s = T(1) / std::sqrt(static_cast<T>(qh.dim(2)));
  auto scores = matmul(permute(qh, {0, 1, 3, 2}), kh);
  return softmax(scale(scores, s), 3);
}

template <typename T>
Tensor<T> TransformerBlock<T>::attention(const Tensor<T>& x) const {
  auto a = attention_weights(x);
  auto vh = split_heads(v(x), heads);
  auto o = matmul(vh, permute(a, {0, 1, 3, 2}));
  return out(reshape(o, x.shape()));
}

template <typename T>
Tensor<T> TransformerBlock<T>::ffn(const Tensor<T>& x, RunMode mode) {
  return cb2(relu(dw(cb1(x, mode))), mode);
}

template <typename T>
Tensor<T> TransformerBlock<T>::operator()(const Tensor<T>& x, RunMode mode) {
  if (x.dim(1) != q.in_channels())
    throw ShapeError("transformer block expects C=" + std::to_string(q.in_channels()) + ", got " +
                     std::to_string(x.dim(1)));
  auto y = add(x, attention(x));
  return add(y, ffn(y, mode));
}

template <typename T>
std::array<Tensor<T>, 2> deep_mfm(const AlignedBundle<T>& bundle, std::vector<TransformerBlock<T>>& blocks,
                                  RunMode mode) {
  const auto& s4 = bundle.span("K4");
  const auto& s5 = bundle.span("K5");
  Tensor<T> fused = bundle.fused;
  for (auto& blk : blocks) fused = blk(fused, mode);
  return {resize_to(separate(fused, bundle, "K3"), s4.h, s4.w), resize_to(separate(fused, bundle, "K4"), s5.h, s5.w)};
}

template <typename T>
MemParams<T> MemParams<T>::make(Builder<T> b, Compensation mode, Index local_channels, Index global_channels,
                                const NeckConfig& cfg) {
  MemParams p;
  p.mode = mode;
  if (mode == Compensation::mem) {
    p.local = Conv<T>::make(b.child("local"), local_channels, local_channels, 1, 1);
    p.global = Conv<T>::make(b.child("global"), global_channels, local_channels, 1, 1);
    p.block = DaBlock<T>::make(b.child("block"), local_channels, local_channels, 1, cfg.dam, cfg.dam_kernel,
                               cfg.dam_reduction);
  } else {
    p.proj = Conv<T>::make(b.child("proj"), global_channels, local_channels, 1, 1, 1, 1, false);
  }
  return p;
}

template <typename T>
Tensor<T> mem_embed(const Tensor<T>& local, const Tensor<T>& global_emb, MemParams<T>& p, RunMode mode) {
  if (local.dim(0) != global_emb.dim(0) || local.dim(2) != global_emb.dim(2) || local.dim(3) != global_emb.dim(3))
    throw ShapeError("mem_embed: global embedding " + global_emb.shape().str() + " does not match local " +
                     local.shape().str() + " on N/H/W");
  if (p.mode == Compensation::add) return add(local, p.proj(global_emb));
  auto gate = sigmoid(p.global(global_emb));
  return p.block(add(local, mul(p.local(local), gate)), mode);
}

template <typename T>
Neck<T> Neck<T>::make(Builder<T> b, const NeckConfig& cfg, const std::array<Index, 4>& ch) {
  Neck n;
  n.cfg = cfg;
  if (!cfg.ucm) return n;
  const std::vector<Index> shallow_ch{ch[0], ch[1], ch[2], ch[3]};
  n.shallow_align = MamParams<T>::make(b.child("shallow_align"), cfg.align_op, shallow_ch);
  const Index fs = n.shallow_align.fused_channels(shallow_ch);
  n.shallow = DaBlock<T>::make(b.child("shallow"), fs, fs, 1, cfg.dam, cfg.dam_kernel, cfg.dam_reduction);
  const bool concat = cfg.align_op == AlignOp::concat;
  n.mem_k3 = MemParams<T>::make(b.child("mem_k3"), cfg.compensation, ch[1], concat ? ch[1] : fs, cfg);
  n.mem_k4 = MemParams<T>::make(b.child("mem_k4"), cfg.compensation, ch[2], concat ? ch[2] : fs, cfg);

  const std::vector<Index> deep_ch{ch[1], ch[2], ch[3]};
  n.deep_align = MamParams<T>::make(b.child("deep_align"), cfg.align_op, deep_ch);
  const Index fd = n.deep_align.fused_channels(deep_ch);
  for (Index i = 0; i < cfg.n_blocks; ++i)
    n.deep.push_back(TransformerBlock<T>::make(b.child("deep" + std::to_string(i)), fd, cfg.heads));
  n.mem_b4 = MemParams<T>::make(b.child("mem_b4"), cfg.compensation, ch[2], concat ? ch[1] : fd, cfg);
  n.mem_b5 = MemParams<T>::make(b.child("mem_b5"), cfg.compensation, ch[3], concat ? ch[2] : fd, cfg);
  return n;
}

template <typename T>
FeaturePyramid<T> Neck<T>::operator()(const FeaturePyramid<T>& c, RunMode mode) {
  for (const char* l : {"C2", "C3", "C4", "C5"})
    if (!c.contains(l)) throw ContractError(std::string("neck input is missing level ") + l);
  FeaturePyramid<T> out;
  if (!cfg.ucm) {
    out.add("K3", c.at("C3"));
    out.add("B4", c.at("C4"));
    out.add("B5", c.at("C5"));
    return out;
  }
  auto shallow_bundle = mam_align(c, shallow_align);
  auto [emb_k3, emb_k4] = shallow_mfm(shallow_bundle, shallow, mode);
  auto k3 = mem_embed(c.at("C3"), emb_k3, mem_k3, mode);
  auto k4 = mem_embed(c.at("C4"), emb_k4, mem_k4, mode);
  const auto& k5 = c.at("C5");

  FeaturePyramid<T> k;
  k.add("K3", k3);
  k.add("K4", k4);
  k.add("K5", k5);
  auto deep_bundle = mam_align(k, deep_align);
  auto [emb_b3, emb_b4] = deep_mfm(deep_bundle, deep, mode);
  out.add("K3", k3);
  out.add("B4", mem_embed(k4, emb_b3, mem_b4, mode));
  out.add("B5", mem_embed(k5, emb_b4, mem_b5, mode));
  return out;
}

#define SARNET_INSTANTIATE_NECK(T)                                                                            \
  template struct AlignedBundle<T>;                                                                           \
  template struct MamParams<T>;                                                                               \
  template struct TransformerBlock<T>;                                                                        \
  template struct MemParams<T>;                                                                               \
  template struct Neck<T>;                                                                                    \
  template AlignedBundle<T> mam_align(const FeaturePyramid<T>&, const MamParams<T>&);                         \
  template Tensor<T> separate(const Tensor<T>&, const AlignedBundle<T>&, const std::string&);                 \
  template std::array<Tensor<T>, 2> shallow_mfm(const AlignedBundle<T>&, DaBlock<T>&, RunMode);               \
  template std::array<Tensor<T>, 2> deep_mfm(const AlignedBundle<T>&, std::vector<TransformerBlock<T>>&, RunMode); \
  template Tensor<T> mem_embed(const Tensor<T>&, const Tensor<T>&, MemParams<T>&, RunMode);

SARNET_INSTANTIATE_NECK(float)
SARNET_INSTANTIATE_NECK(double)

}  // namespace sarnet
