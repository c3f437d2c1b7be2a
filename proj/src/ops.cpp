#include "sarnet/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numeric>

#include "sarnet/autograd.hpp"

namespace sarnet {

namespace {

template <typename T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapR = Eigen::Map<MatR<T>>;
template <typename T>
using CMapR = Eigen::Map<const MatR<T>>;

using detail::finish;
using detail::grad_target;

std::array<Index, 4> strides_of(const Shape& s) {
  return {s[1] * s[2] * s[3], s[2] * s[3], s[3], 1};
}

Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  Shape out;
  for (int ax = 0; ax < 4; ++ax) {
    if (a[ax] == b[ax] || b[ax] == 1) {
      out.dims[ax] = a[ax];
    } else if (a[ax] == 1) {
      out.dims[ax] = b[ax];
    } else {
      throw ShapeError(std::string(op) + ": dimension mismatch on axis " + axis_name(ax) + " (" +
                       std::to_string(a[ax]) + " vs " + std::to_string(b[ax]) + "), dims " + a.str() + " vs " +
                       b.str());
    }
  }
  return out;
}

// Broadcast strides: 0 on axes of size 1 that are expanded.
std::array<Index, 4> bstrides(const Shape& s, const Shape& out) {
  auto st = strides_of(s);
  for (int ax = 0; ax < 4; ++ax)
    if (s[ax] == 1 && out[ax] != 1) st[static_cast<std::size_t>(ax)] = 0;
  return st;
}

template <typename Fn>
void for_each_broadcast(const Shape& out, const std::array<Index, 4>& sa, const std::array<Index, 4>& sb, Fn&& fn) {
  Index o = 0;
  for (Index n = 0; n < out[0]; ++n)
    for (Index c = 0; c < out[1]; ++c)
      for (Index h = 0; h < out[2]; ++h) {
        Index ia = n * sa[0] + c * sa[1] + h * sa[2];
        Index ib = n * sb[0] + c * sb[1] + h * sb[2];
        for (Index w = 0; w < out[3]; ++w, ++o) fn(o, ia + w * sa[3], ib + w * sb[3]);
      }
}

enum class BinOp { add, sub, mul };

template <typename T>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, BinOp kind, const char* name) {
  const Shape out_shape = broadcast_shape(a.shape(), b.shape(), name);
  Tensor<T> out(out_shape);
  auto od = out.mutable_data();
  const T* pa = a.ptr();
  const T* pb = b.ptr();
  const bool same = a.shape() == b.shape();
  if (same) {
    const std::size_t n = od.size();
    switch (kind) {
      case BinOp::add: for (std::size_t i = 0; i < n; ++i) od[i] = pa[i] + pb[i]; break;
      case BinOp::sub: for (std::size_t i = 0; i < n; ++i) od[i] = pa[i] - pb[i]; break;
      case BinOp::mul: for (std::size_t i = 0; i < n; ++i) od[i] = pa[i] * pb[i]; break;
    }
  } else {
    const auto sa = bstrides(a.shape(), out_shape);
    const auto sb = bstrides(b.shape(), out_shape);
    for_each_broadcast(out_shape, sa, sb, [&](Index o, Index ia, Index ib) {
      switch (kind) {
        case BinOp::add: od[o] = pa[ia] + pb[ib]; break;
        case BinOp::sub: od[o] = pa[ia] - pb[ib]; break;
        case BinOp::mul: od[o] = pa[ia] * pb[ib]; break;
      }
    });
  }
  auto as = a.storage();
  auto bs = b.storage();
  return finish<T>(name, {&a, &b}, out, [as, bs, kind, out_shape, same](const std::vector<T>& g) {
    T* ga = grad_target(as);
    T* gb = grad_target(bs);
    const T* va = as->data.data();
    const T* vb = bs->data.data();
    const T sign_b = kind == BinOp::sub ? T(-1) : T(1);
    if (same) {
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (kind == BinOp::mul) {
          if (ga) ga[i] += g[i] * vb[i];
          if (gb) gb[i] += g[i] * va[i];
        } else {
          if (ga) ga[i] += g[i];
          if (gb) gb[i] += sign_b * g[i];
        }
      }
      return;
    }
    const auto sa = bstrides(as->shape, out_shape);
    const auto sb = bstrides(bs->shape, out_shape);
    for_each_broadcast(out_shape, sa, sb, [&](Index o, Index ia, Index ib) {
      if (kind == BinOp::mul) {
        if (ga) ga[ia] += g[o] * vb[ib];
        if (gb) gb[ib] += g[o] * va[ia];
      } else {
        if (ga) ga[ia] += g[o];
        if (gb) gb[ib] += sign_b * g[o];
      }
    });
  });
}

template <typename T>
T sigmoid_scalar(T v) {
  return v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, BinOp::add, "add");
}
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, BinOp::sub, "sub");
}
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, BinOp::mul, "mul");
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  Tensor<T> out(x.shape());
  auto od = out.mutable_data();
  const auto xd = x.data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] = xd[i] * factor;
  auto xs = x.storage();
  return finish<T>("scale", {&x}, out, [xs, factor](const std::vector<T>& g) {
    if (T* gx = grad_target(xs))
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * factor;
  });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T value) {
  Tensor<T> out(x.shape());
  auto od = out.mutable_data();
  const auto xd = x.data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] = xd[i] + value;
  auto xs = x.storage();
  return finish<T>("add_scalar", {&x}, out, [xs](const std::vector<T>& g) {
    if (T* gx = grad_target(xs))
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  auto od = out.mutable_data();
  const auto xd = x.data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] = sigmoid_scalar(xd[i]);
  auto xs = x.storage();
  auto ys = out.storage();
  return finish<T>("sigmoid", {&x}, out, [xs, yw = std::weak_ptr(ys)](const std::vector<T>& g) {
    T* gx = grad_target(xs);
    if (!gx) return;
    auto ys = yw.lock();
    const T* y = ys->data.data();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * y[i] * (T(1) - y[i]);
  });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  auto od = out.mutable_data();
  const auto xd = x.data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] = xd[i] > T(0) ? xd[i] : T(0);
  auto xs = x.storage();
  return finish<T>("relu", {&x}, out, [xs](const std::vector<T>& g) {
    T* gx = grad_target(xs);
    if (!gx) return;
    const T* xv = xs->data.data();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (xv[i] > T(0)) gx[i] += g[i];
  });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
  if (axis < 0 || axis > 3) throw ShapeError("softmax: invalid axis " + std::to_string(axis));
  const Shape s = x.shape();
  const auto st = strides_of(s);
  const Index len = s[axis];
  const Index step = st[static_cast<std::size_t>(axis)];
  Tensor<T> out(s);
  auto od = out.mutable_data();
  const T* xv = x.ptr();
  // Iterate over every line along `axis`.
  auto for_each_line = [&](auto&& fn) {
    for (Index base = 0; base < s.numel(); ++base) {
      Index coord = (base / step) % len;
      if (coord != 0) continue;
      fn(base);
    }
  };
  for_each_line([&](Index base) {
    T mx = xv[base];
    for (Index i = 1; i < len; ++i) mx = std::max(mx, xv[base + i * step]);
    T z = 0;
    for (Index i = 0; i < len; ++i) {
      T e = std::exp(xv[base + i * step] - mx);
      od[base + i * step] = e;
      z += e;
    }
    for (Index i = 0; i < len; ++i) od[base + i * step] /= z;
  });
  auto xs = x.storage();
  return finish<T>("softmax", {&x}, out, [xs, yw = std::weak_ptr(out.storage()), s, step, len](const std::vector<T>& g) {
    T* gx = grad_target(xs);
    if (!gx) return;
    const T* y = yw.lock()->data.data();
    for (Index base = 0; base < s.numel(); ++base) {
      if ((base / step) % len != 0) continue;
      T dot = 0;
      for (Index i = 0; i < len; ++i) dot += g[base + i * step] * y[base + i * step];
      for (Index i = 0; i < len; ++i) {
        const Index k = base + i * step;
        gx[k] += y[k] * (g[k] - dot);
      }
    }
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  const auto xd = x.data();
  T acc = 0;
  for (T v : xd) acc += v;
  Tensor<T> out(Shape(1, 1, 1, 1), acc);
  auto xs = x.storage();
  return finish<T>("sum", {&x}, out, [xs](const std::vector<T>& g) {
    if (T* gx = grad_target(xs))
      for (std::size_t i = 0; i < xs->data.size(); ++i) gx[i] += g[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  const Shape sa = a.shape(), sb = b.shape();
  if (sa[0] != sb[0]) throw ShapeError("matmul: dimension mismatch on axis N");
  if (sa[1] != sb[1]) throw ShapeError("matmul: dimension mismatch on axis C");
  if (sa[3] != sb[2]) throw ShapeError("matmul: inner dimension mismatch (W of lhs vs H of rhs)");
  const Index M = sa[2], K = sa[3], P = sb[3];
  const Index batches = sa[0] * sa[1];
  Tensor<T> out(Shape(sa[0], sa[1], M, P));
  T* o = out.mutable_data().data();
  for (Index bi = 0; bi < batches; ++bi) {
    MapR<T>(o + bi * M * P, M, P).noalias() = CMapR<T>(a.ptr() + bi * M * K, M, K) * CMapR<T>(b.ptr() + bi * K * P, K, P);
  }
  auto as = a.storage(), bs = b.storage();
  return finish<T>("matmul", {&a, &b}, out, [as, bs, M, K, P, batches](const std::vector<T>& g) {
    T* ga = grad_target(as);
    T* gb = grad_target(bs);
    for (Index bi = 0; bi < batches; ++bi) {
      CMapR<T> G(g.data() + bi * M * P, M, P);
      if (ga) MapR<T>(ga + bi * M * K, M, K).noalias() += G * CMapR<T>(bs->data.data() + bi * K * P, K, P).transpose();
      if (gb) MapR<T>(gb + bi * K * P, K, P).noalias() += CMapR<T>(as->data.data() + bi * M * K, M, K).transpose() * G;
    }
  });
}

template <typename T>
Tensor<T> permute(const Tensor<T>& x, std::array<int, 4> order) {
  std::array<bool, 4> seen{};
  for (int ax : order) {
    if (ax < 0 || ax > 3 || seen[static_cast<std::size_t>(ax)]) throw ShapeError("permute: invalid axis order");
    seen[static_cast<std::size_t>(ax)] = true;
  }
  const Shape s = x.shape();
  const auto st = strides_of(s);
  Shape os;
  std::array<Index, 4> src_stride{};
  for (int i = 0; i < 4; ++i) {
    os.dims[static_cast<std::size_t>(i)] = s[order[static_cast<std::size_t>(i)]];
    src_stride[static_cast<std::size_t>(i)] = st[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])];
  }
  Tensor<T> out(os);
  auto od = out.mutable_data();
  const T* xv = x.ptr();
  std::vector<Index> map(static_cast<std::size_t>(s.numel()));
  Index o = 0;
  for (Index a = 0; a < os[0]; ++a)
    for (Index b = 0; b < os[1]; ++b)
      for (Index c = 0; c < os[2]; ++c)
        for (Index d = 0; d < os[3]; ++d, ++o) {
          const Index src = a * src_stride[0] + b * src_stride[1] + c * src_stride[2] + d * src_stride[3];
          map[static_cast<std::size_t>(o)] = src;
          od[o] = xv[src];
        }
  auto xs = x.storage();
  return finish<T>("permute", {&x}, out, [xs, map = std::move(map)](const std::vector<T>& g) {
    if (T* gx = grad_target(xs))
      for (std::size_t i = 0; i < g.size(); ++i) gx[map[i]] += g[i];
  });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, const Shape& shape) {
  Tensor<T> out = x.reshaped_copy(shape);
  auto xs = x.storage();
  return finish<T>("reshape", {&x}, out, [xs](const std::vector<T>& g) {
    if (T* gx = grad_target(xs))
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  if (axis < 0 || axis > 3) throw ShapeError("concat: invalid axis");
  Shape os = parts[0].shape();
  Index total = 0;
  for (const auto& p : parts) {
    for (int ax = 0; ax < 4; ++ax)
      if (ax != axis && p.shape()[ax] != os[ax])
        throw ShapeError(std::string("concat: dimension mismatch on axis ") + axis_name(ax) + " (" +
                         std::to_string(p.shape()[ax]) + " vs " + std::to_string(os[ax]) + ")");
    total += p.shape()[axis];
  }
  os.dims[static_cast<std::size_t>(axis)] = total;
  Tensor<T> out(os);
  auto od = out.mutable_data();
  // outer = product of axes before `axis`, inner = product from `axis`+1.
  Index outer = 1, inner = 1;
  for (int ax = 0; ax < axis; ++ax) outer *= os[ax];
  for (int ax = axis + 1; ax < 4; ++ax) inner *= os[ax];
  Index offset = 0;
  std::vector<Index> offsets;
  for (const auto& p : parts) {
    const Index len = p.shape()[axis];
    const T* pv = p.ptr();
    for (Index o = 0; o < outer; ++o)
      std::copy(pv + o * len * inner, pv + (o + 1) * len * inner, od.data() + (o * total + offset) * inner);
    offsets.push_back(offset);
    offset += len;
  }
  std::vector<std::shared_ptr<TensorStorage<T>>> stores;
  for (const auto& p : parts) stores.push_back(p.storage());
  if (nan_screening_enabled()) screen_finite(out, "concat");
  Tape<T>* tape = Tape<T>::active();
  bool tracked = false;
  for (const auto& p : parts) tracked = tracked || p.requires_grad();
  if (!tape || !tracked) return out;
  out.set_requires_grad(true);
  typename Tape<T>::Entry entry;
  entry.op = "concat";
  entry.inputs = stores;
  entry.output = out.storage();
  entry.backward = [stores, offsets, outer, inner, total, out_raw = out.storage().get()]() {
    if (out_raw->grad.empty()) return;
    const auto& g = out_raw->grad;
    for (std::size_t k = 0; k < stores.size(); ++k) {
      T* gp = grad_target(stores[k]);
      if (!gp) continue;
      const Index len = static_cast<Index>(stores[k]->data.size()) / (outer * inner);
      for (Index o = 0; o < outer; ++o)
        for (Index i = 0; i < len * inner; ++i) gp[o * len * inner + i] += g[(o * total + offsets[k]) * inner + i];
    }
  };
  tape->record(std::move(entry));
  return out;
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, int axis, Index begin, Index length) {
  if (axis < 0 || axis > 3) throw ShapeError("slice: invalid axis");
  const Shape s = x.shape();
  if (begin < 0 || length < 1 || begin + length > s[axis])
    throw ShapeError(std::string("slice: range out of bounds on axis ") + axis_name(axis));
  Shape os = s;
  os.dims[static_cast<std::size_t>(axis)] = length;
  Index outer = 1, inner = 1;
  for (int ax = 0; ax < axis; ++ax) outer *= s[ax];
  for (int ax = axis + 1; ax < 4; ++ax) inner *= s[ax];
  const Index total = s[axis];
  Tensor<T> out(os);
  auto od = out.mutable_data();
  const T* xv = x.ptr();
  for (Index o = 0; o < outer; ++o)
    std::copy(xv + (o * total + begin) * inner, xv + (o * total + begin + length) * inner,
              od.data() + o * length * inner);
  auto xs = x.storage();
  return finish<T>("slice", {&x}, out, [xs, outer, inner, total, begin, length](const std::vector<T>& g) {
    T* gx = grad_target(xs);
    if (!gx) return;
    for (Index o = 0; o < outer; ++o)
      for (Index i = 0; i < length * inner; ++i) gx[(o * total + begin) * inner + i] += g[o * length * inner + i];
  });
}

template <typename T>
std::vector<Tensor<T>> split(const Tensor<T>& x, int axis, const std::vector<Index>& sizes) {
  if (axis < 0 || axis > 3) throw ShapeError("split: invalid axis");
  const Index total = std::accumulate(sizes.begin(), sizes.end(), Index(0));
  if (total != x.shape()[axis])
    throw ShapeError(std::string("split: sizes sum to ") + std::to_string(total) + " but axis " + axis_name(axis) +
                     " has " + std::to_string(x.shape()[axis]));
  std::vector<Tensor<T>> out;
  Index begin = 0;
  for (Index len : sizes) {
    out.push_back(slice(x, axis, begin, len));
    begin += len;
  }
  return out;
}

template <typename T>
Tensor<T> bias_add(const Tensor<T>& x, const Tensor<T>& bias) {
  const Shape s = x.shape();
  if (bias.shape() != Shape(1, s.c(), 1, 1))
    throw ShapeError("bias_add: bias dims " + bias.shape().str() + " do not match channel axis C=" + std::to_string(s.c()));
  Tensor<T> out(s);
  auto od = out.mutable_data();
  const T* xv = x.ptr();
  const T* bv = bias.ptr();
  const Index plane = s.h() * s.w();
  for (Index n = 0; n < s.n(); ++n)
    for (Index c = 0; c < s.c(); ++c) {
      const Index base = (n * s.c() + c) * plane;
      for (Index i = 0; i < plane; ++i) od[base + i] = xv[base + i] + bv[c];
    }
  auto xs = x.storage(), bs = bias.storage();
  return finish<T>("bias_add", {&x, &bias}, out, [xs, bs, s, plane](const std::vector<T>& g) {
    T* gx = grad_target(xs);
    T* gb = grad_target(bs);
    for (Index n = 0; n < s.n(); ++n)
      for (Index c = 0; c < s.c(); ++c) {
        const Index base = (n * s.c() + c) * plane;
        T acc = 0;
        for (Index i = 0; i < plane; ++i) {
          if (gx) gx[base + i] += g[base + i];
          acc += g[base + i];
        }
        if (gb) gb[c] += acc;
      }
  });
}

template <typename T>
Tensor<T> batchnorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, Tensor<T>& running_mean,
                    Tensor<T>& running_var, const BatchNormOptions& opt) {
  const Shape s = x.shape();
  const Shape cs(1, s.c(), 1, 1);
  if (gamma.shape() != cs || beta.shape() != cs || running_mean.shape() != cs || running_var.shape() != cs)
    throw ShapeError("batchnorm: parameter dims must be (1,C,1,1) with C=" + std::to_string(s.c()));
  const Index C = s.c(), plane = s.h() * s.w();
  const Index count = s.n() * plane;
  std::vector<T> mu(static_cast<std::size_t>(C)), inv_std(static_cast<std::size_t>(C));
  const T* xv = x.ptr();
  if (opt.training) {
    auto rm = running_mean.mutable_data();
    auto rv = running_var.mutable_data();
    for (Index c = 0; c < C; ++c) {
      double m = 0;
      for (Index n = 0; n < s.n(); ++n) {
        const T* p = xv + (n * C + c) * plane;
        for (Index i = 0; i < plane; ++i) m += p[i];
      }
      m /= static_cast<double>(count);
      double v = 0;
      for (Index n = 0; n < s.n(); ++n) {
        const T* p = xv + (n * C + c) * plane;
        for (Index i = 0; i < plane; ++i) v += (p[i] - m) * (p[i] - m);
      }
      const double var = v / static_cast<double>(count);
      mu[c] = static_cast<T>(m);
      inv_std[c] = static_cast<T>(1.0 / std::sqrt(var + opt.eps));
      const double unbiased = count > 1 ? v / static_cast<double>(count - 1) : var;
      rm[c] = static_cast<T>((1.0 - opt.momentum) * rm[c] + opt.momentum * m);
      rv[c] = static_cast<T>((1.0 - opt.momentum) * rv[c] + opt.momentum * unbiased);
    }
  } else {
    const auto rm = running_mean.data();
    const auto rv = running_var.data();
    for (Index c = 0; c < C; ++c) {
      mu[c] = rm[c];
      inv_std[c] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(rv[c]) + opt.eps));
    }
  }
  Tensor<T> out(s);
  auto od = out.mutable_data();
  const T* gv = gamma.ptr();
  const T* bv = beta.ptr();
  for (Index n = 0; n < s.n(); ++n)
    for (Index c = 0; c < C; ++c) {
      const Index base = (n * C + c) * plane;
      const T a = gv[c] * inv_std[c];
      const T b = bv[c] - mu[c] * a;
      for (Index i = 0; i < plane; ++i) od[base + i] = xv[base + i] * a + b;
    }
  auto xs = x.storage(), gs = gamma.storage(), bs = beta.storage();
  const bool training = opt.training;
  return finish<T>("batchnorm", {&x, &gamma, &beta}, out,
                   [xs, gs, bs, s, mu, inv_std, training, plane, count](const std::vector<T>& g) {
                     T* gx = grad_target(xs);
                     T* gg = grad_target(gs);
                     T* gb = grad_target(bs);
                     const T* xv = xs->data.data();
                     const T* gam = gs->data.data();
                     const Index C = s.c();
                     for (Index c = 0; c < C; ++c) {
                       T sum_g = 0, sum_gx = 0;
                       for (Index n = 0; n < s.n(); ++n) {
                         const Index base = (n * C + c) * plane;
                         for (Index i = 0; i < plane; ++i) {
                           const T xhat = (xv[base + i] - mu[c]) * inv_std[c];
                           sum_g += g[base + i];
                           sum_gx += g[base + i] * xhat;
                         }
                       }
                       if (gb) gb[c] += sum_g;
                       if (gg) gg[c] += sum_gx;
                       if (!gx) continue;
                       const T k = gam[c] * inv_std[c];
                       const T inv_m = T(1) / static_cast<T>(count);
                       for (Index n = 0; n < s.n(); ++n) {
                         const Index base = (n * C + c) * plane;
                         for (Index i = 0; i < plane; ++i) {
                           if (training) {
                             const T xhat = (xv[base + i] - mu[c]) * inv_std[c];
                             gx[base + i] += k * (g[base + i] - inv_m * sum_g - xhat * inv_m * sum_gx);
                           } else {
                             gx[base + i] += k * g[base + i];
                           }
                         }
                       }
                     }
                   });
}

namespace {

struct ConvGeom {
  Index N, Cin, H, W, Cout, kh, kw, Ho, Wo, groups, cin_g, cout_g, K, P;
  Conv2dOptions opt;
};

template <typename T>
void im2col(const T* x, const ConvGeom& g, Index group, T* col) {
  // col rows: (ci, ki, kj) for ci in the group; columns: output pixels.
  for (Index ci = 0; ci < g.cin_g; ++ci) {
    const T* plane = x + (group * g.cin_g + ci) * g.H * g.W;
    for (Index ki = 0; ki < g.kh; ++ki)
      for (Index kj = 0; kj < g.kw; ++kj) {
        T* row = col + ((ci * g.kh + ki) * g.kw + kj) * g.P;
        for (Index oh = 0; oh < g.Ho; ++oh) {
          const Index ih = oh * g.opt.stride - g.opt.pad_h + ki;
          T* dst = row + oh * g.Wo;
          if (ih < 0 || ih >= g.H) {
            std::fill(dst, dst + g.Wo, T(0));
            continue;
          }
          const T* src = plane + ih * g.W;
          for (Index ow = 0; ow < g.Wo; ++ow) {
            const Index iw = ow * g.opt.stride - g.opt.pad_w + kj;
            dst[ow] = (iw >= 0 && iw < g.W) ? src[iw] : T(0);
          }
        }
      }
  }
}

template <typename T>
void col2im_add(const T* col, const ConvGeom& g, Index group, T* gx) {
  for (Index ci = 0; ci < g.cin_g; ++ci) {
    T* plane = gx + (group * g.cin_g + ci) * g.H * g.W;
    for (Index ki = 0; ki < g.kh; ++ki)
      for (Index kj = 0; kj < g.kw; ++kj) {
        const T* row = col + ((ci * g.kh + ki) * g.kw + kj) * g.P;
        for (Index oh = 0; oh < g.Ho; ++oh) {
          const Index ih = oh * g.opt.stride - g.opt.pad_h + ki;
          if (ih < 0 || ih >= g.H) continue;
          T* dst = plane + ih * g.W;
          const T* src = row + oh * g.Wo;
          for (Index ow = 0; ow < g.Wo; ++ow) {
            const Index iw = ow * g.opt.stride - g.opt.pad_w + kj;
            if (iw >= 0 && iw < g.W) dst[iw] += src[ow];
          }
        }
      }
  }
}

bool is_pointwise(const ConvGeom& g) {
  return g.kh == 1 && g.kw == 1 && g.opt.stride == 1 && g.opt.pad_h == 0 && g.opt.pad_w == 0;
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, const Conv2dOptions& opt) {
  const Shape xs = x.shape(), ws = weight.shape();
  if (opt.groups < 1 || opt.stride < 1 || opt.pad_h < 0 || opt.pad_w < 0)
    throw ConfigError("conv2d: stride and groups must be >= 1 and padding >= 0");
  if (xs.c() % opt.groups != 0)
    throw ShapeError("conv2d: input channels C=" + std::to_string(xs.c()) + " not divisible by groups=" +
                     std::to_string(opt.groups));
  if (ws.n() % opt.groups != 0)
    throw ShapeError("conv2d: output channels not divisible by groups=" + std::to_string(opt.groups));
  if (ws.c() != xs.c() / opt.groups)
    throw ShapeError("conv2d: weight axis C=" + std::to_string(ws.c()) + " but input C/groups=" +
                     std::to_string(xs.c() / opt.groups));
  ConvGeom g{};
  g.opt = opt;
  g.N = xs.n(), g.Cin = xs.c(), g.H = xs.h(), g.W = xs.w();
  g.Cout = ws.n(), g.kh = ws.h(), g.kw = ws.w();
  g.groups = opt.groups;
  g.cin_g = g.Cin / g.groups;
  g.cout_g = g.Cout / g.groups;
  g.Ho = (g.H + 2 * opt.pad_h - g.kh) / opt.stride + 1;
  g.Wo = (g.W + 2 * opt.pad_w - g.kw) / opt.stride + 1;
  if (g.Ho < 1 || g.Wo < 1) throw ShapeError("conv2d: kernel larger than padded input on axis H/W");
  g.K = g.cin_g * g.kh * g.kw;
  g.P = g.Ho * g.Wo;
  if (bias.defined() && bias.shape() != Shape(1, g.Cout, 1, 1))
    throw ShapeError("conv2d: bias dims " + bias.shape().str() + " do not match output channels");

  Tensor<T> out(Shape(g.N, g.Cout, g.Ho, g.Wo));
  T* o = out.mutable_data().data();
  const bool pw = is_pointwise(g);
  std::vector<T> col(pw ? 0 : static_cast<std::size_t>(g.K * g.P));
  for (Index n = 0; n < g.N; ++n) {
    const T* xn = x.ptr() + n * g.Cin * g.H * g.W;
    for (Index gr = 0; gr < g.groups; ++gr) {
      const T* cp;
      if (pw) {
        cp = xn + gr * g.cin_g * g.P;
      } else {
        im2col(xn, g, gr, col.data());
        cp = col.data();
      }
      MapR<T> Y(o + (n * g.Cout + gr * g.cout_g) * g.P, g.cout_g, g.P);
      Y.noalias() = CMapR<T>(weight.ptr() + gr * g.cout_g * g.K, g.cout_g, g.K) * CMapR<T>(cp, g.K, g.P);
      if (bias.defined()) {
        const T* b = bias.ptr() + gr * g.cout_g;
        for (Index c = 0; c < g.cout_g; ++c) Y.row(c).array() += b[c];
      }
    }
  }
  auto xst = x.storage(), wst = weight.storage();
  auto bst = bias.defined() ? bias.storage() : nullptr;
  return finish<T>("conv2d", {&x, &weight, &bias}, out, [xst, wst, bst, g, pw](const std::vector<T>& go) {
    T* gx = grad_target(xst);
    T* gw = grad_target(wst);
    T* gb = grad_target(bst);
    std::vector<T> col(pw ? 0 : static_cast<std::size_t>(g.K * g.P));
    std::vector<T> gcol(pw ? 0 : static_cast<std::size_t>(g.K * g.P));
    for (Index n = 0; n < g.N; ++n) {
      const T* xn = xst->data.data() + n * g.Cin * g.H * g.W;
      for (Index gr = 0; gr < g.groups; ++gr) {
        CMapR<T> G(go.data() + (n * g.Cout + gr * g.cout_g) * g.P, g.cout_g, g.P);
        if (gb)
          for (Index c = 0; c < g.cout_g; ++c) gb[gr * g.cout_g + c] += G.row(c).sum();
        const T* cp;
        if (pw) {
          cp = xn + gr * g.cin_g * g.P;
        } else {
          if (gw) im2col(xn, g, gr, col.data());
          cp = col.data();
        }
        CMapR<T> Wg(wst->data.data() + gr * g.cout_g * g.K, g.cout_g, g.K);
        if (gw) MapR<T>(gw + gr * g.cout_g * g.K, g.cout_g, g.K).noalias() += G * CMapR<T>(cp, g.K, g.P).transpose();
        if (gx) {
          if (pw) {
            MapR<T>(gx + n * g.Cin * g.P + gr * g.cin_g * g.P, g.K, g.P).noalias() += Wg.transpose() * G;
          } else {
            MapR<T>(gcol.data(), g.K, g.P).noalias() = Wg.transpose() * G;
            col2im_add(gcol.data(), g, gr, gx + n * g.Cin * g.H * g.W);
          }
        }
      }
    }
  });
}

template <typename T>
Tensor<T> deform_conv_axis(const Tensor<T>& x, const Tensor<T>& offsets, const Tensor<T>& weight,
                           const Tensor<T>& bias, ConvAxis axis) {
  const Shape xs = x.shape(), ws = weight.shape();
  const bool row = axis == ConvAxis::row;
  const Index k = row ? ws.w() : ws.h();
  if ((row ? ws.h() : ws.w()) != 1)
    throw ConfigError(std::string("deform_conv_axis: ") + (row ? "row" : "column") + " kernel must be " +
                      (row ? "1xk" : "kx1"));
  if (k % 2 == 0) throw ConfigError("deform_conv_axis: kernel length must be odd, got " + std::to_string(k));
  if (ws.c() != xs.c()) throw ShapeError("deform_conv_axis: weight axis C does not match input channels");
  if (offsets.shape() != Shape(xs.n(), k, xs.h(), xs.w()))
    throw ShapeError("deform_conv_axis: offsets must be (N,k,H,W) = " + Shape(xs.n(), k, xs.h(), xs.w()).str() +
                     ", got " + offsets.shape().str());
  if (bias.defined() && bias.shape() != Shape(1, ws.n(), 1, 1))
    throw ShapeError("deform_conv_axis: bias dims do not match output channels");
  const Index N = xs.n(), C = xs.c(), H = xs.h(), W = xs.w(), Cout = ws.n();
  const Index P = H * W, K = C * k, center = (k - 1) / 2;
  const Index len = row ? W : H;

  // Sample position along the axis for tap j at pixel (h, w).
  auto build_col = [=](const T* xn, const T* off, T* col) {
    for (Index c = 0; c < C; ++c) {
      const T* plane = xn + c * P;
      for (Index j = 0; j < k; ++j) {
        T* dst = col + (c * k + j) * P;
        const T* oj = off + j * P;
        for (Index h = 0; h < H; ++h)
          for (Index w = 0; w < W; ++w) {
            const Index pix = h * W + w;
            const T pos = static_cast<T>((row ? w : h) + j - center) + oj[pix];
            const T fl = std::floor(pos);
            const Index i0 = static_cast<Index>(fl);
            const T f = pos - fl;
            const Index stride_ax = row ? 1 : W;
            const Index base = row ? h * W : w;
            const T v0 = (i0 >= 0 && i0 < len) ? plane[base + i0 * stride_ax] : T(0);
            const T v1 = (i0 + 1 >= 0 && i0 + 1 < len) ? plane[base + (i0 + 1) * stride_ax] : T(0);
            dst[pix] = (T(1) - f) * v0 + f * v1;
          }
      }
    }
  };

  Tensor<T> out(Shape(N, Cout, H, W));
  T* o = out.mutable_data().data();
  std::vector<T> col(static_cast<std::size_t>(K * P));
  for (Index n = 0; n < N; ++n) {
    build_col(x.ptr() + n * C * P, offsets.ptr() + n * k * P, col.data());
    MapR<T> Y(o + n * Cout * P, Cout, P);
    Y.noalias() = CMapR<T>(weight.ptr(), Cout, K) * CMapR<T>(col.data(), K, P);
    if (bias.defined())
      for (Index c = 0; c < Cout; ++c) Y.row(c).array() += bias.ptr()[c];
  }
  auto xst = x.storage(), ost = offsets.storage(), wst = weight.storage();
  auto bst = bias.defined() ? bias.storage() : nullptr;
  return finish<T>(
      "deform_conv_axis", {&x, &offsets, &weight, &bias}, out,
      [=](const std::vector<T>& go) {
        T* gx = grad_target(xst);
        T* goff = grad_target(ost);
        T* gw = grad_target(wst);
        T* gb = grad_target(bst);
        std::vector<T> col(static_cast<std::size_t>(K * P)), gcol(static_cast<std::size_t>(K * P));
        CMapR<T> Wm(wst->data.data(), Cout, K);
        for (Index n = 0; n < N; ++n) {
          const T* xn = xst->data.data() + n * C * P;
          const T* off = ost->data.data() + n * k * P;
          CMapR<T> G(go.data() + n * Cout * P, Cout, P);
          if (gb)
            for (Index c = 0; c < Cout; ++c) gb[c] += G.row(c).sum();
          if (gw) {
            build_col(xn, off, col.data());
            MapR<T>(gw, Cout, K).noalias() += G * CMapR<T>(col.data(), K, P).transpose();
          }
          if (!gx && !goff) continue;
          MapR<T>(gcol.data(), K, P).noalias() = Wm.transpose() * G;
          for (Index c = 0; c < C; ++c) {
            const T* plane = xn + c * P;
            T* gplane = gx ? gx + n * C * P + c * P : nullptr;
            for (Index j = 0; j < k; ++j) {
              const T* gc = gcol.data() + (c * k + j) * P;
              const T* oj = off + j * P;
              T* goj = goff ? goff + n * k * P + j * P : nullptr;
              for (Index h = 0; h < H; ++h)
                for (Index w = 0; w < W; ++w) {
                  const Index pix = h * W + w;
                  const T pos = static_cast<T>((row ? w : h) + j - center) + oj[pix];
                  const T fl = std::floor(pos);
                  const Index i0 = static_cast<Index>(fl);
                  const T f = pos - fl;
                  const Index stride_ax = row ? 1 : W;
                  const Index base = row ? h * W : w;
                  const bool in0 = i0 >= 0 && i0 < len;
                  const bool in1 = i0 + 1 >= 0 && i0 + 1 < len;
                  if (gplane) {
                    if (in0) gplane[base + i0 * stride_ax] += (T(1) - f) * gc[pix];
                    if (in1) gplane[base + (i0 + 1) * stride_ax] += f * gc[pix];
                  }
                  if (goj) {
                    const T v0 = in0 ? plane[base + i0 * stride_ax] : T(0);
                    const T v1 = in1 ? plane[base + (i0 + 1) * stride_ax] : T(0);
                    goj[pix] += gc[pix] * (v1 - v0);
                  }
                }
            }
          }
        }
      });
}

namespace {

struct LinearTap {
  Index i0, i1;
  double l1;  // weight of i1; weight of i0 is 1 - l1
};

std::vector<LinearTap> bilinear_taps(Index in, Index out) {
  std::vector<LinearTap> taps(static_cast<std::size_t>(out));
  const double sc = static_cast<double>(in) / static_cast<double>(out);
  for (Index o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * sc - 0.5;
    if (src < 0) src = 0;
    Index i0 = static_cast<Index>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const Index i1 = std::min(i0 + 1, in - 1);
    taps[static_cast<std::size_t>(o)] = {i0, i1, src - static_cast<double>(i0)};
  }
  return taps;
}

}  // namespace

template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& x, Index out_h, Index out_w) {
  if (out_h < 1 || out_w < 1) throw ShapeError("resize_bilinear: output H and W must be >= 1");
  const Shape s = x.shape();
  const auto th = bilinear_taps(s.h(), out_h);
  const auto tw = bilinear_taps(s.w(), out_w);
  Tensor<T> out(Shape(s.n(), s.c(), out_h, out_w));
  auto od = out.mutable_data();
  const T* xv = x.ptr();
  const Index planes = s.n() * s.c();
  for (Index p = 0; p < planes; ++p) {
    const T* src = xv + p * s.h() * s.w();
    T* dst = od.data() + p * out_h * out_w;
    for (Index oh = 0; oh < out_h; ++oh) {
      const auto& a = th[static_cast<std::size_t>(oh)];
      const T ly = static_cast<T>(a.l1);
      for (Index ow = 0; ow < out_w; ++ow) {
        const auto& b = tw[static_cast<std::size_t>(ow)];
        const T lx = static_cast<T>(b.l1);
        const T top = (T(1) - lx) * src[a.i0 * s.w() + b.i0] + lx * src[a.i0 * s.w() + b.i1];
        const T bot = (T(1) - lx) * src[a.i1 * s.w() + b.i0] + lx * src[a.i1 * s.w() + b.i1];
        dst[oh * out_w + ow] = (T(1) - ly) * top + ly * bot;
      }
    }
  }
  auto xs = x.storage();
  return finish<T>("resize_bilinear", {&x}, out, [xs, s, th, tw, out_h, out_w, planes](const std::vector<T>& g) {
    T* gx = grad_target(xs);
    if (!gx) return;
    for (Index p = 0; p < planes; ++p) {
      T* dst = gx + p * s.h() * s.w();
      const T* gp = g.data() + p * out_h * out_w;
      for (Index oh = 0; oh < out_h; ++oh) {
        const auto& a = th[static_cast<std::size_t>(oh)];
        const T ly = static_cast<T>(a.l1);
        for (Index ow = 0; ow < out_w; ++ow) {
          const auto& b = tw[static_cast<std::size_t>(ow)];
          const T lx = static_cast<T>(b.l1);
          const T v = gp[oh * out_w + ow];
          dst[a.i0 * s.w() + b.i0] += (T(1) - ly) * (T(1) - lx) * v;
          dst[a.i0 * s.w() + b.i1] += (T(1) - ly) * lx * v;
          dst[a.i1 * s.w() + b.i0] += ly * (T(1) - lx) * v;
          dst[a.i1 * s.w() + b.i1] += ly * lx * v;
        }
      }
    }
  });
}

template <typename T>
Tensor<T> adaptive_avg_pool(const Tensor<T>& x, Index out_h, Index out_w) {
  const Shape s = x.shape();
  if (out_h < 1 || out_h > s.h()) throw ShapeError("adaptive_avg_pool: output H must lie in [1, H]");
  if (out_w < 1 || out_w > s.w()) throw ShapeError("adaptive_avg_pool: output W must lie in [1, W]");
  auto window = [](Index i, Index in, Index out) {
    const Index b = (i * in) / out;
    const Index e = ((i + 1) * in + out - 1) / out;
    return std::pair<Index, Index>{b, e};
  };
  Tensor<T> out(Shape(s.n(), s.c(), out_h, out_w));
  auto od = out.mutable_data();
  const T* xv = x.ptr();
  const Index planes = s.n() * s.c();
  for (Index p = 0; p < planes; ++p) {
    const T* src = xv + p * s.h() * s.w();
    for (Index oh = 0; oh < out_h; ++oh) {
      const auto [h0, h1] = window(oh, s.h(), out_h);
      for (Index ow = 0; ow < out_w; ++ow) {
        const auto [w0, w1] = window(ow, s.w(), out_w);
        T acc = 0;
        for (Index h = h0; h < h1; ++h)
          for (Index w = w0; w < w1; ++w) acc += src[h * s.w() + w];
        od[(p * out_h + oh) * out_w + ow] = acc / static_cast<T>((h1 - h0) * (w1 - w0));
      }
    }
  }
  auto xs = x.storage();
  return finish<T>("adaptive_avg_pool", {&x}, out, [xs, s, out_h, out_w, planes, window](const std::vector<T>& g) {
    T* gx = grad_target(xs);
    if (!gx) return;
    for (Index p = 0; p < planes; ++p) {
      T* dst = gx + p * s.h() * s.w();
      for (Index oh = 0; oh < out_h; ++oh) {
        const auto [h0, h1] = window(oh, s.h(), out_h);
        for (Index ow = 0; ow < out_w; ++ow) {
          const auto [w0, w1] = window(ow, s.w(), out_w);
          const T v = g[static_cast<std::size_t>((p * out_h + oh) * out_w + ow)] / static_cast<T>((h1 - h0) * (w1 - w0));
          for (Index h = h0; h < h1; ++h)
            for (Index w = w0; w < w1; ++w) dst[h * s.w() + w] += v;
        }
      }
    }
  });
}

template <typename T>
Tensor<T> resize_to(const Tensor<T>& x, Index out_h, Index out_w) {
  const Index h = x.dim(2), w = x.dim(3);
  if (h == out_h && w == out_w) return x;
  if (out_h <= h && out_w <= w) return adaptive_avg_pool(x, out_h, out_w);
  if (out_h >= h && out_w >= w) return resize_bilinear(x, out_h, out_w);
  // Mixed: shrink the larger axis first, then grow the other.
  auto shrunk = adaptive_avg_pool(x, std::min(h, out_h), std::min(w, out_w));
  return resize_bilinear(shrunk, out_h, out_w);
}

#define SARNET_INSTANTIATE_OPS(T)                                                                              \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                                 \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                                 \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                                 \
  template Tensor<T> scale(const Tensor<T>&, T);                                                              \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                                         \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                               \
  template Tensor<T> relu(const Tensor<T>&);                                                                  \
  template Tensor<T> softmax(const Tensor<T>&, int);                                                          \
  template Tensor<T> sum(const Tensor<T>&);                                                                   \
  template Tensor<T> mean(const Tensor<T>&);                                                                  \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                              \
  template Tensor<T> permute(const Tensor<T>&, std::array<int, 4>);                                           \
  template Tensor<T> reshape(const Tensor<T>&, const Shape&);                                                 \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, int);                                              \
  template std::vector<Tensor<T>> split(const Tensor<T>&, int, const std::vector<Index>&);                    \
  template Tensor<T> slice(const Tensor<T>&, int, Index, Index);                                              \
  template Tensor<T> bias_add(const Tensor<T>&, const Tensor<T>&);                                            \
  template Tensor<T> batchnorm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Tensor<T>&, Tensor<T>&,  \
                               const BatchNormOptions&);                                                      \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const Conv2dOptions&);      \
  template Tensor<T> deform_conv_axis(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, \
                                      ConvAxis);                                                              \
  template Tensor<T> resize_bilinear(const Tensor<T>&, Index, Index);                                         \
  template Tensor<T> adaptive_avg_pool(const Tensor<T>&, Index, Index);                                       \
  template Tensor<T> resize_to(const Tensor<T>&, Index, Index);

SARNET_INSTANTIATE_OPS(float)
SARNET_INSTANTIATE_OPS(double)

}  // namespace sarnet
