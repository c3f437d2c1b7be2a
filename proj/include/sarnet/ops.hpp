#pragma once

#include <array>
#include <optional>
#include <vector>

#include "sarnet/tensor.hpp"

namespace sarnet {

// Differentiable primitives. Every function returns a fresh tensor and
// records itself on the active Tape<T> when any input requires grad.

// --- pointwise -------------------------------------------------------------

/// Element-wise binary ops. Each axis must be equal or 1 on one side (the
/// size-1 side is broadcast); equal dims give a strictly element-wise result.
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T> Tensor<T> scale(const Tensor<T>& x, T factor);
template <typename T> Tensor<T> add_scalar(const Tensor<T>& x, T value);
template <typename T> Tensor<T> sigmoid(const Tensor<T>& x);
template <typename T> Tensor<T> relu(const Tensor<T>& x);

/// Softmax along `axis` (0..3).
template <typename T> Tensor<T> softmax(const Tensor<T>& x, int axis);

template <typename T> Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <typename T> Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <typename T> Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }

// --- reductions -------------------------------------------------------------

/// Sum of all elements, dims (1,1,1,1).
template <typename T> Tensor<T> sum(const Tensor<T>& x);
template <typename T> Tensor<T> mean(const Tensor<T>& x);

// --- layout -----------------------------------------------------------------

/// Batched matrix product over the trailing two axes:
/// (N,C,M,K) x (N,C,K,P) -> (N,C,M,P).
template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

/// Axis permutation; output axis i is input axis order[i].
template <typename T> Tensor<T> permute(const Tensor<T>& x, std::array<int, 4> order);
/// Swaps H and W.
template <typename T> Tensor<T> transpose_hw(const Tensor<T>& x) { return permute(x, {0, 1, 3, 2}); }
template <typename T> Tensor<T> reshape(const Tensor<T>& x, const Shape& shape);

/// Concatenation along `axis`; other axes must agree.
template <typename T> Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis);
/// Splits along `axis` into consecutive pieces of the given sizes.
template <typename T> std::vector<Tensor<T>> split(const Tensor<T>& x, int axis, const std::vector<Index>& sizes);
/// Contiguous sub-range [begin, begin+length) along `axis`.
template <typename T> Tensor<T> slice(const Tensor<T>& x, int axis, Index begin, Index length);

template <typename T> Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts) { return concat(parts, 1); }
template <typename T> std::vector<Tensor<T>> split_channels(const Tensor<T>& x, const std::vector<Index>& sizes) {
  return split(x, 1, sizes);
}

// --- layers -----------------------------------------------------------------

/// Adds bias (1,C,1,1) to every (n, c) plane.
template <typename T> Tensor<T> bias_add(const Tensor<T>& x, const Tensor<T>& bias);

struct BatchNormOptions {
  bool training = true;
  double momentum = 0.03;
  double eps = 1e-3;
};

/// Per-channel normalization. In training mode the batch statistics are used
/// and the running buffers (1,C,1,1) are updated in place; otherwise the
/// running statistics are used.
template <typename T>
Tensor<T> batchnorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, Tensor<T>& running_mean,
                    Tensor<T>& running_var, const BatchNormOptions& opt);

struct Conv2dOptions {
  Index stride = 1;
  Index pad_h = 0;
  Index pad_w = 0;
  Index groups = 1;

  static Conv2dOptions same(Index kh, Index kw, Index stride = 1, Index groups = 1) {
    return {stride, (kh - 1) / 2, (kw - 1) / 2, groups};
  }
};

/// 2-D cross-correlation. Weights (Cout, Cin/groups, kh, kw); bias (1,Cout,1,1)
/// or undefined. Output H' = floor((H + 2 pad_h - kh) / stride) + 1.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, const Conv2dOptions& opt);

enum class ConvAxis { row, column };

/// Convolution along a single spatial axis whose taps are displaced by
/// per-pixel scalar offsets (N, k, H, W) along that axis. Weights are
/// (C, C, 1, k) for ConvAxis::row and (C, C, k, 1) for ConvAxis::column.
/// Fractional coordinates interpolate linearly; samples outside the map read 0.
/// With all offsets zero the result is bit-identical to conv2d with `same` padding.
template <typename T>
Tensor<T> deform_conv_axis(const Tensor<T>& x, const Tensor<T>& offsets, const Tensor<T>& weight,
                           const Tensor<T>& bias, ConvAxis axis);

/// Bilinear resize, half-pixel centers (align_corners = false).
template <typename T> Tensor<T> resize_bilinear(const Tensor<T>& x, Index out_h, Index out_w);

/// Mean over evenly partitioned windows: rows [floor(i H/oh), ceil((i+1) H/oh)).
template <typename T> Tensor<T> adaptive_avg_pool(const Tensor<T>& x, Index out_h, Index out_w);

/// adaptive_avg_pool when shrinking, resize_bilinear when growing, identity otherwise.
template <typename T> Tensor<T> resize_to(const Tensor<T>& x, Index out_h, Index out_w);

}  // namespace sarnet
