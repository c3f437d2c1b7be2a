#pragma once

#include <cmath>
#include <vector>

#include "sarnet/layers.hpp"
#include "sarnet/ops.hpp"

namespace sarnet::testing {

template <typename T = double>
Tensor<T> random_tensor(const Shape& s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<T> t(s);
  for (auto& v : t.mutable_data()) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

/// sum(x * r) for a fixed random r, so every output coordinate carries an O(1) weight.
template <typename T>
Tensor<T> project(const Tensor<T>& x, std::uint64_t seed = 99) {
  Rng rng(seed);
  Tensor<T> r = random_tensor<T>(x.shape(), rng, 0.5, 1.5);
  return sum(mul(x, r));
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  double m = 0;
  for (Index i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  return m;
}

template <typename T>
bool bit_equal(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) return false;
  for (Index i = 0; i < a.numel(); ++i)
    if (a[i] != b[i]) return false;
  return true;
}

}  // namespace sarnet::testing
