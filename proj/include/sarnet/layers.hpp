#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "sarnet/ops.hpp"

namespace sarnet {

/// Named parameters (trainable) and buffers (running statistics).
///
/// Names are dotted paths and unique. Iteration order is lexicographic, so
/// parameter count and serialization order depend only on the model layout.
template <typename T>
class ParamSet {
 public:
  Tensor<T> add_param(const std::string& name, Tensor<T> t);
  Tensor<T> add_buffer(const std::string& name, Tensor<T> t);

  const std::map<std::string, Tensor<T>>& params() const { return params_; }
  const std::map<std::string, Tensor<T>>& buffers() const { return buffers_; }
  Tensor<T>& param(const std::string& name);
  Tensor<T>& buffer(const std::string& name);

  Index parameter_count() const;
  void zero_grad();

 private:
  std::map<std::string, Tensor<T>> params_;
  std::map<std::string, Tensor<T>> buffers_;
};

/// splitmix64-based generator; identical streams on every platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}
  std::uint64_t next_u64();
  /// Uniform in [0, 1).
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Standard normal (Box-Muller).
  double normal();
  /// Gamma(shape, 1) by Marsaglia-Tsang.
  double gamma(double shape);
  std::uint64_t below(std::uint64_t bound) { return next_u64() % bound; }

 private:
  std::uint64_t state_;
};

/// Registers parameters under a dotted prefix and draws their initial values.
template <typename T>
class Builder {
 public:
  Builder(ParamSet<T>& params, Rng& rng, std::string prefix = "") : params_(&params), rng_(&rng), prefix_(std::move(prefix)) {}

  Builder child(const std::string& name) const { return Builder(*params_, *rng_, join(name)); }
  /// U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
  Tensor<T> uniform_param(const std::string& name, const Shape& shape, Index fan_in);
  Tensor<T> constant_param(const std::string& name, const Shape& shape, T value);
  Tensor<T> constant_buffer(const std::string& name, const Shape& shape, T value);
  Rng& rng() { return *rng_; }

 private:
  std::string join(const std::string& name) const { return prefix_.empty() ? name : prefix_ + "." + name; }
  ParamSet<T>* params_;
  Rng* rng_;
  std::string prefix_;
};

/// Forward-pass mode: batch statistics (training) or running statistics.
struct RunMode {
  bool training = true;
};

template <typename T>
struct Conv {
  Tensor<T> weight;
  Tensor<T> bias;  // may be undefined
  Conv2dOptions opt;

  static Conv make(Builder<T> b, Index cin, Index cout, Index kh, Index kw, Index stride = 1, Index groups = 1,
                   bool with_bias = true);
  Tensor<T> operator()(const Tensor<T>& x) const { return conv2d(x, weight, bias, opt); }
  Index in_channels() const { return weight.dim(1) * opt.groups; }
  Index out_channels() const { return weight.dim(0); }
};

template <typename T>
struct BatchNorm {
  Tensor<T> gamma, beta, running_mean, running_var;
  double momentum = 0.03;
  double eps = 1e-3;

  static BatchNorm make(Builder<T> b, Index channels);
  Tensor<T> operator()(const Tensor<T>& x, RunMode mode);
};

/// Convolution (no bias) + batch normalization, optionally followed by ReLU.
template <typename T>
struct ConvBn {
  Conv<T> conv;
  BatchNorm<T> bn;
  bool relu = true;

  static ConvBn make(Builder<T> b, Index cin, Index cout, Index k, Index stride = 1, bool with_relu = true,
                     Index groups = 1);
  Tensor<T> operator()(const Tensor<T>& x, RunMode mode);
};

}  // namespace sarnet
