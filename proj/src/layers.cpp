#include "sarnet/layers.hpp"

#include <cmath>
#include <numbers>

namespace sarnet {

template <typename T>
Tensor<T> ParamSet<T>::add_param(const std::string& name, Tensor<T> t) {
  if (params_.count(name) || buffers_.count(name)) throw ContractError("duplicate parameter name: " + name);
  t.set_requires_grad(true);
  params_.emplace(name, t);
  return t;
}

template <typename T>
Tensor<T> ParamSet<T>::add_buffer(const std::string& name, Tensor<T> t) {
  if (params_.count(name) || buffers_.count(name)) throw ContractError("duplicate buffer name: " + name);
  buffers_.emplace(name, t);
  return t;
}

template <typename T>
Tensor<T>& ParamSet<T>::param(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw ContractError("unknown parameter: " + name);
  return it->second;
}

template <typename T>
Tensor<T>& ParamSet<T>::buffer(const std::string& name) {
  auto it = buffers_.find(name);
  if (it == buffers_.end()) throw ContractError("unknown buffer: " + name);
  return it->second;
}

template <typename T>
Index ParamSet<T>::parameter_count() const {
  Index n = 0;
  for (const auto& [name, t] : params_) n += t.numel();
  return n;
}

template <typename T>
void ParamSet<T>::zero_grad() {
  for (auto& [name, t] : params_) const_cast<Tensor<T>&>(t).zero_grad();
}

std::uint64_t Rng::next_u64() {
  std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

double Rng::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::normal() {
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

double Rng::gamma(double shape) {
  if (shape < 1.0) {
    const double u = uniform();
    return gamma(shape + 1.0) * std::pow(u > 0 ? u : 1e-300, 1.0 / shape);
  }
  const double d = shape - 1.0 / 3.0;
  const double c = 1.0 / std::sqrt(9.0 * d);
  for (;;) {
    double x, v;
    do {
      x = normal();
      v = 1.0 + c * x;
    } while (v <= 0.0);
    v = v * v * v;
    const double u = uniform();
    if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
    if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
  }
}

template <typename T>
Tensor<T> Builder<T>::uniform_param(const std::string& name, const Shape& shape, Index fan_in) {
  Tensor<T> t(shape);
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (auto& v : t.mutable_data()) v = static_cast<T>(rng_->uniform(-bound, bound));
  return params_->add_param(join(name), t);
}

template <typename T>
Tensor<T> Builder<T>::constant_param(const std::string& name, const Shape& shape, T value) {
  return params_->add_param(join(name), Tensor<T>(shape, value));
}

template <typename T>
Tensor<T> Builder<T>::constant_buffer(const std::string& name, const Shape& shape, T value) {
  return params_->add_buffer(join(name), Tensor<T>(shape, value));
}

template <typename T>
Conv<T> Conv<T>::make(Builder<T> b, Index cin, Index cout, Index kh, Index kw, Index stride, Index groups,
                      bool with_bias) {
  if (cin % groups != 0 || cout % groups != 0) throw ConfigError("conv: channels not divisible by groups");
  Conv c;
  const Index fan_in = (cin / groups) * kh * kw;
  c.weight = b.uniform_param("weight", Shape(cout, cin / groups, kh, kw), fan_in);
  if (with_bias) c.bias = b.uniform_param("bias", Shape(1, cout, 1, 1), fan_in);
  c.opt = Conv2dOptions::same(kh, kw, stride, groups);
  return c;
}

template <typename T>
BatchNorm<T> BatchNorm<T>::make(Builder<T> b, Index channels) {
  BatchNorm bn;
  const Shape s(1, channels, 1, 1);
  bn.gamma = b.constant_param("gamma", s, T(1));
  bn.beta = b.constant_param("beta", s, T(0));
  bn.running_mean = b.constant_buffer("running_mean", s, T(0));
  bn.running_var = b.constant_buffer("running_var", s, T(1));
  return bn;
}

template <typename T>
Tensor<T> BatchNorm<T>::operator()(const Tensor<T>& x, RunMode mode) {
  return batchnorm(x, gamma, beta, running_mean, running_var, BatchNormOptions{mode.training, momentum, eps});
}

template <typename T>
ConvBn<T> ConvBn<T>::make(Builder<T> b, Index cin, Index cout, Index k, Index stride, bool with_relu, Index groups) {
  ConvBn cb;
  cb.conv = Conv<T>::make(b.child("conv"), cin, cout, k, k, stride, groups, false);
  cb.bn = BatchNorm<T>::make(b.child("bn"), cout);
  cb.relu = with_relu;
  return cb;
}

template <typename T>
Tensor<T> ConvBn<T>::operator()(const Tensor<T>& x, RunMode mode) {
  auto y = bn(conv(x), mode);
  return relu ? sarnet::relu(y) : y;
}

template class ParamSet<float>;
template class ParamSet<double>;
template class Builder<float>;
template class Builder<double>;
template struct Conv<float>;
template struct Conv<double>;
template struct BatchNorm<float>;
template struct BatchNorm<double>;
template struct ConvBn<float>;
template struct ConvBn<double>;

}  // namespace sarnet
