#pragma once

#include <array>
#include <cmath>

namespace sarnet {

/// Forward-mode dual number carrying N partial derivatives.
template <typename T, int N>
struct Dual {
  T v{};
  std::array<T, N> d{};

  Dual() = default;
  Dual(T value) : v(value) {}
  static Dual variable(T value, int i) {
    Dual x(value);
    x.d[i] = T(1);
    return x;
  }
};

template <typename T, int N>
Dual<T, N> scaled(const Dual<T, N>& a, T value, T slope) {
  Dual<T, N> r(value);
  for (int i = 0; i < N; ++i) r.d[i] = a.d[i] * slope;
  return r;
}

template <typename T, int N>
Dual<T, N> operator+(const Dual<T, N>& a, const Dual<T, N>& b) {
  Dual<T, N> r(a.v + b.v);
  for (int i = 0; i < N; ++i) r.d[i] = a.d[i] + b.d[i];
  return r;
}
template <typename T, int N>
Dual<T, N> operator-(const Dual<T, N>& a, const Dual<T, N>& b) {
  Dual<T, N> r(a.v - b.v);
  for (int i = 0; i < N; ++i) r.d[i] = a.d[i] - b.d[i];
  return r;
}
template <typename T, int N>
Dual<T, N> operator-(const Dual<T, N>& a) {
  return scaled(a, -a.v, T(-1));
}
template <typename T, int N>
Dual<T, N> operator*(const Dual<T, N>& a, const Dual<T, N>& b) {
  Dual<T, N> r(a.v * b.v);
  for (int i = 0; i < N; ++i) r.d[i] = a.d[i] * b.v + a.v * b.d[i];
  return r;
}
template <typename T, int N>
Dual<T, N> operator/(const Dual<T, N>& a, const Dual<T, N>& b) {
  Dual<T, N> r(a.v / b.v);
  for (int i = 0; i < N; ++i) r.d[i] = (a.d[i] - r.v * b.d[i]) / b.v;
  return r;
}

template <typename T, int N> Dual<T, N> operator+(const Dual<T, N>& a, T b) { return a + Dual<T, N>(b); }
template <typename T, int N> Dual<T, N> operator+(T a, const Dual<T, N>& b) { return Dual<T, N>(a) + b; }
template <typename T, int N> Dual<T, N> operator-(const Dual<T, N>& a, T b) { return a - Dual<T, N>(b); }
template <typename T, int N> Dual<T, N> operator-(T a, const Dual<T, N>& b) { return Dual<T, N>(a) - b; }
template <typename T, int N> Dual<T, N> operator*(const Dual<T, N>& a, T b) { return scaled(a, a.v * b, b); }
template <typename T, int N> Dual<T, N> operator*(T a, const Dual<T, N>& b) { return scaled(b, a * b.v, a); }
template <typename T, int N> Dual<T, N> operator/(const Dual<T, N>& a, T b) { return scaled(a, a.v / b, T(1) / b); }

template <typename T, int N> bool operator<(const Dual<T, N>& a, const Dual<T, N>& b) { return a.v < b.v; }
template <typename T, int N> bool operator>(const Dual<T, N>& a, const Dual<T, N>& b) { return a.v > b.v; }
template <typename T, int N> bool operator<(const Dual<T, N>& a, T b) { return a.v < b; }
template <typename T, int N> bool operator>(const Dual<T, N>& a, T b) { return a.v > b; }
template <typename T, int N> bool operator<=(const Dual<T, N>& a, T b) { return a.v <= b; }

template <typename T, int N> Dual<T, N> exp(const Dual<T, N>& a) {
  const T e = std::exp(a.v);
  return scaled(a, e, e);
}
template <typename T, int N> Dual<T, N> sqrt(const Dual<T, N>& a) {
  const T s = std::sqrt(a.v);
  return scaled(a, s, T(0.5) / s);
}
template <typename T, int N> Dual<T, N> sin(const Dual<T, N>& a) { return scaled(a, std::sin(a.v), std::cos(a.v)); }
template <typename T, int N> Dual<T, N> asin(const Dual<T, N>& a) {
  return scaled(a, std::asin(a.v), T(1) / std::sqrt(T(1) - a.v * a.v));
}
template <typename T, int N> Dual<T, N> abs(const Dual<T, N>& a) { return a.v < T(0) ? -a : a; }
template <typename T, int N> Dual<T, N> max(const Dual<T, N>& a, const Dual<T, N>& b) { return b.v > a.v ? b : a; }
template <typename T, int N> Dual<T, N> min(const Dual<T, N>& a, const Dual<T, N>& b) { return b.v < a.v ? b : a; }

/// Value part of a plain scalar or a dual number.
inline double value_of(double x) { return x; }
inline float value_of(float x) { return x; }
template <typename T, int N> T value_of(const Dual<T, N>& a) { return a.v; }

}  // namespace sarnet
