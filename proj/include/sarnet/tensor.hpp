#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "sarnet/errors.hpp"

namespace sarnet {

using Index = std::ptrdiff_t;

/// Dimensions of a rank-4 tensor in (N, C, H, W) order.
struct Shape {
  std::array<Index, 4> dims{1, 1, 1, 1};

  Shape() = default;
  Shape(Index n, Index c, Index h, Index w) : dims{n, c, h, w} {}

  Index n() const { return dims[0]; }
  Index c() const { return dims[1]; }
  Index h() const { return dims[2]; }
  Index w() const { return dims[3]; }
  Index operator[](int axis) const { return dims[static_cast<std::size_t>(axis)]; }
  Index numel() const { return dims[0] * dims[1] * dims[2] * dims[3]; }

  bool operator==(const Shape&) const = default;
  std::string str() const;
};

const char* axis_name(int axis);

template <typename T>
struct TensorStorage {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;

  /// Gradient buffer, allocated (zero-filled) on first use.
  std::vector<T>& grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

/// Dense rank-4 array with optional gradient tracking.
///
/// Copies share storage; values are treated as immutable once an operation
/// has consumed them. The gradient buffer is the only field written by
/// backward(), and parameter data is the only field written by optimizers.
template <typename T>
class Tensor {
 public:
  using Scalar = T;
  using Storage = TensorStorage<T>;

  Tensor() = default;
  explicit Tensor(const Shape& shape, T fill = T(0));
  Tensor(const Shape& shape, std::vector<T> values);

  static Tensor zeros(const Shape& shape) { return Tensor(shape); }
  static Tensor full(const Shape& shape, T value) { return Tensor(shape, value); }

  bool defined() const { return static_cast<bool>(s_); }
  const Shape& shape() const { return s_->shape; }
  Index numel() const { return s_->shape.numel(); }
  Index dim(int axis) const { return s_->shape[axis]; }

  std::span<const T> data() const& { return s_->data; }
  std::span<const T> data() const&& = delete;  // would dangle once the temporary dies
  /// Raw write access. Reserved for leaves (parameters, buffers, fresh outputs).
  std::span<T> mutable_data() { return s_->data; }
  const T* ptr() const { return s_->data.data(); }

  T operator[](Index i) const { return s_->data[static_cast<std::size_t>(i)]; }
  T operator()(Index n, Index c, Index h, Index w) const {
    return s_->data[static_cast<std::size_t>(offset(n, c, h, w))];
  }
  Index offset(Index n, Index c, Index h, Index w) const {
    const auto& d = s_->shape.dims;
    return ((n * d[1] + c) * d[2] + h) * d[3] + w;
  }

  bool requires_grad() const { return s_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    s_->requires_grad = on;
    return *this;
  }
  bool has_grad() const { return !s_->grad.empty(); }
  /// Gradient values; zeros if backward never reached this tensor.
  std::vector<T> grad() const {
    return s_->grad.empty() ? std::vector<T>(s_->data.size(), T(0)) : s_->grad;
  }
  void zero_grad() { s_->grad.clear(); }

  /// Same values, fresh storage, no gradient tracking.
  Tensor detach() const { return Tensor(shape(), s_->data); }
  /// Same values under new dims with equal element count (no tracking).
  Tensor reshaped_copy(const Shape& shape) const;

  const std::shared_ptr<Storage>& storage() const { return s_; }

 private:
  std::shared_ptr<Storage> s_;
};

/// Ordered record of differentiable primitive applications.
template <typename T>
class Tape {
 public:
  using StoragePtr = std::shared_ptr<TensorStorage<T>>;
  struct Entry {
    std::string op;
    std::vector<StoragePtr> inputs;
    StoragePtr output;
    /// Reads output->grad and accumulates into inputs' grad buffers.
    std::function<void()> backward;
  };

  void record(Entry entry) { entries_.push_back(std::move(entry)); }
  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  void clear() { entries_.clear(); }

  /// Tape receiving records on this thread, or nullptr.
  static Tape* active();

 private:
  template <typename>
  friend class TapeScope;
  template <typename>
  friend class NoGradScope;
  static Tape*& active_slot();
  std::vector<Entry> entries_;
};

/// Makes `tape` the active recording target for its lifetime.
template <typename T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape) : previous_(Tape<T>::active_slot()) { Tape<T>::active_slot() = &tape; }
  ~TapeScope() { Tape<T>::active_slot() = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* previous_;
};

/// Suspends recording for its lifetime.
template <typename T>
class NoGradScope {
 public:
  NoGradScope() : previous_(Tape<T>::active()) { slot() = nullptr; }
  ~NoGradScope() { slot() = previous_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  static Tape<T>*& slot();
  Tape<T>* previous_;
};

/// Reverse traversal of `tape` seeded with d(loss)/d(loss) = 1.
/// Gradients accumulate additively into every tracked storage.
template <typename T>
void backward(const Tensor<T>& loss, const Tape<T>& tape);

/// True when SARNET_DEBUG_NAN=1 (read once).
bool nan_screening_enabled();

/// Throws NumericError naming `op` if `t` holds NaN or Inf.
template <typename T>
void screen_finite(const Tensor<T>& t, const char* op);

// ---------------------------------------------------------------------------

template <typename T>
Tensor<T>::Tensor(const Shape& shape, T fill) : s_(std::make_shared<Storage>()) {
  for (int a = 0; a < 4; ++a)
    if (shape[a] < 1) throw ShapeError("tensor dim " + std::string(axis_name(a)) + " must be >= 1, got " + shape.str());
  s_->shape = shape;
  s_->data.assign(static_cast<std::size_t>(shape.numel()), fill);
}

template <typename T>
Tensor<T>::Tensor(const Shape& shape, std::vector<T> values) : s_(std::make_shared<Storage>()) {
  for (int a = 0; a < 4; ++a)
    if (shape[a] < 1) throw ShapeError("tensor dim " + std::string(axis_name(a)) + " must be >= 1, got " + shape.str());
  if (static_cast<Index>(values.size()) != shape.numel())
    throw ShapeError("value count " + std::to_string(values.size()) + " does not match dims " + shape.str());
  s_->shape = shape;
  s_->data = std::move(values);
}

template <typename T>
Tensor<T> Tensor<T>::reshaped_copy(const Shape& shape) const {
  if (shape.numel() != numel()) throw ShapeError("reshape " + this->shape().str() + " -> " + shape.str());
  return Tensor(shape, s_->data);
}

template <typename T>
Tape<T>*& Tape<T>::active_slot() {
  thread_local Tape<T>* slot = nullptr;
  return slot;
}

template <typename T>
Tape<T>* Tape<T>::active() {
  return active_slot();
}

template <typename T>
Tape<T>*& NoGradScope<T>::slot() {
  return Tape<T>::active_slot();
}

}  // namespace sarnet
