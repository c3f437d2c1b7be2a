#pragma once

#include <initializer_list>
#include <utility>
#include <vector>

#include "sarnet/tensor.hpp"

namespace sarnet::detail {

template <typename T>
bool any_requires_grad(const std::vector<const Tensor<T>*>& inputs) {
  for (const auto* t : inputs)
    if (t && t->defined() && t->requires_grad()) return true;
  return false;
}

/// Finishes a primitive: screens the output and, when a tape is active and
/// some input is tracked, records `grad_fn(gout)` for the reverse pass.
/// `grad_fn` receives the output gradient and writes input gradients through
/// `accumulate_into`.
template <typename T, typename GradFn>
Tensor<T> finish(const char* op, const std::vector<const Tensor<T>*>& inputs, Tensor<T> out, GradFn&& grad_fn) {
  if (nan_screening_enabled()) screen_finite(out, op);
  Tape<T>* tape = Tape<T>::active();
  if (!tape || !any_requires_grad<T>(inputs)) return out;
  out.set_requires_grad(true);
  typename Tape<T>::Entry entry;
  entry.op = op;
  for (const auto* t : inputs)
    if (t && t->defined()) entry.inputs.push_back(t->storage());
  entry.output = out.storage();
  TensorStorage<T>* out_raw = out.storage().get();
  entry.backward = [out_raw, fn = std::forward<GradFn>(grad_fn)]() mutable {
    if (out_raw->grad.empty()) return;
    fn(std::as_const(out_raw->grad));
  };
  tape->record(std::move(entry));
  return out;
}

template <typename T, typename GradFn>
Tensor<T> finish(const char* op, std::initializer_list<const Tensor<T>*> inputs, Tensor<T> out, GradFn&& grad_fn) {
  return finish<T>(op, std::vector<const Tensor<T>*>(inputs), std::move(out), std::forward<GradFn>(grad_fn));
}

/// Gradient buffer of `t` if it is tracked, otherwise nullptr.
template <typename T>
T* grad_target(const std::shared_ptr<TensorStorage<T>>& s) {
  if (!s || !s->requires_grad) return nullptr;
  return s->grad_buffer().data();
}

}  // namespace sarnet::detail
