#include "sarnet/tensor.hpp"

#include <cmath>
#include <cstdlib>
#include <cstring>

namespace sarnet {

std::string Shape::str() const {
  return "(" + std::to_string(dims[0]) + "," + std::to_string(dims[1]) + "," + std::to_string(dims[2]) + "," +
         std::to_string(dims[3]) + ")";
}

const char* axis_name(int axis) {
  static constexpr const char* names[] = {"N", "C", "H", "W"};
  return (axis >= 0 && axis < 4) ? names[axis] : "?";
}

bool nan_screening_enabled() {
  static const bool enabled = [] {
    const char* v = std::getenv("SARNET_DEBUG_NAN");
    return v && std::strcmp(v, "1") == 0;
  }();
  return enabled;
}

template <typename T>
void screen_finite(const Tensor<T>& t, const char* op) {
  const auto d = t.data();
  for (std::size_t i = 0; i < d.size(); ++i)
    if (!std::isfinite(d[i]))
      throw NumericError(std::string("non-finite value from ") + op + " at flat index " + std::to_string(i));
}

template <typename T>
void backward(const Tensor<T>& loss, const Tape<T>& tape) {
  if (loss.shape() != Shape(1, 1, 1, 1))
    throw ContractError("backward expects a scalar loss with dims (1,1,1,1), got " + loss.shape().str());
  if (!loss.requires_grad()) return;
  auto& seed = loss.storage()->grad_buffer();
  seed[0] += T(1);
  const auto& entries = tape.entries();
  for (auto it = entries.rbegin(); it != entries.rend(); ++it) it->backward();
}

template void screen_finite<float>(const Tensor<float>&, const char*);
template void screen_finite<double>(const Tensor<double>&, const char*);
template void backward<float>(const Tensor<float>&, const Tape<float>&);
template void backward<double>(const Tensor<double>&, const Tape<double>&);

}  // namespace sarnet
