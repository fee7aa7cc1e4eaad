#pragma once

#include <string>
#include <vector>

#include "dirnet/tensor.hpp"

namespace dirnet {

/// A learnable tensor and its accumulated gradient. The gradient always
/// has the value's shape and starts at zero.
template <typename T>
struct Param {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  Param(std::string n, Tensor<T> v)
      : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

  void zero_grad() { grad.set_zero(); }
};

/// Non-learnable persistent state (batch-norm running moments).
template <typename T>
struct Buffer {
  std::string name;
  Tensor<T> value;
};

/// Differentiable unit with an explicit backward. `forward` caches what the
/// following `backward` call needs; `backward` accumulates into parameter
/// gradients and returns the gradient with respect to the input.
template <typename T>
class Module {
 public:
  Module() = default;
  Module(const Module&) = delete;
  Module& operator=(const Module&) = delete;
  Module(Module&&) noexcept = default;
  Module& operator=(Module&&) noexcept = default;
  virtual ~Module() = default;

  virtual Tensor<T> forward(const Tensor<T>& x, Mode mode) = 0;
  virtual Tensor<T> backward(const Tensor<T>& grad_out) = 0;

  virtual void collect_params(std::vector<Param<T>*>& /*out*/) {}
  virtual void collect_buffers(std::vector<Buffer<T>*>& /*out*/) {}

  std::vector<Param<T>*> params() {
    std::vector<Param<T>*> out;
    collect_params(out);
    return out;
  }
  std::vector<Buffer<T>*> buffers() {
    std::vector<Buffer<T>*> out;
    collect_buffers(out);
    return out;
  }
  void zero_grad() {
    for (auto* p : params()) p->zero_grad();
  }
  std::size_t param_count() {
    std::size_t total = 0;
    for (auto* p : params()) total += p->value.size();
    return total;
  }
};

}  // namespace dirnet
