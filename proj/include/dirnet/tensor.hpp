#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "dirnet/error.hpp"

namespace dirnet {

/// NCHW extent of a rank-4 tensor.
struct Shape {
  std::size_t n = 1;
  std::size_t c = 1;
  std::size_t h = 1;
  std::size_t w = 1;

  [[nodiscard]] std::size_t numel() const { return n * c * h * w; }
  [[nodiscard]] std::size_t plane() const { return h * w; }
  [[nodiscard]] std::size_t sample() const { return c * h * w; }
  [[nodiscard]] std::string str() const;

  friend bool operator==(const Shape&, const Shape&) = default;
};

enum class Mode { Train, Infer };

/// Dense rank-4 array in (batch, channels, rows, cols) order, row-major
/// within each plane. Every dimension is at least one.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() : Tensor(Shape{}) {}
  explicit Tensor(Shape shape, T fill = T(0));
  Tensor(Shape shape, std::vector<T> values);

  static Tensor zeros(Shape shape) { return Tensor(shape); }
  static Tensor full(Shape shape, T value) { return Tensor(shape, value); }
  static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape()); }

  /// Standard normal entries scaled by `stddev`, drawn from `rng`.
  static Tensor randn(Shape shape, std::mt19937_64& rng, T stddev = T(1));
  static Tensor uniform(Shape shape, std::mt19937_64& rng, T lo, T hi);

  [[nodiscard]] const Shape& shape() const { return shape_; }
  [[nodiscard]] std::size_t size() const { return data_.size(); }

  [[nodiscard]] std::span<T> data() { return data_; }
  [[nodiscard]] std::span<const T> data() const { return data_; }
  [[nodiscard]] T* ptr() { return data_.data(); }
  [[nodiscard]] const T* ptr() const { return data_.data(); }

  [[nodiscard]] std::size_t offset(std::size_t n, std::size_t c, std::size_t h,
                                   std::size_t w) const {
    return ((n * shape_.c + c) * shape_.h + h) * shape_.w + w;
  }
  T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    return data_[offset(n, c, h, w)];
  }
  const T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return data_[offset(n, c, h, w)];
  }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  /// Pointer to the (n, c) plane.
  T* plane(std::size_t n, std::size_t c) { return data_.data() + offset(n, c, 0, 0); }
  const T* plane(std::size_t n, std::size_t c) const {
    return data_.data() + offset(n, c, 0, 0);
  }

  void fill(T value);
  void set_zero() { fill(T(0)); }

  /// Same data, new extent with identical element count.
  [[nodiscard]] Tensor reshaped(Shape shape) const&;
  [[nodiscard]] Tensor reshaped(Shape shape) &&;

  /// Copy of samples [first, first + count).
  [[nodiscard]] Tensor slice_batch(std::size_t first, std::size_t count) const;

  template <typename U>
  [[nodiscard]] Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

 private:
  Shape shape_;
  std::vector<T> data_;
};

Shape checked_shape(std::size_t n, std::size_t c, std::size_t h, std::size_t w);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor);

/// a += b
template <typename T>
void add_inplace(Tensor<T>& a, const Tensor<T>& b);
/// a += factor * b
template <typename T>
void axpy_inplace(Tensor<T>& a, T factor, const Tensor<T>& b);

template <typename T>
T sum(const Tensor<T>& a);
template <typename T>
T dot(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
T max_abs(const Tensor<T>& a);
template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
bool all_finite(const Tensor<T>& a);

/// Throws NumericError naming `where` if any entry is NaN or infinite.
template <typename T>
void require_finite(const Tensor<T>& a, const std::string& where);

void require_same_shape(const Shape& a, const Shape& b, const std::string& what);

}  // namespace dirnet
