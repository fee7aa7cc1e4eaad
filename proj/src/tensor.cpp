#include "dirnet/tensor.hpp"

#include <algorithm>
#include <limits>
#include <sstream>

namespace dirnet {

std::string Shape::str() const {
  std::ostringstream os;
  os << '(' << n << ',' << c << ',' << h << ',' << w << ')';
  return os.str();
}

Shape checked_shape(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
  if (n == 0 || c == 0 || h == 0 || w == 0) {
    throw ShapeError("tensor dimensions must be positive, got " + Shape{n, c, h, w}.str());
  }
  const std::size_t limit = std::numeric_limits<std::size_t>::max();
  if (c > limit / n || h > limit / (n * c) || w > limit / (n * c * h)) {
    throw ShapeError("tensor shape overflows addressable size");
  }
  return Shape{n, c, h, w};
}

void require_same_shape(const Shape& a, const Shape& b, const std::string& what) {
  if (a != b) {
    throw ShapeError(what + ": shape mismatch " + a.str() + " vs " + b.str());
  }
}

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill)
    : shape_(checked_shape(shape.n, shape.c, shape.h, shape.w)), data_(shape_.numel(), fill) {}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values)
    : shape_(checked_shape(shape.n, shape.c, shape.h, shape.w)), data_(std::move(values)) {
  if (data_.size() != shape_.numel()) {
    throw ShapeError("value count " + std::to_string(data_.size()) + " does not match shape " +
                     shape_.str());
  }
}

template <typename T>
Tensor<T> Tensor<T>::randn(Shape shape, std::mt19937_64& rng, T stddev) {
  Tensor t(shape);
  std::normal_distribution<double> dist(0.0, 1.0);
  for (auto& v : t.data_) v = static_cast<T>(dist(rng)) * stddev;
  return t;
}

template <typename T>
Tensor<T> Tensor<T>::uniform(Shape shape, std::mt19937_64& rng, T lo, T hi) {
  Tensor t(shape);
  std::uniform_real_distribution<double> dist(lo, hi);
  for (auto& v : t.data_) v = static_cast<T>(dist(rng));
  return t;
}

template <typename T>
void Tensor<T>::fill(T value) {
  std::fill(data_.begin(), data_.end(), value);
}

template <typename T>
Tensor<T> Tensor<T>::reshaped(Shape shape) const& {
  Tensor copy = *this;
  return std::move(copy).reshaped(shape);
}

template <typename T>
Tensor<T> Tensor<T>::reshaped(Shape shape) && {
  return Tensor(shape, std::move(data_));
}

template <typename T>
Tensor<T> Tensor<T>::slice_batch(std::size_t first, std::size_t count) const {
  if (count == 0 || first + count > shape_.n) {
    throw ShapeError("batch slice [" + std::to_string(first) + ", " +
                     std::to_string(first + count) + ") out of range for " + shape_.str());
  }
  const std::size_t stride = shape_.sample();
  std::vector<T> out(data_.begin() + static_cast<std::ptrdiff_t>(first * stride),
                     data_.begin() + static_cast<std::ptrdiff_t>((first + count) * stride));
  return Tensor({count, shape_.c, shape_.h, shape_.w}, std::move(out));
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "add");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "sub");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "mul");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * factor;
  return out;
}

template <typename T>
void add_inplace(Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "add_inplace");
  T* pa = a.ptr();
  const T* pb = b.ptr();
  for (std::size_t i = 0; i < a.size(); ++i) pa[i] += pb[i];
}

template <typename T>
void axpy_inplace(Tensor<T>& a, T factor, const Tensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "axpy_inplace");
  T* pa = a.ptr();
  const T* pb = b.ptr();
  for (std::size_t i = 0; i < a.size(); ++i) pa[i] += factor * pb[i];
}

template <typename T>
T sum(const Tensor<T>& a) {
  T acc = 0;
  for (T v : a.data()) acc += v;
  return acc;
}

template <typename T>
T dot(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "dot");
  T acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

template <typename T>
T max_abs(const Tensor<T>& a) {
  T m = 0;
  for (T v : a.data()) m = std::max(m, std::abs(v));
  return m;
}

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "max_abs_diff");
  T m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

template <typename T>
bool all_finite(const Tensor<T>& a) {
  return std::all_of(a.data().begin(), a.data().end(), [](T v) { return std::isfinite(v); });
}

template <typename T>
void require_finite(const Tensor<T>& a, const std::string& where) {
  if (!all_finite(a)) throw NumericError("non-finite value produced by " + where);
}

#define DIRNET_INSTANTIATE(T)                                              \
  template class Tensor<T>;                                                \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);             \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);             \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);             \
  template Tensor<T> scale(const Tensor<T>&, T);                          \
  template void add_inplace(Tensor<T>&, const Tensor<T>&);                \
  template void axpy_inplace(Tensor<T>&, T, const Tensor<T>&);            \
  template T sum(const Tensor<T>&);                                       \
  template T dot(const Tensor<T>&, const Tensor<T>&);                     \
  template T max_abs(const Tensor<T>&);                                   \
  template T max_abs_diff(const Tensor<T>&, const Tensor<T>&);            \
  template bool all_finite(const Tensor<T>&);                             \
  template void require_finite(const Tensor<T>&, const std::string&);

DIRNET_INSTANTIATE(float)
DIRNET_INSTANTIATE(double)

#undef DIRNET_INSTANTIATE

}  // namespace dirnet
