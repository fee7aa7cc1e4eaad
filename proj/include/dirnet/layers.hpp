#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "dirnet/module.hpp"
#include "dirnet/tensor.hpp"

namespace dirnet {

/// Square 2-D convolution geometry. `rate` is the dilation: taps sit `rate`
/// pixels apart, so rate 1 is an ordinary convolution.
struct ConvSpec {
  std::size_t k = 3;
  std::size_t rate = 1;
  std::size_t stride = 1;
  std::size_t pad = 0;
  std::size_t c_in = 1;
  std::size_t c_out = 1;
  bool bias = false;

  /// Span of the dilated kernel on the input: k + (k-1)(rate-1).
  [[nodiscard]] std::size_t extent() const { return k + (k - 1) * (rate - 1); }
  [[nodiscard]] std::size_t out_extent(std::size_t in) const;
  [[nodiscard]] std::size_t weight_count() const { return k * k * c_in * c_out; }
  [[nodiscard]] std::size_t param_count() const { return weight_count() + (bias ? c_out : 0); }
  [[nodiscard]] Shape weight_shape() const { return {c_out, c_in, k, k}; }
  void validate() const;

  /// Stride-1 convolution that keeps the spatial size (odd k).
  static ConvSpec same(std::size_t k, std::size_t rate, std::size_t c_in, std::size_t c_out,
                       bool bias = false);
};

enum class ConvAlgo {
  Auto,    // Gemm for float, Direct for double
  Direct,  // fixed tap order per output; the double-precision reference path
  Gemm,    // patch matrix + matrix product
};

template <typename T>
struct ConvGrads {
  Tensor<T> grad_x;
  Tensor<T> grad_w;
};

template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Tensor<T>& w, const ConvSpec& spec,
                         ConvAlgo algo = ConvAlgo::Auto);

template <typename T>
ConvGrads<T> conv2d_backward(const Tensor<T>& x, const Tensor<T>& w, const ConvSpec& spec,
                             const Tensor<T>& grad_out, ConvAlgo algo = ConvAlgo::Auto);

/// Zero-stuffed expansion of a (c_out, c_in, k, k) kernel to its dilated
/// extent. An ordinary convolution with the result equals the dilated one.
template <typename T>
Tensor<T> dilate_kernel(const Tensor<T>& w, std::size_t rate);

template <typename T>
Tensor<T> relu(const Tensor<T>& x);

struct PoolSpec {
  std::size_t k = 3;
  std::size_t stride = 2;
  std::size_t pad = 1;
  [[nodiscard]] std::size_t out_extent(std::size_t in) const;
};

template <typename T>
Tensor<T> maxpool(const Tensor<T>& x, const PoolSpec& spec = {});
template <typename T>
Tensor<T> avgpool(const Tensor<T>& x, std::size_t k);
/// Flattens each sample of `x`, returns (n, out, 1, 1). `w` is (out, in, 1, 1),
/// `b` is (1, out, 1, 1).
template <typename T>
Tensor<T> dense(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);
/// Normalizes over channels at every (n, h, w) position.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x);

// ---------------------------------------------------------------------------
// Modules

template <typename T>
class Conv2d final : public Module<T> {
 public:
  Conv2d(std::string name, const ConvSpec& spec);

  /// He-normal weights, std = sqrt(2 / fan_in); zero bias.
  void init(std::mt19937_64& rng);

  Tensor<T> forward(const Tensor<T>& x, Mode mode) override;
  Tensor<T> backward(const Tensor<T>& grad_out) override;
  void collect_params(std::vector<Param<T>*>& out) override;

  [[nodiscard]] const ConvSpec& spec() const { return spec_; }
  Param<T>& weight() { return weight_; }
  Param<T>& bias() { return bias_; }
  void set_algo(ConvAlgo algo) { algo_ = algo; }

 private:
  ConvSpec spec_;
  Param<T> weight_;
  Param<T> bias_;
  ConvAlgo algo_ = ConvAlgo::Auto;
  Tensor<T> input_;
};

struct BatchNormConfig {
  double eps = 1e-5;
  double momentum = 0.9;  // running = momentum * running + (1 - momentum) * batch
};

/// Per-channel batch normalization. Train mode normalizes with the batch
/// moments and folds them into the running moments; infer mode uses the
/// running moments only.
template <typename T>
class BatchNorm final : public Module<T> {
 public:
  BatchNorm(std::string name, std::size_t channels, BatchNormConfig cfg = {});

  Tensor<T> forward(const Tensor<T>& x, Mode mode) override;
  Tensor<T> backward(const Tensor<T>& grad_out) override;
  void collect_params(std::vector<Param<T>*>& out) override;
  void collect_buffers(std::vector<Buffer<T>*>& out) override;

  Param<T>& gamma() { return gamma_; }
  Param<T>& beta() { return beta_; }
  Buffer<T>& running_mean() { return running_mean_; }
  Buffer<T>& running_var() { return running_var_; }
  [[nodiscard]] const BatchNormConfig& config() const { return cfg_; }
  [[nodiscard]] std::size_t channels() const { return channels_; }

 private:
  std::size_t channels_;
  BatchNormConfig cfg_;
  Param<T> gamma_;
  Param<T> beta_;
  Buffer<T> running_mean_;
  Buffer<T> running_var_;
  Mode mode_ = Mode::Train;
  Tensor<T> xhat_;
  std::vector<T> inv_std_;
};

template <typename T>
class ReLU final : public Module<T> {
 public:
  Tensor<T> forward(const Tensor<T>& x, Mode mode) override;
  Tensor<T> backward(const Tensor<T>& grad_out) override;

 private:
  Shape shape_;
  std::vector<std::uint8_t> active_;
};

template <typename T>
class MaxPool2d final : public Module<T> {
 public:
  explicit MaxPool2d(PoolSpec spec = {}) : spec_(spec) {}
  Tensor<T> forward(const Tensor<T>& x, Mode mode) override;
  Tensor<T> backward(const Tensor<T>& grad_out) override;
  [[nodiscard]] const PoolSpec& spec() const { return spec_; }

 private:
  PoolSpec spec_;
  Shape in_shape_;
  std::vector<std::size_t> argmax_;
};

template <typename T>
class AvgPool2d final : public Module<T> {
 public:
  explicit AvgPool2d(std::size_t k) : k_(k) {}
  Tensor<T> forward(const Tensor<T>& x, Mode mode) override;
  Tensor<T> backward(const Tensor<T>& grad_out) override;
  [[nodiscard]] std::size_t k() const { return k_; }

 private:
  std::size_t k_;
  Shape in_shape_;
};

template <typename T>
class Dense final : public Module<T> {
 public:
  Dense(std::string name, std::size_t in, std::size_t out);
  void init(std::mt19937_64& rng);

  Tensor<T> forward(const Tensor<T>& x, Mode mode) override;
  Tensor<T> backward(const Tensor<T>& grad_out) override;
  void collect_params(std::vector<Param<T>*>& out) override;

  [[nodiscard]] std::size_t in_features() const { return in_; }
  [[nodiscard]] std::size_t out_features() const { return out_; }
  Param<T>& weight() { return weight_; }
  Param<T>& bias() { return bias_; }

 private:
  std::size_t in_;
  std::size_t out_;
  Param<T> weight_;
  Param<T> bias_;
  Tensor<T> input_;
};

template <typename T>
class Softmax final : public Module<T> {
 public:
  Tensor<T> forward(const Tensor<T>& x, Mode mode) override;
  Tensor<T> backward(const Tensor<T>& grad_out) override;

 private:
  Tensor<T> output_;
};

/// Elementwise sum of two inputs; used by gradient tests of the merge op.
template <typename T>
class AddConst final : public Module<T> {
 public:
  explicit AddConst(Tensor<T> other) : other_(std::move(other)) {}
  Tensor<T> forward(const Tensor<T>& x, Mode) override { return add(x, other_); }
  Tensor<T> backward(const Tensor<T>& grad_out) override { return grad_out; }

 private:
  Tensor<T> other_;
};

}  // namespace dirnet
