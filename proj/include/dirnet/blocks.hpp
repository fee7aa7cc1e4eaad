#pragma once

#include <cstddef>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <string>

#include "dirnet/layers.hpp"
#include "dirnet/module.hpp"

namespace dirnet {

/// Named intermediate activations captured during a forward pass.
template <typename T>
using ActivationMap = std::map<std::string, Tensor<T>>;

/// Pre-activation unit: batch norm, then ReLU, then convolution.
template <typename T>
class CompositeFn final : public Module<T> {
 public:
  CompositeFn(const std::string& name, const ConvSpec& spec, BatchNormConfig bn = {});

  void init(std::mt19937_64& rng) { conv_.init(rng); }
  Tensor<T> forward(const Tensor<T>& x, Mode mode) override;
  Tensor<T> backward(const Tensor<T>& grad_out) override;
  void collect_params(std::vector<Param<T>*>& out) override;
  void collect_buffers(std::vector<Buffer<T>*>& out) override;

  BatchNorm<T>& norm() { return bn_; }
  Conv2d<T>& conv() { return conv_; }
  [[nodiscard]] const ConvSpec& spec() const { return conv_.spec(); }

 private:
  BatchNorm<T> bn_;
  ReLU<T> act_;
  Conv2d<T> conv_;
};

enum class BlockKind { Residual, InnerResidual, DilatedInnerResidual };

std::string to_string(BlockKind kind);

/// Channel wiring of one block. Composite functions use 3x3 kernels; the
/// dilated branches R1 and R2 use rates `r1_rate` and `r2_rate`.
struct BlockConfig {
  std::size_t c_in = 1;
  std::size_t c_out = 1;
  std::size_t k = 3;
  std::size_t r1_rate = 2;
  std::size_t r2_rate = 3;
  BatchNormConfig bn{};

  [[nodiscard]] bool has_projection() const { return c_in != c_out; }
};

/// Common surface of the three block types.
template <typename T>
class Block : public Module<T> {
 public:
  Block(std::string name, BlockConfig cfg) : name_(std::move(name)), cfg_(cfg) {}

  virtual void init(std::mt19937_64& rng) = 0;
  [[nodiscard]] virtual BlockKind kind() const = 0;

  /// When set, forward stores its intermediates under "<name>.<label>".
  void set_recorder(ActivationMap<T>* sink) { sink_ = sink; }

  [[nodiscard]] const std::string& name() const { return name_; }
  [[nodiscard]] const BlockConfig& config() const { return cfg_; }

 protected:
  void record(const std::string& label, const Tensor<T>& t) {
    if (sink_) (*sink_)[name_ + "." + label] = t;
  }
  Tensor<T> identity_forward(const Tensor<T>& x, Mode mode);
  Tensor<T> identity_backward(const Tensor<T>& g);
  void init_projection(std::mt19937_64& rng);
  void collect_projection(std::vector<Param<T>*>& out);

  std::string name_;
  BlockConfig cfg_;
  std::unique_ptr<Conv2d<T>> projection_;  // present iff c_in != c_out
  ActivationMap<T>* sink_ = nullptr;
};

/// X_{l+1} = F2(F1(X)) + H(X)
template <typename T>
class ResidualBlock final : public Block<T> {
 public:
  ResidualBlock(const std::string& name, BlockConfig cfg);
  void init(std::mt19937_64& rng) override;
  [[nodiscard]] BlockKind kind() const override { return BlockKind::Residual; }
  Tensor<T> forward(const Tensor<T>& x, Mode mode) override;
  Tensor<T> backward(const Tensor<T>& grad_out) override;
  void collect_params(std::vector<Param<T>*>& out) override;
  void collect_buffers(std::vector<Buffer<T>*>& out) override;

  CompositeFn<T>& f1() { return f1_; }
  CompositeFn<T>& f2() { return f2_; }

 private:
  CompositeFn<T> f1_;
  CompositeFn<T> f2_;
};

/// F_IR(X) = F3(F2(F1(X) + H(X)) + H(X)); X_{l+1} = F_IR(X) + H(X)
template <typename T>
class InnerResidualBlock final : public Block<T> {
 public:
  InnerResidualBlock(const std::string& name, BlockConfig cfg);
  void init(std::mt19937_64& rng) override;
  [[nodiscard]] BlockKind kind() const override { return BlockKind::InnerResidual; }
  Tensor<T> forward(const Tensor<T>& x, Mode mode) override;
  Tensor<T> backward(const Tensor<T>& grad_out) override;
  void collect_params(std::vector<Param<T>*>& out) override;
  void collect_buffers(std::vector<Buffer<T>*>& out) override;

  CompositeFn<T>& f1() { return f1_; }
  CompositeFn<T>& f2() { return f2_; }
  CompositeFn<T>& f3() { return f3_; }

 private:
  CompositeFn<T> f1_;
  CompositeFn<T> f2_;
  CompositeFn<T> f3_;
};

/// Dilated inner residual block:
///   t1  = F1(X) + R1(X)
///   t2  = F2(t1) + R2(X)
///   out = F3(t2) + H(X)
/// R1 and R2 are dilated 3x3 composites reading the block input.
/// Recorded labels: F1 R1 sum1 F2 R2 sum2 F3 H out.
template <typename T>
class DilatedInnerResidualBlock final : public Block<T> {
 public:
  DilatedInnerResidualBlock(const std::string& name, BlockConfig cfg);
  void init(std::mt19937_64& rng) override;
  [[nodiscard]] BlockKind kind() const override { return BlockKind::DilatedInnerResidual; }
  Tensor<T> forward(const Tensor<T>& x, Mode mode) override;
  Tensor<T> backward(const Tensor<T>& grad_out) override;
  void collect_params(std::vector<Param<T>*>& out) override;
  void collect_buffers(std::vector<Buffer<T>*>& out) override;

  CompositeFn<T>& f1() { return f1_; }
  CompositeFn<T>& f2() { return f2_; }
  CompositeFn<T>& f3() { return f3_; }
  CompositeFn<T>& r1() { return r1_; }
  CompositeFn<T>& r2() { return r2_; }
  Conv2d<T>* projection() { return this->projection_.get(); }

 private:
  CompositeFn<T> f1_;
  CompositeFn<T> r1_;
  CompositeFn<T> f2_;
  CompositeFn<T> r2_;
  CompositeFn<T> f3_;
};

template <typename T>
std::unique_ptr<Block<T>> make_block(BlockKind kind, const std::string& name, const BlockConfig& cfg);

/// Closed-form parameter accounting for one block.
struct BlockParamCount {
  std::size_t conv_weights = 0;
  std::size_t batchnorm = 0;   // gamma + beta
  std::size_t projection = 0;  // 1x1 identity projection
  std::size_t total = 0;
  // Same wiring with ordinary k_eff x k_eff kernels in place of the dilated
  // branches (5x5 for rate 2, 7x7 for rate 3 at k = 3).
  std::size_t undilated_total = 0;
  std::size_t savings = 0;  // undilated_total - total
  // c_out * c_in * ((K5^2 - K3^2) + (K7^2 - K3^2)) evaluated with the
  // configured kernel and rates.
  std::size_t closed_form_savings = 0;
};

BlockParamCount block_param_count(const BlockConfig& cfg,
                                  BlockKind kind = BlockKind::DilatedInnerResidual);

}  // namespace dirnet
