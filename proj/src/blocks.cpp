#include "dirnet/blocks.hpp"

namespace dirnet {

std::string to_string(BlockKind kind) {
  switch (kind) {
    case BlockKind::Residual:
      return "residual";
    case BlockKind::InnerResidual:
      return "inner-residual";
    case BlockKind::DilatedInnerResidual:
      return "dilated-inner-residual";
  }
  return "unknown";
}

// ---------------------------------------------------------------------------
// CompositeFn

template <typename T>
CompositeFn<T>::CompositeFn(const std::string& name, const ConvSpec& spec, BatchNormConfig bn)
    : bn_(name + ".bn", spec.c_in, bn), conv_(name + ".conv", spec) {}

template <typename T>
Tensor<T> CompositeFn<T>::forward(const Tensor<T>& x, Mode mode) {
  return conv_.forward(act_.forward(bn_.forward(x, mode), mode), mode);
}

template <typename T>
Tensor<T> CompositeFn<T>::backward(const Tensor<T>& grad_out) {
  return bn_.backward(act_.backward(conv_.backward(grad_out)));
}

template <typename T>
void CompositeFn<T>::collect_params(std::vector<Param<T>*>& out) {
  bn_.collect_params(out);
  conv_.collect_params(out);
}

template <typename T>
void CompositeFn<T>::collect_buffers(std::vector<Buffer<T>*>& out) {
  bn_.collect_buffers(out);
}

// ---------------------------------------------------------------------------
// Block helpers

namespace {

ConvSpec projection_spec(const BlockConfig& cfg) {
  return ConvSpec{1, 1, 1, 0, cfg.c_in, cfg.c_out, false};
}

void validate(const BlockConfig& cfg) {
  if (cfg.c_in == 0 || cfg.c_out == 0) throw ConfigError("block channel counts must be >= 1");
  if (cfg.k % 2 == 0) throw ConfigError("block kernels must have odd size");
  if (cfg.r1_rate < 1 || cfg.r2_rate < 1) throw ConfigError("dilation rates must be >= 1");
}

template <typename T>
std::unique_ptr<Conv2d<T>> maybe_projection(const std::string& name, const BlockConfig& cfg) {
  validate(cfg);
  if (!cfg.has_projection()) return nullptr;
  return std::make_unique<Conv2d<T>>(name + ".H", projection_spec(cfg));
}

}  // namespace

template <typename T>
Tensor<T> Block<T>::identity_forward(const Tensor<T>& x, Mode mode) {
  Tensor<T> h = projection_ ? projection_->forward(x, mode) : x;
  record("H", h);
  return h;
}

template <typename T>
Tensor<T> Block<T>::identity_backward(const Tensor<T>& g) {
  return projection_ ? projection_->backward(g) : g;
}

template <typename T>
void Block<T>::init_projection(std::mt19937_64& rng) {
  if (projection_) projection_->init(rng);
}

template <typename T>
void Block<T>::collect_projection(std::vector<Param<T>*>& out) {
  if (projection_) projection_->collect_params(out);
}

// ---------------------------------------------------------------------------
// ResidualBlock

template <typename T>
ResidualBlock<T>::ResidualBlock(const std::string& name, BlockConfig cfg)
    : Block<T>(name, cfg),
      f1_(name + ".F1", ConvSpec::same(cfg.k, 1, cfg.c_in, cfg.c_out), cfg.bn),
      f2_(name + ".F2", ConvSpec::same(cfg.k, 1, cfg.c_out, cfg.c_out), cfg.bn) {
  this->projection_ = maybe_projection<T>(name, cfg);
}

template <typename T>
void ResidualBlock<T>::init(std::mt19937_64& rng) {
  f1_.init(rng);
  f2_.init(rng);
  this->init_projection(rng);
}

template <typename T>
Tensor<T> ResidualBlock<T>::forward(const Tensor<T>& x, Mode mode) {
  Tensor<T> h = this->identity_forward(x, mode);
  Tensor<T> a = f1_.forward(x, mode);
  this->record("F1", a);
  Tensor<T> b = f2_.forward(a, mode);
  this->record("F2", b);
  Tensor<T> out = add(b, h);
  this->record("out", out);
  return out;
}

template <typename T>
Tensor<T> ResidualBlock<T>::backward(const Tensor<T>& grad_out) {
  Tensor<T> gx = f1_.backward(f2_.backward(grad_out));
  add_inplace(gx, this->identity_backward(grad_out));
  return gx;
}

template <typename T>
void ResidualBlock<T>::collect_params(std::vector<Param<T>*>& out) {
  f1_.collect_params(out);
  f2_.collect_params(out);
  this->collect_projection(out);
}

template <typename T>
void ResidualBlock<T>::collect_buffers(std::vector<Buffer<T>*>& out) {
  f1_.collect_buffers(out);
  f2_.collect_buffers(out);
}

// ---------------------------------------------------------------------------
// InnerResidualBlock

template <typename T>
InnerResidualBlock<T>::InnerResidualBlock(const std::string& name, BlockConfig cfg)
    : Block<T>(name, cfg),
      f1_(name + ".F1", ConvSpec::same(cfg.k, 1, cfg.c_in, cfg.c_out), cfg.bn),
      f2_(name + ".F2", ConvSpec::same(cfg.k, 1, cfg.c_out, cfg.c_out), cfg.bn),
      f3_(name + ".F3", ConvSpec::same(cfg.k, 1, cfg.c_out, cfg.c_out), cfg.bn) {
  this->projection_ = maybe_projection<T>(name, cfg);
}

template <typename T>
void InnerResidualBlock<T>::init(std::mt19937_64& rng) {
  f1_.init(rng);
  f2_.init(rng);
  f3_.init(rng);
  this->init_projection(rng);
}

template <typename T>
Tensor<T> InnerResidualBlock<T>::forward(const Tensor<T>& x, Mode mode) {
  Tensor<T> h = this->identity_forward(x, mode);
  Tensor<T> a = f1_.forward(x, mode);
  this->record("F1", a);
  add_inplace(a, h);
  this->record("sum1", a);
  Tensor<T> b = f2_.forward(a, mode);
  this->record("F2", b);
  add_inplace(b, h);
  this->record("sum2", b);
  Tensor<T> out = f3_.forward(b, mode);
  this->record("F3", out);
  add_inplace(out, h);
  this->record("out", out);
  return out;
}

template <typename T>
Tensor<T> InnerResidualBlock<T>::backward(const Tensor<T>& grad_out) {
  // H(X) feeds all three merges, so its gradient is the sum of theirs.
  Tensor<T> g_b = f3_.backward(grad_out);
  Tensor<T> g_a = f2_.backward(g_b);
  Tensor<T> gx = f1_.backward(g_a);
  Tensor<T> g_h = add(grad_out, g_b);
  add_inplace(g_h, g_a);
  add_inplace(gx, this->identity_backward(g_h));
  return gx;
}

template <typename T>
void InnerResidualBlock<T>::collect_params(std::vector<Param<T>*>& out) {
  f1_.collect_params(out);
  f2_.collect_params(out);
  f3_.collect_params(out);
  this->collect_projection(out);
}

template <typename T>
void InnerResidualBlock<T>::collect_buffers(std::vector<Buffer<T>*>& out) {
  f1_.collect_buffers(out);
  f2_.collect_buffers(out);
  f3_.collect_buffers(out);
}

// ---------------------------------------------------------------------------
// DilatedInnerResidualBlock

template <typename T>
DilatedInnerResidualBlock<T>::DilatedInnerResidualBlock(const std::string& name, BlockConfig cfg)
    : Block<T>(name, cfg),
      f1_(name + ".F1", ConvSpec::same(cfg.k, 1, cfg.c_in, cfg.c_out), cfg.bn),
      r1_(name + ".R1", ConvSpec::same(cfg.k, cfg.r1_rate, cfg.c_in, cfg.c_out), cfg.bn),
      f2_(name + ".F2", ConvSpec::same(cfg.k, 1, cfg.c_out, cfg.c_out), cfg.bn),
      r2_(name + ".R2", ConvSpec::same(cfg.k, cfg.r2_rate, cfg.c_in, cfg.c_out), cfg.bn),
      f3_(name + ".F3", ConvSpec::same(cfg.k, 1, cfg.c_out, cfg.c_out), cfg.bn) {
  this->projection_ = maybe_projection<T>(name, cfg);
}

template <typename T>
void DilatedInnerResidualBlock<T>::init(std::mt19937_64& rng) {
  f1_.init(rng);
  r1_.init(rng);
  f2_.init(rng);
  r2_.init(rng);
  f3_.init(rng);
  this->init_projection(rng);
}

template <typename T>
Tensor<T> DilatedInnerResidualBlock<T>::forward(const Tensor<T>& x, Mode mode) {
  Tensor<T> h = this->identity_forward(x, mode);

  Tensor<T> t1 = f1_.forward(x, mode);
  this->record("F1", t1);
  {
    Tensor<T> r = r1_.forward(x, mode);
    this->record("R1", r);
    add_inplace(t1, r);
  }
  this->record("sum1", t1);

  Tensor<T> t2 = f2_.forward(t1, mode);
  this->record("F2", t2);
  {
    Tensor<T> r = r2_.forward(x, mode);
    this->record("R2", r);
    add_inplace(t2, r);
  }
  this->record("sum2", t2);

  Tensor<T> out = f3_.forward(t2, mode);
  this->record("F3", out);
  add_inplace(out, h);
  this->record("out", out);
  return out;
}

template <typename T>
Tensor<T> DilatedInnerResidualBlock<T>::backward(const Tensor<T>& grad_out) {
  Tensor<T> g_t2 = f3_.backward(grad_out);
  Tensor<T> g_t1 = f2_.backward(g_t2);
  Tensor<T> gx = f1_.backward(g_t1);
  add_inplace(gx, r1_.backward(g_t1));
  add_inplace(gx, r2_.backward(g_t2));
  add_inplace(gx, this->identity_backward(grad_out));
  return gx;
}

template <typename T>
void DilatedInnerResidualBlock<T>::collect_params(std::vector<Param<T>*>& out) {
  f1_.collect_params(out);
  r1_.collect_params(out);
  f2_.collect_params(out);
  r2_.collect_params(out);
  f3_.collect_params(out);
  this->collect_projection(out);
}

template <typename T>
void DilatedInnerResidualBlock<T>::collect_buffers(std::vector<Buffer<T>*>& out) {
  f1_.collect_buffers(out);
  r1_.collect_buffers(out);
  f2_.collect_buffers(out);
  r2_.collect_buffers(out);
  f3_.collect_buffers(out);
}

template <typename T>
std::unique_ptr<Block<T>> make_block(BlockKind kind, const std::string& name,
                                     const BlockConfig& cfg) {
  switch (kind) {
    case BlockKind::Residual:
      return std::make_unique<ResidualBlock<T>>(name, cfg);
    case BlockKind::InnerResidual:
      return std::make_unique<InnerResidualBlock<T>>(name, cfg);
    case BlockKind::DilatedInnerResidual:
      return std::make_unique<DilatedInnerResidualBlock<T>>(name, cfg);
  }
  throw ConfigError("unknown block kind");
}

// ---------------------------------------------------------------------------
// Parameter accounting

namespace {

std::size_t composite_params(std::size_t k, std::size_t c_in, std::size_t c_out) {
  return 2 * c_in + k * k * c_in * c_out;
}

}  // namespace

BlockParamCount block_param_count(const BlockConfig& cfg, BlockKind kind) {
  validate(cfg);
  const std::size_t k = cfg.k;
  const std::size_t ci = cfg.c_in;
  const std::size_t co = cfg.c_out;
  const std::size_t kk = k * k;
  BlockParamCount pc;
  pc.projection = cfg.has_projection() ? ci * co : 0;

  switch (kind) {
    case BlockKind::Residual:
      pc.conv_weights = kk * ci * co + kk * co * co;
      pc.batchnorm = 2 * ci + 2 * co;
      break;
    case BlockKind::InnerResidual:
      pc.conv_weights = kk * ci * co + 2 * kk * co * co;
      pc.batchnorm = 2 * ci + 4 * co;
      break;
    case BlockKind::DilatedInnerResidual:
      // F1, R1, R2 read the block input; F2, F3 read c_out-channel merges.
      pc.conv_weights = 3 * kk * ci * co + 2 * kk * co * co;
      pc.batchnorm = 6 * ci + 4 * co;
      break;
  }
  pc.total = pc.conv_weights + pc.batchnorm + pc.projection;
  pc.undilated_total = pc.total;

  if (kind == BlockKind::DilatedInnerResidual) {
    const std::size_t e1 = k + (k - 1) * (cfg.r1_rate - 1);
    const std::size_t e2 = k + (k - 1) * (cfg.r2_rate - 1);
    pc.undilated_total = composite_params(k, ci, co) + composite_params(e1, ci, co) +
                         composite_params(k, co, co) + composite_params(e2, ci, co) +
                         composite_params(k, co, co) + pc.projection;
    pc.closed_form_savings = co * ci * ((e1 * e1 - kk) + (e2 * e2 - kk));
  }
  pc.savings = pc.undilated_total - pc.total;
  return pc;
}

#define DIRNET_INSTANTIATE(T)                                                              \
  template class CompositeFn<T>;                                                           \
  template class Block<T>;                                                                 \
  template class ResidualBlock<T>;                                                         \
  template class InnerResidualBlock<T>;                                                    \
  template class DilatedInnerResidualBlock<T>;                                             \
  template std::unique_ptr<Block<T>> make_block<T>(BlockKind, const std::string&,          \
                                                   const BlockConfig&);

DIRNET_INSTANTIATE(float)
DIRNET_INSTANTIATE(double)

#undef DIRNET_INSTANTIATE

}  // namespace dirnet
