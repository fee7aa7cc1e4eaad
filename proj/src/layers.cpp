#include "dirnet/layers.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <type_traits>

namespace dirnet {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Columns per patch-matrix chunk; small feature maps batch several images.
constexpr std::size_t kGemmColumns = 4096;

template <typename T>
ConvAlgo resolve(ConvAlgo algo) {
  if (algo != ConvAlgo::Auto) return algo;
  return std::is_same_v<T, float> ? ConvAlgo::Gemm : ConvAlgo::Direct;
}

void check_conv_input(const Shape& x, const Shape& w, const ConvSpec& spec) {
  spec.validate();
  if (x.c != spec.c_in) {
    throw ShapeError("conv input has " + std::to_string(x.c) + " channels, spec expects " +
                     std::to_string(spec.c_in));
  }
  require_same_shape(w, spec.weight_shape(), "conv weight");
  const std::size_t ext = spec.extent();
  if (ext > x.h + 2 * spec.pad || ext > x.w + 2 * spec.pad) {
    throw ShapeError("dilated kernel extent " + std::to_string(ext) + " exceeds padded input " +
                     std::to_string(x.h + 2 * spec.pad) + "x" + std::to_string(x.w + 2 * spec.pad));
  }
}

// Output columns [lo, hi) whose stride-1 tap at offset dx lands inside a row
// of width w.
std::pair<std::ptrdiff_t, std::ptrdiff_t> valid_columns(std::ptrdiff_t dx, std::ptrdiff_t w,
                                                        std::size_t wo) {
  const auto n = static_cast<std::ptrdiff_t>(wo);
  const std::ptrdiff_t lo = std::clamp<std::ptrdiff_t>(-dx, 0, n);
  const std::ptrdiff_t hi = std::clamp<std::ptrdiff_t>(w - dx, lo, n);
  return {lo, hi};
}

// Patch matrix rows are (ci, ky, kx); columns are output pixels of one image,
// written at column offset `col0` of a row-major matrix with leading dim `ld`.
template <typename T>
void im2col(const T* img, const Shape& xs, const ConvSpec& s, std::size_t ho, std::size_t wo,
            T* col, std::size_t ld, std::size_t col0) {
  const auto h = static_cast<std::ptrdiff_t>(xs.h);
  const auto w = static_cast<std::ptrdiff_t>(xs.w);
  const auto pad = static_cast<std::ptrdiff_t>(s.pad);
  const auto stride = static_cast<std::ptrdiff_t>(s.stride);
  for (std::size_t ci = 0; ci < s.c_in; ++ci) {
    const T* plane = img + ci * xs.plane();
    for (std::size_t ky = 0; ky < s.k; ++ky) {
      for (std::size_t kx = 0; kx < s.k; ++kx) {
        T* row = col + ((ci * s.k + ky) * s.k + kx) * ld + col0;
        const auto dy = static_cast<std::ptrdiff_t>(ky * s.rate) - pad;
        const auto dx = static_cast<std::ptrdiff_t>(kx * s.rate) - pad;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          T* dst = row + oy * wo;
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy) * stride + dy;
          if (iy < 0 || iy >= h) {
            std::fill(dst, dst + wo, T(0));
            continue;
          }
          const T* src = plane + iy * w;
          if (stride == 1) {
            const auto [lo, hi] = valid_columns(dx, w, wo);
            std::fill(dst, dst + lo, T(0));
            std::copy(src + lo + dx, src + hi + dx, dst + lo);
            std::fill(dst + hi, dst + wo, T(0));
            continue;
          }
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox) * stride + dx;
            dst[ox] = (ix >= 0 && ix < w) ? src[ix] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* col, std::size_t ld, std::size_t col0, const Shape& xs, const ConvSpec& s,
            std::size_t ho, std::size_t wo, T* img) {
  const auto h = static_cast<std::ptrdiff_t>(xs.h);
  const auto w = static_cast<std::ptrdiff_t>(xs.w);
  const auto pad = static_cast<std::ptrdiff_t>(s.pad);
  const auto stride = static_cast<std::ptrdiff_t>(s.stride);
  for (std::size_t ci = 0; ci < s.c_in; ++ci) {
    T* plane = img + ci * xs.plane();
    for (std::size_t ky = 0; ky < s.k; ++ky) {
      for (std::size_t kx = 0; kx < s.k; ++kx) {
        const T* row = col + ((ci * s.k + ky) * s.k + kx) * ld + col0;
        const auto dy = static_cast<std::ptrdiff_t>(ky * s.rate) - pad;
        const auto dx = static_cast<std::ptrdiff_t>(kx * s.rate) - pad;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy) * stride + dy;
          if (iy < 0 || iy >= h) continue;
          const T* src = row + oy * wo;
          T* dst = plane + iy * w;
          if (stride == 1) {
            const auto [lo, hi] = valid_columns(dx, w, wo);
            for (std::ptrdiff_t ox = lo; ox < hi; ++ox) dst[ox + dx] += src[ox];
            continue;
          }
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox) * stride + dx;
            if (ix >= 0 && ix < w) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

template <typename T>
Tensor<T> conv_forward_gemm(const Tensor<T>& x, const Tensor<T>& w, const ConvSpec& s) {
  const Shape& xs = x.shape();
  const std::size_t ho = s.out_extent(xs.h);
  const std::size_t wo = s.out_extent(xs.w);
  const std::size_t hw = ho * wo;
  const std::size_t kdim = s.c_in * s.k * s.k;
  Tensor<T> out({xs.n, s.c_out, ho, wo});

  const std::size_t per_chunk = std::max<std::size_t>(1, std::min(xs.n, kGemmColumns / hw));
  Eigen::Map<const RowMat<T>> wm(w.ptr(), static_cast<Eigen::Index>(s.c_out),
                                 static_cast<Eigen::Index>(kdim));
  std::vector<T> colbuf(kdim * per_chunk * hw);
  RowMat<T> y;
  for (std::size_t n0 = 0; n0 < xs.n; n0 += per_chunk) {
    const std::size_t nb = std::min(per_chunk, xs.n - n0);
    const std::size_t cols = nb * hw;
    for (std::size_t i = 0; i < nb; ++i) {
      im2col(x.plane(n0 + i, 0), xs, s, ho, wo, colbuf.data(), cols, i * hw);
    }
    Eigen::Map<const RowMat<T>> cm(colbuf.data(), static_cast<Eigen::Index>(kdim),
                                   static_cast<Eigen::Index>(cols));
    y.resize(static_cast<Eigen::Index>(s.c_out), static_cast<Eigen::Index>(cols));
    y.noalias() = wm * cm;
    for (std::size_t i = 0; i < nb; ++i) {
      for (std::size_t co = 0; co < s.c_out; ++co) {
        std::memcpy(out.plane(n0 + i, co), y.data() + co * cols + i * hw, hw * sizeof(T));
      }
    }
  }
  return out;
}

template <typename T>
ConvGrads<T> conv_backward_gemm(const Tensor<T>& x, const Tensor<T>& w, const ConvSpec& s,
                                const Tensor<T>& g) {
  const Shape& xs = x.shape();
  const std::size_t ho = s.out_extent(xs.h);
  const std::size_t wo = s.out_extent(xs.w);
  const std::size_t hw = ho * wo;
  const std::size_t kdim = s.c_in * s.k * s.k;
  ConvGrads<T> grads{Tensor<T>(xs), Tensor<T>(w.shape())};

  const std::size_t per_chunk = std::max<std::size_t>(1, std::min(xs.n, kGemmColumns / hw));
  const auto rows_out = static_cast<Eigen::Index>(s.c_out);
  const auto kd = static_cast<Eigen::Index>(kdim);
  Eigen::Map<const RowMat<T>> wm(w.ptr(), rows_out, kd);
  Eigen::Map<RowMat<T>> gw(grads.grad_w.ptr(), rows_out, kd);
  std::vector<T> colbuf(kdim * per_chunk * hw);
  RowMat<T> gm;
  RowMat<T> gcol;
  for (std::size_t n0 = 0; n0 < xs.n; n0 += per_chunk) {
    const std::size_t nb = std::min(per_chunk, xs.n - n0);
    const std::size_t cols = nb * hw;
    const auto ncols = static_cast<Eigen::Index>(cols);
    gm.resize(rows_out, ncols);
    for (std::size_t i = 0; i < nb; ++i) {
      im2col(x.plane(n0 + i, 0), xs, s, ho, wo, colbuf.data(), cols, i * hw);
      for (std::size_t co = 0; co < s.c_out; ++co) {
        std::memcpy(gm.data() + co * cols + i * hw, g.plane(n0 + i, co), hw * sizeof(T));
      }
    }
    Eigen::Map<const RowMat<T>> cm(colbuf.data(), kd, ncols);
    gw.noalias() += gm * cm.transpose();
    gcol.resize(kd, ncols);
    gcol.noalias() = wm.transpose() * gm;
    for (std::size_t i = 0; i < nb; ++i) {
      col2im(gcol.data(), cols, i * hw, xs, s, ho, wo, grads.grad_x.plane(n0 + i, 0));
    }
  }
  return grads;
}

template <typename T>
Tensor<T> conv_forward_direct(const Tensor<T>& x, const Tensor<T>& w, const ConvSpec& s) {
  const Shape& xs = x.shape();
  const std::size_t ho = s.out_extent(xs.h);
  const std::size_t wo = s.out_extent(xs.w);
  Tensor<T> out({xs.n, s.c_out, ho, wo});
  const auto h = static_cast<std::ptrdiff_t>(xs.h);
  const auto wd = static_cast<std::ptrdiff_t>(xs.w);
  const auto pad = static_cast<std::ptrdiff_t>(s.pad);
  for (std::size_t n = 0; n < xs.n; ++n) {
    for (std::size_t co = 0; co < s.c_out; ++co) {
      for (std::size_t oy = 0; oy < ho; ++oy) {
        for (std::size_t ox = 0; ox < wo; ++ox) {
          T acc = 0;
          for (std::size_t ci = 0; ci < s.c_in; ++ci) {
            const T* plane = x.plane(n, ci);
            for (std::size_t ky = 0; ky < s.k; ++ky) {
              const std::ptrdiff_t iy =
                  static_cast<std::ptrdiff_t>(oy * s.stride + ky * s.rate) - pad;
              if (iy < 0 || iy >= h) continue;
              for (std::size_t kx = 0; kx < s.k; ++kx) {
                const std::ptrdiff_t ix =
                    static_cast<std::ptrdiff_t>(ox * s.stride + kx * s.rate) - pad;
                if (ix < 0 || ix >= wd) continue;
                acc += w.at(co, ci, ky, kx) * plane[iy * wd + ix];
              }
            }
          }
          out.at(n, co, oy, ox) = acc;
        }
      }
    }
  }
  return out;
}

template <typename T>
ConvGrads<T> conv_backward_direct(const Tensor<T>& x, const Tensor<T>& w, const ConvSpec& s,
                                  const Tensor<T>& g) {
  const Shape& xs = x.shape();
  const std::size_t ho = s.out_extent(xs.h);
  const std::size_t wo = s.out_extent(xs.w);
  ConvGrads<T> grads{Tensor<T>(xs), Tensor<T>(w.shape())};
  const auto h = static_cast<std::ptrdiff_t>(xs.h);
  const auto wd = static_cast<std::ptrdiff_t>(xs.w);
  const auto pad = static_cast<std::ptrdiff_t>(s.pad);
  for (std::size_t n = 0; n < xs.n; ++n) {
    for (std::size_t co = 0; co < s.c_out; ++co) {
      for (std::size_t oy = 0; oy < ho; ++oy) {
        for (std::size_t ox = 0; ox < wo; ++ox) {
          const T go = g.at(n, co, oy, ox);
          if (go == T(0)) continue;
          for (std::size_t ci = 0; ci < s.c_in; ++ci) {
            for (std::size_t ky = 0; ky < s.k; ++ky) {
              const std::ptrdiff_t iy =
                  static_cast<std::ptrdiff_t>(oy * s.stride + ky * s.rate) - pad;
              if (iy < 0 || iy >= h) continue;
              for (std::size_t kx = 0; kx < s.k; ++kx) {
                const std::ptrdiff_t ix =
                    static_cast<std::ptrdiff_t>(ox * s.stride + kx * s.rate) - pad;
                if (ix < 0 || ix >= wd) continue;
                const auto uy = static_cast<std::size_t>(iy);
                const auto ux = static_cast<std::size_t>(ix);
                grads.grad_w.at(co, ci, ky, kx) += go * x.at(n, ci, uy, ux);
                grads.grad_x.at(n, ci, uy, ux) += go * w.at(co, ci, ky, kx);
              }
            }
          }
        }
      }
    }
  }
  return grads;
}

}  // namespace

// ---------------------------------------------------------------------------

std::size_t ConvSpec::out_extent(std::size_t in) const {
  const std::size_t padded = in + 2 * pad;
  if (extent() > padded) {
    throw ShapeError("kernel extent " + std::to_string(extent()) + " exceeds padded input " +
                     std::to_string(padded));
  }
  return (padded - extent()) / stride + 1;
}

void ConvSpec::validate() const {
  if (k < 1 || rate < 1 || stride < 1 || c_in < 1 || c_out < 1) {
    throw ConfigError("conv spec requires k, rate, stride and channel counts >= 1");
  }
}

ConvSpec ConvSpec::same(std::size_t k, std::size_t rate, std::size_t c_in, std::size_t c_out,
                        bool bias) {
  if (k % 2 == 0) throw ConfigError("same padding needs an odd kernel size");
  return ConvSpec{k, rate, 1, ((k - 1) * rate) / 2, c_in, c_out, bias};
}

template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Tensor<T>& w, const ConvSpec& spec,
                         ConvAlgo algo) {
  check_conv_input(x.shape(), w.shape(), spec);
  return resolve<T>(algo) == ConvAlgo::Gemm ? conv_forward_gemm(x, w, spec)
                                            : conv_forward_direct(x, w, spec);
}

template <typename T>
ConvGrads<T> conv2d_backward(const Tensor<T>& x, const Tensor<T>& w, const ConvSpec& spec,
                             const Tensor<T>& grad_out, ConvAlgo algo) {
  check_conv_input(x.shape(), w.shape(), spec);
  const Shape expect{x.shape().n, spec.c_out, spec.out_extent(x.shape().h),
                     spec.out_extent(x.shape().w)};
  require_same_shape(grad_out.shape(), expect, "conv backward grad_out");
  return resolve<T>(algo) == ConvAlgo::Gemm ? conv_backward_gemm(x, w, spec, grad_out)
                                            : conv_backward_direct(x, w, spec, grad_out);
}

template <typename T>
Tensor<T> dilate_kernel(const Tensor<T>& w, std::size_t rate) {
  if (rate < 1) throw ConfigError("dilation rate must be >= 1");
  const Shape& ws = w.shape();
  if (ws.h != ws.w) throw ShapeError("kernel must be square, got " + ws.str());
  const std::size_t k = ws.h;
  const std::size_t ext = k + (k - 1) * (rate - 1);
  Tensor<T> out({ws.n, ws.c, ext, ext});
  for (std::size_t o = 0; o < ws.n; ++o)
    for (std::size_t i = 0; i < ws.c; ++i)
      for (std::size_t ky = 0; ky < k; ++ky)
        for (std::size_t kx = 0; kx < k; ++kx) out.at(o, i, ky * rate, kx * rate) = w.at(o, i, ky, kx);
  return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
  return out;
}

std::size_t PoolSpec::out_extent(std::size_t in) const {
  if (k < 1 || stride < 1) throw ConfigError("pool window and stride must be >= 1");
  if (k > in + 2 * pad) {
    throw ShapeError("pool window " + std::to_string(k) + " exceeds input extent " +
                     std::to_string(in) + " (+2*" + std::to_string(pad) + " pad)");
  }
  return (in + 2 * pad - k) / stride + 1;
}

namespace {

// Shared by the functional op and the module; records the flat argmax index
// (first maximum in scan order) when `argmax` is non-null.
template <typename T>
Tensor<T> maxpool_impl(const Tensor<T>& x, const PoolSpec& p, std::vector<std::size_t>* argmax) {
  const Shape& xs = x.shape();
  const std::size_t ho = p.out_extent(xs.h);
  const std::size_t wo = p.out_extent(xs.w);
  Tensor<T> out({xs.n, xs.c, ho, wo});
  if (argmax) argmax->assign(out.size(), 0);
  const auto h = static_cast<std::ptrdiff_t>(xs.h);
  const auto w = static_cast<std::ptrdiff_t>(xs.w);
  std::size_t o = 0;
  for (std::size_t n = 0; n < xs.n; ++n) {
    for (std::size_t c = 0; c < xs.c; ++c) {
      const std::size_t base = x.offset(n, c, 0, 0);
      for (std::size_t oy = 0; oy < ho; ++oy) {
        for (std::size_t ox = 0; ox < wo; ++ox, ++o) {
          T best = -std::numeric_limits<T>::infinity();
          std::size_t best_i = base;
          for (std::size_t ky = 0; ky < p.k; ++ky) {
            const std::ptrdiff_t iy =
                static_cast<std::ptrdiff_t>(oy * p.stride + ky) - static_cast<std::ptrdiff_t>(p.pad);
            if (iy < 0 || iy >= h) continue;
            for (std::size_t kx = 0; kx < p.k; ++kx) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * p.stride + kx) -
                                        static_cast<std::ptrdiff_t>(p.pad);
              if (ix < 0 || ix >= w) continue;
              const std::size_t i = base + static_cast<std::size_t>(iy * w + ix);
              if (x[i] > best) {
                best = x[i];
                best_i = i;
              }
            }
          }
          out[o] = best;
          if (argmax) (*argmax)[o] = best_i;
        }
      }
    }
  }
  return out;
}

}  // namespace

template <typename T>
Tensor<T> maxpool(const Tensor<T>& x, const PoolSpec& spec) {
  return maxpool_impl(x, spec, nullptr);
}

template <typename T>
Tensor<T> avgpool(const Tensor<T>& x, std::size_t k) {
  const Shape& xs = x.shape();
  const PoolSpec p{k, k, 0};
  const std::size_t ho = p.out_extent(xs.h);
  const std::size_t wo = p.out_extent(xs.w);
  Tensor<T> out({xs.n, xs.c, ho, wo});
  const T inv = T(1) / static_cast<T>(k * k);
  for (std::size_t n = 0; n < xs.n; ++n)
    for (std::size_t c = 0; c < xs.c; ++c)
      for (std::size_t oy = 0; oy < ho; ++oy)
        for (std::size_t ox = 0; ox < wo; ++ox) {
          T acc = 0;
          for (std::size_t ky = 0; ky < k; ++ky)
            for (std::size_t kx = 0; kx < k; ++kx) acc += x.at(n, c, oy * k + ky, ox * k + kx);
          out.at(n, c, oy, ox) = acc * inv;
        }
  return out;
}

template <typename T>
Tensor<T> dense(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  const std::size_t in = x.shape().sample();
  const std::size_t outf = w.shape().n;
  require_same_shape(w.shape(), Shape{outf, in, 1, 1}, "dense weight");
  require_same_shape(b.shape(), Shape{1, outf, 1, 1}, "dense bias");
  const std::size_t n = x.shape().n;
  Tensor<T> out({n, outf, 1, 1});
  for (std::size_t s = 0; s < n; ++s) {
    const T* xs = x.ptr() + s * in;
    for (std::size_t o = 0; o < outf; ++o) {
      const T* wr = w.ptr() + o * in;
      T acc = 0;
      for (std::size_t i = 0; i < in; ++i) acc += wr[i] * xs[i];
      out[s * outf + o] = acc + b[o];
    }
  }
  return out;
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x) {
  const Shape& xs = x.shape();
  Tensor<T> out(xs);
  const std::size_t plane = xs.plane();
  for (std::size_t n = 0; n < xs.n; ++n) {
    for (std::size_t p = 0; p < plane; ++p) {
      const std::size_t base = n * xs.sample() + p;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t c = 0; c < xs.c; ++c) mx = std::max(mx, x[base + c * plane]);
      T total = 0;
      for (std::size_t c = 0; c < xs.c; ++c) {
        const T e = std::exp(x[base + c * plane] - mx);
        out[base + c * plane] = e;
        total += e;
      }
      for (std::size_t c = 0; c < xs.c; ++c) out[base + c * plane] /= total;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Conv2d

template <typename T>
Conv2d<T>::Conv2d(std::string name, const ConvSpec& spec)
    : spec_(spec),
      weight_(name + ".weight", Tensor<T>(spec.weight_shape())),
      bias_(name + ".bias", Tensor<T>({1, spec.c_out, 1, 1})) {
  spec_.validate();
}

template <typename T>
void Conv2d<T>::init(std::mt19937_64& rng) {
  const double fan_in = static_cast<double>(spec_.k * spec_.k * spec_.c_in);
  weight_.value = Tensor<T>::randn(spec_.weight_shape(), rng, static_cast<T>(std::sqrt(2.0 / fan_in)));
  bias_.value.set_zero();
}

template <typename T>
Tensor<T> Conv2d<T>::forward(const Tensor<T>& x, Mode) {
  input_ = x;
  Tensor<T> out = conv2d_forward(x, weight_.value, spec_, algo_);
  if (spec_.bias) {
    const std::size_t plane = out.shape().plane();
    for (std::size_t n = 0; n < out.shape().n; ++n)
      for (std::size_t c = 0; c < spec_.c_out; ++c) {
        T* p = out.plane(n, c);
        const T b = bias_.value[c];
        for (std::size_t i = 0; i < plane; ++i) p[i] += b;
      }
  }
  return out;
}

template <typename T>
Tensor<T> Conv2d<T>::backward(const Tensor<T>& grad_out) {
  ConvGrads<T> g = conv2d_backward(input_, weight_.value, spec_, grad_out, algo_);
  add_inplace(weight_.grad, g.grad_w);
  if (spec_.bias) {
    const std::size_t plane = grad_out.shape().plane();
    for (std::size_t n = 0; n < grad_out.shape().n; ++n)
      for (std::size_t c = 0; c < spec_.c_out; ++c) {
        const T* p = grad_out.plane(n, c);
        T acc = 0;
        for (std::size_t i = 0; i < plane; ++i) acc += p[i];
        bias_.grad[c] += acc;
      }
  }
  return std::move(g.grad_x);
}

template <typename T>
void Conv2d<T>::collect_params(std::vector<Param<T>*>& out) {
  out.push_back(&weight_);
  if (spec_.bias) out.push_back(&bias_);
}

// ---------------------------------------------------------------------------
// BatchNorm

template <typename T>
BatchNorm<T>::BatchNorm(std::string name, std::size_t channels, BatchNormConfig cfg)
    : channels_(channels),
      cfg_(cfg),
      gamma_(name + ".gamma", Tensor<T>({1, channels, 1, 1}, T(1))),
      beta_(name + ".beta", Tensor<T>({1, channels, 1, 1}, T(0))),
      running_mean_{name + ".running_mean", Tensor<T>({1, channels, 1, 1}, T(0))},
      running_var_{name + ".running_var", Tensor<T>({1, channels, 1, 1}, T(1))} {
  if (!(cfg.eps > 0.0) || !(cfg.momentum > 0.0 && cfg.momentum < 1.0)) {
    throw ConfigError("batch norm needs eps > 0 and momentum in (0, 1)");
  }
}

namespace {

// Sum of (p[i] - centre) or its square over a plane, using four interleaved
// accumulators.
template <typename T>
double lane_sum(const T* p, std::size_t len, double centre, bool squared) {
  double acc[4] = {0, 0, 0, 0};
  std::size_t i = 0;
  for (; i + 4 <= len; i += 4) {
    for (std::size_t l = 0; l < 4; ++l) {
      const double d = static_cast<double>(p[i + l]) - centre;
      acc[l] += squared ? d * d : d;
    }
  }
  for (; i < len; ++i) {
    const double d = static_cast<double>(p[i]) - centre;
    acc[i % 4] += squared ? d * d : d;
  }
  return (acc[0] + acc[1]) + (acc[2] + acc[3]);
}

}  // namespace

template <typename T>
Tensor<T> BatchNorm<T>::forward(const Tensor<T>& x, Mode mode) {
  const Shape& xs = x.shape();
  if (xs.c != channels_) {
    throw ShapeError("batch norm expects " + std::to_string(channels_) + " channels, got " +
                     std::to_string(xs.c));
  }
  mode_ = mode;
  const std::size_t plane = xs.plane();
  const std::size_t count = xs.n * plane;
  Tensor<T> out(xs);
  xhat_ = Tensor<T>(xs);
  inv_std_.assign(channels_, T(0));
  for (std::size_t c = 0; c < channels_; ++c) {
    double mean = 0.0;
    double var = 0.0;
    if (mode == Mode::Train) {
      for (std::size_t n = 0; n < xs.n; ++n) mean += lane_sum(x.plane(n, c), plane, 0.0, false);
      mean /= static_cast<double>(count);
      for (std::size_t n = 0; n < xs.n; ++n) var += lane_sum(x.plane(n, c), plane, mean, true);
      var /= static_cast<double>(count);
      const double unbiased = count > 1 ? var * static_cast<double>(count) / (count - 1) : var;
      const double m = cfg_.momentum;
      running_mean_.value[c] = static_cast<T>(m * running_mean_.value[c] + (1.0 - m) * mean);
      running_var_.value[c] = static_cast<T>(m * running_var_.value[c] + (1.0 - m) * unbiased);
    } else {
      mean = running_mean_.value[c];
      var = running_var_.value[c];
    }
    const T inv = static_cast<T>(1.0 / std::sqrt(var + cfg_.eps));
    const T mu = static_cast<T>(mean);
    inv_std_[c] = inv;
    const T g = gamma_.value[c];
    const T b = beta_.value[c];
    for (std::size_t n = 0; n < xs.n; ++n) {
      const T* p = x.plane(n, c);
      T* xh = xhat_.plane(n, c);
      T* o = out.plane(n, c);
      for (std::size_t i = 0; i < plane; ++i) {
        xh[i] = (p[i] - mu) * inv;
        o[i] = g * xh[i] + b;
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> BatchNorm<T>::backward(const Tensor<T>& grad_out) {
  const Shape& xs = xhat_.shape();
  require_same_shape(grad_out.shape(), xs, "batch norm backward");
  const std::size_t plane = xs.plane();
  const double count = static_cast<double>(xs.n * plane);
  Tensor<T> gx(xs);
  for (std::size_t c = 0; c < channels_; ++c) {
    double sum_g = 0.0;
    double sum_gx = 0.0;
    for (std::size_t n = 0; n < xs.n; ++n) {
      const T* g = grad_out.plane(n, c);
      const T* xh = xhat_.plane(n, c);
      for (std::size_t i = 0; i < plane; ++i) {
        sum_g += g[i];
        sum_gx += static_cast<double>(g[i]) * xh[i];
      }
    }
    gamma_.grad[c] += static_cast<T>(sum_gx);
    beta_.grad[c] += static_cast<T>(sum_g);
    const T gam = gamma_.value[c];
    const T inv = inv_std_[c];
    if (mode_ == Mode::Train) {
      const T k = gam * inv / static_cast<T>(count);
      const T mg = static_cast<T>(sum_g);
      const T mgx = static_cast<T>(sum_gx);
      const T cnt = static_cast<T>(count);
      for (std::size_t n = 0; n < xs.n; ++n) {
        const T* g = grad_out.plane(n, c);
        const T* xh = xhat_.plane(n, c);
        T* o = gx.plane(n, c);
        for (std::size_t i = 0; i < plane; ++i) o[i] = k * (cnt * g[i] - mg - xh[i] * mgx);
      }
    } else {
      const T k = gam * inv;
      for (std::size_t n = 0; n < xs.n; ++n) {
        const T* g = grad_out.plane(n, c);
        T* o = gx.plane(n, c);
        for (std::size_t i = 0; i < plane; ++i) o[i] = k * g[i];
      }
    }
  }
  return gx;
}

template <typename T>
void BatchNorm<T>::collect_params(std::vector<Param<T>*>& out) {
  out.push_back(&gamma_);
  out.push_back(&beta_);
}

template <typename T>
void BatchNorm<T>::collect_buffers(std::vector<Buffer<T>*>& out) {
  out.push_back(&running_mean_);
  out.push_back(&running_var_);
}

// ---------------------------------------------------------------------------
// ReLU, pooling, dense, softmax modules

template <typename T>
Tensor<T> ReLU<T>::forward(const Tensor<T>& x, Mode) {
  shape_ = x.shape();
  active_.resize(x.size());
  Tensor<T> out(x.shape());
  const T* src = x.ptr();
  T* dst = out.ptr();
  std::uint8_t* mask = active_.data();
  const std::size_t len = x.size();
  for (std::size_t i = 0; i < len; ++i) {
    const bool on = src[i] > T(0);
    mask[i] = on ? 1 : 0;
    dst[i] = on ? src[i] : T(0);
  }
  return out;
}

template <typename T>
Tensor<T> ReLU<T>::backward(const Tensor<T>& grad_out) {
  require_same_shape(grad_out.shape(), shape_, "relu backward");
  Tensor<T> gx(shape_);
  const T* g = grad_out.ptr();
  const std::uint8_t* mask = active_.data();
  T* dst = gx.ptr();
  const std::size_t len = gx.size();
  for (std::size_t i = 0; i < len; ++i) dst[i] = mask[i] ? g[i] : T(0);
  return gx;
}

template <typename T>
Tensor<T> MaxPool2d<T>::forward(const Tensor<T>& x, Mode) {
  in_shape_ = x.shape();
  return maxpool_impl(x, spec_, &argmax_);
}

template <typename T>
Tensor<T> MaxPool2d<T>::backward(const Tensor<T>& grad_out) {
  if (grad_out.size() != argmax_.size()) throw ShapeError("max pool backward: grad shape mismatch");
  Tensor<T> gx(in_shape_);
  for (std::size_t o = 0; o < argmax_.size(); ++o) gx[argmax_[o]] += grad_out[o];
  return gx;
}

template <typename T>
Tensor<T> AvgPool2d<T>::forward(const Tensor<T>& x, Mode) {
  in_shape_ = x.shape();
  return avgpool(x, k_);
}

template <typename T>
Tensor<T> AvgPool2d<T>::backward(const Tensor<T>& grad_out) {
  const Shape& gs = grad_out.shape();
  Tensor<T> gx(in_shape_);
  const T inv = T(1) / static_cast<T>(k_ * k_);
  for (std::size_t n = 0; n < gs.n; ++n)
    for (std::size_t c = 0; c < gs.c; ++c)
      for (std::size_t oy = 0; oy < gs.h; ++oy)
        for (std::size_t ox = 0; ox < gs.w; ++ox) {
          const T g = grad_out.at(n, c, oy, ox) * inv;
          for (std::size_t ky = 0; ky < k_; ++ky)
            for (std::size_t kx = 0; kx < k_; ++kx) gx.at(n, c, oy * k_ + ky, ox * k_ + kx) += g;
        }
  return gx;
}

template <typename T>
Dense<T>::Dense(std::string name, std::size_t in, std::size_t out)
    : in_(in),
      out_(out),
      weight_(name + ".weight", Tensor<T>({out, in, 1, 1})),
      bias_(name + ".bias", Tensor<T>({1, out, 1, 1})) {}

template <typename T>
void Dense<T>::init(std::mt19937_64& rng) {
  weight_.value = Tensor<T>::randn({out_, in_, 1, 1}, rng,
                                   static_cast<T>(std::sqrt(2.0 / static_cast<double>(in_))));
  bias_.value.set_zero();
}

template <typename T>
Tensor<T> Dense<T>::forward(const Tensor<T>& x, Mode) {
  if (x.shape().sample() != in_) {
    throw ShapeError("dense layer expects " + std::to_string(in_) + " features per sample, got " +
                     x.shape().str());
  }
  input_ = x;
  return dense(x, weight_.value, bias_.value);
}

template <typename T>
Tensor<T> Dense<T>::backward(const Tensor<T>& grad_out) {
  const std::size_t n = input_.shape().n;
  require_same_shape(grad_out.shape(), Shape{n, out_, 1, 1}, "dense backward");
  Tensor<T> gx(input_.shape());
  for (std::size_t s = 0; s < n; ++s) {
    const T* xs = input_.ptr() + s * in_;
    T* gxs = gx.ptr() + s * in_;
    for (std::size_t o = 0; o < out_; ++o) {
      const T g = grad_out[s * out_ + o];
      bias_.grad[o] += g;
      if (g == T(0)) continue;
      T* gw = weight_.grad.ptr() + o * in_;
      const T* w = weight_.value.ptr() + o * in_;
      for (std::size_t i = 0; i < in_; ++i) {
        gw[i] += g * xs[i];
        gxs[i] += g * w[i];
      }
    }
  }
  return gx;
}

template <typename T>
void Dense<T>::collect_params(std::vector<Param<T>*>& out) {
  out.push_back(&weight_);
  out.push_back(&bias_);
}

template <typename T>
Tensor<T> Softmax<T>::forward(const Tensor<T>& x, Mode) {
  output_ = softmax(x);
  return output_;
}

template <typename T>
Tensor<T> Softmax<T>::backward(const Tensor<T>& grad_out) {
  const Shape& s = output_.shape();
  require_same_shape(grad_out.shape(), s, "softmax backward");
  Tensor<T> gx(s);
  const std::size_t plane = s.plane();
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t p = 0; p < plane; ++p) {
      const std::size_t base = n * s.sample() + p;
      T inner = 0;
      for (std::size_t c = 0; c < s.c; ++c) inner += output_[base + c * plane] * grad_out[base + c * plane];
      for (std::size_t c = 0; c < s.c; ++c) {
        const std::size_t i = base + c * plane;
        gx[i] = output_[i] * (grad_out[i] - inner);
      }
    }
  return gx;
}

#define DIRNET_INSTANTIATE(T)                                                                  \
  template Tensor<T> conv2d_forward(const Tensor<T>&, const Tensor<T>&, const ConvSpec&,     \
                                    ConvAlgo);                                                \
  template ConvGrads<T> conv2d_backward(const Tensor<T>&, const Tensor<T>&, const ConvSpec&, \
                                        const Tensor<T>&, ConvAlgo);                          \
  template Tensor<T> dilate_kernel(const Tensor<T>&, std::size_t);                           \
  template Tensor<T> relu(const Tensor<T>&);                                                 \
  template Tensor<T> maxpool(const Tensor<T>&, const PoolSpec&);                             \
  template Tensor<T> avgpool(const Tensor<T>&, std::size_t);                                 \
  template Tensor<T> dense(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);            \
  template Tensor<T> softmax(const Tensor<T>&);                                              \
  template class Conv2d<T>;                                                                  \
  template class BatchNorm<T>;                                                               \
  template class ReLU<T>;                                                                    \
  template class MaxPool2d<T>;                                                               \
  template class AvgPool2d<T>;                                                               \
  template class Dense<T>;                                                                   \
  template class Softmax<T>;

DIRNET_INSTANTIATE(float)
DIRNET_INSTANTIATE(double)

#undef DIRNET_INSTANTIATE

}  // namespace dirnet
