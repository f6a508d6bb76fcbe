#pragma once

// Convolution, activation and resampling kernels on BasicTensor.
//
// All kernels are pure: they read their inputs and return fresh tensors.
// Convolution is cross-correlation with zero padding. Pointwise and standard
// convolutions are lowered to a GEMM (via Eigen); depthwise and transposed
// convolutions are direct loops.

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <span>
#include <string_view>

#include "idn/tensor.hpp"

namespace idn {

enum class Activation { identity, relu, leaky_relu, sigmoid, tanh };

inline constexpr double kLeakySlope = 0.2;

inline std::string_view to_string(Activation a) {
  switch (a) {
    case Activation::identity: return "identity";
    case Activation::relu: return "relu";
    case Activation::leaky_relu: return "leaky_relu";
    case Activation::sigmoid: return "sigmoid";
    case Activation::tanh: return "tanh";
  }
  return "?";
}

inline Activation activation_from_string(std::string_view s) {
  if (s == "identity" || s == "none") return Activation::identity;
  if (s == "relu") return Activation::relu;
  if (s == "leaky_relu" || s == "lrelu") return Activation::leaky_relu;
  if (s == "sigmoid") return Activation::sigmoid;
  if (s == "tanh") return Activation::tanh;
  throw std::invalid_argument("unknown activation '" + std::string(s) + "'");
}

struct ConvArgs {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

namespace ops {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

inline std::size_t conv_out_size(std::size_t in, std::size_t k, ConvArgs a, const char* axis) {
  if (a.stride == 0) shape_fail("convolution stride must be >= 1");
  if (in + 2 * a.padding < k) {
    shape_fail("convolution ", axis, ": padded input ", in + 2 * a.padding, " smaller than kernel ", k);
  }
  return (in + 2 * a.padding - k) / a.stride + 1;
}

namespace detail {

inline std::ptrdiff_t ceil_div(std::ptrdiff_t a, std::ptrdiff_t b) {
  return a >= 0 ? (a + b - 1) / b : -((-a) / b);
}
inline std::ptrdiff_t floor_div(std::ptrdiff_t a, std::ptrdiff_t b) {
  return a >= 0 ? a / b : -((-a + b - 1) / b);
}

// Range of output columns [lo, hi) whose tap kx lands inside [0, in).
inline std::pair<std::size_t, std::size_t> valid_range(std::size_t out, std::size_t in, std::size_t k_off,
                                                       ConvArgs a) {
  const auto s = static_cast<std::ptrdiff_t>(a.stride);
  const auto p = static_cast<std::ptrdiff_t>(a.padding);
  const auto kk = static_cast<std::ptrdiff_t>(k_off);
  std::ptrdiff_t lo = std::max<std::ptrdiff_t>(0, ceil_div(p - kk, s));
  std::ptrdiff_t hi = std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(out),
                                               floor_div(static_cast<std::ptrdiff_t>(in) - 1 + p - kk, s) + 1);
  if (hi < lo) hi = lo;
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

template <typename T>
void check_bias(std::span<const T> bias, std::size_t channels, const char* op) {
  if (!bias.empty() && bias.size() != channels) {
    shape_fail(op, ": bias length ", bias.size(), " != output channels ", channels);
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Depthwise

template <typename T>
BasicTensor<T> conv2d_depthwise(const BasicTensor<T>& x, const BasicTensor<T>& w, std::span<const T> bias,
                                ConvArgs a) {
  const Dims xd = x.dims();
  const Dims wd = w.dims();
  if (wd.c != 1) shape_fail("conv2d_depthwise: kernel dim 1 must be 1, got ", wd.c);
  if (wd.h != wd.w) shape_fail("conv2d_depthwise: kernel must be square, got ", wd.h, "x", wd.w);
  if (xd.c != wd.n) shape_fail("conv2d_depthwise: input channels C=", xd.c, " != kernel channels ", wd.n);
  detail::check_bias(bias, xd.c, "conv2d_depthwise");
  const std::size_t K = wd.h;
  const std::size_t oh = conv_out_size(xd.h, K, a, "height");
  const std::size_t ow = conv_out_size(xd.w, K, a, "width");
  BasicTensor<T> y({xd.n, xd.c, oh, ow});

  for (std::size_t n = 0; n < xd.n; ++n) {
    for (std::size_t c = 0; c < xd.c; ++c) {
      const T* in = x.plane(n, c);
      T* out = y.plane(n, c);
      const T* k = w.data() + c * K * K;
      std::fill(out, out + oh * ow, bias.empty() ? T(0) : bias[c]);
      for (std::size_t oy = 0; oy < oh; ++oy) {
        T* orow = out + oy * ow;
        for (std::size_t ky = 0; ky < K; ++ky) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * a.stride + ky) - static_cast<std::ptrdiff_t>(a.padding);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(xd.h)) continue;
          const T* irow = in + static_cast<std::size_t>(iy) * xd.w;
          for (std::size_t kx = 0; kx < K; ++kx) {
            const T wv = k[ky * K + kx];
            const auto [lo, hi] = detail::valid_range(ow, xd.w, kx, a);
            if (a.stride == 1) {
              const T* src = irow + (static_cast<std::ptrdiff_t>(kx) - static_cast<std::ptrdiff_t>(a.padding));
              for (std::size_t ox = lo; ox < hi; ++ox) orow[ox] += wv * src[ox];
            } else {
              for (std::size_t ox = lo; ox < hi; ++ox) orow[ox] += wv * irow[ox * a.stride + kx - a.padding];
            }
          }
        }
      }
    }
  }
  return y;
}

template <typename T>
struct ConvGrads {
  BasicTensor<T> x;
  BasicTensor<T> w;
  BasicTensor<T> b;
};

struct GradRequest {
  bool x = true;
  bool w = true;
  bool b = true;
};

template <typename T>
ConvGrads<T> conv2d_depthwise_backward(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& gy,
                                       ConvArgs a, GradRequest req) {
  const Dims xd = x.dims();
  const std::size_t K = w.dims().h;
  const std::size_t oh = gy.dims().h;
  const std::size_t ow = gy.dims().w;
  ConvGrads<T> g;
  if (req.x) g.x = BasicTensor<T>(xd);
  if (req.w) g.w = BasicTensor<T>(w.dims());
  if (req.b) g.b = BasicTensor<T>({1, xd.c, 1, 1});

  for (std::size_t n = 0; n < xd.n; ++n) {
    for (std::size_t c = 0; c < xd.c; ++c) {
      const T* in = x.plane(n, c);
      const T* go = gy.plane(n, c);
      const T* k = w.data() + c * K * K;
      T* gin = req.x ? g.x.plane(n, c) : nullptr;
      T* gk = req.w ? g.w.data() + c * K * K : nullptr;
      if (req.b) {
        T s = 0;
        for (std::size_t i = 0; i < oh * ow; ++i) s += go[i];
        g.b[c] += s;
      }
      for (std::size_t oy = 0; oy < oh; ++oy) {
        const T* grow = go + oy * ow;
        for (std::size_t ky = 0; ky < K; ++ky) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * a.stride + ky) - static_cast<std::ptrdiff_t>(a.padding);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(xd.h)) continue;
          const std::size_t row = static_cast<std::size_t>(iy) * xd.w;
          for (std::size_t kx = 0; kx < K; ++kx) {
            const auto [lo, hi] = detail::valid_range(ow, xd.w, kx, a);
            if (gin) {
              const T wv = k[ky * K + kx];
              for (std::size_t ox = lo; ox < hi; ++ox) gin[row + ox * a.stride + kx - a.padding] += wv * grow[ox];
            }
            if (gk) {
              T s = 0;
              for (std::size_t ox = lo; ox < hi; ++ox) s += grow[ox] * in[row + ox * a.stride + kx - a.padding];
              gk[ky * K + kx] += s;
            }
          }
        }
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Pointwise: kernel (C_out, C_in, 1, 1)

template <typename T>
BasicTensor<T> conv2d_pointwise(const BasicTensor<T>& x, const BasicTensor<T>& w, std::span<const T> bias) {
  const Dims xd = x.dims();
  const Dims wd = w.dims();
  if (wd.h != 1 || wd.w != 1) shape_fail("conv2d_pointwise: kernel spatial size must be 1x1, got ", wd.h, "x", wd.w);
  if (xd.c != wd.c) shape_fail("conv2d_pointwise: input channels C_in=", xd.c, " != kernel C_in ", wd.c);
  detail::check_bias(bias, wd.n, "conv2d_pointwise");
  const std::size_t co = wd.n, ci = wd.c, hw = xd.plane();
  BasicTensor<T> y({xd.n, co, xd.h, xd.w});
  ConstMatMap<T> W(w.data(), co, ci);
  for (std::size_t n = 0; n < xd.n; ++n) {
    ConstMatMap<T> X(x.plane(n, 0), ci, hw);
    MatMap<T> Y(y.plane(n, 0), co, hw);
    Y.noalias() = W * X;
    if (!bias.empty()) {
      for (std::size_t j = 0; j < co; ++j) Y.row(j).array() += bias[j];
    }
  }
  return y;
}

template <typename T>
ConvGrads<T> conv2d_pointwise_backward(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& gy,
                                       GradRequest req) {
  const Dims xd = x.dims();
  const std::size_t co = w.dims().n, ci = w.dims().c, hw = xd.plane();
  ConvGrads<T> g;
  if (req.x) g.x = BasicTensor<T>(xd);
  if (req.w) g.w = BasicTensor<T>(w.dims());
  if (req.b) g.b = BasicTensor<T>({1, co, 1, 1});
  ConstMatMap<T> W(w.data(), co, ci);
  for (std::size_t n = 0; n < xd.n; ++n) {
    ConstMatMap<T> X(x.plane(n, 0), ci, hw);
    ConstMatMap<T> G(gy.plane(n, 0), co, hw);
    if (req.x) {
      MatMap<T> GX(g.x.plane(n, 0), ci, hw);
      GX.noalias() = W.transpose() * G;
    }
    if (req.w) {
      MatMap<T> GW(g.w.data(), co, ci);
      GW.noalias() += G * X.transpose();
    }
    if (req.b) {
      for (std::size_t j = 0; j < co; ++j) g.b[j] += G.row(j).sum();
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Standard: kernel (C_out, C_in, K, K), lowered through im2col.

namespace detail {

template <typename T>
void im2col(const T* in, std::size_t ci, std::size_t h, std::size_t w, std::size_t K, ConvArgs a, std::size_t oh,
            std::size_t ow, T* cols) {
  for (std::size_t c = 0; c < ci; ++c) {
    for (std::size_t ky = 0; ky < K; ++ky) {
      for (std::size_t kx = 0; kx < K; ++kx) {
        T* dst = cols + ((c * K + ky) * K + kx) * oh * ow;
        const auto [lo, hi] = valid_range(ow, w, kx, a);
        for (std::size_t oy = 0; oy < oh; ++oy) {
          T* drow = dst + oy * ow;
          const auto iy = static_cast<std::ptrdiff_t>(oy * a.stride + ky) - static_cast<std::ptrdiff_t>(a.padding);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) {
            std::fill(drow, drow + ow, T(0));
            continue;
          }
          const T* srow = in + (c * h + static_cast<std::size_t>(iy)) * w;
          std::fill(drow, drow + lo, T(0));
          for (std::size_t ox = lo; ox < hi; ++ox) drow[ox] = srow[ox * a.stride + kx - a.padding];
          std::fill(drow + hi, drow + ow, T(0));
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* cols, std::size_t ci, std::size_t h, std::size_t w, std::size_t K, ConvArgs a,
                std::size_t oh, std::size_t ow, T* out) {
  for (std::size_t c = 0; c < ci; ++c) {
    for (std::size_t ky = 0; ky < K; ++ky) {
      for (std::size_t kx = 0; kx < K; ++kx) {
        const T* src = cols + ((c * K + ky) * K + kx) * oh * ow;
        const auto [lo, hi] = valid_range(ow, w, kx, a);
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * a.stride + ky) - static_cast<std::ptrdiff_t>(a.padding);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          T* orow = out + (c * h + static_cast<std::size_t>(iy)) * w;
          const T* srow = src + oy * ow;
          for (std::size_t ox = lo; ox < hi; ++ox) orow[ox * a.stride + kx - a.padding] += srow[ox];
        }
      }
    }
  }
}

}  // namespace detail

template <typename T>
BasicTensor<T> conv2d_standard(const BasicTensor<T>& x, const BasicTensor<T>& w, std::span<const T> bias,
                               ConvArgs a) {
  const Dims xd = x.dims();
  const Dims wd = w.dims();
  if (wd.h != wd.w) shape_fail("conv2d_standard: kernel must be square, got ", wd.h, "x", wd.w);
  if (xd.c != wd.c) shape_fail("conv2d_standard: input channels C_in=", xd.c, " != kernel C_in ", wd.c);
  if (wd.h == 1 && a.stride == 1 && a.padding == 0) return conv2d_pointwise(x, w, bias);
  detail::check_bias(bias, wd.n, "conv2d_standard");
  const std::size_t K = wd.h, co = wd.n, ci = wd.c;
  const std::size_t oh = conv_out_size(xd.h, K, a, "height");
  const std::size_t ow = conv_out_size(xd.w, K, a, "width");
  BasicTensor<T> y({xd.n, co, oh, ow});
  std::vector<T> cols(ci * K * K * oh * ow);
  ConstMatMap<T> W(w.data(), co, ci * K * K);
  for (std::size_t n = 0; n < xd.n; ++n) {
    detail::im2col(x.plane(n, 0), ci, xd.h, xd.w, K, a, oh, ow, cols.data());
    ConstMatMap<T> C(cols.data(), ci * K * K, oh * ow);
    MatMap<T> Y(y.plane(n, 0), co, oh * ow);
    Y.noalias() = W * C;
    if (!bias.empty()) {
      for (std::size_t j = 0; j < co; ++j) Y.row(j).array() += bias[j];
    }
  }
  return y;
}

template <typename T>
ConvGrads<T> conv2d_standard_backward(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& gy,
                                      ConvArgs a, GradRequest req) {
  const Dims xd = x.dims();
  const Dims wd = w.dims();
  if (wd.h == 1 && a.stride == 1 && a.padding == 0) return conv2d_pointwise_backward(x, w, gy, req);
  const std::size_t K = wd.h, co = wd.n, ci = wd.c;
  const std::size_t oh = gy.dims().h, ow = gy.dims().w;
  ConvGrads<T> g;
  if (req.x) g.x = BasicTensor<T>(xd);
  if (req.w) g.w = BasicTensor<T>(wd);
  if (req.b) g.b = BasicTensor<T>({1, co, 1, 1});
  std::vector<T> cols(ci * K * K * oh * ow);
  ConstMatMap<T> W(w.data(), co, ci * K * K);
  for (std::size_t n = 0; n < xd.n; ++n) {
    ConstMatMap<T> G(gy.plane(n, 0), co, oh * ow);
    if (req.w) {
      detail::im2col(x.plane(n, 0), ci, xd.h, xd.w, K, a, oh, ow, cols.data());
      ConstMatMap<T> C(cols.data(), ci * K * K, oh * ow);
      MatMap<T> GW(g.w.data(), co, ci * K * K);
      GW.noalias() += G * C.transpose();
    }
    if (req.x) {
      MatMap<T> GC(cols.data(), ci * K * K, oh * ow);
      GC.noalias() = W.transpose() * G;
      detail::col2im_add(cols.data(), ci, xd.h, xd.w, K, a, oh, ow, g.x.plane(n, 0));
    }
    if (req.b) {
      for (std::size_t j = 0; j < co; ++j) g.b[j] += G.row(j).sum();
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Transposed convolution: kernel (C_in, C_out, K, K), no padding.

template <typename T>
BasicTensor<T> conv_transpose2d(const BasicTensor<T>& x, const BasicTensor<T>& w, std::span<const T> bias,
                                std::size_t stride) {
  const Dims xd = x.dims();
  const Dims wd = w.dims();
  if (xd.c != wd.n) shape_fail("conv_transpose2d: input channels C_in=", xd.c, " != kernel C_in ", wd.n);
  if (wd.h != wd.w) shape_fail("conv_transpose2d: kernel must be square");
  if (stride == 0) shape_fail("conv_transpose2d: stride must be >= 1");
  detail::check_bias(bias, wd.c, "conv_transpose2d");
  const std::size_t K = wd.h, co = wd.c;
  const std::size_t oh = (xd.h - 1) * stride + K, ow = (xd.w - 1) * stride + K;
  BasicTensor<T> y({xd.n, co, oh, ow});
  for (std::size_t n = 0; n < xd.n; ++n) {
    for (std::size_t o = 0; o < co; ++o) {
      std::fill(y.plane(n, o), y.plane(n, o) + oh * ow, bias.empty() ? T(0) : bias[o]);
    }
    for (std::size_t i = 0; i < xd.c; ++i) {
      const T* in = x.plane(n, i);
      for (std::size_t o = 0; o < co; ++o) {
        const T* k = w.data() + (i * co + o) * K * K;
        T* out = y.plane(n, o);
        for (std::size_t iy = 0; iy < xd.h; ++iy) {
          for (std::size_t ix = 0; ix < xd.w; ++ix) {
            const T v = in[iy * xd.w + ix];
            for (std::size_t ky = 0; ky < K; ++ky) {
              T* orow = out + (iy * stride + ky) * ow + ix * stride;
              for (std::size_t kx = 0; kx < K; ++kx) orow[kx] += v * k[ky * K + kx];
            }
          }
        }
      }
    }
  }
  return y;
}

template <typename T>
ConvGrads<T> conv_transpose2d_backward(const BasicTensor<T>& x, const BasicTensor<T>& w, const BasicTensor<T>& gy,
                                       std::size_t stride, GradRequest req) {
  const Dims xd = x.dims();
  const std::size_t K = w.dims().h, co = w.dims().c;
  const std::size_t ow = gy.dims().w;
  ConvGrads<T> g;
  if (req.x) g.x = BasicTensor<T>(xd);
  if (req.w) g.w = BasicTensor<T>(w.dims());
  if (req.b) g.b = BasicTensor<T>({1, co, 1, 1});
  for (std::size_t n = 0; n < xd.n; ++n) {
    if (req.b) {
      for (std::size_t o = 0; o < co; ++o) {
        const T* go = gy.plane(n, o);
        T s = 0;
        for (std::size_t q = 0; q < gy.dims().plane(); ++q) s += go[q];
        g.b[o] += s;
      }
    }
    for (std::size_t i = 0; i < xd.c; ++i) {
      const T* in = x.plane(n, i);
      for (std::size_t o = 0; o < co; ++o) {
        const T* k = w.data() + (i * co + o) * K * K;
        T* gk = req.w ? g.w.data() + (i * co + o) * K * K : nullptr;
        const T* go = gy.plane(n, o);
        for (std::size_t iy = 0; iy < xd.h; ++iy) {
          for (std::size_t ix = 0; ix < xd.w; ++ix) {
            T acc = 0;
            const T v = in[iy * xd.w + ix];
            for (std::size_t ky = 0; ky < K; ++ky) {
              const T* grow = go + (iy * stride + ky) * ow + ix * stride;
              for (std::size_t kx = 0; kx < K; ++kx) {
                acc += grow[kx] * k[ky * K + kx];
                if (gk) gk[ky * K + kx] += v * grow[kx];
              }
            }
            if (req.x) g.x.plane(n, i)[iy * xd.w + ix] += acc;
          }
        }
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Fully connected: v (N, in, 1, 1), W (out, in, 1, 1) -> (N, out, 1, 1).

template <typename T>
BasicTensor<T> fully_connected(const BasicTensor<T>& v, const BasicTensor<T>& w, std::span<const T> bias) {
  const Dims vd = v.dims();
  const std::size_t in = vd.c * vd.plane();
  if (w.dims().c * w.dims().plane() != in) {
    shape_fail("fully_connected: input length ", in, " != weight columns ", w.dims().c * w.dims().plane());
  }
  const std::size_t out = w.dims().n;
  detail::check_bias(bias, out, "fully_connected");
  BasicTensor<T> y({vd.n, out, 1, 1});
  ConstMatMap<T> W(w.data(), out, in);
  ConstMatMap<T> V(v.data(), vd.n, in);
  MatMap<T> Y(y.data(), vd.n, out);
  Y.noalias() = V * W.transpose();
  if (!bias.empty()) {
    for (std::size_t n = 0; n < vd.n; ++n) {
      for (std::size_t j = 0; j < out; ++j) Y(n, j) += bias[j];
    }
  }
  return y;
}

template <typename T>
ConvGrads<T> fully_connected_backward(const BasicTensor<T>& v, const BasicTensor<T>& w, const BasicTensor<T>& gy,
                                      GradRequest req) {
  const Dims vd = v.dims();
  const std::size_t in = vd.c * vd.plane();
  const std::size_t out = w.dims().n;
  ConvGrads<T> g;
  ConstMatMap<T> W(w.data(), out, in);
  ConstMatMap<T> V(v.data(), vd.n, in);
  ConstMatMap<T> G(gy.data(), vd.n, out);
  if (req.x) {
    g.x = BasicTensor<T>(vd);
    MatMap<T> GV(g.x.data(), vd.n, in);
    GV.noalias() = G * W;
  }
  if (req.w) {
    g.w = BasicTensor<T>(w.dims());
    MatMap<T> GW(g.w.data(), out, in);
    GW.noalias() = G.transpose() * V;
  }
  if (req.b) {
    g.b = BasicTensor<T>({1, out, 1, 1});
    for (std::size_t n = 0; n < vd.n; ++n) {
      for (std::size_t j = 0; j < out; ++j) g.b[j] += G(n, j);
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Activations

template <typename T>
inline T sigmoid_scalar(T x) {
  if (x >= 0) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <typename T>
BasicTensor<T> activation(const BasicTensor<T>& x, Activation kind) {
  BasicTensor<T> y = x;
  auto v = y.values();
  switch (kind) {
    case Activation::identity: break;
    case Activation::relu:
      for (auto& e : v) e = std::max(e, T(0));
      break;
    case Activation::leaky_relu: {
      // max(e, slope*e) equals leaky ReLU for slope < 1 and, unlike a
      // ternary, vectorises without -ffast-math.
      const T slope = static_cast<T>(kLeakySlope);
      for (auto& e : v) e = std::max(e, slope * e);
      break;
    }
    case Activation::sigmoid:
      for (auto& e : v) e = sigmoid_scalar(e);
      break;
    case Activation::tanh: {
      Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>> a(v.data(), static_cast<Eigen::Index>(v.size()));
      a = a.tanh();
      break;
    }
  }
  return y;
}

// Needs both the pre-activation input and the output.
template <typename T>
BasicTensor<T> activation_backward(const BasicTensor<T>& x, const BasicTensor<T>& y, const BasicTensor<T>& gy,
                                   Activation kind) {
  BasicTensor<T> gx(x.dims());
  const std::size_t n = x.size();
  switch (kind) {
    case Activation::identity: gx = gy; break;
    case Activation::relu:
      for (std::size_t i = 0; i < n; ++i) gx[i] = x[i] > T(0) ? gy[i] : T(0);
      break;
    case Activation::leaky_relu:
      for (std::size_t i = 0; i < n; ++i) {
        gx[i] = gy[i] * (static_cast<T>(kLeakySlope) + static_cast<T>(1.0 - kLeakySlope) * static_cast<T>(x[i] > T(0)));
      }
      break;
    case Activation::sigmoid:
      for (std::size_t i = 0; i < n; ++i) gx[i] = gy[i] * y[i] * (T(1) - y[i]);
      break;
    case Activation::tanh:
      for (std::size_t i = 0; i < n; ++i) gx[i] = gy[i] * (T(1) - y[i] * y[i]);
      break;
  }
  return gx;
}

// ---------------------------------------------------------------------------
// Resampling

template <typename T>
BasicTensor<T> upsample_nearest(const BasicTensor<T>& x, std::size_t f) {
  if (f == 0) shape_fail("upsample_nearest: factor must be >= 1");
  if (f == 1) return x;
  const Dims d = x.dims();
  BasicTensor<T> y({d.n, d.c, d.h * f, d.w * f});
  const std::size_t ow = d.w * f;
  for (std::size_t n = 0; n < d.n; ++n) {
    for (std::size_t c = 0; c < d.c; ++c) {
      const T* in = x.plane(n, c);
      T* out = y.plane(n, c);
      for (std::size_t iy = 0; iy < d.h; ++iy) {
        T* row = out + iy * f * ow;
        for (std::size_t ix = 0; ix < d.w; ++ix) {
          const T v = in[iy * d.w + ix];
          for (std::size_t r = 0; r < f; ++r) row[ix * f + r] = v;
        }
        for (std::size_t r = 1; r < f; ++r) std::memcpy(row + r * ow, row, ow * sizeof(T));
      }
    }
  }
  return y;
}

template <typename T>
BasicTensor<T> upsample_nearest_backward(const BasicTensor<T>& gy, std::size_t f) {
  if (f == 1) return gy;
  const Dims d = gy.dims();
  BasicTensor<T> gx({d.n, d.c, d.h / f, d.w / f});
  const std::size_t iw = d.w / f;
  for (std::size_t n = 0; n < d.n; ++n) {
    for (std::size_t c = 0; c < d.c; ++c) {
      const T* go = gy.plane(n, c);
      T* gi = gx.plane(n, c);
      for (std::size_t oy = 0; oy < d.h; ++oy) {
        for (std::size_t ox = 0; ox < d.w; ++ox) gi[(oy / f) * iw + ox / f] += go[oy * d.w + ox];
      }
    }
  }
  return gx;
}

namespace detail {

struct LerpTap {
  std::size_t i0, i1;
  double w1;
};

// Half-pixel-centre sampling positions for integer upscaling.
inline std::vector<LerpTap> bilinear_taps(std::size_t in, std::size_t f) {
  std::vector<LerpTap> taps(in * f);
  for (std::size_t o = 0; o < in * f; ++o) {
    double src = (static_cast<double>(o) + 0.5) / static_cast<double>(f) - 0.5;
    if (src < 0) src = 0;
    auto i0 = static_cast<std::size_t>(src);
    if (i0 > in - 1) i0 = in - 1;
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    taps[o] = {i0, i1, src - static_cast<double>(i0)};
  }
  return taps;
}

}  // namespace detail

template <typename T>
BasicTensor<T> upsample_bilinear(const BasicTensor<T>& x, std::size_t f) {
  if (f == 0) shape_fail("upsample_bilinear: factor must be >= 1");
  if (f == 1) return x;
  const Dims d = x.dims();
  const auto ty = detail::bilinear_taps(d.h, f);
  const auto tx = detail::bilinear_taps(d.w, f);
  BasicTensor<T> y({d.n, d.c, d.h * f, d.w * f});
  const std::size_t ow = d.w * f;
  for (std::size_t n = 0; n < d.n; ++n) {
    for (std::size_t c = 0; c < d.c; ++c) {
      const T* in = x.plane(n, c);
      T* out = y.plane(n, c);
      for (std::size_t oy = 0; oy < ty.size(); ++oy) {
        const auto& a = ty[oy];
        const T wy1 = static_cast<T>(a.w1), wy0 = T(1) - wy1;
        for (std::size_t ox = 0; ox < ow; ++ox) {
          const auto& b = tx[ox];
          const T wx1 = static_cast<T>(b.w1), wx0 = T(1) - wx1;
          out[oy * ow + ox] = wy0 * (wx0 * in[a.i0 * d.w + b.i0] + wx1 * in[a.i0 * d.w + b.i1]) +
                              wy1 * (wx0 * in[a.i1 * d.w + b.i0] + wx1 * in[a.i1 * d.w + b.i1]);
        }
      }
    }
  }
  return y;
}

template <typename T>
BasicTensor<T> upsample_bilinear_backward(const BasicTensor<T>& gy, std::size_t f) {
  if (f == 1) return gy;
  const Dims d = gy.dims();
  const std::size_t ih = d.h / f, iw = d.w / f;
  const auto ty = detail::bilinear_taps(ih, f);
  const auto tx = detail::bilinear_taps(iw, f);
  BasicTensor<T> gx({d.n, d.c, ih, iw});
  for (std::size_t n = 0; n < d.n; ++n) {
    for (std::size_t c = 0; c < d.c; ++c) {
      const T* go = gy.plane(n, c);
      T* gi = gx.plane(n, c);
      for (std::size_t oy = 0; oy < d.h; ++oy) {
        const auto& a = ty[oy];
        const T wy1 = static_cast<T>(a.w1), wy0 = T(1) - wy1;
        for (std::size_t ox = 0; ox < d.w; ++ox) {
          const auto& b = tx[ox];
          const T wx1 = static_cast<T>(b.w1), wx0 = T(1) - wx1;
          const T g = go[oy * d.w + ox];
          gi[a.i0 * iw + b.i0] += g * wy0 * wx0;
          gi[a.i0 * iw + b.i1] += g * wy0 * wx1;
          gi[a.i1 * iw + b.i0] += g * wy1 * wx0;
          gi[a.i1 * iw + b.i1] += g * wy1 * wx1;
        }
      }
    }
  }
  return gx;
}

// Mean over non-overlapping f x f blocks (area downsampling).
template <typename T>
BasicTensor<T> avg_pool(const BasicTensor<T>& x, std::size_t f) {
  if (f == 0) shape_fail("avg_pool: factor must be >= 1");
  if (f == 1) return x;
  const Dims d = x.dims();
  if (d.h % f != 0 || d.w % f != 0) shape_fail("avg_pool: ", d.h, "x", d.w, " is not divisible by ", f);
  const std::size_t oh = d.h / f, ow = d.w / f;
  const T inv = T(1) / static_cast<T>(f * f);
  BasicTensor<T> y({d.n, d.c, oh, ow});
  for (std::size_t n = 0; n < d.n; ++n) {
    for (std::size_t c = 0; c < d.c; ++c) {
      const T* in = x.plane(n, c);
      T* out = y.plane(n, c);
      for (std::size_t iy = 0; iy < d.h; ++iy) {
        for (std::size_t ix = 0; ix < d.w; ++ix) out[(iy / f) * ow + ix / f] += in[iy * d.w + ix];
      }
      for (std::size_t i = 0; i < oh * ow; ++i) out[i] *= inv;
    }
  }
  return y;
}

template <typename T>
BasicTensor<T> avg_pool_backward(const BasicTensor<T>& gy, std::size_t f) {
  BasicTensor<T> gx = upsample_nearest(gy, f);
  const T inv = T(1) / static_cast<T>(f * f);
  for (auto& v : gx.values()) v *= inv;
  return gx;
}

template <typename T>
BasicTensor<T> concat_channels(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  const Dims da = a.dims(), db = b.dims();
  if (da.n != db.n || da.h != db.h || da.w != db.w) {
    shape_fail("concat_channels: ", da.str(), " and ", db.str(), " disagree outside the channel axis");
  }
  BasicTensor<T> y({da.n, da.c + db.c, da.h, da.w});
  const std::size_t pa = da.c * da.plane(), pb = db.c * db.plane();
  for (std::size_t n = 0; n < da.n; ++n) {
    std::memcpy(y.plane(n, 0), a.plane(n, 0), pa * sizeof(T));
    std::memcpy(y.plane(n, da.c), b.plane(n, 0), pb * sizeof(T));
  }
  return y;
}

// Channels [c0, c0 + count) of x.
template <typename T>
BasicTensor<T> slice_channels(const BasicTensor<T>& x, std::size_t c0, std::size_t count) {
  const Dims d = x.dims();
  if (c0 + count > d.c) shape_fail("slice_channels: [", c0, ", ", c0 + count, ") exceeds C=", d.c);
  BasicTensor<T> y({d.n, count, d.h, d.w});
  for (std::size_t n = 0; n < d.n; ++n) {
    std::memcpy(y.plane(n, 0), x.plane(n, c0), count * d.plane() * sizeof(T));
  }
  return y;
}

template <typename T>
BasicTensor<T> global_avg_pool(const BasicTensor<T>& x) {
  const Dims d = x.dims();
  BasicTensor<T> y({d.n, d.c, 1, 1});
  for (std::size_t n = 0; n < d.n; ++n) {
    for (std::size_t c = 0; c < d.c; ++c) {
      const T* p = x.plane(n, c);
      T s = 0;
      for (std::size_t i = 0; i < d.plane(); ++i) s += p[i];
      y.at(n, c, 0, 0) = s / static_cast<T>(d.plane());
    }
  }
  return y;
}

}  // namespace ops
}  // namespace idn
