#pragma once

#include <cmath>
#include <cstring>
#include <memory>
#include <vector>

#include "oddkit/autodiff.hpp"
#include "oddkit/gemm.hpp"
#include "oddkit/tensor.hpp"

namespace oddkit {

// Strided convolutions with SAME padding, layout NHWC, kernels [k,k,Cin,Cout].
// Both directions are lowered to GEMM through im2col/col2im over the *larger*
// grid, so conv2d and deconv2d are adjoint maps by construction.

struct ConvGeom {
  std::int64_t h = 0, w = 0, c = 0;  // dense-grid extent (conv input / deconv output)
  std::int64_t k = 1, stride = 1;
  std::int64_t out_h = 0, out_w = 0;  // strided-grid extent
  std::int64_t pad_top = 0, pad_left = 0;

  // SAME rule: output = ceil(extent / stride); padding is split with the
  // surplus pixel on the bottom/right edge.
  static ConvGeom same(std::int64_t h, std::int64_t w, std::int64_t c, std::int64_t k,
                       std::int64_t stride) {
    if (h < 1 || w < 1 || c < 1) throw ShapeError("conv: empty spatial input");
    if (k < 1 || stride < 1) throw ValidationError("conv: kernel and stride must be positive");
    ConvGeom g;
    g.h = h;
    g.w = w;
    g.c = c;
    g.k = k;
    g.stride = stride;
    g.out_h = (h + stride - 1) / stride;
    g.out_w = (w + stride - 1) / stride;
    std::int64_t pad_h = std::max<std::int64_t>((g.out_h - 1) * stride + k - h, 0);
    std::int64_t pad_w = std::max<std::int64_t>((g.out_w - 1) * stride + k - w, 0);
    g.pad_top = pad_h / 2;
    g.pad_left = pad_w / 2;
    return g;
  }

  std::int64_t patch_len() const { return k * k * c; }
  std::int64_t rows(std::int64_t batch) const { return batch * out_h * out_w; }
};

namespace detail {

/// Gathers k*k*C patches: cols[b*oh*ow, (ky*k+kx)*C + ch]. Out-of-bounds taps
/// read as zero.
template <typename T>
void im2col(const T* x, std::int64_t batch, const ConvGeom& g, T* cols) {
  const std::int64_t pl = g.patch_len();
  for (std::int64_t b = 0; b < batch; ++b) {
    const T* img = x + b * g.h * g.w * g.c;
    T* crow = cols + b * g.out_h * g.out_w * pl;
    for (std::int64_t oy = 0; oy < g.out_h; ++oy) {
      for (std::int64_t ox = 0; ox < g.out_w; ++ox, crow += pl) {
        for (std::int64_t ky = 0; ky < g.k; ++ky) {
          std::int64_t iy = oy * g.stride - g.pad_top + ky;
          T* dst = crow + ky * g.k * g.c;
          if (iy < 0 || iy >= g.h) {
            std::memset(dst, 0, sizeof(T) * static_cast<std::size_t>(g.k * g.c));
            continue;
          }
          for (std::int64_t kx = 0; kx < g.k; ++kx, dst += g.c) {
            std::int64_t ix = ox * g.stride - g.pad_left + kx;
            if (ix < 0 || ix >= g.w)
              std::memset(dst, 0, sizeof(T) * static_cast<std::size_t>(g.c));
            else
              std::memcpy(dst, img + (iy * g.w + ix) * g.c,
                          sizeof(T) * static_cast<std::size_t>(g.c));
          }
        }
      }
    }
  }
}

/// Adjoint of im2col: scatter-adds column patches back onto the dense grid.
template <typename T>
void col2im_acc(const T* cols, std::int64_t batch, const ConvGeom& g, T* x) {
  const std::int64_t pl = g.patch_len();
  for (std::int64_t b = 0; b < batch; ++b) {
    T* img = x + b * g.h * g.w * g.c;
    const T* crow = cols + b * g.out_h * g.out_w * pl;
    for (std::int64_t oy = 0; oy < g.out_h; ++oy) {
      for (std::int64_t ox = 0; ox < g.out_w; ++ox, crow += pl) {
        for (std::int64_t ky = 0; ky < g.k; ++ky) {
          std::int64_t iy = oy * g.stride - g.pad_top + ky;
          if (iy < 0 || iy >= g.h) continue;
          const T* src = crow + ky * g.k * g.c;
          for (std::int64_t kx = 0; kx < g.k; ++kx, src += g.c) {
            std::int64_t ix = ox * g.stride - g.pad_left + kx;
            if (ix < 0 || ix >= g.w) continue;
            T* dst = img + (iy * g.w + ix) * g.c;
            for (std::int64_t ch = 0; ch < g.c; ++ch) dst[ch] += src[ch];
          }
        }
      }
    }
  }
}

inline void check_nhwc(const Shape& s, const char* op) {
  if (s.size() != 4) throw ShapeError(std::string(op) + " expects NHWC input, got " + shape_str(s));
}

}  // namespace detail

/// x[B,H,W,Cin] * kernel[k,k,Cin,Cout], stride s, SAME padding ->
/// [B,ceil(H/s),ceil(W/s),Cout].
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& kernel, std::int64_t stride) {
  detail::check_nhwc(x.shape(), "conv2d");
  const Shape& ks = kernel.shape();
  if (ks.size() != 4 || ks[0] != ks[1])
    throw ShapeError("conv2d kernel must be [k,k,Cin,Cout], got " + shape_str(ks));
  if (ks[2] != x.shape()[3])
    throw ShapeError("conv2d channel mismatch: input " + shape_str(x.shape()) + " kernel " +
                     shape_str(ks));
  const std::int64_t batch = x.shape()[0];
  const ConvGeom g = ConvGeom::same(x.shape()[1], x.shape()[2], x.shape()[3], ks[0], stride);
  const std::int64_t rows = g.rows(batch), pl = g.patch_len(), cout = ks[3];

  std::vector<T> cols(static_cast<std::size_t>(rows * pl));
  detail::im2col(x.value().data(), batch, g, cols.data());
  Tensor<T> out({batch, g.out_h, g.out_w, cout});
  gemm_nn(rows, pl, cout, cols.data(), kernel.value().data(), out.data());

  return detail::make_node<T>(
      std::move(out), {x, kernel}, [x, kernel, batch, g, rows, pl, cout](const Tensor<T>& gy) {
        // the patch matrix is cheap next to the GEMMs, so rebuild it here
        std::vector<T> cols(static_cast<std::size_t>(rows * pl));
        detail::im2col(x.value().data(), batch, g, cols.data());
        if (T* gk = detail::grad_of(kernel)) gemm_tn_acc(rows, pl, cout, cols.data(), gy.data(), gk);
        if (T* gx = detail::grad_of(x)) {
          std::vector<T> gcols(static_cast<std::size_t>(rows * pl));
          std::vector<T> scratch;
          gemm_nt(rows, cout, pl, gy.data(), kernel.value().data(), gcols.data(), scratch);
          detail::col2im_acc(gcols.data(), batch, g, gx);
        }
      });
}

/// Transposed convolution: x[B,h,w,Cin] * kernel[k,k,Cout,Cin], stride s ->
/// [B,h*s,w*s,Cout]. Exactly the adjoint of conv2d with the same geometry.
template <typename T>
Var<T> deconv2d(const Var<T>& x, const Var<T>& kernel, std::int64_t stride) {
  detail::check_nhwc(x.shape(), "deconv2d");
  const Shape& ks = kernel.shape();
  if (ks.size() != 4 || ks[0] != ks[1])
    throw ShapeError("deconv2d kernel must be [k,k,Cout,Cin], got " + shape_str(ks));
  if (ks[3] != x.shape()[3])
    throw ShapeError("deconv2d channel mismatch: input " + shape_str(x.shape()) + " kernel " +
                     shape_str(ks));
  const std::int64_t batch = x.shape()[0], cin = x.shape()[3], cout = ks[2];
  const ConvGeom g =
      ConvGeom::same(x.shape()[1] * stride, x.shape()[2] * stride, cout, ks[0], stride);
  const std::int64_t rows = g.rows(batch), pl = g.patch_len();

  // cols[rows, k*k*Cout] = x[rows, Cin] * kernel[k*k*Cout, Cin]^T, scattered
  // onto the upsampled grid
  std::vector<T> gcols(static_cast<std::size_t>(rows * pl));
  std::vector<T> scratch;
  gemm_nt(rows, cin, pl, x.value().data(), kernel.value().data(), gcols.data(), scratch);
  Tensor<T> out({batch, g.h, g.w, cout});
  detail::col2im_acc(gcols.data(), batch, g, out.data());

  return detail::make_node<T>(
      std::move(out), {x, kernel}, [x, kernel, batch, g, rows, pl, cin](const Tensor<T>& gy) {
        std::vector<T> cols(static_cast<std::size_t>(rows * pl));
        detail::im2col(gy.data(), batch, g, cols.data());
        if (T* gx = detail::grad_of(x)) gemm_nn_acc(rows, pl, cin, cols.data(), kernel.value().data(), gx);
        if (T* gk = detail::grad_of(kernel)) gemm_tn_acc(rows, pl, cin, cols.data(), x.value().data(), gk);
      });
}

// ---- batch normalization --------------------------------------------------

/// Running statistics, updated in training mode and read in inference mode.
template <typename T>
struct BnState {
  Tensor<T> running_mean;
  Tensor<T> running_var;

  explicit BnState(std::int64_t channels = 0)
      : running_mean({channels}), running_var({channels}) {
    running_var.fill(T(1));
  }
};

inline constexpr double kBnMomentum = 0.99;
inline constexpr double kBnEps = 1e-3;

/// Per-channel normalization over all leading dimensions of x[...,C].
/// Training mode uses biased batch statistics and folds them into the running
/// averages; inference mode normalizes with the stored averages only.
template <typename T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, BnState<T>& state,
                  bool training, double momentum = kBnMomentum, double eps = kBnEps) {
  if (x.shape().size() < 2) throw ShapeError("batch_norm expects rank >= 2, got " + shape_str(x.shape()));
  const std::int64_t c = x.shape().back();
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c} ||
      state.running_mean.shape != Shape{c} || state.running_var.shape != Shape{c})
    throw ShapeError("batch_norm parameter shape mismatch for " + std::to_string(c) + " channels");
  const std::int64_t rows = x.size() / c;
  if (training && x.shape()[0] < 2)
    throw ValidationError("batch_norm: training statistics need batch size >= 2");

  Tensor<T> out(x.shape());
  const T* xp = x.value().data();
  const T* gm = gamma.value().data();
  const T* bt = beta.value().data();

  if (!training) {
    std::vector<T> inv(static_cast<std::size_t>(c));
    for (std::int64_t j = 0; j < c; ++j)
      inv[j] = T(1) / std::sqrt(state.running_var[j] + static_cast<T>(eps));
    for (std::int64_t i = 0; i < rows; ++i)
      for (std::int64_t j = 0; j < c; ++j)
        out[i * c + j] = (xp[i * c + j] - state.running_mean[j]) * inv[j] * gm[j] + bt[j];
    auto invs = std::make_shared<std::vector<T>>(std::move(inv));
    auto mean = std::make_shared<Tensor<T>>(state.running_mean);
    return detail::make_node<T>(
        std::move(out), {x, gamma, beta}, [x, gamma, beta, invs, mean, rows, c](const Tensor<T>& g) {
          T* gx = detail::grad_of(x);
          T* gg = detail::grad_of(gamma);
          T* gb = detail::grad_of(beta);
          const T* xp = x.value().data();
          for (std::int64_t i = 0; i < rows; ++i)
            for (std::int64_t j = 0; j < c; ++j) {
              T xhat = (xp[i * c + j] - (*mean)[j]) * (*invs)[j];
              T gy = g[i * c + j];
              if (gx) gx[i * c + j] += gy * gamma.value()[j] * (*invs)[j];
              if (gg) gg[j] += gy * xhat;
              if (gb) gb[j] += gy;
            }
        });
  }

  auto mean = std::make_shared<std::vector<T>>(static_cast<std::size_t>(c), T(0));
  auto inv = std::make_shared<std::vector<T>>(static_cast<std::size_t>(c));
  std::vector<T> var(static_cast<std::size_t>(c), T(0));
  for (std::int64_t i = 0; i < rows; ++i)
    for (std::int64_t j = 0; j < c; ++j) (*mean)[j] += xp[i * c + j];
  for (std::int64_t j = 0; j < c; ++j) (*mean)[j] /= static_cast<T>(rows);
  for (std::int64_t i = 0; i < rows; ++i)
    for (std::int64_t j = 0; j < c; ++j) {
      T d = xp[i * c + j] - (*mean)[j];
      var[j] += d * d;
    }
  for (std::int64_t j = 0; j < c; ++j) var[j] /= static_cast<T>(rows);  // biased
  for (std::int64_t j = 0; j < c; ++j)
    (*inv)[j] = T(1) / std::sqrt(var[j] + static_cast<T>(eps));

  const T mom = static_cast<T>(momentum);
  for (std::int64_t j = 0; j < c; ++j) {
    state.running_mean[j] = mom * state.running_mean[j] + (T(1) - mom) * (*mean)[j];
    state.running_var[j] = mom * state.running_var[j] + (T(1) - mom) * var[j];
  }

  auto xhat = std::make_shared<Tensor<T>>(x.shape());
  for (std::int64_t i = 0; i < rows; ++i)
    for (std::int64_t j = 0; j < c; ++j) {
      T h = (xp[i * c + j] - (*mean)[j]) * (*inv)[j];
      (*xhat)[i * c + j] = h;
      out[i * c + j] = h * gm[j] + bt[j];
    }

  return detail::make_node<T>(
      std::move(out), {x, gamma, beta}, [x, gamma, beta, xhat, inv, rows, c](const Tensor<T>& g) {
        T* gx = detail::grad_of(x);
        T* gg = detail::grad_of(gamma);
        T* gb = detail::grad_of(beta);
        std::vector<T> sum_g(static_cast<std::size_t>(c), T(0));
        std::vector<T> sum_gh(static_cast<std::size_t>(c), T(0));
        for (std::int64_t i = 0; i < rows; ++i)
          for (std::int64_t j = 0; j < c; ++j) {
            sum_g[j] += g[i * c + j];
            sum_gh[j] += g[i * c + j] * (*xhat)[i * c + j];
          }
        if (gg)
          for (std::int64_t j = 0; j < c; ++j) gg[j] += sum_gh[j];
        if (gb)
          for (std::int64_t j = 0; j < c; ++j) gb[j] += sum_g[j];
        if (gx) {
          const T n = static_cast<T>(rows);
          for (std::int64_t i = 0; i < rows; ++i)
            for (std::int64_t j = 0; j < c; ++j) {
              T gy = g[i * c + j];
              gx[i * c + j] += gamma.value()[j] * (*inv)[j] *
                               (gy - sum_g[j] / n - (*xhat)[i * c + j] * sum_gh[j] / n);
            }
        }
      });
}

}  // namespace oddkit
