#pragma once

// Image-shaped primitives: convolutions, batch normalization, resampling,
// local self-correlation and per-pixel sorting.

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <type_traits>
#include <vector>

#include "dspm/ops.hpp"
#include "dspm/parallel.hpp"

namespace dspm {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

struct Conv2dGeom {
  std::size_t batch, cin, h, w, cout, k, stride, pad, ho, wo;
};

template <typename T>
void im2col(const T* in, const Conv2dGeom& g, T* col) {
  const std::size_t npix = g.ho * g.wo;
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t ky = 0; ky < g.k; ++ky)
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        T* row = col + ((c * g.k + ky) * g.k + kx) * npix;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            row[oy * g.wo + ox] = (iy < 0 || ix < 0 || iy >= static_cast<long>(g.h) || ix >= static_cast<long>(g.w))
                                      ? T(0)
                                      : in[(c * g.h + static_cast<std::size_t>(iy)) * g.w + static_cast<std::size_t>(ix)];
          }
        }
      }
}

template <typename T>
void col2im_add(const T* col, const Conv2dGeom& g, T* out) {
  const std::size_t npix = g.ho * g.wo;
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t ky = 0; ky < g.k; ++ky)
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const T* row = col + ((c * g.k + ky) * g.k + kx) * npix;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
            out[(c * g.h + static_cast<std::size_t>(iy)) * g.w + static_cast<std::size_t>(ix)] += row[oy * g.wo + ox];
          }
        }
      }
}

}  // namespace detail

// Cross-correlation of input [C,H,W] or [B,C,H,W] with kernel [O,C,k,k].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, const std::optional<std::type_identity_t<Tensor<T>>>& bias = std::nullopt,
                 std::size_t stride = 1, std::size_t padding = 0) {
  const bool batched = input.rank() == 4;
  if (!(input.rank() == 3 || batched)) throw DimensionError("conv2d: input must be [C,H,W] or [B,C,H,W]");
  if (kernel.rank() != 4 || kernel.dim(2) != kernel.dim(3))
    throw DimensionError("conv2d: kernel must be [O,C,k,k], got " + to_string(kernel.shape()));
  detail::Conv2dGeom g{};
  g.batch = batched ? input.dim(0) : 1;
  g.cin = input.dim(batched ? 1 : 0);
  g.h = input.dim(batched ? 2 : 1);
  g.w = input.dim(batched ? 3 : 2);
  g.cout = kernel.dim(0);
  g.k = kernel.dim(2);
  g.stride = stride;
  g.pad = padding;
  if (kernel.dim(1) != g.cin)
    throw DimensionError("conv2d: kernel " + to_string(kernel.shape()) + " does not match input " +
                         to_string(input.shape()));
  if (stride == 0 || g.h + 2 * padding < g.k || g.w + 2 * padding < g.k)
    throw DimensionError("conv2d: kernel larger than padded input");
  if (bias && (bias->rank() != 1 || bias->dim(0) != g.cout)) throw DimensionError("conv2d: bias must be [O]");
  g.ho = (g.h + 2 * padding - g.k) / stride + 1;
  g.wo = (g.w + 2 * padding - g.k) / stride + 1;

  const std::size_t kk = g.cin * g.k * g.k;
  const std::size_t npix = g.ho * g.wo;
  std::vector<T> out(g.batch * g.cout * npix);
  std::vector<T> col(kk * npix);
  detail::ConstMapMat<T> wmat(kernel.data().data(), static_cast<Eigen::Index>(g.cout), static_cast<Eigen::Index>(kk));
  for (std::size_t b = 0; b < g.batch; ++b) {
    detail::im2col(input.data().data() + b * g.cin * g.h * g.w, g, col.data());
    detail::ConstMapMat<T> cm(col.data(), static_cast<Eigen::Index>(kk), static_cast<Eigen::Index>(npix));
    detail::MapMat<T> om(out.data() + b * g.cout * npix, static_cast<Eigen::Index>(g.cout),
                         static_cast<Eigen::Index>(npix));
    om.noalias() = wmat * cm;
    if (bias)
      for (std::size_t o = 0; o < g.cout; ++o) om.row(static_cast<Eigen::Index>(o)).array() += (*bias)[o];
  }
  Shape shape = batched ? Shape{g.batch, g.cout, g.ho, g.wo} : Shape{g.cout, g.ho, g.wo};
  std::vector<Tensor<T>> inputs{input, kernel};
  if (bias) inputs.push_back(*bias);
  return detail::make_result<T>("conv2d", std::move(shape), std::move(out), std::move(inputs), [g](Node<T>& self) {
    const std::size_t kk = g.cin * g.k * g.k;
    const std::size_t npix = g.ho * g.wo;
    auto* gin = detail::sink(self, 0);
    auto* gk = detail::sink(self, 1);
    auto* gb = self.parents.size() > 2 ? detail::sink(self, 2) : nullptr;
    const auto& in = self.parents[0]->value;
    detail::ConstMapMat<T> wmat(self.parents[1]->value.data(), static_cast<Eigen::Index>(g.cout),
                                static_cast<Eigen::Index>(kk));
    std::vector<T> col(kk * npix);
    for (std::size_t b = 0; b < g.batch; ++b) {
      detail::ConstMapMat<T> go(self.grad.data() + b * g.cout * npix, static_cast<Eigen::Index>(g.cout),
                                static_cast<Eigen::Index>(npix));
      if (gk) {
        detail::im2col(in.data() + b * g.cin * g.h * g.w, g, col.data());
        detail::ConstMapMat<T> cm(col.data(), static_cast<Eigen::Index>(kk), static_cast<Eigen::Index>(npix));
        detail::MapMat<T> gkm(gk->data(), static_cast<Eigen::Index>(g.cout), static_cast<Eigen::Index>(kk));
        gkm.noalias() += go * cm.transpose();
      }
      if (gb)
        for (std::size_t o = 0; o < g.cout; ++o) (*gb)[o] += go.row(static_cast<Eigen::Index>(o)).sum();
      if (gin) {
        detail::MapMat<T> gcol(col.data(), static_cast<Eigen::Index>(kk), static_cast<Eigen::Index>(npix));
        gcol.noalias() = wmat.transpose() * go;
        detail::col2im_add(col.data(), g, gin->data() + b * g.cin * g.h * g.w);
      }
    }
  });
}

namespace detail {

struct Conv3dGeom {
  std::size_t cin, d, h, w, cout, kd, kh, kw, pd, ph, pw;
};

// Columns for output depth slice `od`: rows (c,kz,ky,kx), cols (y,x).
template <typename T>
void vol2col_slice(const T* in, const Conv3dGeom& g, std::size_t od, T* col) {
  const std::size_t npix = g.h * g.w;
  std::size_t r = 0;
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t kz = 0; kz < g.kd; ++kz) {
      const long iz = static_cast<long>(od + kz) - static_cast<long>(g.pd);
      for (std::size_t ky = 0; ky < g.kh; ++ky)
        for (std::size_t kx = 0; kx < g.kw; ++kx, ++r) {
          T* row = col + r * npix;
          if (iz < 0 || iz >= static_cast<long>(g.d)) {
            std::fill_n(row, npix, T(0));
            continue;
          }
          const T* plane = in + (c * g.d + static_cast<std::size_t>(iz)) * npix;
          for (std::size_t y = 0; y < g.h; ++y) {
            const long iy = static_cast<long>(y + ky) - static_cast<long>(g.ph);
            for (std::size_t x = 0; x < g.w; ++x) {
              const long ix = static_cast<long>(x + kx) - static_cast<long>(g.pw);
              row[y * g.w + x] = (iy < 0 || ix < 0 || iy >= static_cast<long>(g.h) || ix >= static_cast<long>(g.w))
                                     ? T(0)
                                     : plane[static_cast<std::size_t>(iy) * g.w + static_cast<std::size_t>(ix)];
            }
          }
        }
    }
}

template <typename T>
void col2vol_slice_add(const T* col, const Conv3dGeom& g, std::size_t od, T* out) {
  const std::size_t npix = g.h * g.w;
  std::size_t r = 0;
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t kz = 0; kz < g.kd; ++kz) {
      const long iz = static_cast<long>(od + kz) - static_cast<long>(g.pd);
      for (std::size_t ky = 0; ky < g.kh; ++ky)
        for (std::size_t kx = 0; kx < g.kw; ++kx, ++r) {
          if (iz < 0 || iz >= static_cast<long>(g.d)) continue;
          const T* row = col + r * npix;
          T* plane = out + (c * g.d + static_cast<std::size_t>(iz)) * npix;
          for (std::size_t y = 0; y < g.h; ++y) {
            const long iy = static_cast<long>(y + ky) - static_cast<long>(g.ph);
            if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
            for (std::size_t x = 0; x < g.w; ++x) {
              const long ix = static_cast<long>(x + kx) - static_cast<long>(g.pw);
              if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
              plane[static_cast<std::size_t>(iy) * g.w + static_cast<std::size_t>(ix)] += row[y * g.w + x];
            }
          }
        }
    }
}

}  // namespace detail

// Shape-preserving 3-D cross-correlation: input [C,D,H,W], kernel
// [O,C,kd,kh,kw] with odd extents, zero padding of half the kernel.
template <typename T>
Tensor<T> conv3d(const Tensor<T>& input, const Tensor<T>& kernel, const std::optional<std::type_identity_t<Tensor<T>>>& bias = std::nullopt) {
  if (input.rank() != 4) throw DimensionError("conv3d: input must be [C,D,H,W]");
  if (kernel.rank() != 5 || kernel.dim(1) != input.dim(0))
    throw DimensionError("conv3d: kernel " + to_string(kernel.shape()) + " does not match input " +
                         to_string(input.shape()));
  detail::Conv3dGeom g{input.dim(0), input.dim(1), input.dim(2), input.dim(3), kernel.dim(0),
                       kernel.dim(2), kernel.dim(3), kernel.dim(4), 0, 0, 0};
  if (g.kd % 2 == 0 || g.kh % 2 == 0 || g.kw % 2 == 0) throw DimensionError("conv3d: kernel extents must be odd");
  g.pd = g.kd / 2;
  g.ph = g.kh / 2;
  g.pw = g.kw / 2;
  if (bias && (bias->rank() != 1 || bias->dim(0) != g.cout)) throw DimensionError("conv3d: bias must be [O]");
  const std::size_t kk = g.cin * g.kd * g.kh * g.kw;
  const std::size_t npix = g.h * g.w;
  std::vector<T> out(g.cout * g.d * npix);
  detail::ConstMapMat<T> wmat(kernel.data().data(), static_cast<Eigen::Index>(g.cout), static_cast<Eigen::Index>(kk));
  const T* in = input.data().data();
  parallel_for(0, g.d, [&](std::size_t od) {
    std::vector<T> col(kk * npix);
    detail::vol2col_slice(in, g, od, col.data());
    detail::ConstMapMat<T> cm(col.data(), static_cast<Eigen::Index>(kk), static_cast<Eigen::Index>(npix));
    detail::RowMat<T> res = wmat * cm;
    for (std::size_t o = 0; o < g.cout; ++o) {
      const T b = bias ? (*bias)[o] : T(0);
      T* dst = out.data() + (o * g.d + od) * npix;
      for (std::size_t p = 0; p < npix; ++p) dst[p] = res(static_cast<Eigen::Index>(o), static_cast<Eigen::Index>(p)) + b;
    }
  });
  std::vector<Tensor<T>> inputs{input, kernel};
  if (bias) inputs.push_back(*bias);
  return detail::make_result<T>("conv3d", Shape{g.cout, g.d, g.h, g.w}, std::move(out), std::move(inputs), [g](Node<T>& self) {
    const std::size_t kk = g.cin * g.kd * g.kh * g.kw;
    const std::size_t npix = g.h * g.w;
    auto* gin = detail::sink(self, 0);
    auto* gk = detail::sink(self, 1);
    auto* gb = self.parents.size() > 2 ? detail::sink(self, 2) : nullptr;
    const T* in = self.parents[0]->value.data();
    detail::ConstMapMat<T> wmat(self.parents[1]->value.data(), static_cast<Eigen::Index>(g.cout),
                                static_cast<Eigen::Index>(kk));
    std::vector<T> col(kk * npix);
    detail::RowMat<T> go(static_cast<Eigen::Index>(g.cout), static_cast<Eigen::Index>(npix));
    for (std::size_t od = 0; od < g.d; ++od) {
      for (std::size_t o = 0; o < g.cout; ++o)
        for (std::size_t p = 0; p < npix; ++p)
          go(static_cast<Eigen::Index>(o), static_cast<Eigen::Index>(p)) = self.grad[(o * g.d + od) * npix + p];
      if (gb)
        for (std::size_t o = 0; o < g.cout; ++o) (*gb)[o] += go.row(static_cast<Eigen::Index>(o)).sum();
      if (gk) {
        detail::vol2col_slice(in, g, od, col.data());
        detail::ConstMapMat<T> cm(col.data(), static_cast<Eigen::Index>(kk), static_cast<Eigen::Index>(npix));
        detail::MapMat<T> gkm(gk->data(), static_cast<Eigen::Index>(g.cout), static_cast<Eigen::Index>(kk));
        gkm.noalias() += go * cm.transpose();
      }
      if (gin) {
        detail::MapMat<T> gcol(col.data(), static_cast<Eigen::Index>(kk), static_cast<Eigen::Index>(npix));
        gcol.noalias() = wmat.transpose() * go;
        detail::col2vol_slice_add(col.data(), g, od, gin->data());
      }
    }
  });
}

// Running statistics owned by a batch-norm layer.
template <typename T>
struct BatchNormState {
  std::vector<T> running_mean;
  std::vector<T> running_var;
  T momentum = T(0.9);  // weight kept on the old running value
  T eps = T(1e-5);

  explicit BatchNormState(std::size_t channels = 0) : running_mean(channels, T(0)), running_var(channels, T(1)) {}
};

// Per-channel normalization of [C,H,W] or [B,C,H,W]. Training mode uses the
// statistics of this batch and updates the running averages; inference mode
// uses the running averages.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, BatchNormState<T>& state,
                     bool training) {
  const bool batched = x.rank() == 4;
  if (!(x.rank() == 3 || batched)) throw DimensionError("batch_norm: input must be [C,H,W] or [B,C,H,W]");
  const std::size_t B = batched ? x.dim(0) : 1;
  const std::size_t C = x.dim(batched ? 1 : 0);
  const std::size_t HW = x.size() / (B * C);
  if (gamma.size() != C || beta.size() != C || state.running_mean.size() != C)
    throw DimensionError("batch_norm: channel count mismatch");
  const std::size_t n = B * HW;
  std::vector<T> mu(C), invstd(C);
  const auto xv = x.data();
  for (std::size_t c = 0; c < C; ++c) {
    if (training) {
      double s = 0.0;
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < HW; ++i) s += xv[(b * C + c) * HW + i];
      const double m = s / static_cast<double>(n);
      double v = 0.0;
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < HW; ++i) {
          const double d = xv[(b * C + c) * HW + i] - m;
          v += d * d;
        }
      const double var = v / static_cast<double>(n);
      mu[c] = static_cast<T>(m);
      invstd[c] = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(state.eps)));
      const double unbiased = n > 1 ? v / static_cast<double>(n - 1) : var;
      state.running_mean[c] = state.momentum * state.running_mean[c] + (T(1) - state.momentum) * static_cast<T>(m);
      state.running_var[c] = state.momentum * state.running_var[c] + (T(1) - state.momentum) * static_cast<T>(unbiased);
    } else {
      mu[c] = state.running_mean[c];
      invstd[c] = T(1) / std::sqrt(state.running_var[c] + state.eps);
    }
  }
  std::vector<T> out(x.size());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < HW; ++i) {
        const std::size_t k = (b * C + c) * HW + i;
        out[k] = gamma[c] * (xv[k] - mu[c]) * invstd[c] + beta[c];
      }
  return detail::make_result<T>(
      "batch_norm", x.shape(), std::move(out), {x, gamma, beta},
      [B, C, HW, n, training, mu = std::move(mu), invstd = std::move(invstd)](Node<T>& self) {
        const auto& xv = self.parents[0]->value;
        const auto& gam = self.parents[1]->value;
        auto* gx = detail::sink(self, 0);
        auto* gg = detail::sink(self, 1);
        auto* gbeta = detail::sink(self, 2);
        const auto& g = self.grad;
        for (std::size_t c = 0; c < C; ++c) {
          T sum_g = T(0), sum_gx = T(0);
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t i = 0; i < HW; ++i) {
              const std::size_t k = (b * C + c) * HW + i;
              const T xhat = (xv[k] - mu[c]) * invstd[c];
              sum_g += g[k];
              sum_gx += g[k] * xhat;
            }
          if (gg) (*gg)[c] += sum_gx;
          if (gbeta) (*gbeta)[c] += sum_g;
          if (!gx) continue;
          const T scale = gam[c] * invstd[c];
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t i = 0; i < HW; ++i) {
              const std::size_t k = (b * C + c) * HW + i;
              if (training) {
                const T xhat = (xv[k] - mu[c]) * invstd[c];
                (*gx)[k] += scale * (g[k] - sum_g / static_cast<T>(n) - xhat * sum_gx / static_cast<T>(n));
              } else {
                (*gx)[k] += scale * g[k];
              }
            }
        }
      });
}

// Nearest-neighbour 2x upsampling over the last two axes.
template <typename T>
Tensor<T> upsample_nearest2x(const Tensor<T>& x) {
  if (x.rank() < 2) throw DimensionError("upsample_nearest2x: rank < 2");
  const std::size_t H = x.dim(x.rank() - 2), W = x.dim(x.rank() - 1);
  const std::size_t planes = x.size() / (H * W);
  Shape shape = x.shape();
  shape[shape.size() - 2] = 2 * H;
  shape[shape.size() - 1] = 2 * W;
  std::vector<T> out(4 * x.size());
  const auto xv = x.data();
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t y = 0; y < 2 * H; ++y)
      for (std::size_t xx = 0; xx < 2 * W; ++xx) out[(p * 2 * H + y) * 2 * W + xx] = xv[(p * H + y / 2) * W + xx / 2];
  return detail::make_result<T>("upsample_nearest2x", std::move(shape), std::move(out), {x}, [planes, H, W](Node<T>& self) {
    auto* gx = detail::sink(self, 0);
    if (!gx) return;
    for (std::size_t p = 0; p < planes; ++p)
      for (std::size_t y = 0; y < 2 * H; ++y)
        for (std::size_t xx = 0; xx < 2 * W; ++xx)
          (*gx)[(p * H + y / 2) * W + xx / 2] += self.grad[(p * 2 * H + y) * 2 * W + xx];
  });
}

namespace detail {

// Source taps for 2x bilinear upsampling under the pixel-centre convention.
struct Tap {
  std::size_t i0, i1;
  double f;
};

inline std::vector<Tap> upsample_taps(std::size_t n) {
  std::vector<Tap> taps(2 * n);
  for (std::size_t i = 0; i < 2 * n; ++i) {
    double s = (static_cast<double>(i) + 0.5) / 2.0 - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(n - 1));
    const auto i0 = static_cast<std::size_t>(std::floor(s));
    taps[i] = {i0, std::min(i0 + 1, n - 1), s - static_cast<double>(i0)};
  }
  return taps;
}

}  // namespace detail

// Bilinear 2x upsampling over the last two axes.
template <typename T>
Tensor<T> upsample_bilinear2x(const Tensor<T>& x) {
  if (x.rank() < 2) throw DimensionError("upsample_bilinear2x: rank < 2");
  const std::size_t H = x.dim(x.rank() - 2), W = x.dim(x.rank() - 1);
  const std::size_t planes = x.size() / (H * W);
  Shape shape = x.shape();
  shape[shape.size() - 2] = 2 * H;
  shape[shape.size() - 1] = 2 * W;
  auto ty = detail::upsample_taps(H), tx = detail::upsample_taps(W);
  std::vector<T> out(4 * x.size());
  const auto xv = x.data();
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = xv.data() + p * H * W;
    for (std::size_t y = 0; y < 2 * H; ++y)
      for (std::size_t xx = 0; xx < 2 * W; ++xx) {
        const auto& a = ty[y];
        const auto& b = tx[xx];
        const T fy = static_cast<T>(a.f), fx = static_cast<T>(b.f);
        out[(p * 2 * H + y) * 2 * W + xx] = (T(1) - fy) * ((T(1) - fx) * src[a.i0 * W + b.i0] + fx * src[a.i0 * W + b.i1]) +
                                            fy * ((T(1) - fx) * src[a.i1 * W + b.i0] + fx * src[a.i1 * W + b.i1]);
      }
  }
  return detail::make_result<T>("upsample_bilinear2x", std::move(shape), std::move(out), {x},
                                [planes, H, W, ty = std::move(ty), tx = std::move(tx)](Node<T>& self) {
                                  auto* gx = detail::sink(self, 0);
                                  if (!gx) return;
                                  for (std::size_t p = 0; p < planes; ++p) {
                                    T* dst = gx->data() + p * H * W;
                                    for (std::size_t y = 0; y < 2 * H; ++y)
                                      for (std::size_t xx = 0; xx < 2 * W; ++xx) {
                                        const auto& a = ty[y];
                                        const auto& b = tx[xx];
                                        const T fy = static_cast<T>(a.f), fx = static_cast<T>(b.f);
                                        const T g = self.grad[(p * 2 * H + y) * 2 * W + xx];
                                        dst[a.i0 * W + b.i0] += g * (T(1) - fy) * (T(1) - fx);
                                        dst[a.i0 * W + b.i1] += g * (T(1) - fy) * fx;
                                        dst[a.i1 * W + b.i0] += g * fy * (T(1) - fx);
                                        dst[a.i1 * W + b.i1] += g * fy * fx;
                                      }
                                  }
                                });
}

// Samples map [C,H,W] at continuous pixel coordinates coords [2, ...]
// (coords[0] = x / column, coords[1] = y / row). Coordinates are clamped to
// the image rectangle. Output is [C, ...].
template <typename T>
Tensor<T> bilinear_sample(const Tensor<T>& map, const Tensor<T>& coords) {
  if (map.rank() != 3) throw DimensionError("bilinear_sample: map must be [C,H,W]");
  if (coords.rank() < 2 || coords.dim(0) != 2) throw DimensionError("bilinear_sample: coords must be [2,...]");
  const std::size_t C = map.dim(0), H = map.dim(1), W = map.dim(2);
  const std::size_t P = coords.size() / 2;
  Shape shape = coords.shape();
  shape[0] = C;
  std::vector<T> out(C * P);
  const auto mv = map.data();
  const auto cv = coords.data();
  const T xmax = static_cast<T>(W - 1), ymax = static_cast<T>(H - 1);
  for (std::size_t p = 0; p < P; ++p) {
    const T x = std::clamp(cv[p], T(0), xmax), y = std::clamp(cv[P + p], T(0), ymax);
    const std::size_t x0 = std::min(static_cast<std::size_t>(x), W - 1), y0 = std::min(static_cast<std::size_t>(y), H - 1);
    const std::size_t x1 = std::min(x0 + 1, W - 1), y1 = std::min(y0 + 1, H - 1);
    const T fx = x - static_cast<T>(x0), fy = y - static_cast<T>(y0);
    for (std::size_t c = 0; c < C; ++c) {
      const T* m = mv.data() + c * H * W;
      out[c * P + p] = (T(1) - fy) * ((T(1) - fx) * m[y0 * W + x0] + fx * m[y0 * W + x1]) +
                       fy * ((T(1) - fx) * m[y1 * W + x0] + fx * m[y1 * W + x1]);
    }
  }
  return detail::make_result<T>("bilinear_sample", std::move(shape), std::move(out), {map, coords},
                                [C, H, W, P](Node<T>& self) {
                                  const auto& mv = self.parents[0]->value;
                                  const auto& cv = self.parents[1]->value;
                                  auto* gm = detail::sink(self, 0);
                                  auto* gc = detail::sink(self, 1);
                                  const T xmax = static_cast<T>(W - 1), ymax = static_cast<T>(H - 1);
                                  for (std::size_t p = 0; p < P; ++p) {
                                    const T rx = cv[p], ry = cv[P + p];
                                    const T x = std::clamp(rx, T(0), xmax), y = std::clamp(ry, T(0), ymax);
                                    const std::size_t x0 = std::min(static_cast<std::size_t>(x), W - 1);
                                    const std::size_t y0 = std::min(static_cast<std::size_t>(y), H - 1);
                                    const std::size_t x1 = std::min(x0 + 1, W - 1), y1 = std::min(y0 + 1, H - 1);
                                    const T fx = x - static_cast<T>(x0), fy = y - static_cast<T>(y0);
                                    T dx = T(0), dy = T(0);
                                    for (std::size_t c = 0; c < C; ++c) {
                                      const T g = self.grad[c * P + p];
                                      const T* m = mv.data() + c * H * W;
                                      if (gm) {
                                        T* d = gm->data() + c * H * W;
                                        d[y0 * W + x0] += g * (T(1) - fy) * (T(1) - fx);
                                        d[y0 * W + x1] += g * (T(1) - fy) * fx;
                                        d[y1 * W + x0] += g * fy * (T(1) - fx);
                                        d[y1 * W + x1] += g * fy * fx;
                                      }
                                      dx += g * ((T(1) - fy) * (m[y0 * W + x1] - m[y0 * W + x0]) +
                                                 fy * (m[y1 * W + x1] - m[y1 * W + x0]));
                                      dy += g * ((T(1) - fx) * (m[y1 * W + x0] - m[y0 * W + x0]) +
                                                 fx * (m[y1 * W + x1] - m[y0 * W + x1]));
                                    }
                                    if (gc) {
                                      if (rx >= T(0) && rx <= xmax) (*gc)[p] += dx;
                                      if (ry >= T(0) && ry <= ymax) (*gc)[P + p] += dy;
                                    }
                                  }
                                });
}

// Intra-view correlation: out[(dy+R)(2R+1)+(dx+R), y, x] =
// <f[:, y, x], f[:, y+dy, x+dx]> / sqrt(C), neighbours clamped to the border.
template <typename T>
Tensor<T> local_correlation(const Tensor<T>& feat, std::size_t radius) {
  if (feat.rank() != 3) throw DimensionError("local_correlation: features must be [C,H,W]");
  if (radius < 1) throw ConfigError("local_correlation: radius must be >= 1");
  const std::size_t C = feat.dim(0), H = feat.dim(1), W = feat.dim(2);
  const std::size_t side = 2 * radius + 1;
  const std::size_t K = side * side;
  const long R = static_cast<long>(radius);
  const T scale = T(1) / std::sqrt(static_cast<T>(C));
  // neighbour index per (offset, pixel)
  std::vector<std::size_t> nb(K * H * W);
  for (long dy = -R; dy <= R; ++dy)
    for (long dx = -R; dx <= R; ++dx) {
      const std::size_t k = static_cast<std::size_t>((dy + R) * static_cast<long>(side) + (dx + R));
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
          const long qy = std::clamp(static_cast<long>(y) + dy, 0L, static_cast<long>(H) - 1);
          const long qx = std::clamp(static_cast<long>(x) + dx, 0L, static_cast<long>(W) - 1);
          nb[(k * H + y) * W + x] = static_cast<std::size_t>(qy) * W + static_cast<std::size_t>(qx);
        }
    }
  const auto fv = feat.data();
  std::vector<T> out(K * H * W, T(0));
  parallel_for(0, K, [&](std::size_t k) {
    for (std::size_t c = 0; c < C; ++c) {
      const T* f = fv.data() + c * H * W;
      for (std::size_t p = 0; p < H * W; ++p) out[k * H * W + p] += f[p] * f[nb[k * H * W + p]];
    }
    for (std::size_t p = 0; p < H * W; ++p) out[k * H * W + p] *= scale;
  });
  return detail::make_result<T>("local_correlation", Shape{K, H, W}, std::move(out), {feat},
                                [C, H, W, K, scale, nb = std::move(nb)](Node<T>& self) {
                                  auto* gf = detail::sink(self, 0);
                                  if (!gf) return;
                                  const auto& fv = self.parents[0]->value;
                                  for (std::size_t c = 0; c < C; ++c) {
                                    const T* f = fv.data() + c * H * W;
                                    T* d = gf->data() + c * H * W;
                                    for (std::size_t k = 0; k < K; ++k)
                                      for (std::size_t p = 0; p < H * W; ++p) {
                                        const T g = self.grad[k * H * W + p] * scale;
                                        const std::size_t q = nb[k * H * W + p];
                                        d[p] += g * f[q];
                                        d[q] += g * f[p];
                                      }
                                  }
                                });
}

// Sorts ascending along axis 0 independently for every trailing position.
template <typename T>
Tensor<T> sort_axis0(const Tensor<T>& x) {
  if (x.rank() < 1) throw DimensionError("sort_axis0: rank 0");
  const std::size_t m = x.dim(0);
  const std::size_t inner = x.size() / std::max<std::size_t>(1, m);
  std::vector<std::size_t> src(x.size());
  std::vector<T> out(x.size());
  const auto xv = x.data();
  std::vector<std::size_t> idx(m);
  for (std::size_t p = 0; p < inner; ++p) {
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return xv[a * inner + p] < xv[b * inner + p]; });
    for (std::size_t j = 0; j < m; ++j) {
      src[j * inner + p] = idx[j] * inner + p;
      out[j * inner + p] = xv[idx[j] * inner + p];
    }
  }
  return detail::make_result<T>("sort_axis0", x.shape(), std::move(out), {x}, [src = std::move(src)](Node<T>& self) {
    auto* gx = detail::sink(self, 0);
    if (!gx) return;
    for (std::size_t k = 0; k < src.size(); ++k) (*gx)[src[k]] += self.grad[k];
  });
}

}  // namespace dspm
