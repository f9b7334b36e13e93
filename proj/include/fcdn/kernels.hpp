#pragma once

// Forward and backward kernels on plain tensors. The graph ops in ops.hpp wrap
// these; tests call them directly against naive oracles.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "fcdn/errors.hpp"
#include "fcdn/rng.hpp"
#include "fcdn/tensor.hpp"

namespace fcdn::kernels {

template <typename T>
using NoDeduce = std::type_identity_t<T>;

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

inline std::string dims(std::size_t a, std::size_t b) {
  return std::to_string(a) + " vs " + std::to_string(b);
}

// ---------------------------------------------------------------------------
// conv2d: stride 1, square kernel, symmetric zero padding `pad`.
// weight (out_c, in_c, k, k), bias (1, out_c, 1, 1).

struct ConvGeometry {
  std::size_t in_c, out_c, k, pad, h, w, out_h, out_w;
};

template <typename T>
ConvGeometry conv_geometry(const Shape& x, const Shape& wt, std::size_t pad) {
  if (wt.h != wt.w) {
    throw ShapeError("conv2d kernel must be square, got " + std::to_string(wt.h) + "x" +
                     std::to_string(wt.w));
  }
  if (wt.c != x.c) {
    throw ShapeError("conv2d in_channels mismatch: kernel expects " + dims(wt.c, x.c) +
                     " input channels");
  }
  if (x.h + 2 * pad < wt.h || x.w + 2 * pad < wt.w) {
    throw ShapeError("conv2d kernel " + std::to_string(wt.h) + "x" + std::to_string(wt.w) +
                     " larger than padded input " + x.str());
  }
  return {x.c, wt.n, wt.h, pad, x.h, x.w, x.h + 2 * pad - wt.h + 1, x.w + 2 * pad - wt.w + 1};
}

// col[(ci*k + a)*k + b][oy*out_w + ox] = x[ci, oy + a - pad, ox + b - pad]
template <typename T>
void im2col(const T* x, const ConvGeometry& g, T* col) {
  const std::size_t plane = g.out_h * g.out_w;
  for (std::size_t ci = 0; ci < g.in_c; ++ci) {
    for (std::size_t a = 0; a < g.k; ++a) {
      for (std::size_t b = 0; b < g.k; ++b) {
        T* row = col + ((ci * g.k + a) * g.k + b) * plane;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy + a) - static_cast<std::ptrdiff_t>(g.pad);
          T* dst = row + oy * g.out_w;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) {
            std::fill(dst, dst + g.out_w, T{0});
            continue;
          }
          const T* src = x + (ci * g.h + static_cast<std::size_t>(iy)) * g.w;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox + b) - static_cast<std::ptrdiff_t>(g.pad);
            dst[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) ? T{0} : src[ix];
          }
        }
      }
    }
  }
}

// Adjoint of im2col: dx[...] += col[...].
template <typename T>
void col2im(const T* col, const ConvGeometry& g, T* dx) {
  const std::size_t plane = g.out_h * g.out_w;
  for (std::size_t ci = 0; ci < g.in_c; ++ci) {
    for (std::size_t a = 0; a < g.k; ++a) {
      for (std::size_t b = 0; b < g.k; ++b) {
        const T* row = col + ((ci * g.k + a) * g.k + b) * plane;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy + a) - static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          const T* src = row + oy * g.out_w;
          T* dst = dx + (ci * g.h + static_cast<std::size_t>(iy)) * g.w;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox + b) - static_cast<std::ptrdiff_t>(g.pad);
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.w)) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Tensor<T>& weight, const NoDeduce<Tensor<T>>* bias,
                         std::size_t pad) {
  const ConvGeometry g = conv_geometry<T>(x.shape(), weight.shape(), pad);
  if (bias && bias->numel() != g.out_c) {
    throw ShapeError("conv2d bias length mismatch: " + dims(bias->numel(), g.out_c));
  }
  const std::size_t n = x.shape().n;
  const std::size_t kdim = g.in_c * g.k * g.k;
  const std::size_t plane = g.out_h * g.out_w;
  Tensor<T> out(Shape{n, g.out_c, g.out_h, g.out_w});
  ConstMapMat<T> wm(weight.ptr(), g.out_c, kdim);
  AlignedVector<T> col;
  const bool direct = g.k == 1 && g.pad == 0;
  if (!direct) col.resize(kdim * plane);
  for (std::size_t s = 0; s < n; ++s) {
    const T* xs = x.plane(s, 0);
    if (!direct) im2col(xs, g, col.data());
    ConstMapMat<T> cm(direct ? xs : col.data(), kdim, plane);
    MapMat<T> om(out.plane(s, 0), g.out_c, plane);
    om.noalias() = wm * cm;
    if (bias) {
      for (std::size_t co = 0; co < g.out_c; ++co) om.row(co).array() += (*bias)[co];
    }
  }
  return out;
}

// Any of dx/dw/db may be null. Gradients are accumulated (+=).
template <typename T>
void conv2d_backward(const Tensor<T>& x, const Tensor<T>& weight, std::size_t pad,
                     const Tensor<T>& dout, NoDeduce<Tensor<T>>* dx, NoDeduce<Tensor<T>>* dw,
                     NoDeduce<Tensor<T>>* db) {
  const ConvGeometry g = conv_geometry<T>(x.shape(), weight.shape(), pad);
  const std::size_t n = x.shape().n;
  const std::size_t kdim = g.in_c * g.k * g.k;
  const std::size_t plane = g.out_h * g.out_w;
  ConstMapMat<T> wm(weight.ptr(), g.out_c, kdim);
  const bool direct = g.k == 1 && g.pad == 0;
  AlignedVector<T> col;
  AlignedVector<T> dcol;
  if (!direct) {
    col.resize(kdim * plane);
    dcol.resize(kdim * plane);
  }
  for (std::size_t s = 0; s < n; ++s) {
    ConstMapMat<T> dom(dout.plane(s, 0), g.out_c, plane);
    if (dw) {
      const T* xs = x.plane(s, 0);
      if (!direct) im2col(xs, g, col.data());
      ConstMapMat<T> cm(direct ? xs : col.data(), kdim, plane);
      MapMat<T> dwm(dw->ptr(), g.out_c, kdim);
      dwm.noalias() += dom * cm.transpose();
    }
    if (db) {
      for (std::size_t co = 0; co < g.out_c; ++co) {
        const T* row = dout.plane(s, co);
        T acc = 0;
        for (std::size_t i = 0; i < plane; ++i) acc += row[i];
        (*db)[co] += acc;
      }
    }
    if (dx) {
      if (direct) {
        MapMat<T> dxm(dx->plane(s, 0), kdim, plane);
        dxm.noalias() += wm.transpose() * dom;
      } else {
        MapMat<T> dcm(dcol.data(), kdim, plane);
        dcm.noalias() = wm.transpose() * dom;
        col2im(dcol.data(), g, dx->plane(s, 0));
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Stride-2 transposed convolution with a 3x3 kernel.
// weight (in_c, out_c, 3, 3); input (n, in_c, h, w) -> (n, out_c, 2h, 2w).
// Input pixel (i, j) scatters kernel tap (a, b) to output (2i + a, 2j + b);
// taps landing on row 2h or column 2w are cropped. The result is the adjoint
// of the stride-2 convolution y[i, j] = sum_ab x[2i + a, 2j + b] * W[a, b]
// with zero padding past the bottom/right edge.

inline constexpr std::size_t kTransposedKernel = 3;
inline constexpr std::size_t kTransposedStride = 2;

template <typename T>
void check_transposed(const Shape& x, const Shape& wt) {
  if (wt.h != kTransposedKernel || wt.w != kTransposedKernel) {
    throw ShapeError("transposed_conv2d kernel must be 3x3, got " + std::to_string(wt.h) + "x" +
                     std::to_string(wt.w));
  }
  if (wt.n != x.c) {
    throw ShapeError("transposed_conv2d in_channels mismatch: kernel expects " + dims(wt.n, x.c) +
                     " input channels");
  }
}

template <typename T>
Tensor<T> transposed_conv2d_forward(const Tensor<T>& x, const Tensor<T>& weight) {
  check_transposed<T>(x.shape(), weight.shape());
  const auto [n, in_c, h, w] = x.shape();
  const std::size_t out_c = weight.shape().c;
  const std::size_t oh = h * kTransposedStride, ow = w * kTransposedStride;
  const std::size_t taps = out_c * 9;
  Tensor<T> out(Shape{n, out_c, oh, ow});
  ConstMapMat<T> wm(weight.ptr(), in_c, taps);
  RowMat<T> cols(taps, h * w);
  for (std::size_t s = 0; s < n; ++s) {
    ConstMapMat<T> xm(x.plane(s, 0), in_c, h * w);
    cols.noalias() = wm.transpose() * xm;
    for (std::size_t co = 0; co < out_c; ++co) {
      T* op = out.plane(s, co);
      for (std::size_t a = 0; a < 3; ++a) {
        for (std::size_t b = 0; b < 3; ++b) {
          const T* row = cols.data() + (co * 9 + a * 3 + b) * h * w;
          for (std::size_t i = 0; i < h; ++i) {
            const std::size_t oy = 2 * i + a;
            if (oy >= oh) continue;
            for (std::size_t j = 0; j < w; ++j) {
              const std::size_t ox = 2 * j + b;
              if (ox < ow) op[oy * ow + ox] += row[i * w + j];
            }
          }
        }
      }
    }
  }
  return out;
}

template <typename T>
void transposed_conv2d_backward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& dout,
                                Tensor<T>* dx, Tensor<T>* dw) {
  check_transposed<T>(x.shape(), weight.shape());
  const auto [n, in_c, h, w] = x.shape();
  const std::size_t out_c = weight.shape().c;
  const std::size_t oh = h * kTransposedStride, ow = w * kTransposedStride;
  const std::size_t taps = out_c * 9;
  ConstMapMat<T> wm(weight.ptr(), in_c, taps);
  RowMat<T> dcols(taps, h * w);
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t co = 0; co < out_c; ++co) {
      const T* dp = dout.plane(s, co);
      for (std::size_t a = 0; a < 3; ++a) {
        for (std::size_t b = 0; b < 3; ++b) {
          T* row = dcols.data() + (co * 9 + a * 3 + b) * h * w;
          for (std::size_t i = 0; i < h; ++i) {
            const std::size_t oy = 2 * i + a;
            for (std::size_t j = 0; j < w; ++j) {
              const std::size_t ox = 2 * j + b;
              row[i * w + j] = (oy < oh && ox < ow) ? dp[oy * ow + ox] : T{0};
            }
          }
        }
      }
    }
    if (dx) {
      MapMat<T> dxm(dx->plane(s, 0), in_c, h * w);
      dxm.noalias() += wm * dcols;
    }
    if (dw) {
      ConstMapMat<T> xm(x.plane(s, 0), in_c, h * w);
      MapMat<T> dwm(dw->ptr(), in_c, taps);
      dwm.noalias() += xm * dcols.transpose();
    }
  }
}

// ---------------------------------------------------------------------------
// 2x2 non-overlapping max pooling. Odd trailing rows/cols are dropped.
// `argmax` receives, per output element, the flat input index of the first
// maximum in row-major window order.

template <typename T>
Tensor<T> max_pool2x2_forward(const Tensor<T>& x, std::vector<std::size_t>& argmax) {
  const auto [n, c, h, w] = x.shape();
  if (h < 2 || w < 2) {
    throw DegenerateInputError("max_pool2x2 needs h,w >= 2, got " + x.shape().str());
  }
  const std::size_t oh = h / 2, ow = w / 2;
  Tensor<T> out(Shape{n, c, oh, ow});
  argmax.assign(out.numel(), 0);
  std::size_t o = 0;
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t base = x.offset(s, ch, 0, 0);
      for (std::size_t i = 0; i < oh; ++i) {
        for (std::size_t j = 0; j < ow; ++j, ++o) {
          std::size_t best = base + 2 * i * w + 2 * j;
          for (std::size_t cand : {best + 1, best + w, best + w + 1}) {
            if (x[cand] > x[best]) best = cand;
          }
          argmax[o] = best;
          out[o] = x[best];
        }
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Batch normalization with statistics of the current batch over (n, h, w).

template <typename T>
struct BatchNormSaved {
  Tensor<T> normalized;       // x_hat
  std::vector<T> inv_std;     // per channel
};

template <typename T>
Tensor<T> batch_norm_forward(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                             NoDeduce<T> eps, NoDeduce<BatchNormSaved<T>>* saved = nullptr) {
  const auto [n, c, h, w] = x.shape();
  if (gamma.numel() != c || beta.numel() != c) {
    throw ShapeError("batch_norm gamma/beta length must equal channels: " +
                     dims(gamma.numel(), c) + ", " + dims(beta.numel(), c));
  }
  const std::size_t count = n * h * w;
  if (count < 2) {
    throw DegenerateInputError("batch_norm needs more than one value per channel, got shape " +
                               x.shape().str());
  }
  const std::size_t plane = h * w;
  Tensor<T> out(x.shape());
  Tensor<T> xhat(x.shape());
  std::vector<T> inv_std(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double sum = 0;
    for (std::size_t s = 0; s < n; ++s) {
      const T* p = x.plane(s, ch);
      for (std::size_t i = 0; i < plane; ++i) sum += p[i];
    }
    const double mean = sum / static_cast<double>(count);
    double sq = 0;
    for (std::size_t s = 0; s < n; ++s) {
      const T* p = x.plane(s, ch);
      for (std::size_t i = 0; i < plane; ++i) {
        const double d = p[i] - mean;
        sq += d * d;
      }
    }
    const double var = sq / static_cast<double>(count);
    const T istd = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
    inv_std[ch] = istd;
    const T m = static_cast<T>(mean);
    for (std::size_t s = 0; s < n; ++s) {
      const T* p = x.plane(s, ch);
      T* xh = xhat.plane(s, ch);
      T* o = out.plane(s, ch);
      for (std::size_t i = 0; i < plane; ++i) {
        xh[i] = (p[i] - m) * istd;
        o[i] = gamma[ch] * xh[i] + beta[ch];
      }
    }
  }
  if (saved) {
    saved->normalized = std::move(xhat);
    saved->inv_std = std::move(inv_std);
  }
  return out;
}

template <typename T>
void batch_norm_backward(const BatchNormSaved<T>& saved, const Tensor<T>& gamma,
                         const Tensor<T>& dout, Tensor<T>* dx, Tensor<T>* dgamma,
                         Tensor<T>* dbeta) {
  const auto [n, c, h, w] = dout.shape();
  const std::size_t plane = h * w;
  const double count = static_cast<double>(n * plane);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double sum_dy = 0, sum_dy_xhat = 0;
    for (std::size_t s = 0; s < n; ++s) {
      const T* dy = dout.plane(s, ch);
      const T* xh = saved.normalized.plane(s, ch);
      for (std::size_t i = 0; i < plane; ++i) {
        sum_dy += dy[i];
        sum_dy_xhat += dy[i] * xh[i];
      }
    }
    if (dgamma) (*dgamma)[ch] += static_cast<T>(sum_dy_xhat);
    if (dbeta) (*dbeta)[ch] += static_cast<T>(sum_dy);
    if (!dx) continue;
    // dx = gamma * inv_std / M * (M*dy - sum(dy) - x_hat * sum(dy * x_hat))
    const T scale = static_cast<T>(gamma[ch] * saved.inv_std[ch] / count);
    const T sdy = static_cast<T>(sum_dy);
    const T sdyx = static_cast<T>(sum_dy_xhat);
    const T m = static_cast<T>(count);
    for (std::size_t s = 0; s < n; ++s) {
      const T* dy = dout.plane(s, ch);
      const T* xh = saved.normalized.plane(s, ch);
      T* d = dx->plane(s, ch);
      for (std::size_t i = 0; i < plane; ++i) {
        d[i] += scale * (m * dy[i] - sdy - xh[i] * sdyx);
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Inverted dropout mask: each entry is 0 with probability p, else 1/(1-p).

template <typename T>
std::vector<T> dropout_mask(std::size_t count, double p, Rng& rng) {
  std::vector<T> mask(count);
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  for (T& m : mask) m = rng.uniform() < p ? T{0} : keep_scale;
  return mask;
}

// ---------------------------------------------------------------------------
// Softmax over channels and mean cross-entropy over non-void pixels.

template <typename T>
struct SoftmaxCrossEntropy {
  double loss = 0;
  std::size_t counted = 0;  // non-void pixels
  Tensor<T> probabilities;
};

template <typename T>
SoftmaxCrossEntropy<T> softmax_cross_entropy_forward(const Tensor<T>& logits,
                                                     std::span<const std::int32_t> targets,
                                                     std::optional<std::int32_t> void_label) {
  const auto [n, c, h, w] = logits.shape();
  const std::size_t plane = h * w;
  if (targets.size() != n * plane) {
    throw ShapeError("softmax_cross_entropy targets size mismatch: " +
                     dims(targets.size(), n * plane) + " (expected n*h*w)");
  }
  SoftmaxCrossEntropy<T> r;
  r.probabilities = Tensor<T>(logits.shape());
  double total = 0;
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t i = 0; i < plane; ++i) {
      const std::int32_t t = targets[s * plane + i];
      const bool is_void = void_label && t == *void_label;
      if (!is_void && (t < 0 || static_cast<std::size_t>(t) >= c)) {
        throw ShapeError("target class " + std::to_string(t) + " outside [0," + std::to_string(c) +
                         ") and not the void label");
      }
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t ch = 0; ch < c; ++ch) mx = std::max(mx, logits.plane(s, ch)[i]);
      double z = 0;
      for (std::size_t ch = 0; ch < c; ++ch) z += std::exp(static_cast<double>(logits.plane(s, ch)[i] - mx));
      for (std::size_t ch = 0; ch < c; ++ch) {
        r.probabilities.plane(s, ch)[i] =
            static_cast<T>(std::exp(static_cast<double>(logits.plane(s, ch)[i] - mx)) / z);
      }
      if (is_void) continue;
      // -log p[t] = log z - (logit_t - max)
      total += std::log(z) - static_cast<double>(logits.plane(s, static_cast<std::size_t>(t))[i] - mx);
      ++r.counted;
    }
  }
  r.loss = r.counted ? total / static_cast<double>(r.counted) : 0.0;
  return r;
}

}  // namespace fcdn::kernels
