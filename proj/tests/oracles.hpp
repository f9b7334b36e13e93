#pragma once

// Brute-force reference implementations used only by tests. They share no
// code with the kernels they check.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <vector>

#include "fcdn/rng.hpp"
#include "fcdn/tensor.hpp"

namespace fcdn::oracle {

template <typename T>
Tensor<T> random_tensor(Shape s, Rng& rng, double lo = -1, double hi = 1) {
  Tensor<T> t(s);
  for (auto& v : t.data()) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

// Six nested loops (plus the batch loop), zero padding `pad`.
inline Tensor<double> conv2d(const Tensor<double>& x, const Tensor<double>& wt, const std::vector<double>& bias,
                             long pad) {
  const auto xs = x.shape();
  const auto ws = wt.shape();
  const long oh = static_cast<long>(xs.h) + 2 * pad - static_cast<long>(ws.h) + 1;
  const long ow = static_cast<long>(xs.w) + 2 * pad - static_cast<long>(ws.w) + 1;
  Tensor<double> out(Shape{xs.n, ws.n, static_cast<std::size_t>(oh), static_cast<std::size_t>(ow)});
  for (std::size_t n = 0; n < xs.n; ++n)
    for (std::size_t co = 0; co < ws.n; ++co)
      for (long y = 0; y < oh; ++y)
        for (long xx = 0; xx < ow; ++xx) {
          double acc = bias.empty() ? 0.0 : bias[co];
          for (std::size_t ci = 0; ci < xs.c; ++ci)
            for (std::size_t a = 0; a < ws.h; ++a)
              for (std::size_t b = 0; b < ws.w; ++b) {
                const long iy = y + static_cast<long>(a) - pad, ix = xx + static_cast<long>(b) - pad;
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(xs.h) || ix >= static_cast<long>(xs.w)) continue;
                acc += x.at(n, ci, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix)) * wt.at(co, ci, a, b);
              }
          out.at(n, co, static_cast<std::size_t>(y), static_cast<std::size_t>(xx)) = acc;
        }
  return out;
}

// Stride-2 3x3 convolution y[i,j] = sum x[2i+a, 2j+b] * W[ci, co, a, b] mapping
// (n, out_c, 2h, 2w) -> (n, in_c, h, w); taps beyond the edge read zero. This
// is the forward operator whose adjoint the transposed convolution must be.
inline Tensor<double> strided_conv_s2(const Tensor<double>& u, const Tensor<double>& wt) {
  const auto us = u.shape();
  const auto ws = wt.shape();  // (in_c, out_c, 3, 3)
  const std::size_t h = us.h / 2, w = us.w / 2;
  Tensor<double> out(Shape{us.n, ws.n, h, w});
  for (std::size_t n = 0; n < us.n; ++n)
    for (std::size_t ci = 0; ci < ws.n; ++ci)
      for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < w; ++j) {
          double acc = 0;
          for (std::size_t co = 0; co < ws.c; ++co)
            for (std::size_t a = 0; a < 3; ++a)
              for (std::size_t b = 0; b < 3; ++b) {
                const std::size_t y = 2 * i + a, x = 2 * j + b;
                if (y < us.h && x < us.w) acc += u.at(n, co, y, x) * wt.at(ci, co, a, b);
              }
          out.at(n, ci, i, j) = acc;
        }
  return out;
}

inline double inner(const Tensor<double>& a, const Tensor<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += a[i] * b[i];
  return s;
}

inline Tensor<double> windowed_max(const Tensor<double>& x) {
  const auto s = x.shape();
  Tensor<double> out(Shape{s.n, s.c, s.h / 2, s.w / 2});
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c)
      for (std::size_t i = 0; i < s.h / 2; ++i)
        for (std::size_t j = 0; j < s.w / 2; ++j)
          out.at(n, c, i, j) = std::max({x.at(n, c, 2 * i, 2 * j), x.at(n, c, 2 * i, 2 * j + 1),
                                         x.at(n, c, 2 * i + 1, 2 * j), x.at(n, c, 2 * i + 1, 2 * j + 1)});
  return out;
}

// Direct per-pixel counts for IoU: |o==c & y==c| and |o==c | y==c|.
struct PixelCounts {
  std::vector<std::uint64_t> inter, uni;
  std::uint64_t correct = 0, labelled = 0;
};

inline PixelCounts count_pixels(const std::vector<std::int32_t>& pred, const std::vector<std::int32_t>& target,
                                std::size_t n_classes, std::optional<std::int32_t> void_label) {
  PixelCounts pc{std::vector<std::uint64_t>(n_classes, 0), std::vector<std::uint64_t>(n_classes, 0), 0, 0};
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (void_label && target[i] == *void_label) continue;
    ++pc.labelled;
    if (pred[i] == target[i]) ++pc.correct;
    for (std::size_t c = 0; c < n_classes; ++c) {
      const bool o = pred[i] == static_cast<std::int32_t>(c), y = target[i] == static_cast<std::int32_t>(c);
      if (o && y) ++pc.inter[c];
      if (o || y) ++pc.uni[c];
    }
  }
  return pc;
}

}  // namespace fcdn::oracle
