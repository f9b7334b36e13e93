#pragma once

// Differentiable ops recorded on a Graph.

#include <cstddef>
#include <cstdint>
#include <cstring>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fcdn/graph.hpp"
#include "fcdn/kernels.hpp"
#include "fcdn/rng.hpp"

namespace fcdn {

enum class Padding { same, none };
enum class Mode { train, eval };

inline constexpr double kBatchNormEps = 1e-5;

template <typename T>
Var conv2d(Graph<T>& g, Var x, Var weight, std::optional<Var> bias, Padding padding) {
  const Shape& ws = g.shape(weight);
  const std::size_t pad = padding == Padding::same ? ws.h / 2 : 0;
  const Tensor<T>* b = bias ? &g.value(*bias) : nullptr;
  Tensor<T> out = kernels::conv2d_forward(g.value(x), g.value(weight), b, pad);
  return g.record("conv2d", std::move(out), {x, weight, bias.value_or(Var{})},
                  [x, weight, bias, pad](Graph<T>& gr, const Tensor<T>& dout) {
                    Tensor<T>* dx = gr.requires_grad(x) ? &gr.grad(x) : nullptr;
                    Tensor<T>* dw = gr.requires_grad(weight) ? &gr.grad(weight) : nullptr;
                    Tensor<T>* db = bias && gr.requires_grad(*bias) ? &gr.grad(*bias) : nullptr;
                    kernels::conv2d_backward(gr.value(x), gr.value(weight), pad, dout, dx, dw, db);
                  });
}

template <typename T>
Var transposed_conv2d(Graph<T>& g, Var x, Var weight) {
  Tensor<T> out = kernels::transposed_conv2d_forward(g.value(x), g.value(weight));
  return g.record("transposed_conv2d", std::move(out), {x, weight},
                  [x, weight](Graph<T>& gr, const Tensor<T>& dout) {
                    Tensor<T>* dx = gr.requires_grad(x) ? &gr.grad(x) : nullptr;
                    Tensor<T>* dw = gr.requires_grad(weight) ? &gr.grad(weight) : nullptr;
                    kernels::transposed_conv2d_backward(gr.value(x), gr.value(weight), dout, dx, dw);
                  });
}

template <typename T>
Var max_pool2x2(Graph<T>& g, Var x) {
  auto argmax = std::make_shared<std::vector<std::size_t>>();
  Tensor<T> out = kernels::max_pool2x2_forward(g.value(x), *argmax);
  return g.record("max_pool2x2", std::move(out), {x},
                  [x, argmax](Graph<T>& gr, const Tensor<T>& dout) {
                    Tensor<T>& dx = gr.grad(x);
                    for (std::size_t i = 0; i < argmax->size(); ++i) dx[(*argmax)[i]] += dout[i];
                  });
}

// gamma/beta have shape (1, c, 1, 1). Always normalizes with the statistics of
// the batch being processed.
template <typename T>
Var batch_norm(Graph<T>& g, Var x, Var gamma, Var beta, double eps = kBatchNormEps) {
  auto saved = std::make_shared<kernels::BatchNormSaved<T>>();
  Tensor<T> out = kernels::batch_norm_forward(g.value(x), g.value(gamma), g.value(beta),
                                              static_cast<T>(eps), saved.get());
  return g.record("batch_norm", std::move(out), {x, gamma, beta},
                  [x, gamma, beta, saved](Graph<T>& gr, const Tensor<T>& dout) {
                    Tensor<T>* dx = gr.requires_grad(x) ? &gr.grad(x) : nullptr;
                    Tensor<T>* dg = gr.requires_grad(gamma) ? &gr.grad(gamma) : nullptr;
                    Tensor<T>* db = gr.requires_grad(beta) ? &gr.grad(beta) : nullptr;
                    kernels::batch_norm_backward(*saved, gr.value(gamma), dout, dx, dg, db);
                  });
}

template <typename T>
Var relu(Graph<T>& g, Var x) {
  const Tensor<T>& in = g.value(x);
  Tensor<T> out(in.shape());
  for (std::size_t i = 0; i < in.numel(); ++i) out[i] = in[i] > T{0} ? in[i] : T{0};
  return g.record("relu", std::move(out), {x}, [x](Graph<T>& gr, const Tensor<T>& dout) {
    const Tensor<T>& in = gr.value(x);
    Tensor<T>& dx = gr.grad(x);
    for (std::size_t i = 0; i < in.numel(); ++i) {
      if (in[i] > T{0}) dx[i] += dout[i];
    }
  });
}

// Inverted dropout. Identity in eval mode or when p == 0.
template <typename T>
Var dropout(Graph<T>& g, Var x, double p, Mode mode, Rng& rng) {
  if (mode == Mode::eval || p <= 0.0) return x;
  if (p >= 1.0) throw ConfigError(0, "dropout probability must be < 1, got " + std::to_string(p));
  const Tensor<T>& in = g.value(x);
  auto mask = std::make_shared<std::vector<T>>(kernels::dropout_mask<T>(in.numel(), p, rng));
  Tensor<T> out(in.shape());
  for (std::size_t i = 0; i < in.numel(); ++i) out[i] = in[i] * (*mask)[i];
  return g.record("dropout", std::move(out), {x}, [x, mask](Graph<T>& gr, const Tensor<T>& dout) {
    Tensor<T>& dx = gr.grad(x);
    for (std::size_t i = 0; i < dout.numel(); ++i) dx[i] += dout[i] * (*mask)[i];
  });
}

// Channel concatenation; a's channels come first.
template <typename T>
Var concat_channels(Graph<T>& g, Var a, Var b) {
  const Tensor<T>& ta = g.value(a);
  const Tensor<T>& tb = g.value(b);
  const Shape sa = ta.shape(), sb = tb.shape();
  if (sa.n != sb.n || sa.h != sb.h || sa.w != sb.w) {
    throw ShapeError("concat_channels needs equal (n,h,w): " + sa.str() + " vs " + sb.str());
  }
  Tensor<T> out(Shape{sa.n, sa.c + sb.c, sa.h, sa.w});
  const std::size_t la = sa.c * sa.plane(), lb = sb.c * sb.plane();
  for (std::size_t s = 0; s < sa.n; ++s) {
    std::memcpy(out.plane(s, 0), ta.plane(s, 0), la * sizeof(T));
    std::memcpy(out.plane(s, sa.c), tb.plane(s, 0), lb * sizeof(T));
  }
  return g.record("concat_channels", std::move(out), {a, b},
                  [a, b, sa, la, lb](Graph<T>& gr, const Tensor<T>& dout) {
                    const bool ga = gr.requires_grad(a), gb = gr.requires_grad(b);
                    for (std::size_t s = 0; s < sa.n; ++s) {
                      const T* src = dout.plane(s, 0);
                      if (ga) {
                        T* d = gr.grad(a).plane(s, 0);
                        for (std::size_t i = 0; i < la; ++i) d[i] += src[i];
                      }
                      if (gb) {
                        T* d = gr.grad(b).plane(s, 0);
                        for (std::size_t i = 0; i < lb; ++i) d[i] += src[la + i];
                      }
                    }
                  });
}

// Channels [begin, begin + count).
template <typename T>
Var slice_channels(Graph<T>& g, Var x, std::size_t begin, std::size_t count) {
  const Tensor<T>& in = g.value(x);
  const Shape s = in.shape();
  if (count == 0 || begin + count > s.c) {
    throw ShapeError("slice_channels [" + std::to_string(begin) + "," + std::to_string(begin + count) +
                     ") out of range for " + std::to_string(s.c) + " channels");
  }
  Tensor<T> out(Shape{s.n, count, s.h, s.w});
  const std::size_t len = count * s.plane();
  for (std::size_t n = 0; n < s.n; ++n) std::memcpy(out.plane(n, 0), in.plane(n, begin), len * sizeof(T));
  return g.record("slice_channels", std::move(out), {x},
                  [x, begin, len, s](Graph<T>& gr, const Tensor<T>& dout) {
                    Tensor<T>& dx = gr.grad(x);
                    for (std::size_t n = 0; n < s.n; ++n) {
                      T* d = dx.plane(n, begin);
                      const T* src = dout.plane(n, 0);
                      for (std::size_t i = 0; i < len; ++i) d[i] += src[i];
                    }
                  });
}

// Center crop to (h, w); the odd leftover row/col is taken from the bottom/right.
template <typename T>
Var crop_center(Graph<T>& g, Var x, std::size_t h, std::size_t w) {
  const Tensor<T>& in = g.value(x);
  const Shape s = in.shape();
  if (h > s.h || w > s.w) {
    throw DegenerateInputError("cannot crop " + s.str() + " to " + std::to_string(h) + "x" +
                               std::to_string(w));
  }
  if (h == s.h && w == s.w) return x;
  const std::size_t top = (s.h - h) / 2, left = (s.w - w) / 2;
  Tensor<T> out(Shape{s.n, s.c, h, w});
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c)
      for (std::size_t i = 0; i < h; ++i)
        std::memcpy(&out.at(n, c, i, 0), &in.at(n, c, top + i, left), w * sizeof(T));
  return g.record("crop_center", std::move(out), {x},
                  [x, top, left, h, w, s](Graph<T>& gr, const Tensor<T>& dout) {
                    Tensor<T>& dx = gr.grad(x);
                    for (std::size_t n = 0; n < s.n; ++n)
                      for (std::size_t c = 0; c < s.c; ++c)
                        for (std::size_t i = 0; i < h; ++i)
                          for (std::size_t j = 0; j < w; ++j)
                            dx.at(n, c, top + i, left + j) += dout.at(n, c, i, j);
                  });
}

// Scalar sum of all elements.
template <typename T>
Var sum(Graph<T>& g, Var x) {
  const Tensor<T>& in = g.value(x);
  double total = 0;
  for (T v : in.data()) total += v;
  return g.record("sum", Tensor<T>(Shape{}, static_cast<T>(total)), {x},
                  [x](Graph<T>& gr, const Tensor<T>& dout) {
                    Tensor<T>& dx = gr.grad(x);
                    for (T& v : dx.data()) v += dout[0];
                  });
}

// Scalar sum(x * weights); a generic probe loss for gradient checks.
template <typename T>
Var weighted_sum(Graph<T>& g, Var x, Tensor<T> weights) {
  const Tensor<T>& in = g.value(x);
  if (in.shape() != weights.shape()) {
    throw ShapeError("weighted_sum shape mismatch: " + in.shape().str() + " vs " + weights.shape().str());
  }
  double total = 0;
  for (std::size_t i = 0; i < in.numel(); ++i) total += static_cast<double>(in[i]) * weights[i];
  auto wp = std::make_shared<Tensor<T>>(std::move(weights));
  return g.record("weighted_sum", Tensor<T>(Shape{}, static_cast<T>(total)), {x},
                  [x, wp](Graph<T>& gr, const Tensor<T>& dout) {
                    Tensor<T>& dx = gr.grad(x);
                    for (std::size_t i = 0; i < dx.numel(); ++i) dx[i] += dout[0] * (*wp)[i];
                  });
}

template <typename T>
struct CrossEntropy {
  Var loss;
  Tensor<T> probabilities;
  std::size_t counted = 0;
};

// Mean pixel-wise cross-entropy of softmax(logits) over non-void pixels.
// targets holds n*h*w class indices in (n, h, w) order.
template <typename T>
CrossEntropy<T> softmax_cross_entropy(Graph<T>& g, Var logits, std::span<const std::int32_t> targets,
                                      std::optional<std::int32_t> void_label) {
  auto fwd = kernels::softmax_cross_entropy_forward(g.value(logits), targets, void_label);
  auto probs = std::make_shared<Tensor<T>>(fwd.probabilities);
  auto tgt = std::make_shared<std::vector<std::int32_t>>(targets.begin(), targets.end());
  const std::size_t counted = fwd.counted;
  Var loss = g.record(
      "softmax_cross_entropy", Tensor<T>(Shape{}, static_cast<T>(fwd.loss)), {logits},
      [logits, probs, tgt, void_label, counted](Graph<T>& gr, const Tensor<T>& dout) {
        if (counted == 0) return;
        Tensor<T>& dx = gr.grad(logits);
        const auto [n, c, h, w] = probs->shape();
        const std::size_t plane = h * w;
        const T scale = dout[0] / static_cast<T>(counted);
        for (std::size_t s = 0; s < n; ++s) {
          for (std::size_t i = 0; i < plane; ++i) {
            const std::int32_t t = (*tgt)[s * plane + i];
            if (void_label && t == *void_label) continue;
            for (std::size_t ch = 0; ch < c; ++ch) {
              const T onehot = static_cast<std::int32_t>(ch) == t ? T{1} : T{0};
              dx.plane(s, ch)[i] += scale * (probs->plane(s, ch)[i] - onehot);
            }
          }
        }
      });
  return {loss, std::move(fwd.probabilities), counted};
}

}  // namespace fcdn
