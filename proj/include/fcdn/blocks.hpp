#pragma once

// Dense layer, dense block, transition down and transition up.

#include <cstddef>
#include <string>
#include <vector>

#include "fcdn/graph.hpp"
#include "fcdn/ops.hpp"

namespace fcdn {

// Scale/shift pair of one batch-norm layer, shaped (1, c, 1, 1).
template <typename T>
struct BatchNormParams {
  Parameter<T> scale;
  Parameter<T> shift;

  BatchNormParams() = default;
  BatchNormParams(const std::string& name, std::size_t channels)
      : scale(name + ".bn.scale", ParamRole::bn_scale, Shape{1, channels, 1, 1}),
        shift(name + ".bn.shift", ParamRole::bn_shift, Shape{1, channels, 1, 1}) {
    scale.value.fill(T{1});
  }

  std::size_t channels() const { return scale.value.numel(); }
};

template <typename T>
Var apply_batch_norm(Graph<T>& g, Var x, BatchNormParams<T>& bn) {
  return batch_norm(g, x, g.param(bn.scale), g.param(bn.shift));
}

// BN -> ReLU -> 3x3 same conv (no bias) -> dropout; emits `growth` maps.
template <typename T>
struct DenseLayerParams {
  BatchNormParams<T> bn;
  Parameter<T> conv;  // (growth, in_channels, 3, 3)
  double dropout = 0.2;

  DenseLayerParams() = default;
  DenseLayerParams(const std::string& name, std::size_t in_channels, std::size_t growth,
                   double dropout_p)
      : bn(name, in_channels),
        conv(name + ".conv.weight", ParamRole::conv_weight, Shape{growth, in_channels, 3, 3}),
        dropout(dropout_p) {}

  std::size_t in_channels() const { return conv.value.shape().c; }
  std::size_t growth() const { return conv.value.shape().n; }
};

template <typename T>
struct DenseBlockParams {
  std::vector<DenseLayerParams<T>> layers;
  bool concat_input = true;
  std::size_t in_channels = 0;
  std::size_t growth = 0;

  DenseBlockParams() = default;
  // Layer i reads in_channels + i * growth maps.
  DenseBlockParams(const std::string& name, std::size_t in_channels_, std::size_t n_layers,
                   std::size_t growth_, bool concat_input_, double dropout_p)
      : concat_input(concat_input_), in_channels(in_channels_), growth(growth_) {
    layers.reserve(n_layers);
    for (std::size_t i = 0; i < n_layers; ++i) {
      layers.emplace_back(name + ".layer" + std::to_string(i), in_channels + i * growth, growth,
                          dropout_p);
    }
  }

  std::size_t new_channels() const { return layers.size() * growth; }
  std::size_t out_channels() const { return (concat_input ? in_channels : 0) + new_channels(); }
};

// BN -> ReLU -> 1x1 conv (m -> m, no bias) -> dropout -> 2x2 max pool.
template <typename T>
struct TransitionDownParams {
  BatchNormParams<T> bn;
  Parameter<T> conv;  // (m, m, 1, 1)
  double dropout = 0.2;

  TransitionDownParams() = default;
  TransitionDownParams(const std::string& name, std::size_t channels, double dropout_p)
      : bn(name, channels),
        conv(name + ".conv.weight", ParamRole::conv_weight, Shape{channels, channels, 1, 1}),
        dropout(dropout_p) {}
};

// Stride-2 3x3 transposed conv that keeps the channel count.
template <typename T>
struct TransitionUpParams {
  Parameter<T> conv;  // (c, c, 3, 3)

  TransitionUpParams() = default;
  TransitionUpParams(const std::string& name, std::size_t channels)
      : conv(name + ".tconv.weight", ParamRole::conv_weight, Shape{channels, channels, 3, 3}) {}
};

inline void expect_channels(const char* what, std::size_t expected, std::size_t got) {
  if (expected != got) {
    throw ShapeError(std::string(what) + " expects " + std::to_string(expected) +
                     " input channels, got " + std::to_string(got));
  }
}

template <typename T>
Var dense_layer_forward(Graph<T>& g, Var x, DenseLayerParams<T>& p, Mode mode, Rng& rng) {
  expect_channels("dense layer", p.in_channels(), g.shape(x).c);
  Var h = apply_batch_norm(g, x, p.bn);
  h = relu(g, h);
  h = conv2d(g, h, g.param(p.conv), std::nullopt, Padding::same);
  return dropout(g, h, p.dropout, mode, rng);
}

// Layer i consumes [x, y_0, ..., y_{i-1}]. Returns [y_0, ..., y_{n-1}], with x
// prepended when concat_input is set.
template <typename T>
Var dense_block_forward(Graph<T>& g, Var x, DenseBlockParams<T>& p, Mode mode, Rng& rng) {
  expect_channels("dense block", p.in_channels, g.shape(x).c);
  Var stack = x;
  Var fresh;
  for (auto& layer : p.layers) {
    Var y = dense_layer_forward(g, stack, layer, mode, rng);
    stack = concat_channels(g, stack, y);
    fresh = fresh.valid() ? concat_channels(g, fresh, y) : y;
  }
  if (p.concat_input) return stack;
  return fresh;
}

template <typename T>
Var transition_down(Graph<T>& g, Var x, TransitionDownParams<T>& p, Mode mode, Rng& rng) {
  expect_channels("transition down", p.conv.value.shape().c, g.shape(x).c);
  const Shape& s = g.shape(x);
  if (s.h < 2 || s.w < 2) {
    throw DegenerateInputError("transition down needs h,w >= 2, got " + s.str());
  }
  Var h = apply_batch_norm(g, x, p.bn);
  h = relu(g, h);
  h = conv2d(g, h, g.param(p.conv), std::nullopt, Padding::none);
  h = dropout(g, h, p.dropout, mode, rng);
  return max_pool2x2(g, h);
}

// Upsamples only the preceding block's new maps, crops to the skip's (h, w)
// and stacks [upsampled, skip].
template <typename T>
Var transition_up(Graph<T>& g, Var block_out, Var skip, TransitionUpParams<T>& p) {
  expect_channels("transition up", p.conv.value.shape().n, g.shape(block_out).c);
  Var up = transposed_conv2d(g, block_out, g.param(p.conv));
  const Shape& ss = g.shape(skip);
  up = crop_center(g, up, ss.h, ss.w);
  return concat_channels(g, up, skip);
}

}  // namespace fcdn
