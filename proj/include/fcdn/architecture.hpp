#pragma once

// FC-DenseNet configuration, symbolic accounting and the executable network.

#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "fcdn/blocks.hpp"
#include "fcdn/errors.hpp"
#include "fcdn/graph.hpp"
#include "fcdn/ops.hpp"
#include "fcdn/rng.hpp"

namespace fcdn {

struct ArchConfig {
  std::size_t in_channels = 3;
  std::size_t first_conv_maps = 48;
  std::size_t growth_rate = 16;
  std::vector<std::size_t> down_blocks;
  std::size_t bottleneck_layers = 0;
  std::vector<std::size_t> up_blocks;
  std::size_t n_classes = 11;
  double dropout = 0.2;

  std::size_t depth() const noexcept { return down_blocks.size(); }
  // Spatial dims of network inputs must be multiples of this.
  std::size_t size_multiple() const noexcept { return std::size_t{1} << depth(); }

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError(0, "invalid architecture: " + m); };
    if (down_blocks.empty()) fail("at least one down block is required");
    if (up_blocks.size() != down_blocks.size()) {
      fail("up_blocks has " + std::to_string(up_blocks.size()) + " entries, down_blocks has " +
           std::to_string(down_blocks.size()));
    }
    for (auto n : down_blocks)
      if (n == 0) fail("down block layer counts must be >= 1");
    for (auto n : up_blocks)
      if (n == 0) fail("up block layer counts must be >= 1");
    if (bottleneck_layers == 0) fail("bottleneck_layers must be >= 1");
    if (in_channels == 0 || first_conv_maps == 0 || growth_rate == 0 || n_classes == 0) {
      fail("in_channels, first_conv_maps, growth_rate and n_classes must be >= 1");
    }
    if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must be in [0, 1)");
  }

  bool operator==(const ArchConfig&) const = default;
};

namespace presets {

inline ArchConfig fc_densenet103(std::size_t n_classes = 11) {
  return {3, 48, 16, {4, 5, 7, 10, 12}, 15, {12, 10, 7, 5, 4}, n_classes, 0.2};
}
inline ArchConfig fc_densenet67(std::size_t n_classes = 11) {
  return {3, 48, 16, {5, 5, 5, 5, 5}, 5, {5, 5, 5, 5, 5}, n_classes, 0.2};
}
inline ArchConfig fc_densenet56(std::size_t n_classes = 11) {
  return {3, 48, 12, {4, 4, 4, 4, 4}, 4, {4, 4, 4, 4, 4}, n_classes, 0.2};
}
// Two-level network used for the CPU convergence runs.
inline ArchConfig fc_densenet_tiny(std::size_t n_classes = 3) {
  return {3, 16, 8, {2, 2}, 2, {2, 2}, n_classes, 0.2};
}

inline const std::vector<std::string>& names() {
  static const std::vector<std::string> all = {"fc-densenet56", "fc-densenet67", "fc-densenet103",
                                               "fc-densenet-tiny"};
  return all;
}

inline std::optional<ArchConfig> by_name(const std::string& name) {
  if (name == "fc-densenet103") return fc_densenet103();
  if (name == "fc-densenet67") return fc_densenet67();
  if (name == "fc-densenet56") return fc_densenet56();
  if (name == "fc-densenet-tiny") return fc_densenet_tiny();
  return std::nullopt;
}

}  // namespace presets

// ---------------------------------------------------------------------------
// Accounting

inline std::size_t conv_params(std::size_t in, std::size_t out, std::size_t k, bool bias) {
  return in * out * k * k + (bias ? out : 0);
}

inline std::size_t batch_norm_params(std::size_t channels) { return 2 * channels; }

// Each dense layer carries a BN over its input and a bias-free 3x3 conv.
inline std::size_t dense_block_params(std::size_t in, std::size_t n_layers, std::size_t k) {
  std::size_t total = 0;
  for (std::size_t i = 0; i < n_layers; ++i) {
    const std::size_t cin = in + i * k;
    total += batch_norm_params(cin) + conv_params(cin, k, 3, false);
  }
  return total;
}

struct StageInfo {
  std::string name;
  std::size_t m = 0;  // feature maps at the end of the stage
  std::size_t params = 0;
  std::size_t conv_layers = 0;
};

struct ConvLayerCount {
  std::size_t first = 0;
  std::size_t down = 0;
  std::size_t bottleneck = 0;
  std::size_t up = 0;
  std::size_t transition_down = 0;
  std::size_t transition_up = 0;
  std::size_t classifier = 0;

  std::size_t total() const {
    return first + down + bottleneck + up + transition_down + transition_up + classifier;
  }
};

struct ArchSummary {
  std::vector<StageInfo> stages;  // first conv, down stages, bottleneck, up stages, classifier
  std::vector<std::size_t> m;     // every stage except the classifier
  std::size_t total_params = 0;
  ConvLayerCount conv_layers;
  std::size_t pre_softmax_maps = 0;
};

// Widths seen by one upsampling dense block.
struct UpBlockWidths {
  std::size_t input = 0;   // TU output + skip
  std::size_t output = 0;  // what the block hands to the next TU
  std::size_t m = 0;       // input + new maps
};

// How the upsampling path treats a block's input. `naive_full_concat` is the
// counterfactual in which up blocks concatenate their input like down blocks
// and the TU upsamples everything stacked so far.
enum class UpsamplingRule { new_maps_only, naive_full_concat };

inline std::vector<std::size_t> skip_widths(const ArchConfig& cfg) {
  std::vector<std::size_t> skips;
  std::size_t m = cfg.first_conv_maps;
  for (auto n : cfg.down_blocks) {
    m += n * cfg.growth_rate;
    skips.push_back(m);
  }
  return skips;
}

inline std::vector<UpBlockWidths> upsampling_widths(const ArchConfig& cfg,
                                                    UpsamplingRule rule = UpsamplingRule::new_maps_only) {
  cfg.validate();
  const std::size_t k = cfg.growth_rate;
  const auto skips = skip_widths(cfg);
  const std::size_t bottleneck_new = cfg.bottleneck_layers * k;
  std::size_t carried = rule == UpsamplingRule::new_maps_only ? bottleneck_new
                                                              : skips.back() + bottleneck_new;
  std::vector<UpBlockWidths> out;
  for (std::size_t i = 0; i < cfg.up_blocks.size(); ++i) {
    UpBlockWidths w;
    w.input = carried + skips[skips.size() - 1 - i];
    w.m = w.input + cfg.up_blocks[i] * k;
    w.output = rule == UpsamplingRule::new_maps_only ? cfg.up_blocks[i] * k : w.m;
    carried = w.output;
    out.push_back(w);
  }
  return out;
}

inline std::vector<std::size_t> channel_schedule(const ArchConfig& cfg) {
  cfg.validate();
  std::vector<std::size_t> m{cfg.first_conv_maps};
  for (auto s : skip_widths(cfg)) m.push_back(s);
  m.push_back(m.back() + cfg.bottleneck_layers * cfg.growth_rate);
  for (const auto& w : upsampling_widths(cfg)) m.push_back(w.m);
  return m;
}

inline ConvLayerCount conv_layer_count(const ArchConfig& cfg) {
  cfg.validate();
  ConvLayerCount c;
  c.first = 1;
  for (auto n : cfg.down_blocks) c.down += n;
  c.bottleneck = cfg.bottleneck_layers;
  for (auto n : cfg.up_blocks) c.up += n;
  c.transition_down = cfg.down_blocks.size();
  c.transition_up = cfg.up_blocks.size();
  c.classifier = 1;
  return c;
}

inline ArchSummary summarize(const ArchConfig& cfg) {
  cfg.validate();
  const std::size_t k = cfg.growth_rate;
  ArchSummary s;
  s.conv_layers = conv_layer_count(cfg);

  auto add = [&s](std::string name, std::size_t m, std::size_t params, std::size_t convs) {
    s.stages.push_back({std::move(name), m, params, convs});
    s.total_params += params;
  };
  std::size_t m = cfg.first_conv_maps;
  add("3x3 conv", m, conv_params(cfg.in_channels, m, 3, true), 1);
  for (auto n : cfg.down_blocks) {
    const std::size_t db = dense_block_params(m, n, k);
    m += n * k;
    const std::size_t td = batch_norm_params(m) + conv_params(m, m, 1, false);
    add("DB (" + std::to_string(n) + " layers) + TD", m, db + td, n + 1);
  }
  add("DB (" + std::to_string(cfg.bottleneck_layers) + " layers)", m + cfg.bottleneck_layers * k,
      dense_block_params(m, cfg.bottleneck_layers, k), cfg.bottleneck_layers);
  std::size_t carried = cfg.bottleneck_layers * k;
  const auto widths = upsampling_widths(cfg);
  for (std::size_t i = 0; i < widths.size(); ++i) {
    const std::size_t n = cfg.up_blocks[i];
    const std::size_t tu = conv_params(carried, carried, 3, false);
    add("TU + DB (" + std::to_string(n) + " layers)", widths[i].m,
        tu + dense_block_params(widths[i].input, n, k), n + 1);
    carried = widths[i].output;
  }
  s.pre_softmax_maps = widths.back().m;
  add("1x1 conv", cfg.n_classes, conv_params(s.pre_softmax_maps, cfg.n_classes, 1, true), 1);
  for (std::size_t i = 0; i + 1 < s.stages.size(); ++i) s.m.push_back(s.stages[i].m);
  return s;
}

inline std::size_t parameter_count(const ArchConfig& cfg) { return summarize(cfg).total_params; }

inline double he_uniform_bound(std::size_t fan_in) {
  return std::sqrt(6.0 / static_cast<double>(fan_in));
}

// ---------------------------------------------------------------------------
// Executable network

template <typename T>
class Network {
 public:
  explicit Network(ArchConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    const std::size_t k = cfg_.growth_rate;
    const double p = cfg_.dropout;
    first_conv_ = Parameter<T>("first.conv.weight", ParamRole::conv_weight,
                               Shape{cfg_.first_conv_maps, cfg_.in_channels, 3, 3});
    first_bias_ = Parameter<T>("first.conv.bias", ParamRole::bias, Shape{1, cfg_.first_conv_maps, 1, 1});
    std::size_t m = cfg_.first_conv_maps;
    for (std::size_t i = 0; i < cfg_.down_blocks.size(); ++i) {
      const std::string tag = "down" + std::to_string(i);
      down_.emplace_back(tag + ".db", m, cfg_.down_blocks[i], k, true, p);
      m = down_.back().out_channels();
      td_.emplace_back(tag + ".td", m, p);
    }
    bottleneck_ = DenseBlockParams<T>("bottleneck.db", m, cfg_.bottleneck_layers, k, false, p);
    std::size_t carried = bottleneck_.new_channels();
    const auto widths = upsampling_widths(cfg_);
    for (std::size_t i = 0; i < cfg_.up_blocks.size(); ++i) {
      const std::string tag = "up" + std::to_string(i);
      tu_.emplace_back(tag + ".tu", carried);
      up_.emplace_back(tag + ".db", widths[i].input, cfg_.up_blocks[i], k, false, p);
      carried = up_.back().new_channels();
    }
    const std::size_t pre = widths.back().m;
    classifier_ = Parameter<T>("classifier.conv.weight", ParamRole::conv_weight,
                               Shape{cfg_.n_classes, pre, 1, 1});
    classifier_bias_ = Parameter<T>("classifier.conv.bias", ParamRole::bias, Shape{1, cfg_.n_classes, 1, 1});
  }

  Network(const Network&) = delete;
  Network& operator=(const Network&) = delete;
  Network(Network&&) = default;
  Network& operator=(Network&&) = default;

  const ArchConfig& config() const noexcept { return cfg_; }

  // Every trainable tensor, in a fixed order (used for checkpoints).
  std::vector<Parameter<T>*> parameters() {
    std::vector<Parameter<T>*> out{&first_conv_, &first_bias_};
    auto add_bn = [&out](BatchNormParams<T>& bn) {
      out.push_back(&bn.scale);
      out.push_back(&bn.shift);
    };
    auto add_block = [&](DenseBlockParams<T>& b) {
      for (auto& l : b.layers) {
        add_bn(l.bn);
        out.push_back(&l.conv);
      }
    };
    for (std::size_t i = 0; i < down_.size(); ++i) {
      add_block(down_[i]);
      add_bn(td_[i].bn);
      out.push_back(&td_[i].conv);
    }
    add_block(bottleneck_);
    for (std::size_t i = 0; i < up_.size(); ++i) {
      out.push_back(&tu_[i].conv);
      add_block(up_[i]);
    }
    out.push_back(&classifier_);
    out.push_back(&classifier_bias_);
    return out;
  }

  std::vector<const Parameter<T>*> parameters() const {
    auto ps = const_cast<Network*>(this)->parameters();
    return {ps.begin(), ps.end()};
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto* p : parameters()) n += p->value.numel();
    return n;
  }

  // Convolution kernels actually instantiated (3x3, 1x1 and transposed).
  std::size_t conv_layer_count() const {
    std::size_t n = 0;
    for (const auto* p : parameters())
      if (p->role == ParamRole::conv_weight) ++n;
    return n;
  }

  void zero_grad() {
    for (auto* p : parameters()) p->zero_grad();
  }

  DenseBlockParams<T>& down_block(std::size_t i) { return down_.at(i); }
  DenseBlockParams<T>& bottleneck() { return bottleneck_; }
  DenseBlockParams<T>& up_block(std::size_t i) { return up_.at(i); }
  TransitionDownParams<T>& transition_down_params(std::size_t i) { return td_.at(i); }
  TransitionUpParams<T>& transition_up_params(std::size_t i) { return tu_.at(i); }

  // HeUniform on every conv kernel, BN scale 1 / shift 0, biases 0.
  void init_he_uniform(Rng& rng) {
    for (auto* p : parameters()) {
      switch (p->role) {
        case ParamRole::conv_weight: {
          const Shape& s = p->value.shape();
          const bool transposed = p->name.find(".tconv.") != std::string::npos;
          // Conv kernels are (out, in, kh, kw); transposed ones (in, out, kh, kw).
          const std::size_t fan_in = (transposed ? s.n : s.c) * s.h * s.w;
          const double b = he_uniform_bound(fan_in);
          for (T& v : p->value.data()) v = static_cast<T>(rng.uniform(-b, b));
          break;
        }
        case ParamRole::bn_scale:
          p->value.fill(T{1});
          break;
        case ParamRole::bn_shift:
        case ParamRole::bias:
          p->value.fill(T{0});
          break;
      }
      p->zero_grad();
    }
  }

  // Input (n, in_channels, h, w) with h, w multiples of 2^depth; returns
  // logits (n, n_classes, h, w). With check_schedule set, every stage's
  // realized channel count is compared against channel_schedule().
  Var forward(Graph<T>& g, Var x, Mode mode, Rng& rng, bool check_schedule = false) {
    const Shape& in = g.shape(x);
    if (in.c != cfg_.in_channels) {
      throw ShapeError("network expects " + std::to_string(cfg_.in_channels) + " input channels, got " +
                       std::to_string(in.c));
    }
    const std::size_t mult = cfg_.size_multiple();
    if (in.h % mult != 0 || in.w % mult != 0) {
      throw ShapeError("network input " + std::to_string(in.h) + "x" + std::to_string(in.w) +
                       " is not a multiple of " + std::to_string(mult) + "; pad it first");
    }
    const std::vector<std::size_t> expected = check_schedule ? channel_schedule(cfg_) : std::vector<std::size_t>{};
    std::size_t stage = 0;
    auto check = [&](std::size_t got) {
      if (!check_schedule) return;
      if (expected.at(stage) != got) {
        throw ShapeError("stage " + std::to_string(stage) + " realized " + std::to_string(got) +
                         " maps, schedule predicts " + std::to_string(expected[stage]));
      }
      ++stage;
    };

    Var h = conv2d(g, x, g.param(first_conv_), g.param(first_bias_), Padding::same);
    check(g.shape(h).c);
    std::vector<Var> skips;
    for (std::size_t i = 0; i < down_.size(); ++i) {
      h = dense_block_forward(g, h, down_[i], mode, rng);
      check(g.shape(h).c);
      skips.push_back(h);
      h = transition_down(g, h, td_[i], mode, rng);
    }
    const std::size_t bottleneck_in = g.shape(h).c;
    h = dense_block_forward(g, h, bottleneck_, mode, rng);
    check(bottleneck_in + g.shape(h).c);
    Var stack;
    for (std::size_t i = 0; i < up_.size(); ++i) {
      Var skip = skips[skips.size() - 1 - i];
      stack = transition_up(g, h, skip, tu_[i]);
      h = dense_block_forward(g, stack, up_[i], mode, rng);
      check(g.shape(stack).c + g.shape(h).c);
    }
    // The classifier sees the last block's input stack plus its new maps.
    Var pre = concat_channels(g, stack, h);
    return conv2d(g, pre, g.param(classifier_), g.param(classifier_bias_), Padding::none);
  }

 private:
  ArchConfig cfg_;
  Parameter<T> first_conv_;
  Parameter<T> first_bias_;
  std::vector<DenseBlockParams<T>> down_;
  std::vector<TransitionDownParams<T>> td_;
  DenseBlockParams<T> bottleneck_;
  std::vector<TransitionUpParams<T>> tu_;
  std::vector<DenseBlockParams<T>> up_;
  Parameter<T> classifier_;
  Parameter<T> classifier_bias_;
};

// Allocates and HeUniform-initializes a network.
template <typename T>
Network<T> build(const ArchConfig& cfg, Rng& rng) {
  Network<T> net(cfg);
  net.init_he_uniform(rng);
  return net;
}

}  // namespace fcdn
