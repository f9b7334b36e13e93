#pragma once

// Central finite-difference checks of every differentiable op and of the
// composed blocks, in double precision.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "fcdn/blocks.hpp"
#include "fcdn/graph.hpp"
#include "fcdn/ops.hpp"
#include "fcdn/rng.hpp"

namespace fcdn {

struct GradcheckOptions {
  std::uint64_t seed = 0;
  double step = 1e-5;
  double tolerance = 1e-4;
  // Denominator floor of the relative error, so entries with (near) zero
  // gradient are compared absolutely.
  double floor = 1e-3;
  // Scales every analytic gradient by 1.01 before comparison (self-test hook).
  bool inject_fault = false;
};

struct GradcheckResult {
  std::string op;
  double max_rel_error = 0;
  std::size_t entries = 0;
  bool passed = false;
};

// A differentiable computation over a set of leaf tensors.
struct GradcheckCase {
  std::vector<std::shared_ptr<Parameter<double>>> leaves;
  // Builds the graph and returns a scalar loss. Called repeatedly; must use
  // only the provided rng for randomness.
  std::function<Var(Graph<double>&, const std::vector<Var>&, Rng&)> loss;
};

inline double gradcheck_rel_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

inline GradcheckResult run_gradcheck_case(const std::string& name, GradcheckCase& c, const GradcheckOptions& opt) {
  auto evaluate = [&](bool with_backward) {
    Graph<double> g;
    std::vector<Var> vars;
    for (auto& p : c.leaves) vars.push_back(g.param(*p));
    Rng rng(opt.seed ^ 0xd1b54a32d192ed03ULL);
    Var loss = c.loss(g, vars, rng);
    if (with_backward) g.backward(loss);
    return g.value(loss)[0];
  };
  for (auto& p : c.leaves) p->zero_grad();
  evaluate(true);
  GradcheckResult r{name, 0, 0, false};
  for (auto& p : c.leaves) {
    for (std::size_t i = 0; i < p->value.numel(); ++i) {
      const double orig = p->value[i];
      p->value[i] = orig + opt.step;
      const double up = evaluate(false);
      p->value[i] = orig - opt.step;
      const double down = evaluate(false);
      p->value[i] = orig;
      const double numeric = (up - down) / (2 * opt.step);
      double analytic = p->grad[i];
      if (opt.inject_fault) analytic *= 1.01;
      r.max_rel_error = std::max(r.max_rel_error, gradcheck_rel_error(analytic, numeric, opt.floor));
      ++r.entries;
    }
  }
  r.passed = r.max_rel_error < opt.tolerance;
  return r;
}

namespace detail {

inline std::shared_ptr<Parameter<double>> random_leaf(const std::string& name, Shape s, Rng& rng, double lo = -1,
                                                      double hi = 1) {
  auto p = std::make_shared<Parameter<double>>(name, ParamRole::conv_weight, s);
  for (double& v : p->value.data()) v = rng.uniform(lo, hi);
  return p;
}

inline Tensor<double> random_tensor(Shape s, Rng& rng) {
  Tensor<double> t(s);
  for (double& v : t.data()) v = rng.uniform(-1, 1);
  return t;
}

// Probe loss sum(out * r) with r fixed per case.
inline Var probe(Graph<double>& g, Var out, const std::shared_ptr<Tensor<double>>& r) {
  return weighted_sum(g, out, *r);
}

inline std::size_t dim(Rng& rng, std::size_t lo, std::size_t hi) { return lo + rng.below(hi - lo + 1); }

// Moves the entries of a parameter set into leaves so the checker perturbs the
// live tensors the block reads.
template <typename Params>
void adopt(GradcheckCase& c, const std::shared_ptr<Params>& owner, std::vector<Parameter<double>*> ps) {
  for (auto* p : ps) c.leaves.push_back(std::shared_ptr<Parameter<double>>(owner, p));
}

inline void randomize_bn(BatchNormParams<double>& bn, Rng& rng) {
  for (double& v : bn.scale.value.data()) v = rng.uniform(0.5, 1.5);
  for (double& v : bn.shift.value.data()) v = rng.uniform(-0.5, 0.5);
}

inline void randomize(Parameter<double>& p, Rng& rng, double scale = 0.5) {
  for (double& v : p.value.data()) v = rng.uniform(-scale, scale);
}

}  // namespace detail

inline const std::vector<std::string>& gradcheck_ops() {
  static const std::vector<std::string> ops = {
      "conv2d",      "conv2d_1x1",      "transposed_conv2d", "max_pool2x2",     "batch_norm",
      "relu",        "dropout",         "concat_channels",   "crop_center",     "softmax_cross_entropy",
      "chain",       "dense_layer",     "dense_block",       "dense_block_up",  "transition_down",
      "transition_up"};
  return ops;
}

// Builds the check for `op` with random shapes (every dim <= 6) drawn from
// `seed`. Throws ConfigError for unknown names.
inline GradcheckCase make_gradcheck_case(const std::string& op, std::uint64_t seed) {
  using namespace detail;
  Rng rng(seed * 0x9e3779b97f4a7c15ULL + 17);
  GradcheckCase c;
  const std::size_t n = dim(rng, 1, 2), ci = dim(rng, 1, 4), h = dim(rng, 3, 6), w = dim(rng, 3, 6);
  const Shape xs{n, ci, h, w};

  if (op == "conv2d" || op == "conv2d_1x1") {
    const std::size_t k = op == "conv2d" ? 3 : 1, co = dim(rng, 1, 4);
    c.leaves = {random_leaf("x", xs, rng), random_leaf("w", Shape{co, ci, k, k}, rng),
                random_leaf("b", Shape{1, co, 1, 1}, rng)};
    auto r = std::make_shared<Tensor<double>>(random_tensor(Shape{n, co, h, w}, rng));
    const Padding pad = k == 3 ? Padding::same : Padding::none;
    c.loss = [r, pad](Graph<double>& g, const std::vector<Var>& v, Rng&) {
      return probe(g, conv2d(g, v[0], v[1], v[2], pad), r);
    };
  } else if (op == "transposed_conv2d") {
    const std::size_t co = dim(rng, 1, 4);
    c.leaves = {random_leaf("x", xs, rng), random_leaf("w", Shape{ci, co, 3, 3}, rng)};
    auto r = std::make_shared<Tensor<double>>(random_tensor(Shape{n, co, 2 * h, 2 * w}, rng));
    c.loss = [r](Graph<double>& g, const std::vector<Var>& v, Rng&) {
      return probe(g, transposed_conv2d(g, v[0], v[1]), r);
    };
  } else if (op == "max_pool2x2") {
    c.leaves = {random_leaf("x", xs, rng)};
    auto r = std::make_shared<Tensor<double>>(random_tensor(Shape{n, ci, h / 2, w / 2}, rng));
    c.loss = [r](Graph<double>& g, const std::vector<Var>& v, Rng&) { return probe(g, max_pool2x2(g, v[0]), r); };
  } else if (op == "batch_norm") {
    c.leaves = {random_leaf("x", xs, rng), random_leaf("gamma", Shape{1, ci, 1, 1}, rng, 0.5, 1.5),
                random_leaf("beta", Shape{1, ci, 1, 1}, rng)};
    auto r = std::make_shared<Tensor<double>>(random_tensor(xs, rng));
    c.loss = [r](Graph<double>& g, const std::vector<Var>& v, Rng&) {
      return probe(g, batch_norm(g, v[0], v[1], v[2]), r);
    };
  } else if (op == "relu") {
    c.leaves = {random_leaf("x", xs, rng)};
    auto r = std::make_shared<Tensor<double>>(random_tensor(xs, rng));
    c.loss = [r](Graph<double>& g, const std::vector<Var>& v, Rng&) { return probe(g, relu(g, v[0]), r); };
  } else if (op == "dropout") {
    c.leaves = {random_leaf("x", xs, rng)};
    auto r = std::make_shared<Tensor<double>>(random_tensor(xs, rng));
    c.loss = [r](Graph<double>& g, const std::vector<Var>& v, Rng& drop) {
      return probe(g, dropout(g, v[0], 0.3, Mode::train, drop), r);
    };
  } else if (op == "concat_channels") {
    const std::size_t cb = dim(rng, 1, 4);
    c.leaves = {random_leaf("a", xs, rng), random_leaf("b", Shape{n, cb, h, w}, rng)};
    auto r = std::make_shared<Tensor<double>>(random_tensor(Shape{n, ci + cb, h, w}, rng));
    c.loss = [r](Graph<double>& g, const std::vector<Var>& v, Rng&) {
      return probe(g, concat_channels(g, v[0], v[1]), r);
    };
  } else if (op == "crop_center") {
    const std::size_t th = dim(rng, 1, h), tw = dim(rng, 1, w);
    c.leaves = {random_leaf("x", xs, rng)};
    auto r = std::make_shared<Tensor<double>>(random_tensor(Shape{n, ci, th, tw}, rng));
    c.loss = [r, th, tw](Graph<double>& g, const std::vector<Var>& v, Rng&) {
      return probe(g, crop_center(g, v[0], th, tw), r);
    };
  } else if (op == "softmax_cross_entropy") {
    const std::size_t classes = dim(rng, 2, 5);
    c.leaves = {random_leaf("logits", Shape{n, classes, h, w}, rng, -2, 2)};
    auto targets = std::make_shared<std::vector<std::int32_t>>(n * h * w);
    for (auto& t : *targets) t = rng.bernoulli(0.15) ? 255 : static_cast<std::int32_t>(rng.below(classes));
    (*targets)[0] = 0;  // at least one labelled pixel
    c.loss = [targets](Graph<double>& g, const std::vector<Var>& v, Rng&) {
      return softmax_cross_entropy(g, v[0], *targets, 255).loss;
    };
  } else if (op == "chain") {
    // conv -> bn -> relu -> pool
    const std::size_t co = dim(rng, 1, 4);
    c.leaves = {random_leaf("x", xs, rng), random_leaf("w", Shape{co, ci, 3, 3}, rng),
                random_leaf("b", Shape{1, co, 1, 1}, rng), random_leaf("gamma", Shape{1, co, 1, 1}, rng, 0.5, 1.5),
                random_leaf("beta", Shape{1, co, 1, 1}, rng)};
    auto r = std::make_shared<Tensor<double>>(random_tensor(Shape{n, co, h / 2, w / 2}, rng));
    c.loss = [r](Graph<double>& g, const std::vector<Var>& v, Rng&) {
      Var y = conv2d(g, v[0], v[1], v[2], Padding::same);
      y = batch_norm(g, y, v[3], v[4]);
      return probe(g, max_pool2x2(g, relu(g, y)), r);
    };
  } else if (op == "dense_layer") {
    const std::size_t k = dim(rng, 1, 4);
    auto layer = std::make_shared<DenseLayerParams<double>>("layer", ci, k, 0.2);
    randomize_bn(layer->bn, rng);
    randomize(layer->conv, rng);
    c.leaves = {random_leaf("x", xs, rng)};
    adopt(c, layer, {&layer->bn.scale, &layer->bn.shift, &layer->conv});
    auto r = std::make_shared<Tensor<double>>(random_tensor(Shape{n, k, h, w}, rng));
    c.loss = [r, layer](Graph<double>& g, const std::vector<Var>& v, Rng& drop) {
      return probe(g, dense_layer_forward(g, v[0], *layer, Mode::train, drop), r);
    };
  } else if (op == "dense_block" || op == "dense_block_up") {
    const std::size_t k = dim(rng, 1, 3), layers = dim(rng, 1, 3);
    const bool concat = op == "dense_block";
    auto block = std::make_shared<DenseBlockParams<double>>("db", ci, layers, k, concat, 0.2);
    c.leaves = {random_leaf("x", xs, rng)};
    std::vector<Parameter<double>*> ps;
    for (auto& l : block->layers) {
      randomize_bn(l.bn, rng);
      randomize(l.conv, rng);
      ps.insert(ps.end(), {&l.bn.scale, &l.bn.shift, &l.conv});
    }
    adopt(c, block, ps);
    auto r = std::make_shared<Tensor<double>>(random_tensor(Shape{n, block->out_channels(), h, w}, rng));
    c.loss = [r, block](Graph<double>& g, const std::vector<Var>& v, Rng& drop) {
      return probe(g, dense_block_forward(g, v[0], *block, Mode::train, drop), r);
    };
  } else if (op == "transition_down") {
    auto td = std::make_shared<TransitionDownParams<double>>("td", ci, 0.2);
    randomize_bn(td->bn, rng);
    randomize(td->conv, rng);
    c.leaves = {random_leaf("x", xs, rng)};
    adopt(c, td, {&td->bn.scale, &td->bn.shift, &td->conv});
    auto r = std::make_shared<Tensor<double>>(random_tensor(Shape{n, ci, h / 2, w / 2}, rng));
    c.loss = [r, td](Graph<double>& g, const std::vector<Var>& v, Rng& drop) {
      return probe(g, transition_down(g, v[0], *td, Mode::train, drop), r);
    };
  } else if (op == "transition_up") {
    // The skip may be one row/col short of 2x the block output, forcing a crop.
    const std::size_t bh = dim(rng, 1, 3), bw = dim(rng, 1, 3), cs = dim(rng, 1, 3);
    const std::size_t sh = 2 * bh - rng.below(2), sw = 2 * bw - rng.below(2);
    auto tu = std::make_shared<TransitionUpParams<double>>("tu", ci);
    randomize(tu->conv, rng);
    c.leaves = {random_leaf("block_out", Shape{n, ci, bh, bw}, rng), random_leaf("skip", Shape{n, cs, sh, sw}, rng)};
    adopt(c, tu, {&tu->conv});
    auto r = std::make_shared<Tensor<double>>(random_tensor(Shape{n, ci + cs, sh, sw}, rng));
    c.loss = [r, tu](Graph<double>& g, const std::vector<Var>& v, Rng&) {
      return probe(g, transition_up(g, v[0], v[1], *tu), r);
    };
  } else {
    throw ConfigError(0, "unknown gradcheck op '" + op + "'");
  }
  return c;
}

inline GradcheckResult run_gradcheck(const std::string& op, const GradcheckOptions& opt) {
  GradcheckCase c = make_gradcheck_case(op, opt.seed);
  return run_gradcheck_case(op, c, opt);
}

}  // namespace fcdn
