#pragma once

// Two-phase training: random crops with a decaying learning rate, then
// full-size finetuning at a constant rate, each early-stopped on validation.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "fcdn/architecture.hpp"
#include "fcdn/data.hpp"
#include "fcdn/metrics.hpp"
#include "fcdn/optim.hpp"

namespace fcdn {

struct EpochRecord {
  std::size_t epoch = 0;  // global, counting across both phases
  Phase phase = Phase::crops;
  double lr = 0;
  double train_loss = 0;
  double val_miou = 0;
  double val_gacc = 0;
};

struct TrainResult {
  std::vector<EpochRecord> log;
  double best_value = 0;       // monitored metric of the returned weights
  std::size_t best_epoch = 0;  // global epoch that produced them
  std::size_t finetune_start = 0;
  double first_epoch_loss = 0;
};

// Per-pixel class map of one sample, padded for the forward pass and cropped
// back to the sample's size.
inline std::vector<std::int32_t> predict_classes(Network<float>& net, const LabeledSample& s) {
  const PaddedSample padded = pad_to_multiple(s, net.config().size_multiple());
  Graph<float> g(false);
  Rng unused(0);
  Var x = g.input(padded.sample.image);
  Var logits = net.forward(g, x, Mode::eval, unused);
  const auto classes = argmax_classes(g.value(logits));
  return crop_class_map(classes, padded.sample.width(), s.height(), s.width());
}

inline ConfusionAccumulator evaluate(Network<float>& net, std::span<const LabeledSample> samples,
                                     std::size_t n_classes) {
  ConfusionAccumulator acc(n_classes);
  for (const auto& s : samples) acc.accumulate(predict_classes(net, s), s.labels.data, s.void_label);
  return acc;
}

inline double monitored_value(const ConfusionAccumulator& acc, Monitor m) {
  const auto v = m == Monitor::mean_iou ? acc.mean_iou() : acc.mean_class_accuracy();
  return v.value_or(0.0);
}

using Snapshot = std::vector<Tensor<float>>;

inline Snapshot snapshot(Network<float>& net) {
  Snapshot s;
  for (const auto* p : net.parameters()) s.push_back(p->value);
  return s;
}

inline void restore(Network<float>& net, const Snapshot& s) {
  auto params = net.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = s[i];
}

namespace detail {

inline std::vector<std::size_t> shuffled(std::size_t n, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
  return idx;
}

// Stream keys; each (epoch, item) pair gets its own generator so results do not
// depend on evaluation order.
inline std::uint64_t key(std::uint64_t tag, std::uint64_t epoch, std::uint64_t item) {
  return (tag << 56) ^ (epoch << 28) ^ item;
}

// One optimizer step on a batch; returns the batch loss.
inline double train_step(Network<float>& net, std::span<Parameter<float>* const> params, OptState<float>& state,
                         const TrainConfig& cfg, const Batch& batch, std::int32_t void_label, Rng& dropout_rng,
                         std::size_t epoch, std::size_t step) {
  Graph<float> g;
  Var x = g.input(batch.images);
  Var logits = net.forward(g, x, Mode::train, dropout_rng);
  auto ce = softmax_cross_entropy(g, logits, batch.targets, void_label);
  const double loss = g.value(ce.loss)[0];
  if (!std::isfinite(loss)) {
    throw NonFiniteError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " + std::to_string(step));
  }
  g.backward(ce.loss);
  apply_weight_decay(params, cfg.weight_decay);
  try {
    rmsprop_step(params, state, cfg.rms_rho, cfg.rms_eps);
  } catch (const NonFiniteError& e) {
    throw NonFiniteError(std::string(e.what()) + " at epoch " + std::to_string(epoch) + ", batch " +
                         std::to_string(step));
  }
  net.zero_grad();
  return loss;
}

}  // namespace detail

using EpochCallback = std::function<void(const EpochRecord&)>;

inline TrainResult train(Network<float>& net, const DatasetSplit& data, const TrainConfig& cfg,
                         const EpochCallback& on_epoch = {}) {
  cfg.validate();
  if (data.train.empty()) throw ConfigError(0, "training split is empty");
  if (data.val.empty()) throw ConfigError(0, "validation split is empty (needed for early stopping)");
  if (data.n_classes != net.config().n_classes) {
    throw ConfigError(0, "dataset has " + std::to_string(data.n_classes) + " classes, network " +
                             std::to_string(net.config().n_classes));
  }
  const std::size_t multiple = net.config().size_multiple();
  if (cfg.crop_size % multiple != 0) {
    throw ConfigError(0, "crop_size " + std::to_string(cfg.crop_size) + " is not a multiple of " +
                             std::to_string(multiple));
  }
  const std::int32_t void_label = data.train.front().void_label;

  auto params = net.parameters();
  OptState<float> state = make_opt_state<float>(params, cfg.lr_init);
  TrainResult result;
  Snapshot best = snapshot(net);
  std::size_t global_epoch = 0;

  auto run_phase = [&](Phase phase, std::size_t max_epochs, EarlyStopper& stopper) {
    for (std::size_t e = 0; e < max_epochs; ++e, ++global_epoch) {
      Rng order_rng = Rng::derive(cfg.seed, detail::key(1, global_epoch, 0));
      const auto order = detail::shuffled(data.train.size(), order_rng);
      const std::size_t bs = phase == Phase::crops ? cfg.batch_size : cfg.finetune_batch_size;
      double loss_sum = 0;
      std::size_t steps = 0;
      for (std::size_t start = 0; start < order.size(); start += bs, ++steps) {
        std::vector<LabeledSample> items;
        for (std::size_t i = start; i < std::min(order.size(), start + bs); ++i) {
          const LabeledSample& src = data.train[order[i]];
          Rng aug = Rng::derive(cfg.seed, detail::key(2, global_epoch, order[i]));
          if (phase == Phase::crops) {
            items.push_back(flip(random_crop(src, cfg.crop_size, cfg.crop_size, aug), aug, cfg.flip_axis));
          } else {
            items.push_back(flip(pad_to_multiple(src, multiple).sample, aug, cfg.flip_axis));
          }
        }
        Rng dropout_rng = Rng::derive(cfg.seed, detail::key(3, global_epoch, steps));
        loss_sum += detail::train_step(net, params, state, cfg, make_batch(items), void_label, dropout_rng,
                                       global_epoch, steps);
      }
      const ConfusionAccumulator acc = evaluate(net, data.val, data.n_classes);
      EpochRecord rec;
      rec.epoch = global_epoch;
      rec.phase = phase;
      rec.lr = state.lr;
      rec.train_loss = loss_sum / static_cast<double>(steps);
      rec.val_miou = acc.mean_iou().value_or(0.0);
      rec.val_gacc = acc.global_accuracy().value_or(0.0);
      if (result.log.empty()) result.first_epoch_loss = rec.train_loss;
      result.log.push_back(rec);
      if (stopper.update(monitored_value(acc, cfg.monitor), global_epoch)) best = snapshot(net);
      if (on_epoch) on_epoch(rec);
      epoch_end(state, cfg);
      if (stopper.should_stop()) {
        ++global_epoch;
        break;
      }
    }
    restore(net, best);
  };

  EarlyStopper crops_stopper(cfg.patience);
  run_phase(Phase::crops, cfg.max_epochs, crops_stopper);
  result.best_value = crops_stopper.best_value().value_or(0.0);
  result.best_epoch = crops_stopper.best_epoch();
  result.finetune_start = global_epoch;

  if (cfg.finetune_max_epochs > 0) {
    begin_finetune(state, cfg);
    EarlyStopper ft_stopper(cfg.finetune_patience);
    // Finetuning has to beat the crop-phase best to replace those weights.
    if (crops_stopper.best_value()) ft_stopper.update(result.best_value, result.best_epoch);
    run_phase(Phase::finetune, cfg.finetune_max_epochs, ft_stopper);
    result.best_value = ft_stopper.best_value().value_or(result.best_value);
    result.best_epoch = ft_stopper.best_epoch();
  }
  return result;
}

inline void write_epoch_log(const std::filesystem::path& path, const std::vector<EpochRecord>& log) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write epoch log " + path.string());
  out << "epoch,lr,train_loss,val_miou,val_gacc\n";
  char line[256];
  for (const auto& r : log) {
    std::snprintf(line, sizeof line, "%zu,%.17g,%.17g,%.17g,%.17g\n", r.epoch, r.lr, r.train_loss, r.val_miou,
                  r.val_gacc);
    out << line;
  }
}

}  // namespace fcdn
