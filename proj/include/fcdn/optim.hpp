#pragma once

// RMSprop, weight decay, the per-epoch learning-rate schedule and early stopping.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "fcdn/data.hpp"
#include "fcdn/errors.hpp"
#include "fcdn/graph.hpp"

namespace fcdn {

enum class Monitor { mean_iou, mean_accuracy };

inline std::string to_string(Monitor m) { return m == Monitor::mean_iou ? "mean_iou" : "mean_accuracy"; }
inline Monitor parse_monitor(const std::string& s) {
  if (s == "mean_iou") return Monitor::mean_iou;
  if (s == "mean_accuracy") return Monitor::mean_accuracy;
  throw ConfigError(0, "monitor must be 'mean_iou' or 'mean_accuracy', got '" + s + "'");
}

struct TrainConfig {
  double lr_init = 1e-3;
  double lr_decay_per_epoch = 0.995;
  double finetune_lr = 1e-4;
  double weight_decay = 1e-4;
  std::size_t patience = 100;
  std::size_t finetune_patience = 50;
  std::size_t batch_size = 3;
  std::size_t finetune_batch_size = 1;
  std::size_t crop_size = 224;
  FlipAxis flip_axis = FlipAxis::horizontal;
  Monitor monitor = Monitor::mean_iou;
  double rms_rho = 0.9;
  double rms_eps = 1e-8;
  std::size_t max_epochs = 1000;
  std::size_t finetune_max_epochs = 500;  // 0 skips finetuning
  std::uint64_t seed = 0;

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError(0, "invalid training config: " + m); };
    if (!(lr_init > 0)) fail("lr_init must be > 0");
    if (!(finetune_lr > 0)) fail("finetune_lr must be > 0");
    if (!(lr_decay_per_epoch > 0 && lr_decay_per_epoch <= 1)) fail("lr_decay_per_epoch must be in (0, 1]");
    if (weight_decay < 0) fail("weight_decay must be >= 0");
    if (patience < 1 || finetune_patience < 1) fail("patience must be >= 1");
    if (batch_size < 1 || finetune_batch_size < 1) fail("batch_size must be >= 1");
    if (crop_size < 1) fail("crop_size must be >= 1");
    if (!(rms_rho >= 0 && rms_rho < 1)) fail("rms_rho must be in [0, 1)");
    if (!(rms_eps > 0)) fail("rms_eps must be > 0");
  }
};

enum class Phase { crops, finetune };

template <typename T>
struct OptState {
  std::vector<Tensor<T>> square_avg;  // one per parameter, same shape
  double lr = 1e-3;
  std::size_t epoch = 0;              // epochs completed in the current phase
  Phase phase = Phase::crops;
};

// Allocates zeroed accumulators for `params`.
template <typename T>
OptState<T> make_opt_state(std::span<Parameter<T>* const> params, double lr) {
  OptState<T> s;
  s.lr = lr;
  for (const auto* p : params) s.square_avg.emplace_back(p->value.shape());
  return s;
}

// g += wd * p, conv kernels only.
template <typename T>
void apply_weight_decay(std::span<Parameter<T>* const> params, double wd) {
  if (wd == 0) return;
  const T w = static_cast<T>(wd);
  for (auto* p : params) {
    if (p->role != ParamRole::conv_weight) continue;
    for (std::size_t i = 0; i < p->value.numel(); ++i) p->grad[i] += w * p->value[i];
  }
}

// s <- rho * s + (1 - rho) * g^2;  p <- p - lr * g / (sqrt(s) + eps).
// Every gradient is checked before anything is updated.
template <typename T>
void rmsprop_step(std::span<Parameter<T>* const> params, OptState<T>& state, double rho, double eps) {
  if (state.square_avg.size() != params.size()) {
    throw ShapeError("optimizer state tracks " + std::to_string(state.square_avg.size()) + " tensors, got " +
                     std::to_string(params.size()) + " parameters");
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    const auto* p = params[k];
    if (p->grad.shape() != state.square_avg[k].shape()) {
      throw ShapeError("gradient of " + p->name + " has shape " + p->grad.shape().str() +
                       ", optimizer state " + state.square_avg[k].shape().str());
    }
    bool finite = true;
    double max_abs = 0;
    for (T g : p->grad.data()) {
      if (!std::isfinite(g)) finite = false;
      else max_abs = std::max(max_abs, std::abs(static_cast<double>(g)));
    }
    if (!finite) {
      std::ostringstream os;
      os << "non-finite gradient in " << p->name << " (max finite |g| = " << max_abs << ")";
      throw NonFiniteError(os.str());
    }
  }
  const T r = static_cast<T>(rho), one_minus_r = static_cast<T>(1 - rho);
  const T lr = static_cast<T>(state.lr), e = static_cast<T>(eps);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto* p = params[k];
    T* s = state.square_avg[k].ptr();
    T* v = p->value.ptr();
    const T* g = p->grad.ptr();
    for (std::size_t i = 0, n = p->value.numel(); i < n; ++i) {
      s[i] = r * s[i] + one_minus_r * g[i] * g[i];
      v[i] -= lr * g[i] / (std::sqrt(s[i]) + e);
    }
  }
}

// Learning rate during epoch `epoch` (0-based) of the crop phase.
inline double scheduled_lr(const TrainConfig& cfg, std::size_t epoch) {
  return cfg.lr_init * std::pow(cfg.lr_decay_per_epoch, static_cast<double>(epoch));
}

// Advances the epoch counter and the learning rate: exponential decay during
// the crop phase, constant during finetuning.
template <typename T>
void epoch_end(OptState<T>& state, const TrainConfig& cfg) {
  ++state.epoch;
  state.lr = state.phase == Phase::crops ? scheduled_lr(cfg, state.epoch) : cfg.finetune_lr;
}

// Resets accumulators and switches to the constant finetuning rate.
template <typename T>
void begin_finetune(OptState<T>& state, const TrainConfig& cfg) {
  for (auto& s : state.square_avg) s.fill(T{0});
  state.phase = Phase::finetune;
  state.epoch = 0;
  state.lr = cfg.finetune_lr;
}

struct StopDecision {
  bool stop = false;
  std::size_t best_epoch = 0;
  double best_value = 0;
};

// Tracks the best monitored value. Only a strictly greater value counts as an
// improvement; training stops once `patience` consecutive epochs fail to
// improve.
class EarlyStopper {
 public:
  explicit EarlyStopper(std::size_t patience) : patience_(patience) {
    if (patience == 0) throw ConfigError(0, "patience must be >= 1");
  }

  // Returns true when `value` is a new best.
  bool update(double value, std::size_t epoch) {
    if (!best_ || value > *best_) {
      best_ = value;
      best_epoch_ = epoch;
      stale_ = 0;
      return true;
    }
    ++stale_;
    return false;
  }

  bool should_stop() const noexcept { return stale_ >= patience_; }
  std::size_t best_epoch() const noexcept { return best_epoch_; }
  std::optional<double> best_value() const noexcept { return best_; }
  std::size_t stale_epochs() const noexcept { return stale_; }

 private:
  std::size_t patience_;
  std::optional<double> best_;
  std::size_t best_epoch_ = 0;
  std::size_t stale_ = 0;
};

// Replays a metric history; `stop` is set at the first epoch where patience
// runs out.
inline StopDecision early_stop_check(std::span<const double> history, std::size_t patience,
                                     std::size_t* stop_epoch = nullptr) {
  EarlyStopper es(patience);
  StopDecision d;
  for (std::size_t e = 0; e < history.size(); ++e) {
    es.update(history[e], e);
    if (es.should_stop()) {
      d.stop = true;
      if (stop_epoch) *stop_epoch = e;
      break;
    }
  }
  d.best_epoch = es.best_epoch();
  d.best_value = es.best_value().value_or(0.0);
  return d;
}

}  // namespace fcdn
