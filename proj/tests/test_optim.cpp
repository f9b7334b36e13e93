#include <cmath>
#include <limits>

#include <gtest/gtest.h>

#include "fcdn/optim.hpp"
#include "fcdn/train.hpp"
#include "oracles.hpp"

using namespace fcdn;

namespace {

struct ParamSet {
  std::vector<Parameter<double>> store;
  std::vector<Parameter<double>*> ptrs;

  explicit ParamSet(std::vector<std::pair<ParamRole, std::size_t>> roles) {
    store.reserve(roles.size());
    for (std::size_t i = 0; i < roles.size(); ++i)
      store.emplace_back("p" + std::to_string(i), roles[i].first, Shape{1, 1, 1, roles[i].second});
    for (auto& p : store) ptrs.push_back(&p);
  }
  std::span<Parameter<double>* const> span() const { return ptrs; }
};

DatasetSplit small_synth(std::uint64_t seed) {
  SynthConfig sc;
  sc.n_train = 12;
  sc.n_val = 4;
  sc.height = 32;
  sc.width = 32;
  Rng rng(seed);
  return synth_dataset(sc, rng);
}

TrainConfig small_train_config() {
  TrainConfig cfg;
  cfg.crop_size = 24;
  cfg.batch_size = 3;
  cfg.max_epochs = 3;
  cfg.finetune_max_epochs = 2;
  cfg.seed = 5;
  return cfg;
}

}  // namespace

TEST(RmsProp, ZeroGradientLeavesParametersAlone) {
  ParamSet ps({{ParamRole::conv_weight, 4}});
  ps.store[0].value.fill(0.7);
  auto st = make_opt_state<double>(ps.span(), 1e-3);
  rmsprop_step(ps.span(), st, 0.9, 1e-8);
  for (double v : ps.store[0].value.data()) EXPECT_EQ(v, 0.7);
  for (double v : st.square_avg[0].data()) EXPECT_EQ(v, 0.0);
}

TEST(RmsProp, FirstStepMagnitude) {
  ParamSet ps({{ParamRole::conv_weight, 1}});
  ps.store[0].grad[0] = 1.0;
  auto st = make_opt_state<double>(ps.span(), 1e-3);
  rmsprop_step(ps.span(), st, 0.9, 1e-8);
  EXPECT_NEAR(st.square_avg[0][0], 0.1, 1e-15);
  EXPECT_NEAR(ps.store[0].value[0], -1e-3 / (std::sqrt(0.1) + 1e-8), 1e-15);
}

TEST(RmsProp, TenStepTraceMatchesHandLoop) {
  ParamSet ps({{ParamRole::conv_weight, 3}, {ParamRole::bias, 2}});
  Rng rng(17);
  for (auto& p : ps.store)
    for (auto& v : p.value.data()) v = rng.uniform(-1, 1);
  std::vector<std::vector<double>> w, s;
  for (auto& p : ps.store) {
    w.emplace_back(p.value.data().begin(), p.value.data().end());
    s.emplace_back(p.value.numel(), 0.0);
  }
  auto st = make_opt_state<double>(ps.span(), 0.01);
  for (int step = 0; step < 10; ++step) {
    for (std::size_t k = 0; k < ps.store.size(); ++k)
      for (std::size_t i = 0; i < w[k].size(); ++i) {
        const double g = rng.uniform(-2, 2);
        ps.store[k].grad[i] = g;
        s[k][i] = 0.9 * s[k][i] + 0.1 * g * g;
        w[k][i] -= 0.01 * g / (std::sqrt(s[k][i]) + 1e-8);
      }
    rmsprop_step(ps.span(), st, 0.9, 1e-8);
  }
  for (std::size_t k = 0; k < ps.store.size(); ++k)
    for (std::size_t i = 0; i < w[k].size(); ++i) EXPECT_NEAR(ps.store[k].value[i], w[k][i], 1e-12);
}

TEST(RmsProp, NonFiniteGradientAbortsBeforeAnyUpdate) {
  ParamSet ps({{ParamRole::conv_weight, 2}, {ParamRole::bias, 2}});
  ps.store[0].grad[0] = 3.0;
  ps.store[1].grad[1] = std::numeric_limits<double>::quiet_NaN();
  auto st = make_opt_state<double>(ps.span(), 1e-3);
  try {
    rmsprop_step(ps.span(), st, 0.9, 1e-8);
    FAIL() << "expected NonFiniteError";
  } catch (const NonFiniteError& e) {
    EXPECT_NE(std::string(e.what()).find("p1"), std::string::npos);
  }
  EXPECT_EQ(ps.store[0].value[0], 0.0);
  EXPECT_EQ(st.square_avg[0][0], 0.0);
  ps.store[1].grad[1] = std::numeric_limits<double>::infinity();
  EXPECT_THROW(rmsprop_step(ps.span(), st, 0.9, 1e-8), NonFiniteError);
}

TEST(RmsProp, StateSizeMismatchThrows) {
  ParamSet a({{ParamRole::conv_weight, 2}}), b({{ParamRole::conv_weight, 2}, {ParamRole::bias, 1}});
  auto st = make_opt_state<double>(a.span(), 1e-3);
  EXPECT_THROW(rmsprop_step(b.span(), st, 0.9, 1e-8), ShapeError);
}

TEST(WeightDecay, IdentityCases) {
  ParamSet ps({{ParamRole::conv_weight, 3}});
  ps.store[0].value.fill(2.0);
  ps.store[0].grad.fill(0.5);
  apply_weight_decay(ps.span(), 0.0);
  for (double g : ps.store[0].grad.data()) EXPECT_EQ(g, 0.5);
  ps.store[0].value.fill(0.0);
  apply_weight_decay(ps.span(), 1e-4);
  for (double g : ps.store[0].grad.data()) EXPECT_EQ(g, 0.5);
}

TEST(WeightDecay, MatchesL2PenaltyDerivative) {
  ParamSet ps({{ParamRole::conv_weight, 6}});
  Rng rng(2);
  for (auto& v : ps.store[0].value.data()) v = rng.uniform(-1, 1);
  const double wd = 0.3;
  apply_weight_decay(ps.span(), wd);
  auto penalty = [&](const Tensor<double>& w) {
    double s = 0;
    for (double v : w.data()) s += v * v;
    return 0.5 * wd * s;
  };
  auto w = ps.store[0].value;
  for (std::size_t i = 0; i < w.numel(); ++i) {
    const double h = 1e-6, orig = w[i];
    w[i] = orig + h;
    const double up = penalty(w);
    w[i] = orig - h;
    const double down = penalty(w);
    w[i] = orig;
    EXPECT_NEAR(ps.store[0].grad[i], (up - down) / (2 * h), 1e-8);
  }
}

TEST(WeightDecay, ConvWeightsOnly) {
  ParamSet ps({{ParamRole::conv_weight, 2}, {ParamRole::bias, 2}, {ParamRole::bn_scale, 2},
               {ParamRole::bn_shift, 2}});
  for (auto& p : ps.store) p.value.fill(1.0);
  apply_weight_decay(ps.span(), 0.5);
  EXPECT_EQ(ps.store[0].grad[0], 0.5);
  for (std::size_t k = 1; k < 4; ++k)
    for (double g : ps.store[k].grad.data()) EXPECT_EQ(g, 0.0);
}

TEST(Schedule, ExponentialDecayPerEpoch) {
  TrainConfig cfg;
  for (std::size_t e = 0; e <= 500; ++e) EXPECT_NEAR(scheduled_lr(cfg, e), 1e-3 * std::pow(0.995, e), 1e-12);
  EXPECT_NEAR(scheduled_lr(cfg, 100), 6.0577e-4, 1e-7);
  ParamSet ps({{ParamRole::conv_weight, 1}});
  auto st = make_opt_state<double>(ps.span(), cfg.lr_init);
  for (std::size_t e = 0; e < 50; ++e) {
    EXPECT_NEAR(st.lr, 1e-3 * std::pow(0.995, e), 1e-12);
    epoch_end(st, cfg);
  }
}

TEST(Schedule, FinetuneRateIsConstantAndStateIsReset) {
  TrainConfig cfg;
  ParamSet ps({{ParamRole::conv_weight, 2}});
  ps.store[0].grad.fill(1.0);
  auto st = make_opt_state<double>(ps.span(), cfg.lr_init);
  rmsprop_step(ps.span(), st, 0.9, 1e-8);
  for (int e = 0; e < 7; ++e) epoch_end(st, cfg);
  begin_finetune(st, cfg);
  for (double v : st.square_avg[0].data()) EXPECT_EQ(v, 0.0);
  for (int e = 0; e < 20; ++e) {
    EXPECT_EQ(st.lr, 1e-4);
    epoch_end(st, cfg);
  }
}

TEST(EarlyStopping, StrictlyImprovingNeverStops) {
  std::vector<double> h;
  for (int i = 0; i < 300; ++i) h.push_back(i * 0.001);
  std::size_t at = 0;
  const auto d = early_stop_check(h, 100, &at);
  EXPECT_FALSE(d.stop);
  EXPECT_EQ(d.best_epoch, 299u);
}

TEST(EarlyStopping, FlatHistoryStopsAfterPatience) {
  std::vector<double> h(300, 0.5);
  std::size_t at = 0;
  const auto d = early_stop_check(h, 100, &at);
  EXPECT_TRUE(d.stop);
  EXPECT_EQ(d.best_epoch, 0u);
  EXPECT_EQ(at, 100u);
}

TEST(EarlyStopping, NoisyHistoryMatchesLinearScan) {
  Rng rng(23);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 50 + rng.below(300), patience = 1 + rng.below(40);
    std::vector<double> h(n);
    for (std::size_t i = 0; i < n; ++i) h[i] = std::round(rng.uniform(0, 1) * 20) / 20 + 0.001 * i;
    // oracle: walk once, remember the first strict maximum
    std::size_t best = 0, stale = 0, stop_at = n;
    for (std::size_t i = 1; i < n; ++i) {
      if (h[i] > h[best]) {
        best = i;
        stale = 0;
      } else if (++stale >= patience) {
        stop_at = i;
        break;
      }
    }
    std::size_t at = n;
    const auto d = early_stop_check(h, patience, &at);
    EXPECT_EQ(d.stop, stop_at < n);
    if (d.stop) EXPECT_EQ(at, stop_at);
    EXPECT_EQ(d.best_epoch, best);
    EXPECT_EQ(d.best_value, h[best]);
  }
}

TEST(EarlyStopping, TiesKeepTheEarlierEpoch) {
  EarlyStopper es(3);
  EXPECT_TRUE(es.update(0.4, 0));
  EXPECT_FALSE(es.update(0.4, 1));
  EXPECT_TRUE(es.update(0.41, 2));
  EXPECT_FALSE(es.update(0.41, 3));
  EXPECT_FALSE(es.update(0.2, 4));
  EXPECT_FALSE(es.should_stop());
  EXPECT_FALSE(es.update(0.41, 5));
  EXPECT_TRUE(es.should_stop());
  EXPECT_EQ(es.best_epoch(), 2u);
  EXPECT_THROW(EarlyStopper(0), ConfigError);
}

TEST(TrainLoop, LogsScheduleAndRestoresBest) {
  const auto data = small_synth(1);
  Rng init(2);
  auto net = build<float>(presets::fc_densenet_tiny(3), init);
  const auto before = snapshot(net);
  const auto cfg = small_train_config();
  const auto r = train(net, data, cfg);
  ASSERT_EQ(r.log.size(), 5u);
  EXPECT_EQ(r.finetune_start, 3u);
  for (std::size_t e = 0; e < 3; ++e) {
    EXPECT_EQ(r.log[e].phase, Phase::crops);
    EXPECT_NEAR(r.log[e].lr, 1e-3 * std::pow(0.995, e), 1e-12);
  }
  for (std::size_t e = 3; e < 5; ++e) {
    EXPECT_EQ(r.log[e].phase, Phase::finetune);
    EXPECT_EQ(r.log[e].lr, 1e-4);
  }
  double logged_best = 0;
  for (const auto& rec : r.log) logged_best = std::max(logged_best, rec.val_miou);
  EXPECT_NEAR(r.best_value, logged_best, 1e-12);
  EXPECT_NEAR(r.log[r.best_epoch].val_miou, r.best_value, 1e-12);
  const auto acc = evaluate(net, data.val, 3);
  EXPECT_NEAR(*acc.mean_iou(), r.best_value, 1e-6);

  const auto after = snapshot(net);
  std::size_t changed = 0;
  for (std::size_t k = 0; k < after.size(); ++k)
    for (std::size_t i = 0; i < after[k].numel(); ++i) changed += after[k][i] != before[k][i];
  EXPECT_GT(changed, 0u);
}

TEST(TrainLoop, SameSeedSameRun) {
  const auto data = small_synth(1);
  auto cfg = small_train_config();
  cfg.max_epochs = 2;
  cfg.finetune_max_epochs = 1;
  auto run = [&] {
    Rng init(2);
    auto net = build<float>(presets::fc_densenet_tiny(3), init);
    auto r = train(net, data, cfg);
    return std::make_pair(r, snapshot(net));
  };
  const auto [ra, wa] = run();
  const auto [rb, wb] = run();
  ASSERT_EQ(ra.log.size(), rb.log.size());
  for (std::size_t e = 0; e < ra.log.size(); ++e) {
    EXPECT_EQ(ra.log[e].train_loss, rb.log[e].train_loss);
    EXPECT_EQ(ra.log[e].val_miou, rb.log[e].val_miou);
  }
  for (std::size_t k = 0; k < wa.size(); ++k)
    for (std::size_t i = 0; i < wa[k].numel(); ++i) ASSERT_EQ(wa[k][i], wb[k][i]);
}

TEST(TrainLoop, RepeatedStepsOnOneBatchReduceLoss) {
  const auto data = small_synth(3);
  Rng init(4);
  auto net = build<float>(presets::fc_densenet_tiny(3), init);
  TrainConfig cfg;
  auto params = net.parameters();
  auto st = make_opt_state<float>(params, cfg.lr_init);
  const auto batch = make_batch(std::span(data.train).first(2));
  double first = 0, last = 0;
  for (int i = 0; i < 15; ++i) {
    Rng drop(100 + i);
    const double loss = detail::train_step(net, params, st, cfg, batch, kDefaultVoidLabel, drop, 0, i);
    if (i == 0) first = loss;
    last = loss;
  }
  EXPECT_LT(last, first);
}

TEST(TrainLoop, RejectsInconsistentSetup) {
  auto data = small_synth(1);
  Rng init(2);
  auto net = build<float>(presets::fc_densenet_tiny(3), init);
  auto cfg = small_train_config();
  cfg.crop_size = 22;
  EXPECT_THROW(train(net, data, cfg), ConfigError);
  cfg = small_train_config();
  data.val.clear();
  EXPECT_THROW(train(net, data, cfg), ConfigError);
  auto net4 = build<float>(presets::fc_densenet_tiny(4), init);
  EXPECT_THROW(train(net4, small_synth(1), small_train_config()), ConfigError);
  cfg.lr_decay_per_epoch = 1.5;
  EXPECT_THROW(cfg.validate(), ConfigError);
}
