#include <gtest/gtest.h>

#include "fcdn/blocks.hpp"
#include "fcdn/gradcheck.hpp"
#include "oracles.hpp"

using namespace fcdn;
using oracle::random_tensor;

namespace {

template <typename Params>
void randomize_convs(Params& p, Rng& rng) {
  for (auto& l : p.layers)
    for (auto& v : l.conv.value.data()) v = static_cast<float>(rng.uniform(-0.3, 0.3));
}

}  // namespace

TEST(DenseLayer, EmitsGrowthRateMaps) {
  for (std::size_t k : {16u, 12u}) {
    Rng rng(1);
    DenseLayerParams<float> p("l", 48, k, 0.2);
    Graph<float> g(false);
    Var x = g.input(random_tensor<float>(Shape{2, 48, 6, 5}, rng));
    EXPECT_EQ(g.shape(dense_layer_forward(g, x, p, Mode::train, rng)), (Shape{2, k, 6, 5}));
  }
}

TEST(DenseLayer, ChannelMismatchThrows) {
  Rng rng(2);
  DenseLayerParams<float> p("l", 8, 4, 0.0);
  Graph<float> g(false);
  Var x = g.input(random_tensor<float>(Shape{2, 7, 4, 4}, rng));
  EXPECT_THROW(dense_layer_forward(g, x, p, Mode::eval, rng), ShapeError);
}

TEST(DenseBlock, LayerInputsGrowByK) {
  DenseBlockParams<float> p("b", 48, 4, 16, true, 0.2);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(p.layers[i].in_channels(), 48 + i * 16);
}

TEST(DenseBlock, DownsamplingBlockConcatenatesInput) {
  Rng rng(3);
  DenseBlockParams<float> p("b", 48, 4, 16, true, 0.2);
  EXPECT_EQ(p.out_channels(), 112u);
  Graph<float> g(false);
  auto t = random_tensor<float>(Shape{2, 48, 4, 4}, rng);
  Var x = g.input(t);
  Var y = dense_block_forward(g, x, p, Mode::train, rng);
  EXPECT_EQ(g.shape(y), (Shape{2, 112, 4, 4}));
  // input occupies the first channels unchanged
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t c = 0; c < 48; ++c)
      for (std::size_t i = 0; i < 16; ++i) EXPECT_EQ(g.value(y).plane(n, c)[i], t.plane(n, c)[i]);
}

TEST(DenseBlock, UpsamplingBlockEmitsOnlyNewMaps) {
  Rng rng(4);
  for (std::size_t in : {5u, 40u, 300u}) {
    DenseBlockParams<float> p("b", in, 4, 3, false, 0.2);
    EXPECT_EQ(p.out_channels(), 12u);
    Graph<float> g(false);
    Var x = g.input(random_tensor<float>(Shape{2, in, 3, 3}, rng));
    EXPECT_EQ(g.shape(dense_block_forward(g, x, p, Mode::train, rng)).c, 12u);
  }
}

TEST(DenseBlock, LinearGrowthInDownsamplingPath) {
  for (std::size_t n = 1; n <= 6; ++n)
    for (std::size_t k : {4u, 12u, 16u}) {
      DenseBlockParams<float> p("b", 20, n, k, true, 0.0);
      EXPECT_EQ(p.out_channels() - 20, n * k);
    }
}

TEST(DenseBlock, SingleLayerBlockEqualsDenseLayer) {
  Rng init(5);
  DenseBlockParams<float> block("b", 6, 1, 4, false, 0.2);
  randomize_convs(block, init);
  Rng data(6);
  auto t = random_tensor<float>(Shape{2, 6, 5, 5}, data);
  Graph<float> g1(false), g2(false);
  Rng r1(9), r2(9);
  const auto& yb = g1.value(dense_block_forward(g1, g1.input(t), block, Mode::train, r1));
  const auto& yl = g2.value(dense_layer_forward(g2, g2.input(t), block.layers[0], Mode::train, r2));
  ASSERT_EQ(yb.shape(), yl.shape());
  for (std::size_t i = 0; i < yb.numel(); ++i) EXPECT_EQ(yb[i], yl[i]);
}

TEST(DenseBlock, DeterministicWithoutDropoutAndInEval) {
  Rng init(7);
  DenseBlockParams<float> p0("b", 5, 3, 4, true, 0.0);
  randomize_convs(p0, init);
  Rng data(8);
  auto t = random_tensor<float>(Shape{2, 5, 4, 4}, data);
  auto run = [&](DenseBlockParams<float>& p, Mode mode, std::uint64_t seed) {
    Graph<float> g(false);
    Rng r(seed);
    return g.value(dense_block_forward(g, g.input(t), p, mode, r));
  };
  const auto a = run(p0, Mode::train, 1), b = run(p0, Mode::train, 2);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(a[i], b[i]);

  DenseBlockParams<float> p("b", 5, 3, 4, true, 0.2);
  randomize_convs(p, init);
  const auto e1 = run(p, Mode::eval, 1), e2 = run(p, Mode::eval, 1);
  for (std::size_t i = 0; i < e1.numel(); ++i) EXPECT_EQ(e1[i], e2[i]);
  const auto d1 = run(p, Mode::train, 3), d2 = run(p, Mode::train, 3);
  for (std::size_t i = 0; i < d1.numel(); ++i) EXPECT_EQ(d1[i], d2[i]);
}

TEST(TransitionDown, KeepsChannelsHalvesResolution) {
  Rng rng(9);
  TransitionDownParams<float> p("td", 112, 0.2);
  Graph<float> g(false);
  Var x = g.input(random_tensor<float>(Shape{1, 112, 8, 6}, rng));
  EXPECT_EQ(g.shape(transition_down(g, x, p, Mode::train, rng)), (Shape{1, 112, 4, 3}));
}

TEST(TransitionDown, FiveStagesDivideBy32) {
  Rng rng(10);
  TransitionDownParams<float> p("td", 3, 0.0);
  Graph<float> g(false);
  Var h = g.input(random_tensor<float>(Shape{1, 3, 64, 96}, rng));
  for (int i = 0; i < 5; ++i) h = transition_down(g, h, p, Mode::eval, rng);
  EXPECT_EQ(g.shape(h), (Shape{1, 3, 2, 3}));
  EXPECT_THROW(transition_down(g, g.input(Tensor<float>(Shape{1, 3, 1, 4})), p, Mode::eval, rng),
               DegenerateInputError);
}

TEST(TransitionUp, BottleneckPlusSkipGives896) {
  Rng rng(11);
  TransitionUpParams<float> p("tu", 240);
  Graph<float> g(false);
  Var block = g.input(random_tensor<float>(Shape{1, 240, 2, 2}, rng));
  Var skip = g.input(random_tensor<float>(Shape{1, 656, 4, 4}, rng));
  EXPECT_EQ(g.shape(transition_up(g, block, skip, p)), (Shape{1, 896, 4, 4}));
}

TEST(TransitionUp, ZeroBlockOutputGivesZerosThenSkip) {
  Rng rng(12);
  TransitionUpParams<float> p("tu", 3);
  for (auto& v : p.conv.value.data()) v = static_cast<float>(rng.uniform(-1, 1));
  auto skip_t = random_tensor<float>(Shape{2, 4, 6, 6}, rng);
  Graph<float> g(false);
  Var y = transition_up(g, g.input(Tensor<float>(Shape{2, 3, 3, 3})), g.input(skip_t), p);
  const auto& out = g.value(y);
  ASSERT_EQ(out.shape(), (Shape{2, 7, 6, 6}));
  for (std::size_t n = 0; n < 2; ++n) {
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < 36; ++i) EXPECT_EQ(out.plane(n, c)[i], 0.0f);
    for (std::size_t c = 0; c < 4; ++c)
      for (std::size_t i = 0; i < 36; ++i) EXPECT_EQ(out.plane(n, 3 + c)[i], skip_t.plane(n, c)[i]);
  }
}

TEST(TransitionUp, CropsToOddSkipAndRejectsLargerSkip) {
  Rng rng(13);
  TransitionUpParams<float> p("tu", 2);
  Graph<float> g(false);
  Var block = g.input(random_tensor<float>(Shape{1, 2, 4, 4}, rng));
  Var odd = g.input(random_tensor<float>(Shape{1, 5, 7, 7}, rng));
  EXPECT_EQ(g.shape(transition_up(g, block, odd, p)), (Shape{1, 7, 7, 7}));
  Var big = g.input(random_tensor<float>(Shape{1, 5, 9, 8}, rng));
  EXPECT_THROW(transition_up(g, block, big, p), DegenerateInputError);
}

TEST(TransitionUp, CenterCropKeepsTheMiddle) {
  Graph<double> g(false);
  Tensor<double> t(Shape{1, 1, 6, 8});
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = static_cast<double>(i);
  Var c = crop_center(g, g.input(t), 4, 5);
  const auto& out = g.value(c);
  // offsets (6-4)/2 = 1 and (8-5)/2 = 1
  EXPECT_EQ(out.at(0, 0, 0, 0), t.at(0, 0, 1, 1));
  EXPECT_EQ(out.at(0, 0, 3, 4), t.at(0, 0, 4, 5));
}

TEST(BlockGradients, ComposedBlocksPassFiniteDifferences) {
  for (const char* op : {"dense_layer", "dense_block", "dense_block_up", "transition_down", "transition_up"}) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      GradcheckOptions opt;
      opt.seed = seed;
      const auto r = run_gradcheck(op, opt);
      EXPECT_LT(r.max_rel_error, 1e-4) << op << " seed " << seed;
    }
  }
}
