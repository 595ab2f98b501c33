#include <gtest/gtest.h>

#include "midas/derived.hpp"

using namespace midas;
using namespace midas::op_id;

namespace {

Genotype darts_v2() {
  Genotype g;
  g.cells.push_back({CellRole::normal,
                     {{{0, sep_conv_3x3}, {1, sep_conv_3x3}},
                      {{0, sep_conv_3x3}, {1, sep_conv_3x3}},
                      {{1, sep_conv_3x3}, {0, skip_connect}},
                      {{0, skip_connect}, {2, dil_conv_3x3}}}});
  g.cells.push_back({CellRole::reduction,
                     {{{0, max_pool_3x3}, {1, max_pool_3x3}},
                      {{2, skip_connect}, {1, max_pool_3x3}},
                      {{0, max_pool_3x3}, {2, skip_connect}},
                      {{2, skip_connect}, {1, max_pool_3x3}}}});
  return g;
}

Genotype small_pair() {
  Genotype g;
  g.cells.push_back({CellRole::normal, {{{0, sep_conv_3x3}, {1, skip_connect}}, {{0, dil_conv_3x3}, {2, sep_conv_3x3}}}});
  g.cells.push_back({CellRole::reduction, {{{0, max_pool_3x3}, {1, sep_conv_3x3}}, {{1, skip_connect}, {2, avg_pool_3x3}}}});
  return g;
}

}  // namespace

TEST(Stacking, DartsPairAtTwentyLayers) {
  const auto plan = stacking_plan(darts_v2(), 20);
  ASSERT_EQ(plan.size(), 20u);
  for (int i = 0; i < 20; ++i) EXPECT_EQ(plan[static_cast<std::size_t>(i)], (i == 6 || i == 13) ? 1 : 0) << i;
}

TEST(Stacking, PerLevelDefaultAndExplicitRepeats) {
  auto base = small_pair();
  Genotype five;
  for (int i = 0; i < 5; ++i) five.cells.push_back(base.cells[static_cast<std::size_t>(i % 2)]);
  const auto plan = stacking_plan(five, 20);
  const std::vector<int> want{0, 0, 0, 0, 0, 0, 1, 2, 2, 2, 2, 2, 2, 3, 4, 4, 4, 4, 4, 4};
  EXPECT_EQ(plan, want);
  EXPECT_THROW(stacking_plan(five, 19), std::invalid_argument);
  EXPECT_EQ(stacking_plan(five, 7, {1, 1, 3, 1, 1}), (std::vector<int>{0, 1, 2, 2, 2, 3, 4}));
  EXPECT_THROW(stacking_plan(five, 7, {1, 1, 1}), std::invalid_argument);
  Genotype only_normal;
  only_normal.cells.push_back(base.cells[0]);
  EXPECT_THROW(stacking_plan(only_normal, 8), std::invalid_argument);
}

// 3,349,342 is the parameter count (auxiliary tower excluded) of the published
// DARTS_V2 network at 36 channels and 20 layers.
TEST(Derived, DartsV2ParameterCount) {
  DerivedConfig cfg;
  DerivedNetwork net(darts_v2(), cfg);
  EXPECT_EQ(net.num_layers(), 20);
  EXPECT_TRUE(net.has_auxiliary());
  EXPECT_EQ(net.parameter_count(), 3349342u);
  EXPECT_GT(net.parameter_count(true), net.parameter_count());
}

TEST(Derived, OutputShapesAndAuxOnlyInTraining) {
  DerivedConfig cfg;
  cfg.channels = 4;
  cfg.layers = 5;
  cfg.num_classes = 3;
  DerivedNetwork net(small_pair(), cfg);
  Tensor x({2, 3, 16, 16});
  std::mt19937_64 rng(1);
  std::normal_distribution<float> nd;
  for (auto& v : x.storage()) v = nd(rng);
  nn::Context train{true, &rng, 0.1f};
  const auto a = net.forward(x, train);
  EXPECT_EQ(a.logits->value.shape(), (std::vector<int>{2, 3}));
  ASSERT_TRUE(a.aux_logits);
  EXPECT_EQ(a.aux_logits->value.shape(), (std::vector<int>{2, 3}));
  ag::NoGradGuard ng;
  const auto b = net.forward(x, nn::Context{false, nullptr, 0.0f});
  EXPECT_FALSE(b.aux_logits);
  const auto c = net.forward(x, nn::Context{false, nullptr, 0.0f});
  EXPECT_EQ(b.logits->value.storage(), c.logits->value.storage());
}

TEST(Derived, InvalidGenotypeRejected) {
  auto g = small_pair();
  g.cells[0].nodes[0][1].input = 0;
  EXPECT_THROW(DerivedNetwork(g, DerivedConfig{}), std::invalid_argument);
}

TEST(Derived, SameSeedSameWeights) {
  DerivedConfig cfg;
  cfg.channels = 4;
  cfg.layers = 3;
  cfg.init_seed = 3;
  DerivedNetwork a(small_pair(), cfg), b(small_pair(), cfg);
  auto sa = a.state_dict(), sb = b.state_dict();
  ASSERT_EQ(sa.params.size(), sb.params.size());
  for (std::size_t i = 0; i < sa.params.size(); ++i) {
    EXPECT_EQ(sa.params[i].first, sb.params[i].first);
    EXPECT_EQ(sa.params[i].second->value.storage(), sb.params[i].second->value.storage()) << sa.params[i].first;
  }
}

TEST(Derived, SmokeTrainBeatsChance) {
  PlantedParams pp;
  pp.grating_amplitude = 1.0;
  pp.noise_std = 0.35;
  const auto data = generate_planted(pp, 360, 4);
  std::vector<int> train, test;
  for (int i = 0; i < data.size(); ++i) (i < 280 ? train : test).push_back(i);
  DerivedConfig cfg;
  cfg.channels = 6;
  cfg.layers = 3;
  cfg.num_classes = 2;
  cfg.init_seed = 2;
  DerivedNetwork net(small_pair(), cfg);
  RetrainHyperparams hp;
  hp.epochs = 6;
  hp.batch_size = 32;
  hp.lr = 0.05;
  hp.cutout_size = 0;
  int calls = 0;
  const auto log = train_derived(net, data, train, test, hp, 1, [&](const RetrainEpoch&) { ++calls; });
  ASSERT_EQ(log.size(), 6u);
  EXPECT_EQ(calls, 6);
  EXPECT_DOUBLE_EQ(log[0].drop_path, 0.0);
  EXPECT_GT(log[5].drop_path, log[1].drop_path);
  EXPECT_LT(log[5].lr, log[0].lr);
  EXPECT_LT(log.back().train_loss, log.front().train_loss);
  EXPECT_GT(log.back().test_acc, 0.65);
}
