#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>

#include "midas/trainer.hpp"

using namespace midas;

namespace {

SupernetConfig tiny_config(int classes = 2) {
  SupernetConfig c;
  c.num_cells = 3;
  c.reduction_cells = {1};
  c.init_channels = 4;
  c.nodes_per_cell = 2;
  c.patch_size = 4;
  c.num_classes = classes;
  return c;
}

Dataset easy_data(int n, std::uint64_t seed) {
  PlantedParams p;
  p.image_size = 8;
  p.grating_extent = 6;
  p.noise_std = 0.2;
  p.clutter_std = 0.3;
  return generate_planted(p, n, seed);
}

std::vector<std::vector<float>> snapshot(const std::vector<ag::Parameter*>& ps) {
  std::vector<std::vector<float>> s;
  for (auto* p : ps) s.push_back(p->value.storage());
  return s;
}

std::filesystem::path temp_dir(const std::string& name) {
  auto d = std::filesystem::temp_directory_path() / ("midas_trainer_" + name);
  std::filesystem::remove_all(d);
  return d;
}

}  // namespace

TEST(Split, SizesDisjointAndDeterministic) {
  const auto s = split_dataset(101, {0.4, 0.4, 0.2}, 3);
  EXPECT_EQ(s.a.size(), 41u);
  EXPECT_EQ(s.b.size(), 40u);
  EXPECT_EQ(s.holdout.size(), 20u);
  std::set<int> all(s.a.begin(), s.a.end());
  all.insert(s.b.begin(), s.b.end());
  all.insert(s.holdout.begin(), s.holdout.end());
  EXPECT_EQ(all.size(), 101u);
  EXPECT_EQ(*all.begin(), 0);
  EXPECT_EQ(*all.rbegin(), 100);
  const auto t = split_dataset(101, {0.4, 0.4, 0.2}, 3);
  EXPECT_EQ(s.a, t.a);
  EXPECT_EQ(s.holdout, t.holdout);
  EXPECT_NE(s.a, split_dataset(101, {0.4, 0.4, 0.2}, 4).a);
  const auto h = split_dataset(7, {0.5, 0.5, 0.0}, 1);
  EXPECT_EQ(h.a.size(), 4u);
  EXPECT_EQ(h.b.size(), 3u);
  EXPECT_TRUE(h.holdout.empty());
  EXPECT_THROW(split_dataset(10, {0.5, 0.6, 0.0}, 1), std::invalid_argument);
}

TEST(Cutout, ZeroesClippedSquare) {
  std::mt19937_64 rng(8);
  for (int t = 0; t < 50; ++t) {
    Tensor img({2, 9, 9});
    img.fill(1.0f);
    auto probe = rng;
    const int cy = static_cast<int>(probe() % 9u), cx = static_cast<int>(probe() % 9u);
    cutout(img, 4, rng);
    int zeros = 0;
    for (int c = 0; c < 2; ++c)
      for (int y = 0; y < 9; ++y)
        for (int x = 0; x < 9; ++x) {
          const bool inside = y >= cy - 2 && y < cy + 2 && x >= cx - 2 && x < cx + 2;
          EXPECT_EQ(img.at({c, y, x}), inside ? 0.0f : 1.0f);
          zeros += img.at({c, y, x}) == 0.0f;
        }
    EXPECT_LE(zeros, 2 * 16);
  }
  Tensor img({1, 4, 4});
  img.fill(2.0f);
  cutout(img, 0, rng);
  for (float v : img.storage()) EXPECT_EQ(v, 2.0f);
}

TEST(Schedule, CosineEndpoints) {
  EXPECT_DOUBLE_EQ(cosine_lr(0, 50, 0.025, 0.001), 0.025);
  EXPECT_NEAR(cosine_lr(49, 50, 0.025, 0.001), 0.001, 1e-15);
  EXPECT_NEAR(cosine_lr(2, 5, 1.0, 0.0), 0.5, 1e-15);
  for (int e = 1; e < 50; ++e) EXPECT_LT(cosine_lr(e, 50, 0.025, 0.001), cosine_lr(e - 1, 50, 0.025, 0.001));
}

TEST(Optim, SgdMomentumAndDecay) {
  ag::Parameter p("w", Tensor({2}, {1.0f, -2.0f}));
  SGD sgd({&p}, 0.9, 0.1);
  p.grad = Tensor({2}, {0.5f, 0.5f});
  sgd.step(0.1);
  // g = 0.5 + 0.1 * w; v = g; w -= 0.1 v
  EXPECT_NEAR(p.value[0], 1.0 - 0.1 * 0.6, 1e-6);
  EXPECT_NEAR(p.value[1], -2.0 - 0.1 * 0.3, 1e-6);
  const float v0 = 0.6f, w0 = p.value[0];
  sgd.step(0.1);
  const float g0 = 0.5f + 0.1f * w0;
  EXPECT_NEAR(p.value[0], w0 - 0.1f * (0.9f * v0 + g0), 1e-6);
}

TEST(Optim, AdamFirstStepsMatchClosedForm) {
  ag::Parameter p("a", Tensor({1}, {0.5f}));
  Adam adam({&p}, 1e-2, 0.9, 0.999, 0.0);
  p.grad = Tensor({1}, {3.0f});
  adam.step();
  EXPECT_NEAR(p.value[0], 0.5 - 1e-2, 1e-7);  // bias-corrected first step has magnitude lr
  p.grad = Tensor({1}, {-1.0f});
  adam.step();
  const double m = 0.9 * 0.1 * 3.0 + 0.1 * -1.0, v = 0.999 * 0.001 * 9.0 + 0.001 * 1.0;
  const double upd = 1e-2 * (m / (1 - 0.81)) / (std::sqrt(v / (1 - 0.999 * 0.999)) + 1e-8);
  EXPECT_NEAR(p.value[0], 0.49 - upd, 1e-6);
  EXPECT_EQ(adam.steps(), 2);
  ag::Parameter q("b", Tensor({1}, {1.0f}));
  Adam decayed({&q}, 1e-2, 0.9, 0.999, 1e-3);
  q.grad = Tensor({1}, {0.0f});
  decayed.step();
  EXPECT_NEAR(q.value[0], 1.0 - 1e-2, 1e-6);  // L2 term alone drives the step
}

TEST(Optim, ClipGradNorm) {
  ag::Parameter a("a", Tensor({2}, {0, 0})), b("b", Tensor({1}, {0}));
  a.grad = Tensor({2}, {3.0f, 0.0f});
  b.grad = Tensor({1}, {4.0f});
  clip_grad_norm({&a, &b}, 1.0);
  EXPECT_NEAR(global_grad_norm({&a, &b}), 1.0, 1e-5);
  EXPECT_NEAR(a.grad[0] / b.grad[0], 0.75, 1e-6);
  clip_grad_norm({&a, &b}, 10.0);
  EXPECT_NEAR(global_grad_norm({&a, &b}), 1.0, 1e-5);
}

TEST(Bilevel, PartitionsAreDisjointAndComplete) {
  Supernet net(tiny_config());
  SearchHyperparams hp;
  BilevelState st(net, hp);
  std::set<ag::Parameter*> w(st.weight_params().begin(), st.weight_params().end());
  for (auto* p : st.arch_params()) EXPECT_FALSE(w.count(p)) << p->name;
  EXPECT_FALSE(st.arch_params().empty());
  EXPECT_EQ(w.size() + st.arch_params().size(), net.state_dict().params.size());
}

TEST(Bilevel, PhasesTouchOnlyTheirPartition) {
  Supernet net(tiny_config());
  const auto data = easy_data(64, 1);
  std::vector<int> idx(64);
  std::iota(idx.begin(), idx.end(), 0);
  const auto ba = make_batch<std::mt19937_64>(data, idx, 0, 16, 0, nullptr);
  const auto bb = make_batch<std::mt19937_64>(data, idx, 16, 32, 0, nullptr);
  SearchHyperparams hp;
  hp.arch_lr = 1e-2;
  BilevelState st(net, hp);
  auto w0 = snapshot(st.weight_params()), a0 = snapshot(st.arch_params());
  st.arch_phase(ba);
  EXPECT_EQ(snapshot(st.weight_params()), w0);
  auto a1 = snapshot(st.arch_params());
  EXPECT_NE(a1, a0);
  st.weight_phase(bb, 0.05);
  EXPECT_EQ(snapshot(st.arch_params()), a1);
  EXPECT_NE(snapshot(st.weight_params()), w0);
  for (auto* p : st.weight_params()) EXPECT_TRUE(p->trainable);
  for (auto* p : st.arch_params()) EXPECT_TRUE(p->trainable);
}

TEST(Bilevel, WeightLossDropsOnEasyTask) {
  Supernet net(tiny_config());
  const auto data = easy_data(256, 2);
  const auto split = split_dataset(data.size(), {}, 2);
  SearchHyperparams hp;
  hp.arch_lr = 3e-3;
  hp.arch_weight_decay = 0;
  BilevelState st(net, hp);
  std::mt19937_64 rng(1);
  std::vector<double> lb;
  for (int s = 0; s < 50; ++s) {
    const std::size_t o = static_cast<std::size_t>(s % 8) * 16;
    const auto ba = make_batch(data, split.a, o, o + 16, 0, &rng);
    const auto bb = make_batch(data, split.b, o, o + 16, 0, &rng);
    lb.push_back(st.step(ba, bb, 0.05).loss_b);
  }
  EXPECT_EQ(st.steps(), 50);
  const double first = (lb[0] + lb[1] + lb[2] + lb[3] + lb[4]) / 5;
  const double last = (lb[45] + lb[46] + lb[47] + lb[48] + lb[49]) / 5;
  EXPECT_LT(last, 0.7 * first);
}

TEST(Bilevel, NonFiniteLossIsReported) {
  Supernet net(tiny_config());
  const auto data = easy_data(8, 3);
  std::vector<int> idx{0, 1, 2, 3};
  auto b = make_batch<std::mt19937_64>(data, idx, 0, 4, 0, nullptr);
  b.images.data()[5] = std::numeric_limits<float>::quiet_NaN();
  SearchHyperparams hp;
  BilevelState st(net, hp);
  EXPECT_THROW(st.step(b, b, 0.025), NonFiniteLoss);
  for (auto* p : st.weight_params()) EXPECT_TRUE(p->trainable);
}

TEST(Search, DeterministicAndPersisted) {
  const auto data = easy_data(96, 4);
  SearchHyperparams hp;
  hp.epochs = 2;
  hp.batch_size = 16;
  hp.cutout_size = 3;
  hp.split = {0.4, 0.4, 0.2};
  const auto dir = temp_dir("persist");
  SearchOptions opt;
  opt.out_dir = dir;
  opt.provenance = {{"seed", 5}};
  int seen = 0;
  opt.on_epoch = [&](const EpochMetrics& m, Supernet&) { EXPECT_EQ(m.epoch, seen++); };
  const auto r1 = run_search(tiny_config(), hp, data, 5, opt);
  const auto r2 = run_search(tiny_config(), hp, data, 5);
  EXPECT_EQ(seen, 2);
  ASSERT_EQ(r1.metrics.size(), 2u);
  for (std::size_t e = 0; e < 2; ++e) {
    EXPECT_EQ(r1.metrics[e].loss_a, r2.metrics[e].loss_a);
    EXPECT_EQ(r1.metrics[e].loss_b, r2.metrics[e].loss_b);
    EXPECT_EQ(r1.metrics[e].val_acc, r2.metrics[e].val_acc);
  }
  auto s1 = r1.net->state_dict(), s2 = r2.net->state_dict();
  for (std::size_t i = 0; i < s1.params.size(); ++i)
    EXPECT_EQ(s1.params[i].second->value.storage(), s2.params[i].second->value.storage());
  EXPECT_EQ(r1.split.holdout, r2.split.holdout);
  EXPECT_EQ(r1.split.holdout.size(), 19u);

  EXPECT_TRUE(std::filesystem::exists(dir / "epoch_0.ckpt"));
  EXPECT_TRUE(std::filesystem::exists(dir / "epoch_1.ckpt"));
  EXPECT_EQ(r1.final_checkpoint, dir / "final.ckpt");
  std::ifstream csv(dir / "metrics.csv");
  std::string line;
  std::getline(csv, line);
  EXPECT_EQ(line.rfind("# ", 0), 0u);
  EXPECT_NE(line.find("\"seed\":5"), std::string::npos);
  std::getline(csv, line);
  EXPECT_EQ(line, "epoch,loss_A,loss_B,val_acc,marginal_std_mean");
  int rows = 0;
  while (std::getline(csv, line)) ++rows;
  EXPECT_EQ(rows, 2);
  auto loaded = load_checkpoint(r1.final_checkpoint.string());
  auto sl = loaded.net->state_dict();
  for (std::size_t i = 0; i < s1.params.size(); ++i)
    EXPECT_EQ(s1.params[i].second->value.storage(), sl.params[i].second->value.storage());
  std::filesystem::remove_all(dir);
}

TEST(Search, RejectsBadHyperparameters) {
  const auto data = easy_data(16, 5);
  SearchHyperparams hp;
  hp.epochs = 0;
  EXPECT_THROW(run_search(tiny_config(), hp, data, 1), std::invalid_argument);
  hp = {};
  hp.split = {0.5, 0.3, 0.1};
  EXPECT_THROW(run_search(tiny_config(), hp, data, 1), std::invalid_argument);
  auto cfg = tiny_config();
  cfg.in_channels = 1;
  EXPECT_THROW(run_search(cfg, SearchHyperparams{}, data, 1), std::invalid_argument);
}

TEST(Evaluate, RecordsTraceWithLabels) {
  Supernet net(tiny_config());
  const auto data = easy_data(20, 6);
  std::vector<int> idx(20);
  std::iota(idx.begin(), idx.end(), 0);
  ArchTrace trace;
  const auto r = evaluate(net, data, idx, 8, &trace);
  EXPECT_EQ(trace.sample_count, 20);
  EXPECT_EQ(trace.labels.size(), 20u);
  EXPECT_GE(r.accuracy, 0.0);
  EXPECT_LE(r.accuracy, 1.0);
  EXPECT_GT(r.loss, 0.0);
  EXPECT_EQ(trace.nodes.size(), 6u);
}
