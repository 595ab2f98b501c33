#pragma once

// Discrete network built from a decoded genotype, and its retraining loop.

#include <chrono>
#include <functional>
#include <memory>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "midas/autograd.hpp"
#include "midas/data.hpp"
#include "midas/nn.hpp"
#include "midas/search_space.hpp"
#include "midas/trainer.hpp"

namespace midas {

struct DerivedConfig {
  int channels = 36;
  int layers = 20;
  int num_classes = 10;
  int in_channels = 3;
  int stem_multiplier = 3;
  bool auxiliary = true;
  std::vector<int> repeats;  // per genotype cell; empty selects the default plan
  std::uint64_t init_seed = 0;
};

/// Genotype cell index used at every layer.
///
/// Two-cell genotypes (normal, reduction) follow the DARTS layout with
/// reductions at L/3 and 2L/3. Otherwise cells are stacked in order with the
/// given repeats; the per-level default is (r, 1, r, 1, r) with 3r + 2 = L.
inline std::vector<int> stacking_plan(const Genotype& g, int layers, const std::vector<int>& repeats = {}) {
  if (layers < 1) throw std::invalid_argument("derived network needs at least one layer");
  const int n = static_cast<int>(g.cells.size());
  if (n == 0) throw std::invalid_argument("genotype has no cells");
  std::vector<int> plan;
  const bool darts_pair = repeats.empty() && n <= 2 && g.cells[0].role == CellRole::normal;
  if (darts_pair) {
    const std::set<int> red{layers / 3, 2 * layers / 3};
    for (int i = 0; i < layers; ++i) {
      if (layers >= 3 && red.count(i)) {
        if (n < 2 || g.cells[1].role != CellRole::reduction)
          throw std::invalid_argument("genotype lacks a reduction cell for layer " + std::to_string(i));
        plan.push_back(1);
      } else {
        plan.push_back(0);
      }
    }
    return plan;
  }
  auto r = repeats;
  if (r.empty()) {
    if (n != 5 || (layers - 2) % 3 != 0 || layers < 5)
      throw std::invalid_argument("no default stacking for " + std::to_string(n) + " cells at " +
                                  std::to_string(layers) + " layers");
    const int k = (layers - 2) / 3;
    r = {k, 1, k, 1, k};
  }
  if (static_cast<int>(r.size()) != n) throw std::invalid_argument("repeats must match the genotype cell count");
  for (int c = 0; c < n; ++c)
    for (int k = 0; k < r[static_cast<std::size_t>(c)]; ++k) plan.push_back(c);
  if (static_cast<int>(plan.size()) != layers)
    throw std::invalid_argument("stacking plan covers " + std::to_string(plan.size()) + " layers, expected " +
                                std::to_string(layers));
  return plan;
}

class DerivedCell {
 public:
  template <typename Rng>
  DerivedCell(const CellGenotype& g, int c_pp, int c_p, int channels, bool reduction_prev, Rng& rng)
      : reduction_(g.role == CellRole::reduction), genotype_(g) {
    if (reduction_prev)
      pre0_ = std::make_unique<nn::FactorizedReduce>(c_pp, channels, true, rng);
    else
      pre0_ = std::make_unique<nn::ReLUConvBN>(c_pp, channels, 1, 1, 0, true, rng);
    pre1_ = std::make_unique<nn::ReLUConvBN>(c_p, channels, 1, 1, 0, true, rng);
    for (const auto& node : g.nodes) {
      std::vector<std::unique_ptr<nn::Operation>> ops;
      for (const auto& e : node) {
        const int stride = reduction_ && e.input < 2 ? 2 : 1;
        ops.push_back(nn::make_operation(e.op, channels, stride, true, false, rng));
      }
      ops_.push_back(std::move(ops));
    }
  }

  bool reduction() const { return reduction_; }
  int multiplier() const { return static_cast<int>(genotype_.nodes.size()); }

  ag::Var forward(const ag::Var& s0, const ag::Var& s1, const nn::Context& ctx) {
    std::vector<ag::Var> states{pre0_->forward(s0, ctx), pre1_->forward(s1, ctx)};
    for (std::size_t k = 0; k < genotype_.nodes.size(); ++k) {
      ag::Var sum;
      for (std::size_t j = 0; j < genotype_.nodes[k].size(); ++j) {
        const auto& e = genotype_.nodes[k][j];
        auto& op = ops_[k][j];
        auto h = op->forward(states[static_cast<std::size_t>(e.input)], ctx);
        if (ctx.training && ctx.drop_path_prob > 0.0f && !op->is_identity() && ctx.rng)
          h = ag::drop_path(h, ctx.drop_path_prob, *ctx.rng);
        sum = sum ? ag::add(sum, h) : h;
      }
      states.push_back(sum);
    }
    return ag::concat_channels(std::vector<ag::Var>(states.begin() + 2, states.end()));
  }

  void collect(nn::StateDict& sd) {
    {
      nn::StateDict::Scope s(sd, "pre0");
      pre0_->collect(sd);
    }
    {
      nn::StateDict::Scope s(sd, "pre1");
      pre1_->collect(sd);
    }
    for (std::size_t k = 0; k < ops_.size(); ++k)
      for (std::size_t j = 0; j < ops_[k].size(); ++j) {
        nn::StateDict::Scope s(sd, "node" + std::to_string(k) + ".edge" + std::to_string(j));
        ops_[k][j]->collect(sd);
      }
  }

 private:
  bool reduction_;
  CellGenotype genotype_;
  std::unique_ptr<nn::Operation> pre0_, pre1_;
  std::vector<std::vector<std::unique_ptr<nn::Operation>>> ops_;
};

/// Auxiliary tower: ReLU, 1x1 conv to 128 channels, BN, ReLU, global pooling, linear.
class AuxiliaryHead {
 public:
  template <typename Rng>
  AuxiliaryHead(int c_in, int num_classes, Rng& rng)
      : conv_(c_in, 128, 1, {1, 0, 1, 1}, rng), bn_(128, true), fc_(128, num_classes, rng) {}
  ag::Var forward(const ag::Var& x, const nn::Context& ctx) {
    auto h = ag::relu(bn_.forward(conv_.forward(ag::relu(x)), ctx));
    return fc_.forward(ag::global_avg_pool(h));
  }
  void collect(nn::StateDict& sd) {
    {
      nn::StateDict::Scope s(sd, "conv");
      conv_.collect(sd);
    }
    {
      nn::StateDict::Scope s(sd, "bn");
      bn_.collect(sd);
    }
    nn::StateDict::Scope s(sd, "fc");
    fc_.collect(sd);
  }

 private:
  nn::Conv2d conv_;
  nn::BatchNorm2d bn_;
  nn::Linear fc_;
};

struct DerivedOutput {
  ag::Var logits;
  ag::Var aux_logits;  // null unless training with the auxiliary head
};

class DerivedNetwork {
 public:
  DerivedNetwork(const Genotype& g, DerivedConfig cfg) : cfg_(std::move(cfg)), genotype_(g) {
    const auto report = validate_genotype(g, infer_space(g));
    if (!report.empty())
      throw std::invalid_argument("invalid genotype (cell " + std::to_string(report.front().cell) + " node " +
                                  std::to_string(report.front().node) + "): " + report.front().message);
    plan_ = stacking_plan(g, cfg_.layers, cfg_.repeats);
    std::mt19937_64 rng(cfg_.init_seed);
    const int c_stem = cfg_.stem_multiplier * cfg_.channels;
    stem_ = std::make_unique<nn::Stem>(cfg_.in_channels, c_stem, rng);
    int c_pp = c_stem, c_p = c_stem, c = cfg_.channels;
    bool reduction_prev = false;
    int last_reduction = -1;
    for (std::size_t i = 0; i < plan_.size(); ++i)
      if (g.cells[static_cast<std::size_t>(plan_[i])].role == CellRole::reduction) last_reduction = static_cast<int>(i);
    for (std::size_t i = 0; i < plan_.size(); ++i) {
      const auto& cg = g.cells[static_cast<std::size_t>(plan_[i])];
      const bool red = cg.role == CellRole::reduction;
      if (red) c *= 2;
      cells_.push_back(std::make_unique<DerivedCell>(cg, c_pp, c_p, c, reduction_prev, rng));
      reduction_prev = red;
      c_pp = c_p;
      c_p = static_cast<int>(cg.nodes.size()) * c;
      if (static_cast<int>(i) == last_reduction && cfg_.auxiliary) {
        aux_at_ = static_cast<int>(i);
        aux_ = std::make_unique<AuxiliaryHead>(c_p, cfg_.num_classes, rng);
      }
    }
    classifier_ = std::make_unique<nn::Linear>(c_p, cfg_.num_classes, rng);
  }

  const DerivedConfig& config() const { return cfg_; }
  const std::vector<int>& plan() const { return plan_; }
  const Genotype& genotype() const { return genotype_; }
  int num_layers() const { return static_cast<int>(cells_.size()); }
  bool has_auxiliary() const { return aux_ != nullptr; }

  DerivedOutput forward(const Tensor& images, const nn::Context& ctx) {
    if (images.rank() != 4 || images.dim(1) != cfg_.in_channels)
      throw ShapeError("derived network: images " + shape_str(images.shape()));
    DerivedOutput out;
    auto s0 = stem_->forward(ag::constant(images), ctx);
    auto s1 = s0;
    for (std::size_t i = 0; i < cells_.size(); ++i) {
      auto y = cells_[i]->forward(s0, s1, ctx);
      s0 = s1;
      s1 = y;
      if (aux_ && ctx.training && static_cast<int>(i) == aux_at_) out.aux_logits = aux_->forward(s1, ctx);
    }
    out.logits = classifier_->forward(ag::global_avg_pool(s1));
    return out;
  }

  nn::StateDict state_dict(bool include_aux = true) {
    nn::StateDict sd;
    {
      nn::StateDict::Scope s(sd, "stem");
      stem_->collect(sd);
    }
    for (std::size_t i = 0; i < cells_.size(); ++i) {
      nn::StateDict::Scope s(sd, "cell" + std::to_string(i));
      cells_[i]->collect(sd);
    }
    if (aux_ && include_aux) {
      nn::StateDict::Scope s(sd, "aux");
      aux_->collect(sd);
    }
    nn::StateDict::Scope s(sd, "classifier");
    classifier_->collect(sd);
    return sd;
  }

  std::vector<ag::Parameter*> parameters() {
    std::vector<ag::Parameter*> ps;
    for (auto& [n, p] : state_dict().params) ps.push_back(p);
    return ps;
  }

  /// Learnable scalar count; the auxiliary tower is excluded by default.
  std::size_t parameter_count(bool include_aux = false) {
    std::size_t n = 0;
    for (auto& [name, p] : state_dict(include_aux).params) n += p->value.size();
    return n;
  }

  /// Search space implied by the genotype's node count and edge layout.
  static SearchSpace infer_space(const Genotype& g) {
    const int nodes = g.cells.empty() ? 1 : std::max<int>(1, static_cast<int>(g.cells[0].nodes.size()));
    bool per_edge = false;
    for (const auto& c : g.cells)
      for (std::size_t k = 0; k < c.nodes.size(); ++k)
        if (c.nodes[k].size() != 2 && static_cast<int>(c.nodes[k].size()) == SearchSpace::inputs_to_node(static_cast<int>(k)))
          per_edge = true;
    return SearchSpace::darts(nodes, per_edge ? TopologyMode::per_edge : TopologyMode::pairwise);
  }

 private:
  DerivedConfig cfg_;
  Genotype genotype_;
  std::vector<int> plan_;
  std::unique_ptr<nn::Stem> stem_;
  std::vector<std::unique_ptr<DerivedCell>> cells_;
  std::unique_ptr<AuxiliaryHead> aux_;
  int aux_at_ = -1;
  std::unique_ptr<nn::Linear> classifier_;
};

struct RetrainHyperparams {
  int epochs = 600;
  int batch_size = 96;
  double lr = 0.025;
  double lr_min = 0.0;
  double momentum = 0.9;
  double weight_decay = 3e-4;
  int cutout_size = 16;
  double drop_path_max = 0.2;  // increased linearly from 0
  double aux_weight = 0.4;
  double grad_clip_norm = 5.0;
};

struct RetrainEpoch {
  int epoch = 0;
  double lr = 0, drop_path = 0, train_loss = 0, train_acc = 0, test_acc = 0, seconds = 0;
};

inline double evaluate_derived(DerivedNetwork& net, const Dataset& d, const std::vector<int>& idx, int batch_size) {
  if (idx.empty()) return 0.0;
  ag::NoGradGuard ng;
  nn::Context ctx{false, nullptr, 0.0f};
  int hit = 0;
  const std::size_t bs = static_cast<std::size_t>(batch_size);
  for (std::size_t s = 0; s < idx.size(); s += bs) {
    const auto b = make_batch<std::mt19937_64>(d, idx, s, std::min(idx.size(), s + bs), 0, nullptr);
    const auto out = net.forward(b.images, ctx);
    const int K = out.logits->value.dim(1);
    for (std::size_t i = 0; i < b.labels.size(); ++i) {
      const float* z = out.logits->value.data() + i * static_cast<std::size_t>(K);
      hit += static_cast<int>(std::max_element(z, z + K) - z) == b.labels[i];
    }
  }
  return static_cast<double>(hit) / static_cast<double>(idx.size());
}

/// SGD with cosine learning rate, cutout, linearly increasing drop path and
/// the auxiliary loss.
inline std::vector<RetrainEpoch> train_derived(DerivedNetwork& net, const Dataset& data,
                                               const std::vector<int>& train_idx, const std::vector<int>& test_idx,
                                               const RetrainHyperparams& hp, std::uint64_t seed,
                                               const std::function<void(const RetrainEpoch&)>& on_epoch = {}) {
  if (train_idx.empty()) throw std::invalid_argument("retrain: empty training set");
  auto params = net.parameters();
  SGD sgd(params, hp.momentum, hp.weight_decay);
  std::mt19937_64 rng(seed ^ 0x5eedfaceULL);
  std::vector<RetrainEpoch> log;
  const std::size_t bs = static_cast<std::size_t>(hp.batch_size);
  for (int epoch = 0; epoch < hp.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    RetrainEpoch m;
    m.epoch = epoch;
    m.lr = cosine_lr(epoch, hp.epochs, hp.lr, hp.lr_min);
    m.drop_path = hp.epochs > 0 ? hp.drop_path_max * epoch / hp.epochs : 0.0;
    auto order = train_idx;
    std::shuffle(order.begin(), order.end(), rng);
    int hit = 0;
    double loss_sum = 0;
    for (std::size_t s = 0; s < order.size(); s += bs) {
      const auto b = make_batch(data, order, s, std::min(order.size(), s + bs), hp.cutout_size, &rng);
      for (auto* p : params) p->zero_grad();
      nn::Context ctx{true, &rng, static_cast<float>(m.drop_path)};
      const auto out = net.forward(b.images, ctx);
      auto loss = ag::cross_entropy(out.logits, b.labels);
      if (out.aux_logits && hp.aux_weight > 0)
        loss = ag::add(loss, ag::scale(ag::cross_entropy(out.aux_logits, b.labels), static_cast<float>(hp.aux_weight)));
      const double l = loss->value[0];
      if (!std::isfinite(l)) throw NonFiniteLoss("non-finite retrain loss at epoch " + std::to_string(epoch));
      ag::backward(loss);
      if (hp.grad_clip_norm > 0) clip_grad_norm(params, hp.grad_clip_norm);
      sgd.step(m.lr);
      loss_sum += l * static_cast<double>(b.labels.size());
      const int K = out.logits->value.dim(1);
      for (std::size_t i = 0; i < b.labels.size(); ++i) {
        const float* z = out.logits->value.data() + i * static_cast<std::size_t>(K);
        hit += static_cast<int>(std::max_element(z, z + K) - z) == b.labels[i];
      }
    }
    m.train_loss = loss_sum / static_cast<double>(order.size());
    m.train_acc = static_cast<double>(hit) / static_cast<double>(order.size());
    m.test_acc = evaluate_derived(net, data, test_idx, hp.batch_size);
    m.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    log.push_back(m);
    if (on_epoch) on_epoch(m);
  }
  return log;
}

}  // namespace midas
