#pragma once

// First-order alternating bilevel search: an attention step on split A, then a
// weight step on split B, for every iteration.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "midas/data.hpp"
#include "midas/supernet.hpp"
#include "midas/trace.hpp"

namespace midas {

struct SplitFractions {
  double a = 0.5, b = 0.5, holdout = 0.0;
};

struct SearchHyperparams {
  int epochs = 50;
  int batch_size = 64;
  double w_lr = 0.025;
  double w_lr_min = 1e-3;
  double w_momentum = 0.9;
  double w_weight_decay = 3e-3;
  double arch_lr = 1e-4;
  double arch_weight_decay = 1e-3;
  double arch_beta1 = 0.9;
  double arch_beta2 = 0.999;
  int cutout_size = 16;
  int arch_warmup_epochs = 0;  // leading epochs that update weights only
  bool grad_clip = true;
  double grad_clip_norm = 5.0;
  SplitFractions split;

  void validate() const {
    if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
    for (double r : {w_lr, w_lr_min, arch_lr})
      if (!(r > 0)) throw std::invalid_argument("learning rates must be positive");
    if (w_weight_decay < 0 || arch_weight_decay < 0)
      throw std::invalid_argument("weight decay must be non-negative");
    if (cutout_size < 0) throw std::invalid_argument("cutout_size must be >= 0");
    if (arch_warmup_epochs < 0 || arch_warmup_epochs >= epochs)
      throw std::invalid_argument("arch_warmup_epochs must lie in [0, epochs)");
    if (split.a < 0 || split.b < 0 || split.holdout < 0 ||
        std::abs(split.a + split.b + split.holdout - 1.0) > 1e-9)
      throw std::invalid_argument("split fractions must be non-negative and sum to 1");
  }
};

struct DataSplit {
  std::vector<int> a, b, holdout;
};

/// Seeded shuffle, then sizes floor(n * f) with the remainder handed out one
/// by one to the parts in order A, B, holdout.
inline DataSplit split_dataset(int n, const SplitFractions& f, std::uint64_t seed) {
  if (n < 0) throw std::invalid_argument("split_dataset: negative size");
  if (f.a < 0 || f.b < 0 || f.holdout < 0 || std::abs(f.a + f.b + f.holdout - 1.0) > 1e-9)
    throw std::invalid_argument("split_dataset: fractions must be non-negative and sum to 1");
  std::vector<int> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  const std::array<double, 3> fr{f.a, f.b, f.holdout};
  std::array<int, 3> sizes{};
  int used = 0;
  for (std::size_t k = 0; k < 3; ++k) {
    sizes[k] = static_cast<int>(std::floor(n * fr[k] + 1e-9));
    used += sizes[k];
  }
  for (std::size_t k = 0; used < n; k = (k + 1) % 3)
    if (fr[k] > 0) {
      ++sizes[k];
      ++used;
    }
  DataSplit s;
  auto it = idx.begin();
  s.a.assign(it, it + sizes[0]);
  it += sizes[0];
  s.b.assign(it, it + sizes[1]);
  it += sizes[1];
  s.holdout.assign(it, idx.end());
  return s;
}

/// Zeroes a size x size square centred at a uniform pixel, clipped to the image.
template <typename Rng>
void cutout(float* image, int C, int H, int W, int size, Rng& rng) {
  if (size <= 0) return;
  const int cy = static_cast<int>(rng() % static_cast<unsigned>(H));
  const int cx = static_cast<int>(rng() % static_cast<unsigned>(W));
  const int y0 = std::max(0, cy - size / 2), y1 = std::min(H, cy + size / 2 + size % 2);
  const int x0 = std::max(0, cx - size / 2), x1 = std::min(W, cx + size / 2 + size % 2);
  for (int c = 0; c < C; ++c)
    for (int y = y0; y < y1; ++y)
      for (int x = x0; x < x1; ++x) image[(c * H + y) * W + x] = 0.0f;
}

template <typename Rng>
void cutout(Tensor& image, int size, Rng& rng) {
  if (image.rank() != 3) throw ShapeError("cutout expects [C, H, W]");
  cutout(image.data(), image.dim(0), image.dim(1), image.dim(2), size, rng);
}

/// Cosine annealing over epochs 0 .. epochs-1, reaching lr_min at the last epoch.
inline double cosine_lr(int epoch, int epochs, double lr_max, double lr_min) {
  if (epochs <= 1) return lr_max;
  const double t = static_cast<double>(epoch) / (epochs - 1);
  return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(M_PI * t));
}

class SGD {
 public:
  SGD(std::vector<ag::Parameter*> params, double momentum, double weight_decay)
      : params_(std::move(params)), momentum_(momentum), wd_(weight_decay) {
    for (auto* p : params_) buf_.emplace_back(p->value.size(), 0.0f);
  }
  void step(double lr) {
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto* p = params_[k];
      auto& v = buf_[k];
      for (std::size_t i = 0; i < p->value.size(); ++i) {
        const float g = p->grad[i] + static_cast<float>(wd_) * p->value[i];
        v[i] = static_cast<float>(momentum_) * v[i] + g;
        p->value[i] -= static_cast<float>(lr) * v[i];
      }
    }
  }

 private:
  std::vector<ag::Parameter*> params_;
  double momentum_, wd_;
  std::vector<std::vector<float>> buf_;
};

/// Adam with L2 weight decay folded into the gradient.
class Adam {
 public:
  Adam(std::vector<ag::Parameter*> params, double lr, double beta1, double beta2,
       double weight_decay, double eps = 1e-8)
      : params_(std::move(params)), lr_(lr), b1_(beta1), b2_(beta2), wd_(weight_decay), eps_(eps) {
    for (auto* p : params_) {
      m_.emplace_back(p->value.size(), 0.0);
      v_.emplace_back(p->value.size(), 0.0);
    }
  }
  void step() {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, t_), c2 = 1.0 - std::pow(b2_, t_);
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto* p = params_[k];
      for (std::size_t i = 0; i < p->value.size(); ++i) {
        const double g = p->grad[i] + wd_ * p->value[i];
        m_[k][i] = b1_ * m_[k][i] + (1 - b1_) * g;
        v_[k][i] = b2_ * v_[k][i] + (1 - b2_) * g * g;
        p->value[i] -= static_cast<float>(lr_ * (m_[k][i] / c1) / (std::sqrt(v_[k][i] / c2) + eps_));
      }
    }
  }
  long steps() const { return t_; }

 private:
  std::vector<ag::Parameter*> params_;
  double lr_, b1_, b2_, wd_, eps_;
  long t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

inline double global_grad_norm(const std::vector<ag::Parameter*>& ps) {
  double s = 0;
  for (auto* p : ps)
    for (float g : p->grad.storage()) s += static_cast<double>(g) * g;
  return std::sqrt(s);
}

inline void clip_grad_norm(const std::vector<ag::Parameter*>& ps, double max_norm) {
  const double n = global_grad_norm(ps);
  if (n <= max_norm || n == 0) return;
  const float c = static_cast<float>(max_norm / (n + 1e-6));
  for (auto* p : ps)
    for (auto& g : p->grad.storage()) g *= c;
}

struct Batch {
  Tensor images;
  std::vector<int> labels;
};

template <typename Rng>
Batch make_batch(const Dataset& d, const std::vector<int>& idx, std::size_t begin, std::size_t end,
                 int cutout_size, Rng* rng) {
  Batch b;
  const int n = static_cast<int>(end - begin);
  b.images = Tensor({n, d.channels(), d.height(), d.width()});
  const std::size_t per = d.image_numel();
  for (int k = 0; k < n; ++k) {
    const int i = idx[begin + static_cast<std::size_t>(k)];
    float* dst = b.images.data() + static_cast<std::size_t>(k) * per;
    std::copy_n(d.image(i), per, dst);
    if (rng && cutout_size > 0) cutout(dst, d.channels(), d.height(), d.width(), cutout_size, *rng);
    b.labels.push_back(d.labels[static_cast<std::size_t>(i)]);
  }
  return b;
}

class NonFiniteLoss : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct StepLosses {
  double loss_a = 0, loss_b = 0;
};

/// Optimizer state for both partitions plus the step counter.
class BilevelState {
 public:
  BilevelState(Supernet& net, const SearchHyperparams& hp)
      : net_(net),
        hp_(hp),
        weights_(net.weight_parameters()),
        arch_(net.attention_parameters()),
        sgd_(weights_, hp.w_momentum, hp.w_weight_decay),
        adam_(arch_, hp.arch_lr, hp.arch_beta1, hp.arch_beta2, hp.arch_weight_decay) {
    hp_.validate();
    std::set<ag::Parameter*> w(weights_.begin(), weights_.end()), a(arch_.begin(), arch_.end());
    for (auto* p : a)
      if (w.count(p)) throw std::logic_error("parameter " + p->name + " in both partitions");
    for (auto& [name, p] : net.state_dict().params)
      if (p->trainable && !w.count(p) && !a.count(p))
        throw std::logic_error("parameter " + name + " in neither partition");
  }

  Supernet& net() { return net_; }
  const std::vector<ag::Parameter*>& weight_params() const { return weights_; }
  const std::vector<ag::Parameter*>& arch_params() const { return arch_; }
  long steps() const { return steps_; }

  /// Phase 1 updates attention parameters on batch A; phase 2 updates weights on batch B.
  StepLosses step(const Batch& a, const Batch& b, double w_lr) {
    StepLosses out;
    out.loss_a = arch_phase(a);
    out.loss_b = weight_phase(b, w_lr);
    ++steps_;
    return out;
  }

  /// Gradient step on the attention parameters only.
  double arch_phase(const Batch& a) {
    const double l = phase(a, arch_, weights_);
    adam_.step();
    return l;
  }

  /// Clipped momentum-SGD step on the network weights only.
  double weight_phase(const Batch& b, double w_lr) {
    const double l = phase(b, weights_, arch_);
    if (hp_.grad_clip) clip_grad_norm(weights_, hp_.grad_clip_norm);
    sgd_.step(w_lr);
    return l;
  }

 private:
  double phase(const Batch& batch, const std::vector<ag::Parameter*>& update,
               const std::vector<ag::Parameter*>& frozen) {
    for (auto* p : frozen) p->trainable = false;
    for (auto* p : update) {
      p->trainable = true;
      p->zero_grad();
    }
    nn::Context ctx{true, nullptr, 0.0f};
    auto out = net_.forward(batch.images, ctx);
    auto loss = ag::cross_entropy(out.logits, batch.labels);
    const double l = loss->value[0];
    if (!std::isfinite(l)) {
      for (auto* p : frozen) p->trainable = true;
      throw NonFiniteLoss("non-finite search loss " + std::to_string(l) + " at step " +
                          std::to_string(steps_));
    }
    ag::backward(loss);
    for (auto* p : frozen) p->trainable = true;
    return l;
  }

  Supernet& net_;
  SearchHyperparams hp_;
  std::vector<ag::Parameter*> weights_, arch_;
  SGD sgd_;
  Adam adam_;
  long steps_ = 0;
};

struct EvalResult {
  double accuracy = 0;
  double loss = 0;
  double marginal_std_mean = 0;
};

/// Evaluation-mode pass (running BN statistics, no graph).
inline EvalResult evaluate(Supernet& net, const Dataset& d, const std::vector<int>& idx,
                           int batch_size, ArchTrace* trace = nullptr, bool record_pairs = false) {
  ag::NoGradGuard ng;
  nn::Context ctx{false, nullptr, 0.0f};
  MarginalMoments moments;
  EvalResult r;
  int hit = 0;
  double loss = 0;
  for (std::size_t s = 0; s < idx.size(); s += static_cast<std::size_t>(batch_size)) {
    const std::size_t e = std::min(idx.size(), s + static_cast<std::size_t>(batch_size));
    const auto batch = make_batch<std::mt19937_64>(d, idx, s, e, 0, nullptr);
    const auto out = net.forward(batch.images, ctx, {true, record_pairs});
    moments.add(out.records);
    if (trace) trace->append(out.records, &batch.labels);
    const auto& lg = out.logits->value;
    const int C = lg.dim(1);
    for (std::size_t k = 0; k < batch.labels.size(); ++k) {
      const float* row = lg.data() + k * static_cast<std::size_t>(C);
      hit += std::max_element(row, row + C) - row == batch.labels[k];
    }
    loss += ag::cross_entropy(out.logits, batch.labels)->value[0] * static_cast<double>(e - s);
  }
  if (!idx.empty()) {
    r.accuracy = static_cast<double>(hit) / static_cast<double>(idx.size());
    r.loss = loss / static_cast<double>(idx.size());
  }
  r.marginal_std_mean = moments.mean_std();
  return r;
}

struct EpochMetrics {
  int epoch = 0;
  double loss_a = 0, loss_b = 0, val_acc = 0, marginal_std_mean = 0, w_lr = 0;
};

struct SearchOptions {
  std::filesystem::path out_dir;  // empty: keep everything in memory
  bool checkpoint_every_epoch = true;
  nlohmann::ordered_json provenance;  // embedded in checkpoints and the CSV header
  std::function<void(const EpochMetrics&, Supernet&)> on_epoch;
  std::function<void(const std::string&)> log;
};

struct SearchResult {
  std::unique_ptr<Supernet> net;
  DataSplit split;
  std::vector<EpochMetrics> metrics;
  std::filesystem::path final_checkpoint;
};

inline void write_metrics_csv(const std::filesystem::path& path, const std::vector<EpochMetrics>& rows,
                              const nlohmann::ordered_json& provenance) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "# " << provenance.dump() << "\n";
  os << "epoch,loss_A,loss_B,val_acc,marginal_std_mean\n";
  os << std::setprecision(9);
  for (const auto& m : rows)
    os << m.epoch << ',' << m.loss_a << ',' << m.loss_b << ',' << m.val_acc << ','
       << m.marginal_std_mean << "\n";
}

/// Full alternating schedule. Validation uses the holdout split, or split A
/// when the holdout is empty.
inline SearchResult run_search(SupernetConfig cfg, const SearchHyperparams& hp, const Dataset& data,
                               std::uint64_t seed, const SearchOptions& opt = {}) {
  hp.validate();
  cfg.init_seed = seed;
  if (cfg.in_channels != data.channels())
    throw std::invalid_argument("dataset has " + std::to_string(data.channels()) + " channels, config " +
                                std::to_string(cfg.in_channels));
  SearchResult res;
  res.net = std::make_unique<Supernet>(cfg);
  res.split = split_dataset(data.size(), hp.split, seed);
  if (res.split.a.empty() || res.split.b.empty()) throw std::invalid_argument("empty search split");
  BilevelState state(*res.net, hp);
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  if (!opt.out_dir.empty()) std::filesystem::create_directories(opt.out_dir);
  const auto& val_idx = res.split.holdout.empty() ? res.split.a : res.split.holdout;
  const std::size_t bs = static_cast<std::size_t>(hp.batch_size);
  const std::size_t steps =
      std::min((res.split.a.size() + bs - 1) / bs, (res.split.b.size() + bs - 1) / bs);

  for (int epoch = 0; epoch < hp.epochs; ++epoch) {
    EpochMetrics m;
    m.epoch = epoch;
    m.w_lr = cosine_lr(epoch, hp.epochs, hp.w_lr, hp.w_lr_min);
    auto a = res.split.a, b = res.split.b;
    std::shuffle(a.begin(), a.end(), rng);
    std::shuffle(b.begin(), b.end(), rng);
    for (std::size_t s = 0; s < steps; ++s) {
      const auto ba = make_batch(data, a, s * bs, std::min(a.size(), (s + 1) * bs), hp.cutout_size, &rng);
      const auto bb = make_batch(data, b, s * bs, std::min(b.size(), (s + 1) * bs), hp.cutout_size, &rng);
      if (epoch < hp.arch_warmup_epochs) {
        m.loss_b += state.weight_phase(bb, m.w_lr) / static_cast<double>(steps);
        continue;
      }
      const auto l = state.step(ba, bb, m.w_lr);
      m.loss_a += l.loss_a / static_cast<double>(steps);
      m.loss_b += l.loss_b / static_cast<double>(steps);
    }
    const auto ev = evaluate(*res.net, data, val_idx, hp.batch_size);
    m.val_acc = ev.accuracy;
    m.marginal_std_mean = ev.marginal_std_mean;
    res.metrics.push_back(m);
    if (opt.log) {
      std::ostringstream os;
      os << "epoch " << epoch << " loss_A " << m.loss_a << " loss_B " << m.loss_b << " val_acc "
         << m.val_acc << " std " << m.marginal_std_mean;
      opt.log(os.str());
    }
    if (!opt.out_dir.empty()) {
      auto meta = opt.provenance;
      meta["epoch"] = epoch;
      if (opt.checkpoint_every_epoch)
        save_checkpoint(*res.net, (opt.out_dir / ("epoch_" + std::to_string(epoch) + ".ckpt")).string(), meta);
      write_metrics_csv(opt.out_dir / "metrics.csv", res.metrics, opt.provenance);
    }
    if (opt.on_epoch) opt.on_epoch(m, *res.net);
  }
  if (!opt.out_dir.empty()) {
    auto meta = opt.provenance;
    meta["epoch"] = hp.epochs - 1;
    meta["final"] = true;
    res.final_checkpoint = opt.out_dir / "final.ckpt";
    save_checkpoint(*res.net, res.final_checkpoint.string(), meta);
  }
  return res;
}

}  // namespace midas
