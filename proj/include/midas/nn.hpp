#pragma once

// Layers and the DARTS candidate operations built on the autograd engine.

#include <cmath>
#include <memory>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "midas/autograd.hpp"
#include "midas/search_space.hpp"

namespace midas::nn {

using ag::Parameter;
using ag::Var;

struct Context {
  bool training = true;
  std::mt19937_64* rng = nullptr;  // drop-path only
  float drop_path_prob = 0.0f;
};

/// Flat, named view of every parameter and buffer of a module tree. Order is
/// construction order, which is deterministic.
class StateDict {
 public:
  struct Scope {
    StateDict& sd;
    std::size_t len;
    Scope(StateDict& s, const std::string& name) : sd(s), len(s.prefix_.size()) {
      s.prefix_ += name + ".";
    }
    ~Scope() { sd.prefix_.resize(len); }
  };

  void param(const std::string& name, Parameter& p) { params.emplace_back(prefix_ + name, &p); }
  void buffer(const std::string& name, Tensor& t) { buffers.emplace_back(prefix_ + name, &t); }

  std::vector<std::pair<std::string, Parameter*>> params;
  std::vector<std::pair<std::string, Tensor*>> buffers;

 private:
  std::string prefix_;
};

template <typename Rng>
Tensor uniform_fan_in(Shape shape, int fan_in, Rng& rng) {
  Tensor t(std::move(shape));
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& v : t.storage()) v = static_cast<float>(dist(rng));
  return t;
}

class Conv2d {
 public:
  template <typename Rng>
  Conv2d(int c_in, int c_out, int kernel, ag::ConvSpec spec, Rng& rng)
      : spec_(spec),
        weight_("weight", uniform_fan_in({c_out, c_in / spec.groups, kernel, kernel},
                                         c_in / spec.groups * kernel * kernel, rng)) {}

  Var forward(const Var& x) { return ag::conv2d(x, weight_, spec_); }
  void collect(StateDict& sd) { sd.param("weight", weight_); }
  Parameter& weight() { return weight_; }

 private:
  ag::ConvSpec spec_;
  Parameter weight_;
};

class BatchNorm2d {
 public:
  BatchNorm2d(int channels, bool affine) : state_(channels), affine_(affine) {
    if (affine_) {
      gamma_ = Parameter("weight", Tensor({channels}, 1.0f));
      beta_ = Parameter("bias", Tensor({channels}, 0.0f));
    }
  }

  Var forward(const Var& x, const Context& ctx) {
    return ag::batch_norm(x, state_, ctx.training, affine_ ? &gamma_ : nullptr,
                          affine_ ? &beta_ : nullptr);
  }
  void collect(StateDict& sd) {
    if (affine_) {
      sd.param("weight", gamma_);
      sd.param("bias", beta_);
    }
    sd.buffer("running_mean", state_.running_mean);
    sd.buffer("running_var", state_.running_var);
  }

 private:
  ag::BatchNormState state_;
  bool affine_;
  Parameter gamma_, beta_;
};

class Operation {
 public:
  virtual ~Operation() = default;
  virtual Var forward(const Var& x, const Context& ctx) = 0;
  virtual void collect(StateDict& sd) = 0;
  virtual bool is_identity() const { return false; }
};

/// ReLU -> conv -> BN
class ReLUConvBN final : public Operation {
 public:
  template <typename Rng>
  ReLUConvBN(int c_in, int c_out, int kernel, int stride, int pad, bool affine, Rng& rng)
      : conv_(c_in, c_out, kernel, {stride, pad, 1, 1}, rng), bn_(c_out, affine) {}
  Var forward(const Var& x, const Context& ctx) override {
    return bn_.forward(conv_.forward(ag::relu(x)), ctx);
  }
  void collect(StateDict& sd) override {
    {
      StateDict::Scope s(sd, "conv");
      conv_.collect(sd);
    }
    StateDict::Scope s(sd, "bn");
    bn_.collect(sd);
  }

 private:
  Conv2d conv_;
  BatchNorm2d bn_;
};

/// ReLU -> depthwise dilated conv -> pointwise conv -> BN
class DilConv final : public Operation {
 public:
  template <typename Rng>
  DilConv(int c_in, int c_out, int kernel, int stride, int pad, int dilation, bool affine, Rng& rng)
      : depthwise_(c_in, c_in, kernel, {stride, pad, dilation, c_in}, rng),
        pointwise_(c_in, c_out, 1, {1, 0, 1, 1}, rng),
        bn_(c_out, affine) {}
  Var forward(const Var& x, const Context& ctx) override {
    return bn_.forward(pointwise_.forward(depthwise_.forward(ag::relu(x))), ctx);
  }
  void collect(StateDict& sd) override {
    {
      StateDict::Scope s(sd, "dw");
      depthwise_.collect(sd);
    }
    {
      StateDict::Scope s(sd, "pw");
      pointwise_.collect(sd);
    }
    StateDict::Scope s(sd, "bn");
    bn_.collect(sd);
  }

 private:
  Conv2d depthwise_, pointwise_;
  BatchNorm2d bn_;
};

/// Two stacked DilConv blocks with dilation 1; only the first is strided.
class SepConv final : public Operation {
 public:
  template <typename Rng>
  SepConv(int c_in, int c_out, int kernel, int stride, int pad, bool affine, Rng& rng)
      : first_(c_in, c_in, kernel, stride, pad, 1, affine, rng),
        second_(c_in, c_out, kernel, 1, pad, 1, affine, rng) {}
  Var forward(const Var& x, const Context& ctx) override {
    return second_.forward(first_.forward(x, ctx), ctx);
  }
  void collect(StateDict& sd) override {
    {
      StateDict::Scope s(sd, "a");
      first_.collect(sd);
    }
    StateDict::Scope s(sd, "b");
    second_.collect(sd);
  }

 private:
  DilConv first_, second_;
};

/// Halves resolution: ReLU, two offset 1x1 stride-2 convs concatenated, BN.
class FactorizedReduce final : public Operation {
 public:
  template <typename Rng>
  FactorizedReduce(int c_in, int c_out, bool affine, Rng& rng)
      : w0_("weight0", uniform_fan_in({c_out / 2, c_in}, c_in, rng)),
        w1_("weight1", uniform_fan_in({c_out - c_out / 2, c_in}, c_in, rng)),
        bn_(c_out, affine) {}
  Var forward(const Var& x, const Context& ctx) override {
    auto r = ag::relu(x);
    return bn_.forward(
        ag::concat_channels({ag::subsample_pointwise(r, w0_, 0), ag::subsample_pointwise(r, w1_, 1)}),
        ctx);
  }
  void collect(StateDict& sd) override {
    sd.param("weight0", w0_);
    sd.param("weight1", w1_);
    StateDict::Scope s(sd, "bn");
    bn_.collect(sd);
  }

 private:
  Parameter w0_, w1_;
  BatchNorm2d bn_;
};

class Identity final : public Operation {
 public:
  Var forward(const Var& x, const Context&) override { return x; }
  void collect(StateDict&) override {}
  bool is_identity() const override { return true; }
};

class Pool3x3 final : public Operation {
 public:
  Pool3x3(bool max, int channels, int stride, bool with_bn)
      : max_(max), stride_(stride), with_bn_(with_bn), bn_(channels, false) {}
  Var forward(const Var& x, const Context& ctx) override {
    auto y = max_ ? ag::max_pool3x3(x, stride_) : ag::avg_pool3x3(x, stride_);
    return with_bn_ ? bn_.forward(y, ctx) : y;
  }
  void collect(StateDict& sd) override {
    if (!with_bn_) return;
    StateDict::Scope s(sd, "bn");
    bn_.collect(sd);
  }

 private:
  bool max_;
  int stride_;
  bool with_bn_;
  BatchNorm2d bn_;
};

/// Builds catalog operation `op` on C channels. `pool_bn` adds the
/// non-affine BN that DARTS appends to pooling inside mixed edges.
template <typename Rng>
std::unique_ptr<Operation> make_operation(int op, int channels, int stride, bool affine,
                                          bool pool_bn, Rng& rng) {
  const int C = channels;
  switch (op) {
    case op_id::avg_pool_3x3: return std::make_unique<Pool3x3>(false, C, stride, pool_bn);
    case op_id::max_pool_3x3: return std::make_unique<Pool3x3>(true, C, stride, pool_bn);
    case op_id::skip_connect:
      if (stride == 1) return std::make_unique<Identity>();
      return std::make_unique<FactorizedReduce>(C, C, affine, rng);
    case op_id::sep_conv_3x3: return std::make_unique<SepConv>(C, C, 3, stride, 1, affine, rng);
    case op_id::sep_conv_5x5: return std::make_unique<SepConv>(C, C, 5, stride, 2, affine, rng);
    case op_id::dil_conv_3x3: return std::make_unique<DilConv>(C, C, 3, stride, 2, 2, affine, rng);
    case op_id::dil_conv_5x5: return std::make_unique<DilConv>(C, C, 5, stride, 4, 2, affine, rng);
    default: throw std::invalid_argument("unknown operation id " + std::to_string(op));
  }
}

class Linear {
 public:
  template <typename Rng>
  Linear(int in, int out, Rng& rng)
      : weight_("weight", uniform_fan_in({out, in}, in, rng)),
        bias_("bias", uniform_fan_in({out}, in, rng)) {}
  Var forward(const Var& x) { return ag::linear(x, weight_, bias_); }
  void collect(StateDict& sd) {
    sd.param("weight", weight_);
    sd.param("bias", bias_);
  }

 private:
  Parameter weight_, bias_;
};

/// Stem: 3x3 conv followed by affine BN.
class Stem {
 public:
  template <typename Rng>
  Stem(int c_in, int c_out, Rng& rng) : conv_(c_in, c_out, 3, {1, 1, 1, 1}, rng), bn_(c_out, true) {}
  Var forward(const Var& x, const Context& ctx) { return bn_.forward(conv_.forward(x), ctx); }
  void collect(StateDict& sd) {
    {
      StateDict::Scope s(sd, "conv");
      conv_.collect(sd);
    }
    StateDict::Scope s(sd, "bn");
    bn_.collect(sd);
  }

 private:
  Conv2d conv_;
  BatchNorm2d bn_;
};

}  // namespace midas::nn
