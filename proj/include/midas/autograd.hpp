#pragma once

// Minimal reverse-mode autodiff over float NCHW tensors. Nodes own their
// parents and a backward closure; backward() replays reachable nodes in
// reverse creation order, which is a valid topological order.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include <Eigen/Core>

#include "midas/tensor.hpp"

namespace midas::ag {

struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  bool trainable = true;

  Parameter() = default;
  Parameter(std::string n, Tensor v)
      : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

  void zero_grad() { grad.fill(0.0f); }
  bool wants_grad() const;
};

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::uint64_t id = 0;
  std::vector<Var> parents;
  std::function<void(Node&)> backward_fn;

  Tensor& grad_buffer() {
    if (grad.size() != value.size()) grad = Tensor(value.shape());
    return grad;
  }
};

namespace detail {
inline std::uint64_t next_id() {
  thread_local std::uint64_t counter = 0;
  return ++counter;
}
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode(); }

inline bool Parameter::wants_grad() const { return trainable && grad_enabled(); }

/// Disables graph construction in scope (evaluation, recording).
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

inline Var constant(Tensor v) {
  auto n = std::make_shared<Node>();
  n->value = std::move(v);
  n->id = detail::next_id();
  return n;
}

/// Creates a node; the closure is kept only when some input needs a gradient.
inline Var make_node(Tensor value, std::vector<Var> parents, bool param_grad,
                     std::function<void(Node&)> fn) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->id = detail::next_id();
  bool rg = false;
  if (grad_enabled()) {
    rg = param_grad;
    for (const auto& p : parents) rg = rg || p->requires_grad;
  }
  n->requires_grad = rg;
  if (rg) {
    n->parents = std::move(parents);
    n->backward_fn = std::move(fn);
  }
  return n;
}

/// Backpropagates from a scalar root (seed 1) or with an explicit seed.
inline void backward(const Var& root, const Tensor* seed = nullptr) {
  if (!root->requires_grad) return;
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<Node*> stack{root.get()};
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    if (!seen.insert(n).second) continue;
    order.push_back(n);
    for (const auto& p : n->parents)
      if (p->requires_grad) stack.push_back(p.get());
  }
  std::sort(order.begin(), order.end(), [](Node* a, Node* b) { return a->id > b->id; });
  if (seed) {
    root->grad_buffer() = *seed;
  } else {
    root->grad_buffer().fill(1.0f);
  }
  for (Node* n : order) {
    if (n->backward_fn && n->grad.size() == n->value.size()) n->backward_fn(*n);
    if (n->backward_fn) n->grad = Tensor();  // interior gradients are not needed afterwards
  }
}

inline bool needs(const Var& v) { return v->requires_grad; }

// ---------------------------------------------------------------------------
// Elementwise and structural ops

inline Var relu(const Var& x) {
  Tensor y(x->value.shape());
  const float* xi = x->value.data();
  float* yo = y.data();
  for (std::size_t i = 0; i < y.size(); ++i) yo[i] = (xi[i] > 0.0f || std::isnan(xi[i])) ? xi[i] : 0.0f;
  return make_node(std::move(y), {x}, false, [](Node& self) {
    auto& xp = self.parents[0];
    const float* xv = xp->value.data();
    const float* g = self.grad.data();
    float* dx = xp->grad_buffer().data();
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      if (xv[i] > 0.0f) dx[i] += g[i];
  });
}

inline Var add(const Var& a, const Var& b) {
  a->value.require_same_shape(b->value, "add");
  Tensor y = a->value;
  y += b->value;
  return make_node(std::move(y), {a, b}, false, [](Node& self) {
    for (auto& p : self.parents)
      if (p->requires_grad) p->grad_buffer() += self.grad;
  });
}

inline Var scale(const Var& x, float c) {
  Tensor y = x->value;
  for (auto& v : y.storage()) v *= c;
  return make_node(std::move(y), {x}, false, [c](Node& self) {
    float* dx = self.parents[0]->grad_buffer().data();
    for (std::size_t i = 0; i < self.grad.size(); ++i) dx[i] += c * self.grad[i];
  });
}

/// Channel concatenation of [B, Ci, H, W] maps.
inline Var concat_channels(const std::vector<Var>& xs) {
  if (xs.empty()) throw ShapeError("concat_channels: no inputs");
  const auto& s0 = xs.front()->value.shape();
  int C = 0;
  for (const auto& x : xs) {
    const auto& s = x->value.shape();
    if (s.size() != 4 || s[0] != s0[0] || s[2] != s0[2] || s[3] != s0[3])
      throw ShapeError("concat_channels: " + shape_str(s) + " vs " + shape_str(s0));
    C += s[1];
  }
  const int B = s0[0];
  const std::size_t hw = static_cast<std::size_t>(s0[2]) * s0[3];
  Tensor y({B, C, s0[2], s0[3]});
  for (int b = 0; b < B; ++b) {
    float* dst = y.data() + static_cast<std::size_t>(b) * C * hw;
    for (const auto& x : xs) {
      const std::size_t n = static_cast<std::size_t>(x->value.dim(1)) * hw;
      std::copy_n(x->value.data() + b * n, n, dst);
      dst += n;
    }
  }
  return make_node(std::move(y), xs, false, [C, hw, B](Node& self) {
    for (int b = 0; b < B; ++b) {
      const float* src = self.grad.data() + static_cast<std::size_t>(b) * C * hw;
      for (auto& p : self.parents) {
        const std::size_t n = static_cast<std::size_t>(p->value.dim(1)) * hw;
        if (p->requires_grad) {
          float* dx = p->grad_buffer().data() + b * n;
          for (std::size_t i = 0; i < n; ++i) dx[i] += src[i];
        }
        src += n;
      }
    }
  });
}

/// out[b] = sum_e w[b, e] * maps[e][b]; maps share one shape, w is [B, E].
inline Var weighted_sum(const std::vector<Var>& maps, const Var& weights) {
  if (maps.empty()) throw ShapeError("weighted_sum: no maps");
  const auto& s = maps.front()->value.shape();
  const int B = s[0];
  const int E = static_cast<int>(maps.size());
  if (weights->value.shape() != Shape{B, E})
    throw ShapeError("weighted_sum: weights " + shape_str(weights->value.shape()) + " for " +
                     std::to_string(E) + " maps of " + shape_str(s));
  for (const auto& m : maps)
    if (m->value.shape() != s) throw ShapeError("weighted_sum: maps differ in shape");
  const std::size_t per = maps.front()->value.size() / static_cast<std::size_t>(B);
  Tensor y(s);
  for (int e = 0; e < E; ++e)
    for (int b = 0; b < B; ++b) {
      const float w = weights->value[static_cast<std::size_t>(b) * E + e];
      const float* src = maps[e]->value.data() + b * per;
      float* dst = y.data() + b * per;
      for (std::size_t i = 0; i < per; ++i) dst[i] += w * src[i];
    }
  std::vector<Var> parents = maps;
  parents.push_back(weights);
  return make_node(std::move(y), std::move(parents), false, [E, B, per](Node& self) {
    auto& w = self.parents[static_cast<std::size_t>(E)];
    const float* g = self.grad.data();
    float* dw = w->requires_grad ? w->grad_buffer().data() : nullptr;
    for (int e = 0; e < E; ++e) {
      auto& m = self.parents[static_cast<std::size_t>(e)];
      for (int b = 0; b < B; ++b) {
        const float* gb = g + b * per;
        if (m->requires_grad) {
          const float wv = w->value[static_cast<std::size_t>(b) * E + e];
          float* dm = m->grad_buffer().data() + b * per;
          for (std::size_t i = 0; i < per; ++i) dm[i] += wv * gb[i];
        }
        if (dw) {
          const float* mv = m->value.data() + b * per;
          double acc = 0;
          for (std::size_t i = 0; i < per; ++i) acc += static_cast<double>(gb[i]) * mv[i];
          dw[static_cast<std::size_t>(b) * E + e] += static_cast<float>(acc);
        }
      }
    }
  });
}

/// Detaches a value from the graph.
inline Var detach(const Var& x) { return constant(x->value); }

// ---------------------------------------------------------------------------
// Convolution

struct ConvSpec {
  int stride = 1;
  int pad = 0;
  int dilation = 1;
  int groups = 1;
};

inline int conv_out_extent(int in, int k, const ConvSpec& s) {
  return (in + 2 * s.pad - s.dilation * (k - 1) - 1) / s.stride + 1;
}

namespace detail {

// Valid output range [lo, hi) along one axis for kernel offset `koff`.
inline void valid_range(int out_n, int in_n, int stride, int koff, int& lo, int& hi) {
  // in = o * stride + koff, need 0 <= in < in_n
  lo = koff >= 0 ? 0 : (-koff + stride - 1) / stride;
  hi = in_n - 1 - koff < 0 ? 0 : (in_n - 1 - koff) / stride + 1;
  hi = std::min(hi, out_n);
  if (lo > hi) lo = hi;
}

// y += a * x and p += g * x over n contiguous floats.
inline void axpy(float* __restrict y, float a, const float* __restrict x, int n) {
  for (int i = 0; i < n; ++i) y[i] += a * x[i];
}
inline void mul_acc(float* __restrict p, const float* __restrict g, const float* __restrict x, int n) {
  for (int i = 0; i < n; ++i) p[i] += g[i] * x[i];
}

}  // namespace detail

/// Grouped 2-D convolution without bias. w: [O, I/groups, k, k].
inline Var conv2d(const Var& x, Parameter& w, const ConvSpec& spec) {
  const auto& xs = x->value.shape();
  const auto& ws = w.value.shape();
  if (xs.size() != 4 || ws.size() != 4) throw ShapeError("conv2d: expects 4-D input and weight");
  const int B = xs[0], Cin = xs[1], H = xs[2], W = xs[3];
  const int O = ws[0], Ig = ws[1], K = ws[2];
  const int G = spec.groups;
  if (Cin != Ig * G || O % G != 0)
    throw ShapeError("conv2d: input " + shape_str(xs) + " vs weight " + shape_str(ws));
  const int Og = O / G;
  const int Ho = conv_out_extent(H, K, spec), Wo = conv_out_extent(W, K, spec);
  if (Ho < 1 || Wo < 1) throw ShapeError("conv2d: empty output for " + shape_str(xs));
  const bool pointwise = K == 1 && spec.stride == 1 && spec.pad == 0 && G == 1;
  Tensor y({B, O, Ho, Wo});
  const std::size_t in_plane = static_cast<std::size_t>(H) * W;
  const std::size_t out_plane = static_cast<std::size_t>(Ho) * Wo;
  const float* X = x->value.data();
  const float* Wt = w.value.data();
  float* Y = y.data();
  using Mat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MapC = Eigen::Map<const Mat>;
  using MapM = Eigen::Map<Mat>;

  if (pointwise) {
    const MapC wm(Wt, O, Cin);
    for (int b = 0; b < B; ++b)
      MapM(Y + static_cast<std::size_t>(b) * O * out_plane, O, static_cast<Eigen::Index>(out_plane))
          .noalias() = wm * MapC(X + static_cast<std::size_t>(b) * Cin * in_plane, Cin,
                                 static_cast<Eigen::Index>(in_plane));
  } else {
    for (int b = 0; b < B; ++b)
      for (int o = 0; o < O; ++o) {
        float* yo = Y + (static_cast<std::size_t>(b) * O + o) * out_plane;
        const int g = o / Og;
        for (int ig = 0; ig < Ig; ++ig) {
          const float* xi = X + (static_cast<std::size_t>(b) * Cin + g * Ig + ig) * in_plane;
          const float* wk = Wt + (static_cast<std::size_t>(o) * Ig + ig) * K * K;
          for (int ky = 0; ky < K; ++ky) {
            int oy0, oy1;
            detail::valid_range(Ho, H, spec.stride, ky * spec.dilation - spec.pad, oy0, oy1);
            for (int kx = 0; kx < K; ++kx) {
              const float wv = wk[ky * K + kx];
              int ox0, ox1;
              const int koff = kx * spec.dilation - spec.pad;
              detail::valid_range(Wo, W, spec.stride, koff, ox0, ox1);
              for (int oy = oy0; oy < oy1; ++oy) {
                const float* xr =
                    xi + static_cast<std::size_t>(oy * spec.stride + ky * spec.dilation - spec.pad) * W;
                float* yr = yo + static_cast<std::size_t>(oy) * Wo;
                if (spec.stride == 1) {
                  detail::axpy(yr + ox0, wv, xr + koff + ox0, ox1 - ox0);
                } else {
                  for (int ox = ox0; ox < ox1; ++ox) yr[ox] += wv * xr[ox * spec.stride + koff];
                }
              }
            }
          }
        }
      }
  }

  Parameter* wp = &w;
  return make_node(std::move(y), {x}, w.wants_grad(), [=](Node& self) {
    auto& xp = self.parents[0];
    const float* Gd = self.grad.data();
    const float* Xv = xp->value.data();
    float* DX = xp->requires_grad ? xp->grad_buffer().data() : nullptr;
    float* DW = wp->trainable ? wp->grad.data() : nullptr;
    const float* Wv = wp->value.data();
    if (pointwise) {
      const MapC wm(Wv, O, Cin);
      for (int b = 0; b < B; ++b) {
        const MapC gb(Gd + static_cast<std::size_t>(b) * O * out_plane, O,
                      static_cast<Eigen::Index>(out_plane));
        const MapC xb(Xv + static_cast<std::size_t>(b) * Cin * in_plane, Cin,
                      static_cast<Eigen::Index>(in_plane));
        if (DX)
          MapM(DX + static_cast<std::size_t>(b) * Cin * in_plane, Cin,
               static_cast<Eigen::Index>(in_plane)).noalias() += wm.transpose() * gb;
        if (DW) MapM(DW, O, Cin).noalias() += gb * xb.transpose();
      }
      return;
    }
    std::vector<float> part(static_cast<std::size_t>(Wo), 0.0f);
    for (int b = 0; b < B; ++b)
      for (int o = 0; o < O; ++o) {
        const float* go = Gd + (static_cast<std::size_t>(b) * O + o) * out_plane;
        const int g = o / Og;
        for (int ig = 0; ig < Ig; ++ig) {
          const std::size_t xoff = (static_cast<std::size_t>(b) * Cin + g * Ig + ig) * in_plane;
          const float* xi = Xv + xoff;
          float* dxi = DX ? DX + xoff : nullptr;
          const std::size_t woff = (static_cast<std::size_t>(o) * Ig + ig) * K * K;
          for (int ky = 0; ky < K; ++ky) {
            int oy0, oy1;
            detail::valid_range(Ho, H, spec.stride, ky * spec.dilation - spec.pad, oy0, oy1);
            for (int kx = 0; kx < K; ++kx) {
              const float wv = Wv[woff + ky * K + kx];
              const int koff = kx * spec.dilation - spec.pad;
              int ox0, ox1;
              detail::valid_range(Wo, W, spec.stride, koff, ox0, ox1);
              float acc = 0.0f;
              for (int oy = oy0; oy < oy1; ++oy) {
                const std::size_t row =
                    static_cast<std::size_t>(oy * spec.stride + ky * spec.dilation - spec.pad) * W;
                const float* gr = go + static_cast<std::size_t>(oy) * Wo;
                if (spec.stride == 1) {
                  const float* __restrict xr = xi + row + koff;
                  if (DW) detail::mul_acc(part.data() + ox0, gr + ox0, xr + ox0, ox1 - ox0);
                  if (dxi) detail::axpy(dxi + row + koff + ox0, wv, gr + ox0, ox1 - ox0);
                } else {
                  for (int ox = ox0; ox < ox1; ++ox) {
                    const std::size_t xi_idx = row + static_cast<std::size_t>(ox * spec.stride + koff);
                    acc += gr[ox] * xi[xi_idx];
                    if (dxi) dxi[xi_idx] += wv * gr[ox];
                  }
                }
              }
              if (spec.stride == 1 && DW)
                for (int ox = 0; ox < Wo; ++ox) {
                  acc += part[static_cast<std::size_t>(ox)];
                  part[static_cast<std::size_t>(ox)] = 0.0f;
                }
              if (DW) DW[woff + ky * K + kx] += acc;
            }
          }
        }
      }
  });
}

/// 1x1 stride-2 convolution sampling positions (2y + offset, 2x + offset).
inline Var subsample_pointwise(const Var& x, Parameter& w, int offset) {
  const auto& xs = x->value.shape();
  const int B = xs[0], Cin = xs[1], H = xs[2], W = xs[3];
  const int O = w.value.dim(0);
  if (w.value.dim(1) != Cin) throw ShapeError("subsample_pointwise: channel mismatch");
  const int Ho = (H - offset + 1) / 2, Wo = (W - offset + 1) / 2;
  Tensor y({B, O, Ho, Wo});
  const std::size_t in_plane = static_cast<std::size_t>(H) * W;
  const std::size_t out_plane = static_cast<std::size_t>(Ho) * Wo;
  std::vector<float> sub(static_cast<std::size_t>(Cin) * out_plane);
  for (int b = 0; b < B; ++b) {
    for (int c = 0; c < Cin; ++c)
      for (int oy = 0; oy < Ho; ++oy)
        for (int ox = 0; ox < Wo; ++ox)
          sub[c * out_plane + oy * Wo + ox] =
              x->value[(static_cast<std::size_t>(b) * Cin + c) * in_plane +
                       static_cast<std::size_t>(2 * oy + offset) * W + 2 * ox + offset];
    for (int o = 0; o < O; ++o) {
      float* yo = y.data() + (static_cast<std::size_t>(b) * O + o) * out_plane;
      for (int c = 0; c < Cin; ++c) {
        const float wv = w.value[static_cast<std::size_t>(o) * Cin + c];
        const float* s = sub.data() + c * out_plane;
        for (std::size_t p = 0; p < out_plane; ++p) yo[p] += wv * s[p];
      }
    }
  }
  Parameter* wp = &w;
  return make_node(std::move(y), {x}, w.wants_grad(), [=](Node& self) {
    auto& xp = self.parents[0];
    float* DX = xp->requires_grad ? xp->grad_buffer().data() : nullptr;
    float* DW = wp->trainable ? wp->grad.data() : nullptr;
    for (int b = 0; b < B; ++b)
      for (int o = 0; o < O; ++o) {
        const float* go = self.grad.data() + (static_cast<std::size_t>(b) * O + o) * out_plane;
        for (int c = 0; c < Cin; ++c) {
          const float wv = wp->value[static_cast<std::size_t>(o) * Cin + c];
          const std::size_t base = (static_cast<std::size_t>(b) * Cin + c) * in_plane;
          float acc = 0.0f;
          for (int oy = 0; oy < Ho; ++oy)
            for (int ox = 0; ox < Wo; ++ox) {
              const std::size_t xi =
                  base + static_cast<std::size_t>(2 * oy + offset) * W + 2 * ox + offset;
              const float gv = go[oy * Wo + ox];
              acc += gv * xp->value[xi];
              if (DX) DX[xi] += wv * gv;
            }
          if (DW) DW[static_cast<std::size_t>(o) * Cin + c] += acc;
        }
      }
  });
}

// ---------------------------------------------------------------------------
// Normalization

struct BatchNormState {
  Tensor running_mean;
  Tensor running_var;
  float momentum = 0.1f;
  float eps = 1e-5f;

  explicit BatchNormState(int channels = 0)
      : running_mean({channels}, 0.0f), running_var({channels}, 1.0f) {}
};

/// Batch statistics when training (running statistics updated), running
/// statistics otherwise. gamma/beta may be null (non-affine).
inline Var batch_norm(const Var& x, BatchNormState& st, bool training, Parameter* gamma,
                      Parameter* beta) {
  const auto& s = x->value.shape();
  const int B = s[0], C = s[1];
  const std::size_t hw = static_cast<std::size_t>(s[2]) * s[3];
  const std::size_t count = static_cast<std::size_t>(B) * hw;
  if (st.running_mean.size() != static_cast<std::size_t>(C))
    throw ShapeError("batch_norm: channel mismatch " + shape_str(s));
  std::vector<float> mean(C), invstd(C);
  const float* X = x->value.data();
  if (training) {
    for (int c = 0; c < C; ++c) {
      double sum = 0, sq = 0;
      for (int b = 0; b < B; ++b) {
        const float* p = X + (static_cast<std::size_t>(b) * C + c) * hw;
        for (std::size_t i = 0; i < hw; ++i) sum += p[i];
      }
      const double m = sum / static_cast<double>(count);
      for (int b = 0; b < B; ++b) {
        const float* p = X + (static_cast<std::size_t>(b) * C + c) * hw;
        for (std::size_t i = 0; i < hw; ++i) {
          const double d = p[i] - m;
          sq += d * d;
        }
      }
      const double var = sq / static_cast<double>(count);
      mean[c] = static_cast<float>(m);
      invstd[c] = static_cast<float>(1.0 / std::sqrt(var + st.eps));
      const double unbiased = count > 1 ? sq / static_cast<double>(count - 1) : var;
      st.running_mean[c] = (1 - st.momentum) * st.running_mean[c] + st.momentum * static_cast<float>(m);
      st.running_var[c] =
          (1 - st.momentum) * st.running_var[c] + st.momentum * static_cast<float>(unbiased);
    }
  } else {
    for (int c = 0; c < C; ++c) {
      mean[c] = st.running_mean[c];
      invstd[c] = 1.0f / std::sqrt(st.running_var[c] + st.eps);
    }
  }
  Tensor y(s);
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const float ga = gamma ? gamma->value[c] : 1.0f;
      const float be = beta ? beta->value[c] : 0.0f;
      const float* p = X + (static_cast<std::size_t>(b) * C + c) * hw;
      float* q = y.data() + (static_cast<std::size_t>(b) * C + c) * hw;
      const float m = mean[c], is = invstd[c];
      for (std::size_t i = 0; i < hw; ++i) q[i] = (p[i] - m) * is * ga + be;
    }
  const bool pg = (gamma && gamma->wants_grad()) || (beta && beta->wants_grad());
  return make_node(std::move(y), {x}, pg,
                   [=, mean = std::move(mean), invstd = std::move(invstd)](Node& self) {
                     auto& xp = self.parents[0];
                     const float* Xv = xp->value.data();
                     const float* G = self.grad.data();
                     float* DX = xp->requires_grad ? xp->grad_buffer().data() : nullptr;
                     for (int c = 0; c < C; ++c) {
                       const float ga = gamma ? gamma->value[c] : 1.0f;
                       const float m = mean[c], is = invstd[c];
                       double sum_g = 0, sum_gx = 0;
                       for (int b = 0; b < B; ++b) {
                         const std::size_t off = (static_cast<std::size_t>(b) * C + c) * hw;
                         for (std::size_t i = 0; i < hw; ++i) {
                           const double xhat = (Xv[off + i] - m) * is;
                           sum_g += G[off + i];
                           sum_gx += G[off + i] * xhat;
                         }
                       }
                       if (gamma && gamma->trainable) gamma->grad[c] += static_cast<float>(sum_gx);
                       if (beta && beta->trainable) beta->grad[c] += static_cast<float>(sum_g);
                       if (!DX) continue;
                       const double n = static_cast<double>(count);
                       for (int b = 0; b < B; ++b) {
                         const std::size_t off = (static_cast<std::size_t>(b) * C + c) * hw;
                         for (std::size_t i = 0; i < hw; ++i) {
                           if (training) {
                             const double xhat = (Xv[off + i] - m) * is;
                             DX[off + i] += static_cast<float>(
                                 ga * is * (G[off + i] - sum_g / n - xhat * sum_gx / n));
                           } else {
                             DX[off + i] += ga * is * G[off + i];
                           }
                         }
                       }
                     }
                   });
}

// ---------------------------------------------------------------------------
// Pooling

/// 3x3 average pooling, padding 1, padded cells excluded from the count.
inline Var avg_pool3x3(const Var& x, int stride) {
  const auto& s = x->value.shape();
  const int B = s[0], C = s[1], H = s[2], W = s[3];
  const ConvSpec spec{stride, 1, 1, 1};
  const int Ho = conv_out_extent(H, 3, spec), Wo = conv_out_extent(W, 3, spec);
  Tensor y({B, C, Ho, Wo});
  std::vector<float> inv_count(static_cast<std::size_t>(Ho) * Wo);
  for (int oy = 0; oy < Ho; ++oy)
    for (int ox = 0; ox < Wo; ++ox) {
      const int y0 = std::max(0, oy * stride - 1), y1 = std::min(H, oy * stride + 2);
      const int x0 = std::max(0, ox * stride - 1), x1 = std::min(W, ox * stride + 2);
      inv_count[oy * Wo + ox] = 1.0f / static_cast<float>((y1 - y0) * (x1 - x0));
    }
  const std::size_t ip = static_cast<std::size_t>(H) * W, op = static_cast<std::size_t>(Ho) * Wo;
  for (std::size_t bc = 0; bc < static_cast<std::size_t>(B) * C; ++bc) {
    const float* xi = x->value.data() + bc * ip;
    float* yo = y.data() + bc * op;
    for (int oy = 0; oy < Ho; ++oy)
      for (int ox = 0; ox < Wo; ++ox) {
        const int y0 = std::max(0, oy * stride - 1), y1 = std::min(H, oy * stride + 2);
        const int x0 = std::max(0, ox * stride - 1), x1 = std::min(W, ox * stride + 2);
        float acc = 0.0f;
        for (int yy = y0; yy < y1; ++yy)
          for (int xx = x0; xx < x1; ++xx) acc += xi[yy * W + xx];
        yo[oy * Wo + ox] = acc * inv_count[oy * Wo + ox];
      }
  }
  return make_node(std::move(y), {x}, false,
                   [=, inv_count = std::move(inv_count)](Node& self) {
                     float* DX = self.parents[0]->grad_buffer().data();
                     for (std::size_t bc = 0; bc < static_cast<std::size_t>(B) * C; ++bc) {
                       const float* g = self.grad.data() + bc * op;
                       float* dx = DX + bc * ip;
                       for (int oy = 0; oy < Ho; ++oy)
                         for (int ox = 0; ox < Wo; ++ox) {
                           const int y0 = std::max(0, oy * stride - 1),
                                     y1 = std::min(H, oy * stride + 2);
                           const int x0 = std::max(0, ox * stride - 1),
                                     x1 = std::min(W, ox * stride + 2);
                           const float gv = g[oy * Wo + ox] * inv_count[oy * Wo + ox];
                           for (int yy = y0; yy < y1; ++yy)
                             for (int xx = x0; xx < x1; ++xx) dx[yy * W + xx] += gv;
                         }
                     }
                   });
}

/// 3x3 max pooling, padding 1.
inline Var max_pool3x3(const Var& x, int stride) {
  const auto& s = x->value.shape();
  const int B = s[0], C = s[1], H = s[2], W = s[3];
  const ConvSpec spec{stride, 1, 1, 1};
  const int Ho = conv_out_extent(H, 3, spec), Wo = conv_out_extent(W, 3, spec);
  Tensor y({B, C, Ho, Wo});
  const std::size_t ip = static_cast<std::size_t>(H) * W, op = static_cast<std::size_t>(Ho) * Wo;
  std::vector<std::uint32_t> argmax(y.size());
  for (std::size_t bc = 0; bc < static_cast<std::size_t>(B) * C; ++bc) {
    const float* xi = x->value.data() + bc * ip;
    for (int oy = 0; oy < Ho; ++oy)
      for (int ox = 0; ox < Wo; ++ox) {
        const int y0 = std::max(0, oy * stride - 1), y1 = std::min(H, oy * stride + 2);
        const int x0 = std::max(0, ox * stride - 1), x1 = std::min(W, ox * stride + 2);
        float best = -std::numeric_limits<float>::infinity();
        std::uint32_t arg = 0;
        for (int yy = y0; yy < y1; ++yy)
          for (int xx = x0; xx < x1; ++xx)
            if (xi[yy * W + xx] > best || std::isnan(xi[yy * W + xx])) {
              best = xi[yy * W + xx];
              arg = static_cast<std::uint32_t>(yy * W + xx);
            }
        y[bc * op + oy * Wo + ox] = best;
        argmax[bc * op + oy * Wo + ox] = arg;
      }
  }
  return make_node(std::move(y), {x}, false, [=, argmax = std::move(argmax)](Node& self) {
    float* DX = self.parents[0]->grad_buffer().data();
    for (std::size_t bc = 0; bc < static_cast<std::size_t>(B) * C; ++bc)
      for (std::size_t p = 0; p < op; ++p) DX[bc * ip + argmax[bc * op + p]] += self.grad[bc * op + p];
  });
}

/// [B, C, H, W] -> [B, C]
inline Var global_avg_pool(const Var& x) {
  const auto& s = x->value.shape();
  const int B = s[0], C = s[1];
  const std::size_t hw = static_cast<std::size_t>(s[2]) * s[3];
  Tensor y({B, C});
  for (std::size_t bc = 0; bc < static_cast<std::size_t>(B) * C; ++bc) {
    double acc = 0;
    for (std::size_t i = 0; i < hw; ++i) acc += x->value[bc * hw + i];
    y[bc] = static_cast<float>(acc / static_cast<double>(hw));
  }
  return make_node(std::move(y), {x}, false, [B, C, hw](Node& self) {
    float* DX = self.parents[0]->grad_buffer().data();
    const float inv = 1.0f / static_cast<float>(hw);
    for (std::size_t bc = 0; bc < static_cast<std::size_t>(B) * C; ++bc)
      for (std::size_t i = 0; i < hw; ++i) DX[bc * hw + i] += self.grad[bc] * inv;
  });
}

/// x: [B, I]; w: [O, I]; bias: [O]
inline Var linear(const Var& x, Parameter& w, Parameter& bias) {
  const int B = x->value.dim(0), I = x->value.dim(1), O = w.value.dim(0);
  if (w.value.dim(1) != I) throw ShapeError("linear: input width mismatch");
  Tensor y({B, O});
  for (int b = 0; b < B; ++b)
    for (int o = 0; o < O; ++o) {
      float acc = bias.value[o];
      for (int i = 0; i < I; ++i)
        acc += w.value[static_cast<std::size_t>(o) * I + i] * x->value[static_cast<std::size_t>(b) * I + i];
      y[static_cast<std::size_t>(b) * O + o] = acc;
    }
  Parameter* wp = &w;
  Parameter* bp = &bias;
  return make_node(std::move(y), {x}, w.wants_grad() || bias.wants_grad(),
                   [=](Node& self) {
                     auto& xp = self.parents[0];
                     float* DX = xp->requires_grad ? xp->grad_buffer().data() : nullptr;
                     for (int b = 0; b < B; ++b)
                       for (int o = 0; o < O; ++o) {
                         const float g = self.grad[static_cast<std::size_t>(b) * O + o];
                         if (bp->trainable) bp->grad[o] += g;
                         for (int i = 0; i < I; ++i) {
                           const std::size_t wi = static_cast<std::size_t>(o) * I + i;
                           const std::size_t xi = static_cast<std::size_t>(b) * I + i;
                           if (wp->trainable) wp->grad[wi] += g * xp->value[xi];
                           if (DX) DX[xi] += g * wp->value[wi];
                         }
                       }
                   });
}

/// Mean softmax cross-entropy over the batch; returns a scalar [1] node.
inline Var cross_entropy(const Var& logits, std::span<const int> labels) {
  const int B = logits->value.dim(0), K = logits->value.dim(1);
  if (static_cast<int>(labels.size()) != B) throw ShapeError("cross_entropy: label count");
  std::vector<float> probs(static_cast<std::size_t>(B) * K);
  double loss = 0;
  for (int b = 0; b < B; ++b) {
    const float* z = logits->value.data() + static_cast<std::size_t>(b) * K;
    float m = z[0];
    for (int k = 1; k < K; ++k) m = std::max(m, z[k]);
    double zsum = 0;
    for (int k = 0; k < K; ++k) zsum += std::exp(static_cast<double>(z[k] - m));
    for (int k = 0; k < K; ++k)
      probs[static_cast<std::size_t>(b) * K + k] =
          static_cast<float>(std::exp(static_cast<double>(z[k] - m)) / zsum);
    const int t = labels[b];
    if (t < 0 || t >= K) throw ShapeError("cross_entropy: label out of range");
    loss += -(static_cast<double>(z[t] - m) - std::log(zsum));
  }
  Tensor y({1}, static_cast<float>(loss / B));
  std::vector<int> lab(labels.begin(), labels.end());
  return make_node(std::move(y), {logits}, false,
                   [B, K, probs = std::move(probs), lab = std::move(lab)](Node& self) {
                     float* DX = self.parents[0]->grad_buffer().data();
                     const float g = self.grad[0] / static_cast<float>(B);
                     for (int b = 0; b < B; ++b)
                       for (int k = 0; k < K; ++k) {
                         const float p = probs[static_cast<std::size_t>(b) * K + k];
                         DX[static_cast<std::size_t>(b) * K + k] +=
                             g * (p - (k == lab[static_cast<std::size_t>(b)] ? 1.0f : 0.0f));
                       }
                   });
}

/// Zeroes whole samples with probability drop_prob, rescaling survivors.
template <typename Rng>
Var drop_path(const Var& x, float drop_prob, Rng& rng) {
  if (drop_prob <= 0.0f) return x;
  const int B = x->value.dim(0);
  const std::size_t per = x->value.size() / static_cast<std::size_t>(B);
  const float keep = 1.0f - drop_prob;
  std::bernoulli_distribution coin(keep);
  std::vector<float> mask(B);
  for (auto& m : mask) m = coin(rng) ? 1.0f / keep : 0.0f;
  Tensor y = x->value;
  for (int b = 0; b < B; ++b)
    for (std::size_t i = 0; i < per; ++i) y[b * per + i] *= mask[b];
  return make_node(std::move(y), {x}, false, [B, per, mask = std::move(mask)](Node& self) {
    float* DX = self.parents[0]->grad_buffer().data();
    for (int b = 0; b < B; ++b)
      for (std::size_t i = 0; i < per; ++i) DX[b * per + i] += self.grad[b * per + i] * mask[b];
  });
}

}  // namespace midas::ag
