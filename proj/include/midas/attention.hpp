#pragma once

// Input-specific architecture parameters from patchwise dot-product attention
// over the candidate (input, operation) edges of one node.
//
// Per sample and patch (u, v):
//   key_e   = W_k2 lrelu(W_k1 pool_uv(F_e))
//   query   = W_q2 lrelu(W_q1 pool_uv(concat(x_0 .. x_k)))
//   score_p = (key_e1 + key_e2) . query / sqrt(C)     for pair p = (e1, e2)
//   prob_uv = softmax over pairs; image prob = mean over patches
//   marginal_e = sum of image probs over the pairs containing e  (sums to 2)

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "midas/search_space.hpp"
#include "midas/tensor.hpp"

namespace midas::attention {

/// Non-overlapping patch layout over an H x W map. Blocks at the bottom/right
/// edge may be partial when the patch size does not divide the extent.
struct PatchGrid {
  int height = 0, width = 0;
  int patch_h = 0, patch_w = 0;
  int rows = 0, cols = 0;

  int count() const { return rows * cols; }
  int row_begin(int u) const { return u * patch_h; }
  int row_end(int u) const { return std::min(height, (u + 1) * patch_h); }
  int col_begin(int v) const { return v * patch_w; }
  int col_end(int v) const { return std::min(width, (v + 1) * patch_w); }
};

inline PatchGrid make_grid(int height, int width, int patch_h, int patch_w,
                           bool allow_partial = true) {
  if (patch_h < 1 || patch_w < 1) throw ShapeError("patch size must be >= 1");
  if (!allow_partial && (height % patch_h != 0 || width % patch_w != 0))
    throw ShapeError("feature map " + std::to_string(height) + "x" + std::to_string(width) +
                     " not divisible by patch size " + std::to_string(patch_h));
  PatchGrid g;
  g.height = height;
  g.width = width;
  // A patch larger than the map degenerates to global pooling.
  g.patch_h = std::min(patch_h, height);
  g.patch_w = std::min(patch_w, width);
  g.rows = (height + g.patch_h - 1) / g.patch_h;
  g.cols = (width + g.patch_w - 1) / g.patch_w;
  return g;
}

inline PatchGrid make_grid(int height, int width, int patch_size, bool allow_partial = true) {
  return make_grid(height, width, patch_size, patch_size, allow_partial);
}

/// values: [B, rows, cols, C]
template <typename T>
struct PooledPatches {
  BasicTensor<T> values;
  int patch_size = 0;
};

/// Per-patch mean of a [B, C, H, W] map, written into `out` at channel
/// offset `channel_offset` of a [B, rows, cols, out_channels] buffer.
template <typename T, typename U>
void pool_into(const BasicTensor<U>& feature, const PatchGrid& grid, BasicTensor<T>& out,
               int channel_offset) {
  const int B = feature.dim(0), C = feature.dim(1), H = feature.dim(2), W = feature.dim(3);
  const int out_c = out.dim(3);
  const U* src = feature.data();
  T* dst = out.data();
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const U* plane = src + (static_cast<std::size_t>(b) * C + c) * H * W;
      for (int u = 0; u < grid.rows; ++u)
        for (int v = 0; v < grid.cols; ++v) {
          T acc = 0;
          const int r0 = grid.row_begin(u), r1 = grid.row_end(u);
          const int c0 = grid.col_begin(v), c1 = grid.col_end(v);
          for (int y = r0; y < r1; ++y)
            for (int x = c0; x < c1; ++x) acc += static_cast<T>(plane[y * W + x]);
          acc /= static_cast<T>((r1 - r0) * (c1 - c0));
          dst[((static_cast<std::size_t>(b) * grid.rows + u) * grid.cols + v) * out_c +
              channel_offset + c] = acc;
        }
    }
}

/// Adjoint of pool_into: spreads pooled gradients uniformly over each block.
template <typename T, typename U>
void unpool_add(const BasicTensor<T>& grad_pooled, const PatchGrid& grid, int channel_offset,
                BasicTensor<U>& grad_feature) {
  const int B = grad_feature.dim(0), C = grad_feature.dim(1), H = grad_feature.dim(2),
            W = grad_feature.dim(3);
  const int in_c = grad_pooled.dim(3);
  U* dst = grad_feature.data();
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      U* plane = dst + (static_cast<std::size_t>(b) * C + c) * H * W;
      for (int u = 0; u < grid.rows; ++u)
        for (int v = 0; v < grid.cols; ++v) {
          const int r0 = grid.row_begin(u), r1 = grid.row_end(u);
          const int c0 = grid.col_begin(v), c1 = grid.col_end(v);
          const T g = grad_pooled[((static_cast<std::size_t>(b) * grid.rows + u) * grid.cols + v) *
                                      in_c +
                                  channel_offset + c] /
                      static_cast<T>((r1 - r0) * (c1 - c0));
          for (int y = r0; y < r1; ++y)
            for (int x = c0; x < c1; ++x) plane[y * W + x] += static_cast<U>(g);
        }
    }
}

template <typename T>
PooledPatches<T> patch_pool(const BasicTensor<T>& feature, int patch_size,
                            bool allow_partial = true) {
  if (feature.rank() != 4) throw ShapeError("patch_pool expects [B, C, H, W], got " +
                                            shape_str(feature.shape()));
  const auto grid =
      make_grid(feature.dim(2), feature.dim(3), patch_size, allow_partial);
  PooledPatches<T> out{BasicTensor<T>({feature.dim(0), grid.rows, grid.cols, feature.dim(1)}),
                       patch_size};
  pool_into(feature, grid, out.values, 0);
  return out;
}

/// Two-layer bias-free MLP: y = W2 lrelu(W1 x).
template <typename T>
struct ProjectionMLP {
  BasicTensor<T> w1;  // [hidden, in]
  BasicTensor<T> w2;  // [out, hidden]
  T negative_slope = static_cast<T>(0.01);

  ProjectionMLP() = default;
  ProjectionMLP(int in_dim, int hidden_dim, int out_dim)
      : w1({hidden_dim, in_dim}), w2({out_dim, hidden_dim}) {}

  int in_dim() const { return w1.dim(1); }
  int hidden_dim() const { return w1.dim(0); }
  int out_dim() const { return w2.dim(0); }

  /// Uniform fan-in scaling, bound 1/sqrt(fan_in).
  template <typename Rng>
  void init_uniform(Rng& rng) {
    auto fill = [&rng](BasicTensor<T>& w) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(w.dim(1)));
      std::uniform_real_distribution<double> dist(-bound, bound);
      for (auto& v : w.storage()) v = static_cast<T>(dist(rng));
    };
    fill(w1);
    fill(w2);
  }

  T act(T h) const { return h > 0 ? h : negative_slope * h; }
  T act_grad(T h) const { return h > 0 ? T(1) : negative_slope; }

  /// x: n rows of in_dim; writes n rows of out_dim; optionally keeps the
  /// hidden pre-activations (n rows of hidden_dim) for the backward pass.
  void forward(const T* x, std::size_t n, T* y, T* hidden_pre = nullptr) const {
    const int in = in_dim(), hid = hidden_dim(), out = out_dim();
    std::vector<T> h(static_cast<std::size_t>(hid));
    for (std::size_t r = 0; r < n; ++r) {
      const T* xr = x + r * in;
      for (int o = 0; o < hid; ++o) {
        const T* wr = w1.data() + static_cast<std::size_t>(o) * in;
        T acc = 0;
        for (int i = 0; i < in; ++i) acc += wr[i] * xr[i];
        h[o] = acc;
        if (hidden_pre) hidden_pre[r * hid + o] = acc;
      }
      for (int o = 0; o < hid; ++o) h[o] = act(h[o]);
      T* yr = y + r * out;
      for (int o = 0; o < out; ++o) {
        const T* wr = w2.data() + static_cast<std::size_t>(o) * hid;
        T acc = 0;
        for (int i = 0; i < hid; ++i) acc += wr[i] * h[i];
        yr[o] = acc;
      }
    }
  }

  /// Accumulates weight gradients and (optionally) input gradients.
  void backward(const T* x, const T* hidden_pre, const T* dy, std::size_t n, BasicTensor<T>& dw1,
                BasicTensor<T>& dw2, T* dx) const {
    const int in = in_dim(), hid = hidden_dim(), out = out_dim();
    std::vector<T> a(static_cast<std::size_t>(hid)), dh(static_cast<std::size_t>(hid));
    for (std::size_t r = 0; r < n; ++r) {
      const T* hr = hidden_pre + r * hid;
      const T* dyr = dy + r * out;
      for (int i = 0; i < hid; ++i) a[i] = act(hr[i]);
      std::fill(dh.begin(), dh.end(), T(0));
      for (int o = 0; o < out; ++o) {
        const T g = dyr[o];
        if (g == T(0)) continue;
        T* dw = dw2.data() + static_cast<std::size_t>(o) * hid;
        const T* wr = w2.data() + static_cast<std::size_t>(o) * hid;
        for (int i = 0; i < hid; ++i) {
          dw[i] += g * a[i];
          dh[i] += g * wr[i];
        }
      }
      for (int i = 0; i < hid; ++i) dh[i] *= act_grad(hr[i]);
      const T* xr = x + r * in;
      T* dxr = dx ? dx + r * in : nullptr;
      for (int o = 0; o < hid; ++o) {
        const T g = dh[o];
        if (g == T(0)) continue;
        T* dw = dw1.data() + static_cast<std::size_t>(o) * in;
        const T* wr = w1.data() + static_cast<std::size_t>(o) * in;
        for (int i = 0; i < in; ++i) dw[i] += g * xr[i];
        if (dxr)
          for (int i = 0; i < in; ++i) dxr[i] += g * wr[i];
      }
    }
  }
};

/// keys: [B, rows, cols, E, C]; one shared key MLP for all edges of a node.
template <typename T>
BasicTensor<T> compute_keys(const std::vector<PooledPatches<T>>& pooled_edges,
                            const ProjectionMLP<T>& mlp) {
  if (pooled_edges.empty()) throw ShapeError("compute_keys: no candidate edges");
  const auto& s = pooled_edges.front().values.shape();
  const int E = static_cast<int>(pooled_edges.size());
  const int C = s[3];
  if (mlp.in_dim() != C)
    throw ShapeError("compute_keys: mlp input " + std::to_string(mlp.in_dim()) +
                     " != channels " + std::to_string(C));
  const int Cout = mlp.out_dim();
  const std::size_t sites = static_cast<std::size_t>(s[0]) * s[1] * s[2];
  BasicTensor<T> keys({s[0], s[1], s[2], E, Cout});
  for (int e = 0; e < E; ++e) {
    if (pooled_edges[e].values.shape() != s) throw ShapeError("compute_keys: edge shape mismatch");
    for (std::size_t site = 0; site < sites; ++site)
      mlp.forward(pooled_edges[e].values.data() + site * C, 1,
                  keys.data() + (site * E + e) * Cout);
  }
  return keys;
}

/// query: [B, rows, cols, C]; inputs are channel-concatenated then pooled.
template <typename T>
BasicTensor<T> compute_query(const std::vector<BasicTensor<T>>& node_inputs, int patch_size,
                             const ProjectionMLP<T>& mlp, bool allow_partial = true) {
  if (node_inputs.empty()) throw ShapeError("compute_query: no inputs");
  const auto& s = node_inputs.front().shape();
  if (s.size() != 4) throw ShapeError("compute_query expects [B, C, H, W] inputs");
  for (const auto& x : node_inputs)
    if (x.shape() != s) throw ShapeError("compute_query: inputs differ in shape");
  const int n = static_cast<int>(node_inputs.size());
  const int C = s[1];
  if (mlp.in_dim() != C * n)
    throw ShapeError("compute_query: mlp input " + std::to_string(mlp.in_dim()) + " != " +
                     std::to_string(C * n));
  const auto grid = make_grid(s[2], s[3], patch_size, allow_partial);
  BasicTensor<T> pooled({s[0], grid.rows, grid.cols, C * n});
  for (int i = 0; i < n; ++i) pool_into(node_inputs[i], grid, pooled, i * C);
  const std::size_t sites = static_cast<std::size_t>(s[0]) * grid.rows * grid.cols;
  BasicTensor<T> query({s[0], grid.rows, grid.cols, mlp.out_dim()});
  mlp.forward(pooled.data(), sites, query.data());
  return query;
}

/// Per-edge scaled dot products key_e . q / sqrt(C): [B, rows, cols, E].
template <typename T>
BasicTensor<T> edge_scores(const BasicTensor<T>& keys, const BasicTensor<T>& query) {
  const auto& ks = keys.shape();
  if (ks.size() != 5 || query.rank() != 4 || query.dim(0) != ks[0] || query.dim(1) != ks[1] ||
      query.dim(2) != ks[2] || query.dim(3) != ks[4])
    throw ShapeError("edge_scores: keys " + shape_str(ks) + " vs query " +
                     shape_str(query.shape()));
  const int E = ks[3], C = ks[4];
  const T scale = T(1) / std::sqrt(static_cast<T>(C));
  const std::size_t sites = static_cast<std::size_t>(ks[0]) * ks[1] * ks[2];
  BasicTensor<T> s({ks[0], ks[1], ks[2], E});
  for (std::size_t site = 0; site < sites; ++site) {
    const T* q = query.data() + site * C;
    for (int e = 0; e < E; ++e) {
      const T* k = keys.data() + (site * E + e) * C;
      T acc = 0;
      for (int c = 0; c < C; ++c) acc += k[c] * q[c];
      s[site * E + e] = acc * scale;
    }
  }
  return s;
}

/// Flat edge indices of each pair, for the vectorized scorer.
struct PairTable {
  std::vector<int> first;
  std::vector<int> second;
  int num_edges = 0;
  std::size_t size() const { return first.size(); }
};

inline PairTable make_pair_table(const std::vector<PairIndex>& pairs, int num_inputs,
                                 int num_ops) {
  PairTable t;
  t.num_edges = num_inputs * num_ops;
  t.first.reserve(pairs.size());
  t.second.reserve(pairs.size());
  for (const auto& p : pairs) {
    const int a = edge_index(p.first, num_ops), b = edge_index(p.second, num_ops);
    if (p.first.input == p.second.input || a < 0 || b < 0 || a >= t.num_edges ||
        b >= t.num_edges)
      throw ShapeError("pair index invalid for " + std::to_string(t.num_edges) + " edges");
    t.first.push_back(a);
    t.second.push_back(b);
  }
  return t;
}

/// score_p = (key_e1 + key_e2) . q / sqrt(C) = s_e1 + s_e2: [B, rows, cols, N].
template <typename T>
BasicTensor<T> pair_scores(const BasicTensor<T>& keys, const BasicTensor<T>& query,
                           const PairTable& pairs) {
  const auto s = edge_scores(keys, query);
  const int E = s.dim(3);
  if (E != pairs.num_edges) throw ShapeError("pair_scores: pair table edge count mismatch");
  const std::size_t sites = s.size() / static_cast<std::size_t>(E);
  const std::size_t N = pairs.size();
  BasicTensor<T> out({s.dim(0), s.dim(1), s.dim(2), static_cast<int>(N)});
  for (std::size_t site = 0; site < sites; ++site) {
    const T* se = s.data() + site * E;
    T* o = out.data() + site * N;
    for (std::size_t p = 0; p < N; ++p) o[p] = se[pairs.first[p]] + se[pairs.second[p]];
  }
  return out;
}

template <typename T>
void softmax_inplace(T* v, std::size_t n) {
  T m = v[0];
  for (std::size_t i = 1; i < n; ++i) m = std::max(m, v[i]);
  T z = 0;
  for (std::size_t i = 0; i < n; ++i) {
    v[i] = std::exp(v[i] - m);
    z += v[i];
  }
  for (std::size_t i = 0; i < n; ++i) v[i] /= z;
}

/// Softmax along the last axis with max-subtraction.
template <typename T>
BasicTensor<T> pair_softmax(BasicTensor<T> scores) {
  const std::size_t n = static_cast<std::size_t>(scores.shape().back());
  if (n < 1) throw ShapeError("pair_softmax: empty pair axis");
  for (std::size_t off = 0; off < scores.size(); off += n) softmax_inplace(scores.data() + off, n);
  return scores;
}

/// [B, rows, cols, N] -> [B, N], arithmetic mean over patches.
template <typename T>
BasicTensor<T> average_patches(const BasicTensor<T>& patch_probs) {
  if (patch_probs.rank() != 4) throw ShapeError("average_patches expects [B, rows, cols, N]");
  const int B = patch_probs.dim(0), N = patch_probs.dim(3);
  const int sites = patch_probs.dim(1) * patch_probs.dim(2);
  BasicTensor<T> out({B, N});
  for (int b = 0; b < B; ++b) {
    T* o = out.data() + static_cast<std::size_t>(b) * N;
    for (int s = 0; s < sites; ++s) {
      const T* p = patch_probs.data() + (static_cast<std::size_t>(b) * sites + s) * N;
      for (int n = 0; n < N; ++n) o[n] += p[n];
    }
    for (int n = 0; n < N; ++n) o[n] /= static_cast<T>(sites);
  }
  return out;
}

/// marginal_e = sum of probabilities of the pairs containing e: [B, E].
template <typename T>
BasicTensor<T> marginalize(const BasicTensor<T>& image_probs, const PairTable& pairs) {
  if (image_probs.rank() != 2 || static_cast<std::size_t>(image_probs.dim(1)) != pairs.size())
    throw ShapeError("marginalize: probabilities " + shape_str(image_probs.shape()) +
                     " vs pair count " + std::to_string(pairs.size()));
  const int B = image_probs.dim(0);
  const std::size_t N = pairs.size();
  BasicTensor<T> m({B, pairs.num_edges});
  for (int b = 0; b < B; ++b) {
    const T* p = image_probs.data() + b * N;
    T* mb = m.data() + static_cast<std::size_t>(b) * pairs.num_edges;
    for (std::size_t n = 0; n < N; ++n) {
      mb[pairs.first[n]] += p[n];
      mb[pairs.second[n]] += p[n];
    }
  }
  return m;
}

/// Fixed-topology variant: softmax over operations within each input, per
/// patch, then patch-averaged: [B, E] with each input's block summing to 1.
template <typename T>
BasicTensor<T> per_edge_scores(const BasicTensor<T>& keys, const BasicTensor<T>& query,
                               int num_inputs, int num_ops) {
  auto s = edge_scores(keys, query);
  if (s.dim(3) != num_inputs * num_ops) throw ShapeError("per_edge_scores: edge count mismatch");
  for (std::size_t off = 0; off < s.size(); off += static_cast<std::size_t>(num_ops))
    softmax_inplace(s.data() + off, static_cast<std::size_t>(num_ops));
  return average_patches(s);
}

template <typename T>
struct AttentionGrads {
  BasicTensor<T> key_w1, key_w2, query_w1, query_w2;
};

/// Everything the backward pass needs from one forward evaluation.
template <typename T>
struct AttentionCache {
  int batch = 0, rows = 0, cols = 0;
  BasicTensor<T> pooled_edges;  // [B, rows, cols, E, C]
  BasicTensor<T> pooled_query;  // [B, rows, cols, C * (k+1)]
  std::vector<T> key_hidden;    // [sites * E, hidden]
  BasicTensor<T> keys;          // [B, rows, cols, E, C]
  std::vector<T> query_hidden;  // [sites, hidden]
  BasicTensor<T> query;         // [B, rows, cols, C]
  BasicTensor<T> patch_probs;   // [B, rows, cols, N] (pairwise) or [.., E] (per-edge)
};

template <typename T>
struct AttentionOutput {
  BasicTensor<T> marginals;    // [B, E]
  BasicTensor<T> image_probs;  // [B, N] pairwise; [B, E] per-edge
  AttentionCache<T> cache;
};

/// Attention state of one node: its own key and query projections.
template <typename T>
class NodeAttention {
 public:
  NodeAttention() = default;
  NodeAttention(int channels, int num_inputs, int num_ops,
                TopologyMode mode = TopologyMode::pairwise)
      : channels_(channels),
        num_inputs_(num_inputs),
        num_ops_(num_ops),
        mode_(mode),
        key_mlp_(channels, channels, channels),
        query_mlp_(channels * num_inputs, channels, channels) {
    if (mode_ == TopologyMode::pairwise)
      pairs_ = make_pair_table(enumerate_pairs(num_inputs, num_ops), num_inputs, num_ops);
  }

  template <typename Rng>
  void init(Rng& rng) {
    key_mlp_.init_uniform(rng);
    query_mlp_.init_uniform(rng);
  }

  int channels() const { return channels_; }
  int num_inputs() const { return num_inputs_; }
  int num_ops() const { return num_ops_; }
  int num_edges() const { return num_inputs_ * num_ops_; }
  TopologyMode mode() const { return mode_; }
  const PairTable& pairs() const { return pairs_; }

  ProjectionMLP<T>& key_mlp() { return key_mlp_; }
  const ProjectionMLP<T>& key_mlp() const { return key_mlp_; }
  ProjectionMLP<T>& query_mlp() { return query_mlp_; }
  const ProjectionMLP<T>& query_mlp() const { return query_mlp_; }

  AttentionGrads<T> zero_grads() const {
    return {BasicTensor<T>(key_mlp_.w1.shape()), BasicTensor<T>(key_mlp_.w2.shape()),
            BasicTensor<T>(query_mlp_.w1.shape()), BasicTensor<T>(query_mlp_.w2.shape())};
  }

  /// pooled_edges: [B, rows, cols, E, C]; pooled_query: [B, rows, cols, C*(k+1)].
  AttentionOutput<T> forward(BasicTensor<T> pooled_edges, BasicTensor<T> pooled_query) const {
    const auto& ps = pooled_edges.shape();
    if (ps.size() != 5 || ps[3] != num_edges() || ps[4] != channels_)
      throw ShapeError("node attention: pooled edges " + shape_str(ps) + " for " +
                       std::to_string(num_edges()) + " edges x " + std::to_string(channels_) +
                       " channels");
    const auto& qs = pooled_query.shape();
    if (qs.size() != 4 || qs[0] != ps[0] || qs[1] != ps[1] || qs[2] != ps[2] ||
        qs[3] != channels_ * num_inputs_)
      throw ShapeError("node attention: pooled query " + shape_str(qs));

    AttentionOutput<T> out;
    auto& c = out.cache;
    c.batch = ps[0];
    c.rows = ps[1];
    c.cols = ps[2];
    const std::size_t sites = static_cast<std::size_t>(c.batch) * c.rows * c.cols;
    const int E = num_edges(), C = channels_;
    const int hid = key_mlp_.hidden_dim();

    c.keys = BasicTensor<T>({c.batch, c.rows, c.cols, E, C});
    c.key_hidden.assign(sites * E * hid, T(0));
    key_mlp_.forward(pooled_edges.data(), sites * E, c.keys.data(), c.key_hidden.data());

    c.query = BasicTensor<T>({c.batch, c.rows, c.cols, C});
    c.query_hidden.assign(sites * query_mlp_.hidden_dim(), T(0));
    query_mlp_.forward(pooled_query.data(), sites, c.query.data(), c.query_hidden.data());

    if (mode_ == TopologyMode::pairwise) {
      c.patch_probs = pair_softmax(pair_scores(c.keys, c.query, pairs_));
      out.image_probs = average_patches(c.patch_probs);
      out.marginals = marginalize(out.image_probs, pairs_);
    } else {
      auto s = edge_scores(c.keys, c.query);
      for (std::size_t off = 0; off < s.size(); off += static_cast<std::size_t>(num_ops_))
        softmax_inplace(s.data() + off, static_cast<std::size_t>(num_ops_));
      c.patch_probs = std::move(s);
      out.image_probs = average_patches(c.patch_probs);
      out.marginals = out.image_probs;
    }
    c.pooled_edges = std::move(pooled_edges);
    c.pooled_query = std::move(pooled_query);
    return out;
  }

  /// Given dL/dmarginals [B, E], accumulates parameter gradients into `grads`
  /// and writes dL/dpooled_edges, dL/dpooled_query (same shapes as the inputs).
  void backward(const AttentionCache<T>& c, const BasicTensor<T>& d_marginals,
                AttentionGrads<T>& grads, BasicTensor<T>* d_pooled_edges,
                BasicTensor<T>* d_pooled_query) const {
    const int E = num_edges(), C = channels_;
    const int sites_per_image = c.rows * c.cols;
    const std::size_t sites = static_cast<std::size_t>(c.batch) * sites_per_image;
    if (d_marginals.rank() != 2 || d_marginals.dim(0) != c.batch || d_marginals.dim(1) != E)
      throw ShapeError("node attention backward: d_marginals " +
                       shape_str(d_marginals.shape()));
    const T inv_sites = T(1) / static_cast<T>(sites_per_image);
    const T scale = T(1) / std::sqrt(static_cast<T>(C));

    // dL/d(edge score) per site.
    std::vector<T> ds(sites * E, T(0));
    if (mode_ == TopologyMode::pairwise) {
      const std::size_t N = pairs_.size();
      std::vector<T> g(N);
      for (int b = 0; b < c.batch; ++b) {
        const T* dm = d_marginals.data() + static_cast<std::size_t>(b) * E;
        for (std::size_t n = 0; n < N; ++n)
          g[n] = (dm[pairs_.first[n]] + dm[pairs_.second[n]]) * inv_sites;
        for (int s = 0; s < sites_per_image; ++s) {
          const std::size_t site = static_cast<std::size_t>(b) * sites_per_image + s;
          const T* pi = c.patch_probs.data() + site * N;
          T dot = 0;
          for (std::size_t n = 0; n < N; ++n) dot += pi[n] * g[n];
          T* dse = ds.data() + site * E;
          for (std::size_t n = 0; n < N; ++n) {
            const T da = pi[n] * (g[n] - dot);
            dse[pairs_.first[n]] += da;
            dse[pairs_.second[n]] += da;
          }
        }
      }
    } else {
      const int M = num_ops_;
      for (int b = 0; b < c.batch; ++b) {
        const T* dm = d_marginals.data() + static_cast<std::size_t>(b) * E;
        for (int s = 0; s < sites_per_image; ++s) {
          const std::size_t site = static_cast<std::size_t>(b) * sites_per_image + s;
          const T* pi = c.patch_probs.data() + site * E;
          T* dse = ds.data() + site * E;
          for (int i = 0; i < num_inputs_; ++i) {
            T dot = 0;
            for (int j = 0; j < M; ++j) dot += pi[i * M + j] * dm[i * M + j] * inv_sites;
            for (int j = 0; j < M; ++j)
              dse[i * M + j] = pi[i * M + j] * (dm[i * M + j] * inv_sites - dot);
          }
        }
      }
    }

    // Scores -> keys and query.
    std::vector<T> dkeys(sites * E * C, T(0));
    std::vector<T> dquery(sites * C, T(0));
    for (std::size_t site = 0; site < sites; ++site) {
      const T* q = c.query.data() + site * C;
      T* dq = dquery.data() + site * C;
      for (int e = 0; e < E; ++e) {
        const T g = ds[site * E + e] * scale;
        const T* k = c.keys.data() + (site * E + e) * C;
        T* dk = dkeys.data() + (site * E + e) * C;
        for (int ch = 0; ch < C; ++ch) {
          dk[ch] = g * q[ch];
          dq[ch] += g * k[ch];
        }
      }
    }

    T* dpe = nullptr;
    if (d_pooled_edges) {
      *d_pooled_edges = BasicTensor<T>(c.pooled_edges.shape());
      dpe = d_pooled_edges->data();
    }
    key_mlp_.backward(c.pooled_edges.data(), c.key_hidden.data(), dkeys.data(), sites * E,
                      grads.key_w1, grads.key_w2, dpe);
    T* dpq = nullptr;
    if (d_pooled_query) {
      *d_pooled_query = BasicTensor<T>(c.pooled_query.shape());
      dpq = d_pooled_query->data();
    }
    query_mlp_.backward(c.pooled_query.data(), c.query_hidden.data(), dquery.data(), sites,
                        grads.query_w1, grads.query_w2, dpq);
  }

 private:
  int channels_ = 0;
  int num_inputs_ = 0;
  int num_ops_ = 0;
  TopologyMode mode_ = TopologyMode::pairwise;
  ProjectionMLP<T> key_mlp_;
  ProjectionMLP<T> query_mlp_;
  PairTable pairs_;
};

}  // namespace midas::attention
