#pragma once

// Naive reference implementations used as oracles. They share no code with
// the library beyond the tensor container.

#include <cmath>
#include <random>
#include <vector>

#include "midas/tensor.hpp"

namespace oracle {

using midas::BasicTensor;

template <typename T, typename Rng>
BasicTensor<T> random_tensor(midas::Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  BasicTensor<T> t(std::move(shape));
  std::uniform_real_distribution<double> d(lo, hi);
  for (auto& v : t.storage()) v = static_cast<T>(d(rng));
  return t;
}

/// Block mean of feature [B, C, H, W] at block (u, v) of size ps (partial at edges).
template <typename T>
double block_mean(const BasicTensor<T>& f, int b, int c, int u, int v, int ph, int pw) {
  const int H = f.dim(2), W = f.dim(3);
  double s = 0;
  int n = 0;
  for (int y = u * ph; y < std::min(H, (u + 1) * ph); ++y)
    for (int x = v * pw; x < std::min(W, (v + 1) * pw); ++x) {
      s += static_cast<double>(f.at({b, c, y, x}));
      ++n;
    }
  return s / n;
}

inline double lrelu(double h, double slope = 0.01) { return h > 0 ? h : slope * h; }

/// y = W2 lrelu(W1 x) by explicit summation.
template <typename T>
std::vector<double> mlp(const BasicTensor<T>& w1, const BasicTensor<T>& w2,
                        const std::vector<double>& x) {
  const int hid = w1.dim(0), in = w1.dim(1), out = w2.dim(0);
  std::vector<double> h(hid, 0.0), y(out, 0.0);
  for (int o = 0; o < hid; ++o) {
    for (int i = 0; i < in; ++i) h[o] += static_cast<double>(w1.at({o, i})) * x[i];
    h[o] = lrelu(h[o]);
  }
  for (int o = 0; o < out; ++o)
    for (int i = 0; i < hid; ++i) y[o] += static_cast<double>(w2.at({o, i})) * h[i];
  return y;
}

struct PipelineResult {
  // per sample: per unordered pair enumerated (i1,j1,i2,j2) lexicographic
  std::vector<std::vector<double>> image_pair_probs;
  std::vector<std::vector<double>> marginals;
  std::vector<std::vector<std::vector<double>>> patch_pair_probs;  // [b][site][pair]
  std::vector<std::vector<std::vector<double>>> patch_scores;
};

/// Full attention pipeline from pooled tensors:
/// pooled_edges [B, R, Cc, E, C], pooled_query [B, R, Cc, C*K].
template <typename T>
PipelineResult pairwise_pipeline(const BasicTensor<T>& pooled_edges,
                                 const BasicTensor<T>& pooled_query, const BasicTensor<T>& kw1,
                                 const BasicTensor<T>& kw2, const BasicTensor<T>& qw1,
                                 const BasicTensor<T>& qw2, int K, int M) {
  const int B = pooled_edges.dim(0), R = pooled_edges.dim(1), Cc = pooled_edges.dim(2);
  const int E = pooled_edges.dim(3), C = pooled_edges.dim(4);
  const int QC = pooled_query.dim(3);
  PipelineResult res;
  for (int b = 0; b < B; ++b) {
    std::vector<double> img;
    std::vector<std::vector<double>> sites, site_scores;
    for (int u = 0; u < R; ++u)
      for (int v = 0; v < Cc; ++v) {
        std::vector<double> xq(QC);
        for (int c = 0; c < QC; ++c) xq[c] = pooled_query.at({b, u, v, c});
        const auto q = mlp(qw1, qw2, xq);
        std::vector<std::vector<double>> keys(E);
        for (int e = 0; e < E; ++e) {
          std::vector<double> xe(C);
          for (int c = 0; c < C; ++c) xe[c] = pooled_edges.at({b, u, v, e, c});
          keys[e] = mlp(kw1, kw2, xe);
        }
        std::vector<double> scores;
        for (int i1 = 0; i1 < K; ++i1)
          for (int j1 = 0; j1 < M; ++j1)
            for (int i2 = i1 + 1; i2 < K; ++i2)
              for (int j2 = 0; j2 < M; ++j2) {
                double s = 0;
                for (int c = 0; c < C; ++c)
                  s += (keys[i1 * M + j1][c] + keys[i2 * M + j2][c]) * q[c];
                scores.push_back(s / std::sqrt(static_cast<double>(C)));
              }
        double mx = scores[0];
        for (double s : scores) mx = std::max(mx, s);
        std::vector<double> p(scores.size());
        double z = 0;
        for (std::size_t n = 0; n < p.size(); ++n) z += (p[n] = std::exp(scores[n] - mx));
        for (auto& x : p) x /= z;
        if (img.empty()) img.assign(p.size(), 0.0);
        for (std::size_t n = 0; n < p.size(); ++n) img[n] += p[n] / (R * Cc);
        sites.push_back(p);
        site_scores.push_back(scores);
      }
    std::vector<double> marg(E, 0.0);
    std::size_t n = 0;
    for (int i1 = 0; i1 < K; ++i1)
      for (int j1 = 0; j1 < M; ++j1)
        for (int i2 = i1 + 1; i2 < K; ++i2)
          for (int j2 = 0; j2 < M; ++j2, ++n)
            for (int e = 0; e < E; ++e)
              if (e == i1 * M + j1 || e == i2 * M + j2) marg[e] += img[n];
    res.image_pair_probs.push_back(img);
    res.marginals.push_back(marg);
    res.patch_pair_probs.push_back(sites);
    res.patch_scores.push_back(site_scores);
  }
  return res;
}

}  // namespace oracle
