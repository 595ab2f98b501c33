#pragma once

// Statistics over recorded marginal traces: dip test, class similarity,
// sample spread, collapse counts and the patch ablation table.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "midas/decoder.hpp"
#include "midas/search_space.hpp"
#include "midas/trace.hpp"

namespace midas::stats {

/// Hartigan's dip of a sorted sample: the sup-norm distance from the empirical
/// CDF to the closest unimodal CDF, via alternating convex minorant / concave
/// majorant fits. Samples whose CDF is exactly unimodal-fittable give 0.
inline double dip_statistic(const std::vector<double>& sorted) {
  const int n = static_cast<int>(sorted.size());
  if (n < 4) throw std::invalid_argument("dip test needs at least 4 samples");
  for (int i = 1; i < n; ++i)
    if (sorted[static_cast<std::size_t>(i)] < sorted[static_cast<std::size_t>(i - 1)])
      throw std::invalid_argument("dip_statistic expects sorted samples");
  // One-based views keep the index arithmetic of the classic algorithm.
  std::vector<double> x(static_cast<std::size_t>(n) + 1);
  for (int i = 0; i < n; ++i) x[static_cast<std::size_t>(i) + 1] = sorted[static_cast<std::size_t>(i)];
  std::vector<int> mn(static_cast<std::size_t>(n) + 1), mj(static_cast<std::size_t>(n) + 1);
  std::vector<int> gcm(static_cast<std::size_t>(n) + 2), lcm(static_cast<std::size_t>(n) + 2);
  auto X = [&](int i) { return x[static_cast<std::size_t>(i)]; };
  auto& MN = mn;
  auto& MJ = mj;
  auto at = [](std::vector<int>& v, int i) -> int& { return v[static_cast<std::size_t>(i)]; };

  double dip = 0.0;  // in units of 1 / (2n) until the end
  int low = 1, high = n;
  if (X(n) == X(1)) return 0.0;

  at(MN, 1) = 1;
  for (int j = 2; j <= n; ++j) {
    at(MN, j) = j - 1;
    while (true) {
      const int mnj = at(MN, j), mnmnj = at(MN, mnj);
      if (mnj == 1 || (X(j) - X(mnj)) * (mnj - mnmnj) < (X(mnj) - X(mnmnj)) * (j - mnj)) break;
      at(MN, j) = mnmnj;
    }
  }
  at(MJ, n) = n;
  for (int k = n - 1; k >= 1; --k) {
    at(MJ, k) = k + 1;
    while (true) {
      const int mjk = at(MJ, k), mjmjk = at(MJ, mjk);
      if (mjk == n || (X(k) - X(mjk)) * (mjk - mjmjk) < (X(mjk) - X(mjmjk)) * (k - mjk)) break;
      at(MJ, k) = mjmjk;
    }
  }

  while (true) {
    at(gcm, 1) = high;
    int i = 1;
    for (; at(gcm, i) > low; ++i) at(gcm, i + 1) = at(MN, at(gcm, i));
    const int l_gcm = i;
    int ig = l_gcm, ix = ig - 1;

    at(lcm, 1) = low;
    for (i = 1; at(lcm, i) < high; ++i) at(lcm, i + 1) = at(MJ, at(lcm, i));
    const int l_lcm = i;
    int ih = l_lcm, iv = 2;

    long double d = 0.0L;
    if (l_gcm != 2 || l_lcm != 2) {
      do {
        const int gcmix = at(gcm, ix), lcmiv = at(lcm, iv);
        long double dx;
        if (gcmix > lcmiv) {
          const int gcmi1 = at(gcm, ix + 1);
          dx = (lcmiv - gcmi1 + 1) -
               (static_cast<long double>(X(lcmiv)) - X(gcmi1)) * (gcmix - gcmi1) / (X(gcmix) - X(gcmi1));
          ++iv;
          if (dx >= d) {
            d = dx;
            ig = ix + 1;
            ih = iv - 1;
          }
        } else {
          const int lcmiv1 = at(lcm, iv - 1);
          dx = (static_cast<long double>(X(gcmix)) - X(lcmiv1)) * (lcmiv - lcmiv1) / (X(lcmiv) - X(lcmiv1)) -
               (gcmix - lcmiv1 - 1);
          --ix;
          if (dx >= d) {
            d = dx;
            ig = ix + 1;
            ih = iv;
          }
        }
        if (ix < 1) ix = 1;
        if (iv > l_lcm) iv = l_lcm;
      } while (at(gcm, ix) != at(lcm, iv));
    }
    if (d < dip) break;

    double dip_l = 0.0;
    for (int j = ig; j < l_gcm; ++j) {
      double max_t = 1.0;
      const int jb = at(gcm, j + 1), je = at(gcm, j);
      if (je - jb > 1 && X(je) != X(jb)) {
        const double C = (je - jb) / (X(je) - X(jb));
        for (int jj = jb; jj <= je; ++jj) max_t = std::max(max_t, (jj - jb + 1) - (X(jj) - X(jb)) * C);
      }
      dip_l = std::max(dip_l, max_t);
    }
    double dip_u = 0.0;
    for (int j = ih; j < l_lcm; ++j) {
      double max_t = 1.0;
      const int jb = at(lcm, j), je = at(lcm, j + 1);
      if (je - jb > 1 && X(je) != X(jb)) {
        const double C = (je - jb) / (X(je) - X(jb));
        for (int jj = jb; jj <= je; ++jj) max_t = std::max(max_t, (X(jj) - X(jb)) * C - (jj - jb - 1));
      }
      dip_u = std::max(dip_u, max_t);
    }
    dip = std::max(dip, std::max(dip_l, dip_u));
    if (low == at(gcm, ig) && high == at(lcm, ih)) break;
    low = at(gcm, ig);
    high = at(lcm, ih);
  }
  return dip / (2.0 * n);
}

/// Sorts a copy, then takes the dip.
inline double dip_of(std::vector<double> samples) {
  std::sort(samples.begin(), samples.end());
  return dip_statistic(samples);
}

/// Null distribution of the dip for uniform(0,1) samples of size n.
class DipCalibration {
 public:
  DipCalibration(int n, int n_boot, std::uint64_t seed) : n_(n) {
    if (n < 4) throw std::invalid_argument("dip test needs at least 4 samples");
    if (n_boot < 200) throw std::invalid_argument("dip bootstrap needs at least 200 replicates");
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<double> s(static_cast<std::size_t>(n));
    null_.reserve(static_cast<std::size_t>(n_boot));
    for (int b = 0; b < n_boot; ++b) {
      for (auto& v : s) v = u(rng);
      null_.push_back(dip_of(s));
    }
    std::sort(null_.begin(), null_.end());
  }

  int n() const { return n_; }
  int replicates() const { return static_cast<int>(null_.size()); }

  /// Fraction of null replicates whose dip is at least `dip`.
  double pvalue(double dip) const {
    const auto it = std::lower_bound(null_.begin(), null_.end(), dip - 1e-15);
    return static_cast<double>(null_.end() - it) / static_cast<double>(null_.size());
  }

 private:
  int n_;
  std::vector<double> null_;
};

struct DipResult {
  double statistic = 0;
  double p_value = 1;
  int n = 0;
};

inline DipResult dip_pvalue(const std::vector<double>& samples, int n_boot = 1000, std::uint64_t seed = 0) {
  const int n = static_cast<int>(samples.size());
  DipCalibration cal(n, n_boot, seed);
  const double d = dip_of(samples);
  return {d, cal.pvalue(d), n};
}

inline DipResult dip_pvalue(const std::vector<double>& samples, const DipCalibration& cal) {
  if (static_cast<int>(samples.size()) != cal.n()) throw std::invalid_argument("calibration size mismatch");
  const double d = dip_of(samples);
  return {d, cal.pvalue(d), cal.n()};
}

struct KsResult {
  double statistic = 0;
  double p_value = 1;
};

/// Kolmogorov distribution tail P(K > t).
inline double kolmogorov_tail(double t) {
  if (t <= 0) return 1.0;
  if (t < 0.2) return 1.0;
  double s = 0;
  for (int k = 1; k <= 100; ++k) {
    const double term = std::exp(-2.0 * k * k * t * t);
    s += (k % 2 ? 1.0 : -1.0) * term;
    if (term < 1e-16) break;
  }
  return std::clamp(2.0 * s, 0.0, 1.0);
}

/// One-sample Kolmogorov-Smirnov test against uniform(0,1), with the
/// Stephens small-sample correction of the asymptotic distribution.
inline KsResult ks_uniform(std::vector<double> v) {
  if (v.empty()) throw std::invalid_argument("ks_uniform: empty sample");
  std::sort(v.begin(), v.end());
  const double n = static_cast<double>(v.size());
  double d = 0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double f = std::clamp(v[i], 0.0, 1.0);
    d = std::max({d, (static_cast<double>(i) + 1) / n - f, f - static_cast<double>(i) / n});
  }
  const double sn = std::sqrt(n);
  return {d, kolmogorov_tail((sn + 0.12 + 0.11 / sn) * d)};
}

/// Per (node, edge) dip test over the trace's samples.
struct TraceDip {
  NodeKey node;
  int edge = 0;
  DipResult result;
};

inline std::vector<TraceDip> dip_over_trace(const ArchTrace& trace, int n_boot, std::uint64_t seed) {
  std::vector<TraceDip> out;
  if (trace.sample_count < 4) throw std::invalid_argument("dip test needs at least 4 traced samples");
  DipCalibration cal(trace.sample_count, n_boot, seed);
  for (const auto& [k, n] : trace.nodes)
    for (int e = 0; e < n.num_edges; ++e) out.push_back({k, e, dip_pvalue(trace.series(k, e), cal)});
  return out;
}

inline double fraction_unimodal(const std::vector<TraceDip>& r, double alpha = 0.05) {
  if (r.empty()) return 0.0;
  std::size_t keep = 0;
  for (const auto& d : r) keep += d.result.p_value > alpha;
  return static_cast<double>(keep) / static_cast<double>(r.size());
}

struct SimilarityResult {
  std::vector<std::vector<double>> matrix;  // K x K cosine similarities
  int dims_total = 0;
  int dims_used = 0;  // after dropping zero-variance dimensions
  bool degenerate = false;
  std::vector<int> class_counts;
};

/// Cosine similarities between z-scored class-mean parameter vectors.
/// `class_means[k]` is the mean parameter vector for class k.
inline SimilarityResult similarity_from_means(const std::vector<std::vector<double>>& class_means) {
  SimilarityResult r;
  const int K = static_cast<int>(class_means.size());
  if (K < 2) throw std::invalid_argument("class similarity needs at least 2 classes");
  const std::size_t D = class_means[0].size();
  for (const auto& m : class_means)
    if (m.size() != D) throw ShapeError("class means differ in length");
  r.dims_total = static_cast<int>(D);
  std::vector<std::vector<double>> z(static_cast<std::size_t>(K));
  for (std::size_t d = 0; d < D; ++d) {
    double mu = 0;
    for (int k = 0; k < K; ++k) mu += class_means[static_cast<std::size_t>(k)][d];
    mu /= K;
    double var = 0;
    for (int k = 0; k < K; ++k) {
      const double t = class_means[static_cast<std::size_t>(k)][d] - mu;
      var += t * t;
    }
    const double sd = std::sqrt(var / K);
    if (!(sd > 1e-12 * std::max(1.0, std::abs(mu)))) continue;
    for (int k = 0; k < K; ++k) z[static_cast<std::size_t>(k)].push_back((class_means[static_cast<std::size_t>(k)][d] - mu) / sd);
  }
  r.dims_used = static_cast<int>(z[0].size());
  r.matrix.assign(static_cast<std::size_t>(K), std::vector<double>(static_cast<std::size_t>(K), 0.0));
  if (r.dims_used < 2) {
    r.degenerate = true;
    return r;
  }
  std::vector<double> norm(static_cast<std::size_t>(K));
  for (int k = 0; k < K; ++k) {
    double s = 0;
    for (double v : z[static_cast<std::size_t>(k)]) s += v * v;
    norm[static_cast<std::size_t>(k)] = std::sqrt(s);
  }
  for (int a = 0; a < K; ++a)
    for (int b = 0; b < K; ++b) {
      double dot = 0;
      for (int d = 0; d < r.dims_used; ++d)
        dot += z[static_cast<std::size_t>(a)][static_cast<std::size_t>(d)] * z[static_cast<std::size_t>(b)][static_cast<std::size_t>(d)];
      const double den = norm[static_cast<std::size_t>(a)] * norm[static_cast<std::size_t>(b)];
      r.matrix[static_cast<std::size_t>(a)][static_cast<std::size_t>(b)] = den > 0 ? dot / den : 0.0;
    }
  return r;
}

/// Class-mean parameter vectors over the chosen cells, then z-scored cosine
/// similarity. Empty `cells` selects the last two.
inline SimilarityResult class_similarity(const ArchTrace& trace, int num_classes, std::vector<int> cells = {}) {
  if (num_classes < 2) throw std::invalid_argument("class similarity needs at least 2 classes");
  if (static_cast<int>(trace.labels.size()) != trace.sample_count)
    throw std::invalid_argument("class similarity needs a labelled trace");
  std::set<int> all;
  for (const auto& [k, n] : trace.nodes) all.insert(k.first);
  if (cells.empty()) {
    if (all.empty()) throw std::invalid_argument("empty trace");
    auto it = all.end();
    cells.push_back(*--it);
    if (it != all.begin()) cells.insert(cells.begin(), *--it);
  }
  const std::set<int> chosen(cells.begin(), cells.end());
  std::vector<int> counts(static_cast<std::size_t>(num_classes), 0);
  for (int y : trace.labels) {
    if (y < 0 || y >= num_classes) throw std::invalid_argument("label out of range");
    ++counts[static_cast<std::size_t>(y)];
  }
  for (int c : counts)
    if (c == 0) throw std::invalid_argument("class similarity: a class has no samples");
  std::vector<std::vector<double>> means(static_cast<std::size_t>(num_classes));
  for (const auto& [k, n] : trace.nodes) {
    if (!chosen.count(k.first)) continue;
    for (int e = 0; e < n.num_edges; ++e) {
      std::vector<double> s(static_cast<std::size_t>(num_classes), 0.0);
      for (int i = 0; i < trace.sample_count; ++i)
        s[static_cast<std::size_t>(trace.labels[static_cast<std::size_t>(i)])] += n.values[static_cast<std::size_t>(i) * n.num_edges + e];
      for (int c = 0; c < num_classes; ++c)
        means[static_cast<std::size_t>(c)].push_back(s[static_cast<std::size_t>(c)] / counts[static_cast<std::size_t>(c)]);
    }
  }
  auto r = similarity_from_means(means);
  r.class_counts = counts;
  return r;
}

struct SpreadResult {
  std::map<NodeKey, std::vector<double>> per_edge;  // population std per edge
  double aggregate = 0;                             // mean over all edges of all nodes
};

/// Population standard deviation of each parameter across samples (two-pass).
inline SpreadResult marginal_std_over_samples(const ArchTrace& trace) {
  if (trace.sample_count < 2) throw std::invalid_argument("spread needs at least 2 samples");
  SpreadResult r;
  double total = 0;
  std::size_t count = 0;
  for (const auto& [k, n] : trace.nodes) {
    auto& v = r.per_edge[k];
    for (int e = 0; e < n.num_edges; ++e) {
      double mu = 0;
      for (int i = 0; i < trace.sample_count; ++i) mu += n.values[static_cast<std::size_t>(i) * n.num_edges + e];
      mu /= trace.sample_count;
      double ss = 0;
      for (int i = 0; i < trace.sample_count; ++i) {
        const double t = n.values[static_cast<std::size_t>(i) * n.num_edges + e] - mu;
        ss += t * t;
      }
      v.push_back(std::sqrt(ss / trace.sample_count));
      total += v.back();
      ++count;
    }
  }
  r.aggregate = count ? total / static_cast<double>(count) : 0.0;
  return r;
}

/// Edges in normal cells whose operation is pooling or skip.
inline int count_nonlearnable_ops(const Genotype& g, const std::vector<OperationKind>& catalog = default_catalog()) {
  int n = 0;
  for (const auto& c : g.cells) {
    if (c.role != CellRole::normal) continue;
    for (const auto& node : c.nodes)
      for (const auto& e : node) {
        if (e.op < 0 || e.op >= static_cast<int>(catalog.size())) throw std::invalid_argument("op index out of range");
        n += !catalog[static_cast<std::size_t>(e.op)].learnable;
      }
  }
  return n;
}

/// Edge count of all normal cells: the value count_nonlearnable_ops reaches under full collapse.
inline int normal_edge_count(const Genotype& g) {
  int n = 0;
  for (const auto& c : g.cells)
    if (c.role == CellRole::normal)
      for (const auto& node : c.nodes) n += static_cast<int>(node.size());
  return n;
}

struct AblationRow {
  std::string variant;
  std::vector<double> op_importance;  // one entry per catalog op
  double uniform_reference = 0;       // importance every op takes under uniform marginals
  double learnable_spread = 0;        // max - min over learnable ops
};

/// Mean importance of each operation in `cells`, averaged over their nodes and
/// inputs.
inline AblationRow ablation_row(const std::string& variant, const MeanMarginals& m, const std::vector<int>& cells,
                                const std::vector<OperationKind>& catalog = default_catalog()) {
  AblationRow row;
  row.variant = variant;
  const int M = static_cast<int>(catalog.size());
  row.op_importance.assign(static_cast<std::size_t>(M), 0.0);
  const std::set<int> chosen(cells.begin(), cells.end());
  std::size_t slots = 0;
  for (const auto& [k, n] : m.nodes) {
    if (!chosen.count(k.first)) continue;
    const int E = static_cast<int>(n.edges.size());
    if (E % M) throw ShapeError("ablation: edge count not a multiple of op count");
    for (int i = 0; i < E / M; ++i) {
      for (int j = 0; j < M; ++j) row.op_importance[static_cast<std::size_t>(j)] += n.edges[static_cast<std::size_t>(i * M + j)];
      ++slots;
    }
    row.uniform_reference += (E / M) * 2.0 / E;
  }
  if (!slots) throw std::invalid_argument("ablation: no nodes in the selected cells");
  for (auto& v : row.op_importance) v /= static_cast<double>(slots);
  row.uniform_reference /= static_cast<double>(slots);
  double lo = 1e300, hi = -1e300;
  for (int j = 0; j < M; ++j)
    if (catalog[static_cast<std::size_t>(j)].learnable) {
      lo = std::min(lo, row.op_importance[static_cast<std::size_t>(j)]);
      hi = std::max(hi, row.op_importance[static_cast<std::size_t>(j)]);
    }
  row.learnable_spread = hi >= lo ? hi - lo : 0.0;
  return row;
}

/// One row per variant; variant configs must agree apart from the patch size.
inline std::vector<AblationRow> patch_ablation_report(
    const std::vector<std::pair<std::string, const MeanMarginals*>>& variants, const std::vector<SupernetConfig>& configs,
    const std::vector<int>& cells = {0, 1}) {
  if (variants.size() != configs.size()) throw std::invalid_argument("ablation: one config per variant");
  for (std::size_t i = 1; i < configs.size(); ++i) {
    auto a = to_json(configs[0]), b = to_json(configs[i]);
    a.erase("patch_size");
    b.erase("patch_size");
    a.erase("init_seed");
    b.erase("init_seed");
    if (a != b) throw std::invalid_argument("ablation: variant configs differ beyond the patch size");
  }
  std::vector<AblationRow> rows;
  for (const auto& [name, m] : variants) rows.push_back(ablation_row(name, *m, cells));
  return rows;
}

/// Histogram of operation ids over all decoded edges, and per family.
inline std::vector<int> op_histogram(const Genotype& g, int num_ops = 7) {
  std::vector<int> h(static_cast<std::size_t>(num_ops), 0);
  for (const auto& c : g.cells)
    for (const auto& node : c.nodes)
      for (const auto& e : node) ++h.at(static_cast<std::size_t>(e.op));
  return h;
}

inline std::map<OpFamily, int> family_histogram(const Genotype& g,
                                                const std::vector<OperationKind>& catalog = default_catalog()) {
  std::map<OpFamily, int> h;
  for (const auto& k : catalog) h[k.family] = 0;
  for (const auto& c : g.cells)
    for (const auto& node : c.nodes)
      for (const auto& e : node) ++h[catalog.at(static_cast<std::size_t>(e.op)).family];
  return h;
}

/// True when `family` holds strictly more edges than every other family.
inline bool family_has_strict_plurality(const Genotype& g, OpFamily family,
                                        const std::vector<OperationKind>& catalog = default_catalog()) {
  const auto h = family_histogram(g, catalog);
  const int mine = h.at(family);
  for (const auto& [f, c] : h)
    if (f != family && c >= mine) return false;
  return true;
}

}  // namespace midas::stats
