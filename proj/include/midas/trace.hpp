#pragma once

// Recorded per-sample marginals, keyed by (cell, node).

#include <cmath>
#include <map>
#include <stdexcept>
#include <utility>
#include <vector>

#include "midas/supernet.hpp"

namespace midas {

using NodeKey = std::pair<int, int>;  // (cell, node)

/// Per-sample marginal values for every node, with optional class labels.
struct ArchTrace {
  struct Node {
    int num_edges = 0;
    std::vector<float> values;  // sample-major: [sample * E + e]
  };
  std::map<NodeKey, Node> nodes;
  std::vector<int> labels;
  int sample_count = 0;

  void append(const std::vector<NodeRecord>& records, const std::vector<int>* batch_labels) {
    if (records.empty()) return;
    const int B = records.front().marginals.dim(0);
    for (const auto& r : records) {
      auto& n = nodes[{r.cell, r.node}];
      n.num_edges = r.marginals.dim(1);
      n.values.insert(n.values.end(), r.marginals.storage().begin(), r.marginals.storage().end());
    }
    if (batch_labels) labels.insert(labels.end(), batch_labels->begin(), batch_labels->end());
    sample_count += B;
  }

  float value(NodeKey k, int sample, int edge) const {
    const auto& n = nodes.at(k);
    return n.values[static_cast<std::size_t>(sample) * n.num_edges + edge];
  }

  /// Samples of one (cell, node, edge) parameter.
  std::vector<double> series(NodeKey k, int edge) const {
    const auto& n = nodes.at(k);
    std::vector<double> s(static_cast<std::size_t>(sample_count));
    for (int i = 0; i < sample_count; ++i)
      s[static_cast<std::size_t>(i)] = n.values[static_cast<std::size_t>(i) * n.num_edges + edge];
    return s;
  }
};

/// Streaming per-edge mean and population variance (Welford, double).
class MarginalMoments {
 public:
  void add(const std::vector<NodeRecord>& records) {
    for (const auto& r : records) {
      auto& s = stats_[{r.cell, r.node}];
      const int B = r.marginals.dim(0), E = r.marginals.dim(1);
      if (s.mean.empty()) {
        s.mean.assign(static_cast<std::size_t>(E), 0.0);
        s.m2.assign(static_cast<std::size_t>(E), 0.0);
      }
      for (int b = 0; b < B; ++b) {
        ++s.count;
        for (int e = 0; e < E; ++e) {
          const double x = r.marginals.at({b, e});
          const double d = x - s.mean[static_cast<std::size_t>(e)];
          s.mean[static_cast<std::size_t>(e)] += d / static_cast<double>(s.count);
          s.m2[static_cast<std::size_t>(e)] += d * (x - s.mean[static_cast<std::size_t>(e)]);
        }
      }
    }
  }

  /// Population std averaged over all edges of all nodes.
  double mean_std() const {
    double total = 0;
    std::size_t n = 0;
    for (const auto& [k, s] : stats_)
      for (double m2 : s.m2) {
        total += s.count ? std::sqrt(m2 / static_cast<double>(s.count)) : 0.0;
        ++n;
      }
    return n ? total / static_cast<double>(n) : 0.0;
  }

 private:
  struct Stat {
    long count = 0;
    std::vector<double> mean, m2;
  };
  std::map<NodeKey, Stat> stats_;
};

}  // namespace midas
