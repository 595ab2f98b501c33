#pragma once

// Sample-averaged decoding of a searched supernet into fixed genotypes.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "midas/data.hpp"
#include "midas/search_space.hpp"
#include "midas/supernet.hpp"
#include "midas/trace.hpp"
#include "midas/trainer.hpp"

namespace midas {

enum class SubsetSource { split_a, split_b, holdout };
enum class Grouping { shared, per_level };
enum class Selection { top2, top_pair };

inline std::string to_string(SubsetSource s) {
  return s == SubsetSource::split_a ? "split_A" : s == SubsetSource::split_b ? "split_B" : "holdout";
}
inline std::string to_string(Grouping g) { return g == Grouping::shared ? "shared" : "per-level"; }
inline std::string to_string(Selection s) { return s == Selection::top2 ? "top2" : "top-pair"; }

inline SubsetSource parse_subset_source(const std::string& s) {
  if (s == "split_A" || s == "a" || s == "A") return SubsetSource::split_a;
  if (s == "split_B" || s == "b" || s == "B") return SubsetSource::split_b;
  if (s == "holdout") return SubsetSource::holdout;
  throw std::invalid_argument("unknown subset source '" + s + "'");
}
inline Grouping parse_grouping(const std::string& s) {
  if (s == "shared" || s == "shared-average") return Grouping::shared;
  if (s == "per-level" || s == "per-level-AGNAS") return Grouping::per_level;
  throw std::invalid_argument("unknown grouping '" + s + "'");
}
inline Selection parse_selection(const std::string& s) {
  if (s == "top2" || s == "top2-marginal") return Selection::top2;
  if (s == "top-pair") return Selection::top_pair;
  throw std::invalid_argument("unknown selection '" + s + "'");
}

struct DecodingConfig {
  double subset_fraction = 0.10;
  SubsetSource source = SubsetSource::split_a;
  Grouping grouping = Grouping::shared;
  Selection selection = Selection::top2;

  void validate() const {
    if (!(subset_fraction > 0.0 && subset_fraction <= 1.0))
      throw std::invalid_argument("subset_fraction must lie in (0, 1]");
  }
};

/// Seeded random subset of the chosen split, returned in ascending order.
inline std::vector<int> decoding_subset(const DataSplit& split, const DecodingConfig& cfg,
                                        std::uint64_t seed) {
  cfg.validate();
  const auto& src = cfg.source == SubsetSource::split_a   ? split.a
                    : cfg.source == SubsetSource::split_b ? split.b
                                                          : split.holdout;
  if (src.empty()) throw std::invalid_argument("decoding subset source " + to_string(cfg.source) + " is empty");
  auto idx = src;
  std::mt19937_64 rng(seed ^ 0xdec0de5eedULL);
  std::shuffle(idx.begin(), idx.end(), rng);
  const auto n = static_cast<std::size_t>(
      std::max(1.0, std::ceil(cfg.subset_fraction * static_cast<double>(src.size()) - 1e-9)));
  idx.resize(std::min(n, idx.size()));
  std::sort(idx.begin(), idx.end());
  return idx;
}

struct NodeMeans {
  std::vector<double> edges;  // E mean marginals, input-major
  std::vector<double> pairs;  // mean pair probabilities, empty unless recorded
};

struct MeanMarginals {
  std::map<NodeKey, NodeMeans> nodes;
  long sample_count = 0;
};

/// Double-precision running sums; `finish` divides once at the end.
class MarginalAccumulator {
 public:
  void add(const std::vector<NodeRecord>& records) {
    if (records.empty()) return;
    const int B = records.front().marginals.dim(0);
    for (const auto& r : records) {
      auto& s = sums_[{r.cell, r.node}];
      const int E = r.marginals.dim(1);
      if (s.edges.empty()) s.edges.assign(static_cast<std::size_t>(E), 0.0);
      if (static_cast<int>(s.edges.size()) != E) throw ShapeError("accumulator: edge count changed");
      const float* m = r.marginals.data();
      for (int b = 0; b < B; ++b)
        for (int e = 0; e < E; ++e) s.edges[static_cast<std::size_t>(e)] += m[b * E + e];
      if (r.image_probs.size()) {
        const int N = r.image_probs.dim(1);
        if (s.pairs.empty()) s.pairs.assign(static_cast<std::size_t>(N), 0.0);
        const float* p = r.image_probs.data();
        for (int b = 0; b < B; ++b)
          for (int q = 0; q < N; ++q) s.pairs[static_cast<std::size_t>(q)] += p[b * N + q];
      }
    }
    count_ += B;
  }

  MeanMarginals finish() const {
    if (count_ == 0) throw std::invalid_argument("accumulate_marginals: empty subset");
    MeanMarginals m;
    m.sample_count = count_;
    const double inv = 1.0 / static_cast<double>(count_);
    for (const auto& [k, s] : sums_) {
      auto& n = m.nodes[k];
      for (double v : s.edges) n.edges.push_back(v * inv);
      for (double v : s.pairs) n.pairs.push_back(v * inv);
    }
    return m;
  }

 private:
  std::map<NodeKey, NodeMeans> sums_;
  long count_ = 0;
};

/// Record-mode evaluation pass over `idx`; optionally keeps every per-sample
/// value (with labels) in `trace`.
inline MeanMarginals accumulate_marginals(Supernet& net, const Dataset& data, const std::vector<int>& idx,
                                          int batch_size = 64, bool record_pairs = false,
                                          ArchTrace* trace = nullptr) {
  if (idx.empty()) throw std::invalid_argument("accumulate_marginals: empty subset");
  ag::NoGradGuard ng;
  nn::Context ctx{false, nullptr, 0.0f};
  MarginalAccumulator acc;
  const std::size_t bs = static_cast<std::size_t>(std::max(1, batch_size));
  for (std::size_t s = 0; s < idx.size(); s += bs) {
    const auto b = make_batch<std::mt19937_64>(data, idx, s, std::min(idx.size(), s + bs), 0, nullptr);
    ForwardOptions fo;
    fo.record = true;
    fo.record_pairs = record_pairs && net.config().mode == TopologyMode::pairwise;
    const auto out = net.forward(b.images, ctx, fo);
    acc.add(out.records);
    if (trace) trace->append(out.records, &b.labels);
  }
  return acc.finish();
}

struct GroupedCell {
  CellRole role = CellRole::normal;
  std::vector<int> source_cells;
  std::vector<NodeMeans> nodes;
};

struct GroupedMeans {
  Grouping strategy = Grouping::shared;
  std::vector<GroupedCell> cells;
  std::vector<int> repeats;  // stacking plan: cells[i] is stacked repeats[i] times
};

namespace detail {

inline GroupedCell average_cells(const MeanMarginals& m, const std::vector<int>& cells, CellRole role,
                                 int nodes_per_cell) {
  GroupedCell g;
  g.role = role;
  g.source_cells = cells;
  for (int k = 0; k < nodes_per_cell; ++k) {
    NodeMeans acc;
    for (int c : cells) {
      auto it = m.nodes.find({c, k});
      if (it == m.nodes.end())
        throw std::invalid_argument("group_cells: missing means for cell " + std::to_string(c) + " node " +
                                    std::to_string(k));
      const auto& n = it->second;
      if (acc.edges.empty()) {
        acc.edges.assign(n.edges.size(), 0.0);
        acc.pairs.assign(n.pairs.size(), 0.0);
      }
      if (n.edges.size() != acc.edges.size() || n.pairs.size() != acc.pairs.size())
        throw ShapeError("group_cells: node sizes differ across grouped cells");
      for (std::size_t e = 0; e < n.edges.size(); ++e) acc.edges[e] += n.edges[e];
      for (std::size_t q = 0; q < n.pairs.size(); ++q) acc.pairs[q] += n.pairs[q];
    }
    const double inv = 1.0 / static_cast<double>(cells.size());
    for (auto& v : acc.edges) v *= inv;
    for (auto& v : acc.pairs) v *= inv;
    g.nodes.push_back(std::move(acc));
  }
  return g;
}

}  // namespace detail

/// Cells retained by the per-level strategy and their stacking repeats.
inline const std::vector<int>& per_level_cells() {
  static const std::vector<int> c{0, 2, 3, 5, 6};
  return c;
}
inline const std::vector<int>& per_level_repeats() {
  static const std::vector<int> r{6, 1, 6, 1, 6};
  return r;
}

/// Shared: one normal and one reduction cell averaged over their roles (all
/// cells in per-edge mode). Per-level: cells 0, 2, 3, 5, 6 kept individually.
inline GroupedMeans group_cells(const MeanMarginals& m, const SupernetConfig& cfg, Grouping strategy) {
  GroupedMeans g;
  g.strategy = strategy;
  if (strategy == Grouping::per_level) {
    if (cfg.num_cells != 8 || cfg.reduction_cells != std::set<int>{2, 5})
      throw std::invalid_argument("per-level grouping needs 8 cells with reductions at {2, 5}");
    if (cfg.mode != TopologyMode::pairwise) throw std::invalid_argument("per-level grouping needs pairwise mode");
    for (int c : per_level_cells())
      g.cells.push_back(detail::average_cells(m, {c}, cfg.is_reduction(c) ? CellRole::reduction : CellRole::normal,
                                              cfg.nodes_per_cell));
    g.repeats = per_level_repeats();
    return g;
  }
  std::vector<int> normal, reduction;
  for (int c = 0; c < cfg.num_cells; ++c) (cfg.is_reduction(c) ? reduction : normal).push_back(c);
  if (cfg.mode == TopologyMode::per_edge) {
    std::vector<int> all(static_cast<std::size_t>(cfg.num_cells));
    std::iota(all.begin(), all.end(), 0);
    g.cells.push_back(detail::average_cells(m, all, CellRole::normal, cfg.nodes_per_cell));
    g.repeats = {cfg.num_cells};
    return g;
  }
  if (!normal.empty()) {
    g.cells.push_back(detail::average_cells(m, normal, CellRole::normal, cfg.nodes_per_cell));
    g.repeats.push_back(static_cast<int>(normal.size()));
  }
  if (!reduction.empty()) {
    g.cells.push_back(detail::average_cells(m, reduction, CellRole::reduction, cfg.nodes_per_cell));
    g.repeats.push_back(static_cast<int>(reduction.size()));
  }
  return g;
}

/// Highest mean edge, then the highest mean edge on a different input.
/// Ties go to the lower flat index. Edges are returned in input order.
inline std::vector<CandidateEdge> select_top2(const std::vector<double>& means, int num_ops) {
  const int E = static_cast<int>(means.size());
  if (num_ops < 1 || E % num_ops) throw ShapeError("select_top2: edge count not a multiple of op count");
  if (E / num_ops < 2) throw std::invalid_argument("select_top2: node has fewer than 2 distinct inputs");
  int first = 0;
  for (int e = 1; e < E; ++e)
    if (means[static_cast<std::size_t>(e)] > means[static_cast<std::size_t>(first)]) first = e;
  int second = -1;
  for (int e = 0; e < E; ++e) {
    if (e / num_ops == first / num_ops) continue;
    if (second < 0 || means[static_cast<std::size_t>(e)] > means[static_cast<std::size_t>(second)]) second = e;
  }
  auto a = edge_at(first, num_ops), b = edge_at(second, num_ops);
  if (b.input < a.input) std::swap(a, b);
  return {a, b};
}

/// Argmax over mean pair probabilities; ties go to the lower pair index.
inline std::vector<CandidateEdge> select_top_pair(const std::vector<double>& pair_means, int num_inputs,
                                                  int num_ops) {
  const auto pairs = enumerate_pairs(num_inputs, num_ops);
  if (pair_means.size() != pairs.size())
    throw std::invalid_argument("top-pair selection needs recorded pair probabilities");
  std::size_t best = 0;
  for (std::size_t q = 1; q < pairs.size(); ++q)
    if (pair_means[q] > pair_means[best]) best = q;
  return {pairs[best].first, pairs[best].second};
}

/// One edge per input: the argmax operation (per-edge mode).
inline std::vector<CandidateEdge> select_per_edge(const std::vector<double>& means, int num_ops) {
  const int E = static_cast<int>(means.size());
  if (num_ops < 1 || E % num_ops) throw ShapeError("select_per_edge: edge count not a multiple of op count");
  std::vector<CandidateEdge> out;
  for (int i = 0; i < E / num_ops; ++i) {
    int best = 0;
    for (int j = 1; j < num_ops; ++j)
      if (means[static_cast<std::size_t>(i * num_ops + j)] > means[static_cast<std::size_t>(i * num_ops + best)])
        best = j;
    out.push_back({i, best});
  }
  return out;
}

inline Genotype decode_genotype(const GroupedMeans& g, Selection sel, const SearchSpace& space) {
  Genotype out;
  const int M = space.num_ops();
  for (const auto& cell : g.cells) {
    CellGenotype cg;
    cg.role = cell.role;
    for (std::size_t k = 0; k < cell.nodes.size(); ++k) {
      const auto& n = cell.nodes[k];
      const int K = SearchSpace::inputs_to_node(static_cast<int>(k));
      if (static_cast<int>(n.edges.size()) != K * M)
        throw ShapeError("decode: node " + std::to_string(k) + " has " + std::to_string(n.edges.size()) +
                         " edges, expected " + std::to_string(K * M));
      if (space.mode() == TopologyMode::per_edge)
        cg.nodes.push_back(select_per_edge(n.edges, M));
      else if (sel == Selection::top_pair)
        cg.nodes.push_back(select_top_pair(n.pairs, K, M));
      else
        cg.nodes.push_back(select_top2(n.edges, M));
    }
    out.cells.push_back(std::move(cg));
  }
  return out;
}

struct Disagreement {
  int cell = 0;  // index into the grouped cells
  int node = 0;
  std::vector<CandidateEdge> top2, top_pair;
};

/// Nodes where top-2 marginal selection and top-pair selection differ.
/// Empty when pair probabilities were not recorded.
inline std::vector<Disagreement> selection_disagreements(const GroupedMeans& g, const SearchSpace& space) {
  std::vector<Disagreement> out;
  if (space.mode() != TopologyMode::pairwise) return out;
  const int M = space.num_ops();
  for (std::size_t c = 0; c < g.cells.size(); ++c)
    for (std::size_t k = 0; k < g.cells[c].nodes.size(); ++k) {
      const auto& n = g.cells[c].nodes[k];
      if (n.pairs.empty()) return {};
      auto a = select_top2(n.edges, M);
      auto b = select_top_pair(n.pairs, SearchSpace::inputs_to_node(static_cast<int>(k)), M);
      if (a != b) out.push_back({static_cast<int>(c), static_cast<int>(k), a, b});
    }
  return out;
}

/// Fraction of decoded edges shared between two genotypes of identical shape
/// (edges compared as sets per node).
inline double edge_agreement(const Genotype& x, const Genotype& y) {
  if (x.cells.size() != y.cells.size()) throw std::invalid_argument("edge_agreement: cell count differs");
  std::size_t same = 0, total = 0;
  for (std::size_t c = 0; c < x.cells.size(); ++c) {
    if (x.cells[c].nodes.size() != y.cells[c].nodes.size())
      throw std::invalid_argument("edge_agreement: node count differs");
    for (std::size_t k = 0; k < x.cells[c].nodes.size(); ++k) {
      const auto& a = x.cells[c].nodes[k];
      const std::set<CandidateEdge> b(y.cells[c].nodes[k].begin(), y.cells[c].nodes[k].end());
      for (const auto& e : a) same += b.count(e);
      total += std::max(a.size(), b.size());
    }
  }
  return total ? static_cast<double>(same) / static_cast<double>(total) : 1.0;
}

struct DecodeResult {
  MeanMarginals means;
  GroupedMeans grouped;
  Genotype genotype;
  std::vector<Disagreement> disagreements;
  std::vector<int> subset;
};

/// accumulate -> group -> select on one supernet.
inline DecodeResult decode_supernet(Supernet& net, const Dataset& data, const DataSplit& split,
                                    const DecodingConfig& cfg, std::uint64_t seed, int batch_size = 64,
                                    ArchTrace* trace = nullptr) {
  DecodeResult r;
  r.subset = decoding_subset(split, cfg, seed);
  r.means = accumulate_marginals(net, data, r.subset, batch_size, true, trace);
  r.grouped = group_cells(r.means, net.config(), cfg.grouping);
  r.genotype = decode_genotype(r.grouped, cfg.selection, net.space());
  r.disagreements = selection_disagreements(r.grouped, net.space());
  const auto report = validate_genotype(r.genotype, net.space());
  if (!report.empty())
    throw std::logic_error("decoded genotype failed validation: " + report.front().message);
  return r;
}

namespace detail {

inline ordered_json edges_json(const std::vector<CandidateEdge>& es) {
  auto j = ordered_json::array();
  for (const auto& e : es) j.push_back({e.input, e.op});
  return j;
}

inline std::string fmt_g9(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", x);
  return buf;
}

// Fixed 9-significant-digit rendering keeps reports byte-stable.
inline ordered_json rounded(const std::vector<double>& v) {
  auto j = ordered_json::array();
  for (double x : v) j.push_back(std::stod(fmt_g9(x)));
  return j;
}

}  // namespace detail

inline ordered_json decode_report_json(const DecodeResult& r, const DecodingConfig& cfg, const SearchSpace& space) {
  ordered_json j;
  j["genotype"] = genotype_to_json(r.genotype);
  j["selection"] = to_string(cfg.selection);
  j["grouping"] = to_string(r.grouped.strategy);
  j["subset"] = {{"source", to_string(cfg.source)},
                 {"fraction", cfg.subset_fraction},
                 {"count", r.means.sample_count}};
  j["stacking"] = r.grouped.repeats;
  auto cells = ordered_json::array();
  for (const auto& c : r.grouped.cells) {
    ordered_json cj;
    cj["role"] = std::string(role_name(c.role));
    cj["source_cells"] = c.source_cells;
    auto nodes = ordered_json::array();
    for (const auto& n : c.nodes) nodes.push_back(detail::rounded(n.edges));
    cj["mean_marginals"] = nodes;
    cells.push_back(cj);
  }
  j["cells"] = cells;
  auto dis = ordered_json::array();
  for (const auto& d : r.disagreements)
    dis.push_back({{"cell", d.cell},
                   {"node", d.node},
                   {"top2", detail::edges_json(d.top2)},
                   {"top_pair", detail::edges_json(d.top_pair)}});
  j["disagreements"] = dis;
  j["pair_probabilities_recorded"] =
      space.mode() == TopologyMode::pairwise && !r.grouped.cells.empty() && !r.grouped.cells[0].nodes.empty() &&
      !r.grouped.cells[0].nodes[0].pairs.empty();
  return j;
}

}  // namespace midas
