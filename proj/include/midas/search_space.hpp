#pragma once

#include <algorithm>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace midas {

enum class OpFamily { pooling, skip, separable_conv, dilated_conv };

inline std::string_view family_name(OpFamily f) {
  switch (f) {
    case OpFamily::pooling: return "pooling";
    case OpFamily::skip: return "skip";
    case OpFamily::separable_conv: return "separable_conv";
    case OpFamily::dilated_conv: return "dilated_conv";
  }
  return "?";
}

struct OperationKind {
  int id = 0;
  std::string name;
  int kernel_extent = 1;  // spatial receptive field in pixels
  bool learnable = false;
  OpFamily family = OpFamily::skip;

  friend bool operator==(const OperationKind&, const OperationKind&) = default;
};

namespace op_id {
inline constexpr int avg_pool_3x3 = 0;
inline constexpr int max_pool_3x3 = 1;
inline constexpr int skip_connect = 2;
inline constexpr int sep_conv_3x3 = 3;
inline constexpr int sep_conv_5x5 = 4;
inline constexpr int dil_conv_3x3 = 5;
inline constexpr int dil_conv_5x5 = 6;
}  // namespace op_id

/// The 7-operation DARTS catalog without the Zero operation. Order is fixed:
/// avg_pool_3x3, max_pool_3x3, skip_connect, sep_conv_3x3, sep_conv_5x5,
/// dil_conv_3x3, dil_conv_5x5.
inline std::vector<OperationKind> default_catalog() {
  return {
      {op_id::avg_pool_3x3, "avg_pool_3x3", 3, false, OpFamily::pooling},
      {op_id::max_pool_3x3, "max_pool_3x3", 3, false, OpFamily::pooling},
      {op_id::skip_connect, "skip_connect", 1, false, OpFamily::skip},
      {op_id::sep_conv_3x3, "sep_conv_3x3", 3, true, OpFamily::separable_conv},
      {op_id::sep_conv_5x5, "sep_conv_5x5", 5, true, OpFamily::separable_conv},
      // dilation 2: extent = k + (k - 1) * (d - 1)
      {op_id::dil_conv_3x3, "dil_conv_3x3", 5, true, OpFamily::dilated_conv},
      {op_id::dil_conv_5x5, "dil_conv_5x5", 9, true, OpFamily::dilated_conv},
  };
}

enum class TopologyMode { pairwise, per_edge };

class SearchSpace {
 public:
  SearchSpace(std::vector<OperationKind> ops, int nodes_per_cell,
              TopologyMode mode = TopologyMode::pairwise)
      : ops_(std::move(ops)), nodes_per_cell_(nodes_per_cell), mode_(mode) {
    if (ops_.size() < 2) throw std::invalid_argument("search space needs at least 2 operations");
    if (nodes_per_cell_ < 1) throw std::invalid_argument("nodes_per_cell must be >= 1");
  }

  static SearchSpace darts(int nodes_per_cell = 4, TopologyMode mode = TopologyMode::pairwise) {
    return SearchSpace(default_catalog(), nodes_per_cell, mode);
  }

  const std::vector<OperationKind>& ops() const { return ops_; }
  int num_ops() const { return static_cast<int>(ops_.size()); }
  int nodes_per_cell() const { return nodes_per_cell_; }
  TopologyMode mode() const { return mode_; }

  /// Node k sees the two cell inputs plus the k earlier nodes.
  static int inputs_to_node(int k) { return k + 2; }
  int edges_at_node(int k) const { return inputs_to_node(k) * num_ops(); }

 private:
  std::vector<OperationKind> ops_;
  int nodes_per_cell_;
  TopologyMode mode_;
};

/// Candidate edge (input index, operation id); flat index is input-major.
struct CandidateEdge {
  int input = 0;
  int op = 0;
  friend auto operator<=>(const CandidateEdge&, const CandidateEdge&) = default;
};

inline int edge_index(CandidateEdge e, int num_ops) { return e.input * num_ops + e.op; }
inline CandidateEdge edge_at(int flat, int num_ops) { return {flat / num_ops, flat % num_ops}; }

/// Unordered pair of candidate edges with first.input < second.input.
struct PairIndex {
  CandidateEdge first;
  CandidateEdge second;
  friend auto operator<=>(const PairIndex&, const PairIndex&) = default;
};

/// All valid pairs ((i1,j1),(i2,j2)) with i1 < i2, lexicographic order.
/// Count is C(num_inputs, 2) * num_ops^2.
inline std::vector<PairIndex> enumerate_pairs(int num_inputs, int num_ops) {
  if (num_inputs < 2) throw std::invalid_argument("enumerate_pairs: need at least 2 inputs");
  if (num_ops < 1) throw std::invalid_argument("enumerate_pairs: need at least 1 operation");
  std::vector<PairIndex> pairs;
  pairs.reserve(static_cast<std::size_t>(num_inputs * (num_inputs - 1) / 2 * num_ops * num_ops));
  for (int i1 = 0; i1 < num_inputs; ++i1)
    for (int j1 = 0; j1 < num_ops; ++j1)
      for (int i2 = i1 + 1; i2 < num_inputs; ++i2)
        for (int j2 = 0; j2 < num_ops; ++j2) pairs.push_back({{i1, j1}, {i2, j2}});
  return pairs;
}

enum class CellRole { normal, reduction };

inline std::string_view role_name(CellRole r) {
  return r == CellRole::normal ? "normal" : "reduction";
}

struct CellGenotype {
  CellRole role = CellRole::normal;
  std::vector<std::vector<CandidateEdge>> nodes;
  friend bool operator==(const CellGenotype&, const CellGenotype&) = default;
};

struct Genotype {
  std::vector<CellGenotype> cells;
  friend bool operator==(const Genotype&, const Genotype&) = default;
};

struct Violation {
  int cell = 0;
  int node = 0;
  std::string message;
};

using ValidationReport = std::vector<Violation>;

/// Reports every violation; an empty report means the genotype is valid.
inline ValidationReport validate_genotype(const Genotype& g, const SearchSpace& s) {
  ValidationReport report;
  auto add = [&](int c, int n, std::string m) { report.push_back({c, n, std::move(m)}); };
  for (std::size_t c = 0; c < g.cells.size(); ++c) {
    const auto& cell = g.cells[c];
    const int ci = static_cast<int>(c);
    if (static_cast<int>(cell.nodes.size()) != s.nodes_per_cell())
      add(ci, -1, "node count " + std::to_string(cell.nodes.size()) + " != " +
                      std::to_string(s.nodes_per_cell()));
    for (std::size_t k = 0; k < cell.nodes.size(); ++k) {
      const auto& edges = cell.nodes[k];
      const int ki = static_cast<int>(k);
      const int num_inputs = SearchSpace::inputs_to_node(ki);
      const std::size_t want =
          s.mode() == TopologyMode::pairwise ? 2u : static_cast<std::size_t>(num_inputs);
      if (edges.size() != want)
        add(ci, ki, "edge count " + std::to_string(edges.size()) + " != " + std::to_string(want));
      for (const auto& e : edges) {
        if (e.op < 0 || e.op >= s.num_ops()) add(ci, ki, "op index out of range");
        if (e.input < 0 || e.input >= num_inputs) add(ci, ki, "input index out of range");
      }
      for (std::size_t a = 0; a < edges.size(); ++a)
        for (std::size_t b = a + 1; b < edges.size(); ++b)
          if (edges[a].input == edges[b].input) add(ci, ki, "duplicate input index");
    }
  }
  return report;
}

using ordered_json = nlohmann::ordered_json;

inline ordered_json genotype_to_json(const Genotype& g) {
  ordered_json cells = ordered_json::array();
  for (const auto& cell : g.cells) {
    ordered_json nodes = ordered_json::array();
    for (const auto& node : cell.nodes) {
      ordered_json edges = ordered_json::array();
      for (const auto& e : node) edges.push_back(ordered_json::array({e.input, e.op}));
      nodes.push_back(std::move(edges));
    }
    ordered_json jc;
    jc["role"] = std::string(role_name(cell.role));
    jc["nodes"] = std::move(nodes);
    cells.push_back(std::move(jc));
  }
  ordered_json out;
  out["cells"] = std::move(cells);
  return out;
}

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline Genotype genotype_from_json(const nlohmann::ordered_json& j) {
  Genotype g;
  try {
    for (const auto& jc : j.at("cells")) {
      CellGenotype cell;
      const auto role = jc.at("role").get<std::string>();
      if (role == "normal")
        cell.role = CellRole::normal;
      else if (role == "reduction")
        cell.role = CellRole::reduction;
      else
        throw FormatError("unknown cell role '" + role + "'");
      for (const auto& jn : jc.at("nodes")) {
        std::vector<CandidateEdge> edges;
        for (const auto& je : jn) {
          if (!je.is_array() || je.size() != 2 || !je[0].is_number_integer() ||
              !je[1].is_number_integer())
            throw FormatError("edge must be [input, op_id] integers");
          edges.push_back({je[0].get<int>(), je[1].get<int>()});
        }
        cell.nodes.push_back(std::move(edges));
      }
      g.cells.push_back(std::move(cell));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("genotype json: ") + e.what());
  }
  return g;
}

inline std::string genotype_to_string(const Genotype& g) { return genotype_to_json(g).dump(); }

inline Genotype genotype_from_string(std::string_view text) {
  try {
    return genotype_from_json(nlohmann::ordered_json::parse(text));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("genotype json: ") + e.what());
  }
}

}  // namespace midas
