#pragma once

// Differentiable search network. Each node mixes its candidate maps with
// per-sample marginals produced by that node's own attention projections.

#include <cstdint>
#include <fstream>
#include <memory>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "midas/attention.hpp"
#include "midas/autograd.hpp"
#include "midas/nn.hpp"
#include "midas/search_space.hpp"

namespace midas {

struct SupernetConfig {
  int num_cells = 8;
  std::set<int> reduction_cells{2, 5};
  int init_channels = 16;
  int nodes_per_cell = 4;
  int stem_multiplier = 3;
  int patch_size = 8;
  int num_classes = 10;
  int in_channels = 3;
  TopologyMode mode = TopologyMode::pairwise;
  bool allow_partial_patches = true;
  std::uint64_t init_seed = 1;

  /// DARTS placement: cells n/3 and 2n/3.
  static std::set<int> default_reductions(int num_cells) {
    if (num_cells < 3) return {};
    return {num_cells / 3, 2 * num_cells / 3};
  }

  void validate() const {
    if (num_cells < 1) throw std::invalid_argument("num_cells must be >= 1");
    if (init_channels < 1) throw std::invalid_argument("init_channels must be >= 1");
    if (nodes_per_cell < 1) throw std::invalid_argument("nodes_per_cell must be >= 1");
    if (patch_size < 1) throw std::invalid_argument("patch_size must be >= 1");
    if (num_classes < 2) throw std::invalid_argument("num_classes must be >= 2");
    for (int r : reduction_cells)
      if (r < 0 || r >= num_cells)
        throw std::invalid_argument("reduction position " + std::to_string(r) + " out of range");
  }

  bool is_reduction(int cell) const { return reduction_cells.count(cell) > 0; }
};

inline nlohmann::ordered_json to_json(const SupernetConfig& c) {
  nlohmann::ordered_json j;
  j["num_cells"] = c.num_cells;
  j["reduction_cells"] = std::vector<int>(c.reduction_cells.begin(), c.reduction_cells.end());
  j["init_channels"] = c.init_channels;
  j["nodes_per_cell"] = c.nodes_per_cell;
  j["stem_multiplier"] = c.stem_multiplier;
  j["patch_size"] = c.patch_size;
  j["num_classes"] = c.num_classes;
  j["in_channels"] = c.in_channels;
  j["mode"] = c.mode == TopologyMode::pairwise ? "pairwise" : "per-edge";
  j["allow_partial_patches"] = c.allow_partial_patches;
  j["init_seed"] = c.init_seed;
  return j;
}

inline SupernetConfig supernet_config_from_json(const nlohmann::ordered_json& j) {
  SupernetConfig c;
  c.num_cells = j.at("num_cells").get<int>();
  const auto red = j.at("reduction_cells").get<std::vector<int>>();
  c.reduction_cells = std::set<int>(red.begin(), red.end());
  c.init_channels = j.at("init_channels").get<int>();
  c.nodes_per_cell = j.at("nodes_per_cell").get<int>();
  c.stem_multiplier = j.at("stem_multiplier").get<int>();
  c.patch_size = j.at("patch_size").get<int>();
  c.num_classes = j.at("num_classes").get<int>();
  c.in_channels = j.at("in_channels").get<int>();
  c.mode = j.at("mode").get<std::string>() == "per-edge" ? TopologyMode::per_edge
                                                          : TopologyMode::pairwise;
  c.allow_partial_patches = j.at("allow_partial_patches").get<bool>();
  c.init_seed = j.at("init_seed").get<std::uint64_t>();
  return c;
}

/// Attention projections of one node as trainable parameters.
class AttentionUnit {
 public:
  template <typename Rng>
  AttentionUnit(int channels, int num_inputs, int num_ops, TopologyMode mode, Rng& rng)
      : attn_(channels, num_inputs, num_ops, mode) {
    attn_.init(rng);
    key_w1_ = ag::Parameter("key_w1", attn_.key_mlp().w1);
    key_w2_ = ag::Parameter("key_w2", attn_.key_mlp().w2);
    query_w1_ = ag::Parameter("query_w1", attn_.query_mlp().w1);
    query_w2_ = ag::Parameter("query_w2", attn_.query_mlp().w2);
  }

  void collect(nn::StateDict& sd) {
    sd.param("key_w1", key_w1_);
    sd.param("key_w2", key_w2_);
    sd.param("query_w1", query_w1_);
    sd.param("query_w2", query_w2_);
  }

  const attention::NodeAttention<float>& synced() {
    attn_.key_mlp().w1 = key_w1_.value;
    attn_.key_mlp().w2 = key_w2_.value;
    attn_.query_mlp().w1 = query_w1_.value;
    attn_.query_mlp().w2 = query_w2_.value;
    return attn_;
  }

  ag::Parameter& key_w1() { return key_w1_; }
  ag::Parameter& key_w2() { return key_w2_; }
  ag::Parameter& query_w1() { return query_w1_; }
  ag::Parameter& query_w2() { return query_w2_; }
  bool any_trainable() const {
    return key_w1_.wants_grad() || key_w2_.wants_grad() || query_w1_.wants_grad() ||
           query_w2_.wants_grad();
  }
  int num_edges() const { return attn_.num_edges(); }
  std::size_t num_pairs() const { return attn_.pairs().size(); }

 private:
  attention::NodeAttention<float> attn_;
  ag::Parameter key_w1_, key_w2_, query_w1_, query_w2_;
};

struct AttentionEval {
  ag::Var marginals;   // [B, E]
  Tensor image_probs;  // [B, N] pairwise, [B, E] per-edge
  int patch_sites = 0; // patches per sample
};

/// Differentiable marginals for one node. Candidate maps share the node's
/// output resolution; inputs at an integer multiple of it are pooled over
/// proportionally larger blocks so every tensor lands on the same patch grid.
inline AttentionEval attention_marginals(AttentionUnit& unit, const std::vector<ag::Var>& maps,
                                         const std::vector<ag::Var>& inputs, int patch_size,
                                         bool allow_partial) {
  const auto& attn = unit.synced();
  const int E = attn.num_edges();
  if (static_cast<int>(maps.size()) != E)
    throw ShapeError("attention: " + std::to_string(maps.size()) + " maps for " +
                     std::to_string(E) + " edges");
  if (static_cast<int>(inputs.size()) != attn.num_inputs())
    throw ShapeError("attention: input count mismatch");
  const auto& ms = maps.front()->value.shape();
  const int B = ms[0], C = ms[1], Ho = ms[2], Wo = ms[3];
  if (C != attn.channels()) throw ShapeError("attention: channel mismatch");
  const auto grid = attention::make_grid(Ho, Wo, patch_size, allow_partial);

  Tensor pooled_edges({B, grid.rows, grid.cols, E * C});
  for (int e = 0; e < E; ++e) {
    if (maps[e]->value.shape() != ms) throw ShapeError("attention: candidate maps differ in shape");
    attention::pool_into(maps[e]->value, grid, pooled_edges, e * C);
  }
  pooled_edges.reshape({B, grid.rows, grid.cols, E, C});

  const int K = attn.num_inputs();
  std::vector<attention::PatchGrid> input_grids;
  Tensor pooled_query({B, grid.rows, grid.cols, C * K});
  for (int i = 0; i < K; ++i) {
    const auto& is = inputs[i]->value.shape();
    if (is[0] != B || is[1] != C || is[2] % Ho != 0 || is[3] % Wo != 0)
      throw ShapeError("attention: input " + shape_str(is) + " not aligned with maps " +
                       shape_str(ms));
    const auto g = attention::make_grid(is[2], is[3], grid.patch_h * (is[2] / Ho),
                                        grid.patch_w * (is[3] / Wo), allow_partial);
    if (g.rows != grid.rows || g.cols != grid.cols)
      throw ShapeError("attention: input patch grid mismatch");
    attention::pool_into(inputs[i]->value, g, pooled_query, i * C);
    input_grids.push_back(g);
  }

  auto out = std::make_shared<attention::AttentionOutput<float>>(
      attn.forward(std::move(pooled_edges), std::move(pooled_query)));
  AttentionEval ev;
  ev.image_probs = out->image_probs;
  ev.patch_sites = grid.count();
  Tensor marg = out->marginals;

  std::vector<ag::Var> parents = maps;
  parents.insert(parents.end(), inputs.begin(), inputs.end());
  AttentionUnit* up = &unit;
  ev.marginals = ag::make_node(
      std::move(marg), std::move(parents), unit.any_trainable(),
      [up, out, grid, input_grids, E, K, C](ag::Node& self) {
        const auto& attn = up->synced();
        auto grads = attn.zero_grads();
        Tensor d_edges, d_query;
        attn.backward(out->cache, self.grad, grads, &d_edges, &d_query);
        auto acc = [](ag::Parameter& p, const Tensor& g) {
          if (p.trainable) p.grad += g;
        };
        acc(up->key_w1(), grads.key_w1);
        acc(up->key_w2(), grads.key_w2);
        acc(up->query_w1(), grads.query_w1);
        acc(up->query_w2(), grads.query_w2);
        d_edges.reshape({out->cache.batch, grid.rows, grid.cols, E * C});
        for (int e = 0; e < E; ++e) {
          auto& m = self.parents[static_cast<std::size_t>(e)];
          if (m->requires_grad) attention::unpool_add(d_edges, grid, e * C, m->grad_buffer());
        }
        for (int i = 0; i < K; ++i) {
          auto& x = self.parents[static_cast<std::size_t>(E + i)];
          if (x->requires_grad)
            attention::unpool_add(d_query, input_grids[static_cast<std::size_t>(i)], i * C,
                                  x->grad_buffer());
        }
      });
  return ev;
}

struct NodeState {
  std::vector<ag::Var> inputs;
  std::vector<ag::Var> candidate_maps;  // input-major, E = (k+1) * M
  ag::Var marginals;                    // [B, E]
  Tensor image_probs;                   // pair-level (pairwise) or edge-level distribution
  ag::Var output;
  int patch_sites = 0;
};

struct NodeOptions {
  const Tensor* forced_marginals = nullptr;  // bypasses attention when set
  bool detach_marginals = false;
};

class SearchNode {
 public:
  template <typename Rng>
  SearchNode(int index, int channels, bool reduction, const SearchSpace& space, Rng& rng)
      : index_(index),
        num_inputs_(SearchSpace::inputs_to_node(index)),
        num_ops_(space.num_ops()),
        attention_(channels, num_inputs_, num_ops_, space.mode(), rng) {
    for (int i = 0; i < num_inputs_; ++i)
      for (const auto& op : space.ops()) {
        const int stride = reduction && i < 2 ? 2 : 1;
        ops_.push_back(nn::make_operation(op.id, channels, stride, false, true, rng));
      }
  }

  int num_inputs() const { return num_inputs_; }
  int num_edges() const { return num_inputs_ * num_ops_; }
  /// Attention tokens per patch: one per candidate edge, independent of H, W.
  int attention_tokens() const { return num_edges(); }
  AttentionUnit& attention() { return attention_; }

  NodeState forward(const std::vector<ag::Var>& inputs, const nn::Context& ctx, int patch_size,
                    bool allow_partial, const NodeOptions& opt = {}) {
    if (static_cast<int>(inputs.size()) != num_inputs_)
      throw ShapeError("node " + std::to_string(index_) + ": expected " +
                       std::to_string(num_inputs_) + " inputs, got " +
                       std::to_string(inputs.size()));
    NodeState st;
    st.inputs = inputs;
    for (int i = 0; i < num_inputs_; ++i)
      for (int j = 0; j < num_ops_; ++j)
        st.candidate_maps.push_back(
            ops_[static_cast<std::size_t>(i * num_ops_ + j)]->forward(inputs[i], ctx));
    if (opt.forced_marginals) {
      st.marginals = ag::constant(*opt.forced_marginals);
      st.image_probs = *opt.forced_marginals;
    } else {
      auto ev = attention_marginals(attention_, st.candidate_maps, inputs, patch_size,
                                    allow_partial);
      st.marginals = opt.detach_marginals ? ag::detach(ev.marginals) : ev.marginals;
      st.image_probs = std::move(ev.image_probs);
      st.patch_sites = ev.patch_sites;
    }
    st.output = ag::weighted_sum(st.candidate_maps, st.marginals);
    return st;
  }

  void collect(nn::StateDict& sd) {
    for (std::size_t e = 0; e < ops_.size(); ++e) {
      nn::StateDict::Scope s(sd, "edge" + std::to_string(e));
      ops_[e]->collect(sd);
    }
  }
  void collect_attention(nn::StateDict& sd) { attention_.collect(sd); }

 private:
  int index_;
  int num_inputs_;
  int num_ops_;
  std::vector<std::unique_ptr<nn::Operation>> ops_;
  AttentionUnit attention_;
};

/// Marginals recorded for one node over a batch.
struct NodeRecord {
  int cell = 0;
  int node = 0;
  Tensor marginals;    // [B, E]
  Tensor image_probs;  // [B, N] (pairwise) when pair recording is on
};

struct ForwardOptions {
  bool record = false;
  bool record_pairs = false;
};

struct SupernetOutput {
  ag::Var logits;
  std::vector<NodeRecord> records;
};

class SearchCell {
 public:
  template <typename Rng>
  SearchCell(int c_prev_prev, int c_prev, int channels, bool reduction, bool reduction_prev,
             const SearchSpace& space, Rng& rng)
      : reduction_(reduction), channels_(channels) {
    if (reduction_prev)
      pre0_ = std::make_unique<nn::FactorizedReduce>(c_prev_prev, channels, false, rng);
    else
      pre0_ = std::make_unique<nn::ReLUConvBN>(c_prev_prev, channels, 1, 1, 0, false, rng);
    pre1_ = std::make_unique<nn::ReLUConvBN>(c_prev, channels, 1, 1, 0, false, rng);
    for (int k = 0; k < space.nodes_per_cell(); ++k)
      nodes_.push_back(std::make_unique<SearchNode>(k, channels, reduction, space, rng));
  }

  bool reduction() const { return reduction_; }
  int channels() const { return channels_; }
  int num_nodes() const { return static_cast<int>(nodes_.size()); }
  SearchNode& node(int k) { return *nodes_[static_cast<std::size_t>(k)]; }

  ag::Var forward(const ag::Var& s0, const ag::Var& s1, const nn::Context& ctx, int patch_size,
                  bool allow_partial, std::vector<NodeState>* states = nullptr) {
    std::vector<ag::Var> stack{pre0_->forward(s0, ctx), pre1_->forward(s1, ctx)};
    std::vector<ag::Var> outputs;
    for (auto& n : nodes_) {
      auto st = n->forward(stack, ctx, patch_size, allow_partial);
      stack.push_back(st.output);
      outputs.push_back(st.output);
      if (states) states->push_back(std::move(st));
    }
    return ag::concat_channels(outputs);
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
    for (std::size_t k = 0; k < nodes_.size(); ++k) {
      nn::StateDict::Scope s(sd, "node" + std::to_string(k));
      nodes_[k]->collect(sd);
    }
  }
  void collect_attention(nn::StateDict& sd) {
    for (std::size_t k = 0; k < nodes_.size(); ++k) {
      nn::StateDict::Scope s(sd, "node" + std::to_string(k));
      nodes_[k]->collect_attention(sd);
    }
  }

 private:
  bool reduction_;
  int channels_;
  std::unique_ptr<nn::Operation> pre0_, pre1_;
  std::vector<std::unique_ptr<SearchNode>> nodes_;
};

class Supernet {
 public:
  explicit Supernet(SupernetConfig cfg)
      : cfg_(std::move(cfg)), space_(SearchSpace::darts(cfg_.nodes_per_cell, cfg_.mode)) {
    cfg_.validate();
    std::mt19937_64 rng(cfg_.init_seed);
    const int c_stem = cfg_.stem_multiplier * cfg_.init_channels;
    stem_ = std::make_unique<nn::Stem>(cfg_.in_channels, c_stem, rng);
    int c_pp = c_stem, c_p = c_stem, c = cfg_.init_channels;
    bool reduction_prev = false;
    for (int i = 0; i < cfg_.num_cells; ++i) {
      const bool red = cfg_.is_reduction(i);
      if (red) c *= 2;
      cells_.push_back(std::make_unique<SearchCell>(c_pp, c_p, c, red, reduction_prev, space_, rng));
      reduction_prev = red;
      c_pp = c_p;
      c_p = cfg_.nodes_per_cell * c;
    }
    classifier_ = std::make_unique<nn::Linear>(c_p, cfg_.num_classes, rng);
  }

  Supernet(const Supernet&) = delete;
  Supernet& operator=(const Supernet&) = delete;

  const SupernetConfig& config() const { return cfg_; }
  const SearchSpace& space() const { return space_; }
  int num_cells() const { return static_cast<int>(cells_.size()); }
  SearchCell& cell(int i) { return *cells_[static_cast<std::size_t>(i)]; }

  SupernetOutput forward(const Tensor& images, const nn::Context& ctx,
                         const ForwardOptions& opt = {}) {
    if (images.rank() != 4 || images.dim(1) != cfg_.in_channels)
      throw ShapeError("supernet: images " + shape_str(images.shape()));
    SupernetOutput out;
    auto x = ag::constant(images);
    auto s0 = stem_->forward(x, ctx);
    auto s1 = s0;
    for (int i = 0; i < num_cells(); ++i) {
      std::vector<NodeState> states;
      auto y = cells_[static_cast<std::size_t>(i)]->forward(
          s0, s1, ctx, cfg_.patch_size, cfg_.allow_partial_patches, opt.record ? &states : nullptr);
      for (std::size_t k = 0; k < states.size(); ++k) {
        NodeRecord r;
        r.cell = i;
        r.node = static_cast<int>(k);
        r.marginals = states[k].marginals->value;
        if (opt.record_pairs) r.image_probs = std::move(states[k].image_probs);
        out.records.push_back(std::move(r));
      }
      s0 = s1;
      s1 = y;
    }
    out.logits = classifier_->forward(ag::global_avg_pool(s1));
    return out;
  }

  /// Network weights (omega): everything except attention projections.
  std::vector<ag::Parameter*> weight_parameters() {
    std::vector<ag::Parameter*> ps;
    for (auto& [n, p] : state_dict().params)
      if (!is_attention_name(n)) ps.push_back(p);
    return ps;
  }
  std::vector<ag::Parameter*> attention_parameters() {
    std::vector<ag::Parameter*> ps;
    for (auto& [n, p] : state_dict().params)
      if (is_attention_name(n)) ps.push_back(p);
    return ps;
  }

  nn::StateDict state_dict() {
    nn::StateDict sd;
    {
      nn::StateDict::Scope s(sd, "stem");
      stem_->collect(sd);
    }
    for (std::size_t i = 0; i < cells_.size(); ++i) {
      nn::StateDict::Scope s(sd, "cell" + std::to_string(i));
      cells_[i]->collect(sd);
      nn::StateDict::Scope a(sd, "attention");
      cells_[i]->collect_attention(sd);
    }
    {
      nn::StateDict::Scope s(sd, "classifier");
      classifier_->collect(sd);
    }
    return sd;
  }

  static bool is_attention_name(const std::string& name) {
    return name.find(".attention.") != std::string::npos;
  }

 private:
  SupernetConfig cfg_;
  SearchSpace space_;
  std::unique_ptr<nn::Stem> stem_;
  std::vector<std::unique_ptr<SearchCell>> cells_;
  std::unique_ptr<nn::Linear> classifier_;
};

// ---------------------------------------------------------------------------
// Checkpoints: magic, version, JSON header (config + metadata), then named
// float tensors.

inline constexpr char kCheckpointMagic[8] = {'M', 'I', 'D', 'A', 'S', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {
inline void write_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}
inline std::uint32_t read_u32(std::istream& is) {
  std::uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!is) throw CheckpointError("checkpoint truncated");
  return v;
}
inline void write_str(std::ostream& os, const std::string& s) {
  write_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}
inline std::string read_str(std::istream& is) {
  const auto n = read_u32(is);
  std::string s(n, '\0');
  is.read(s.data(), n);
  if (!is) throw CheckpointError("checkpoint truncated");
  return s;
}
inline void write_tensor(std::ostream& os, const std::string& name, const Tensor& t) {
  write_str(os, name);
  write_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (int d : t.shape()) write_u32(os, static_cast<std::uint32_t>(d));
  os.write(reinterpret_cast<const char*>(t.data()),
           static_cast<std::streamsize>(t.size() * sizeof(float)));
}
}  // namespace detail

/// Writes config, free-form metadata and every parameter and buffer.
inline void save_checkpoint(Supernet& net, const std::string& path,
                            const nlohmann::ordered_json& metadata = {}) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw CheckpointError("cannot open " + path + " for writing");
  os.write(kCheckpointMagic, sizeof kCheckpointMagic);
  detail::write_u32(os, kCheckpointVersion);
  nlohmann::ordered_json header;
  header["config"] = to_json(net.config());
  header["metadata"] = metadata;
  detail::write_str(os, header.dump());
  auto sd = net.state_dict();
  detail::write_u32(os, static_cast<std::uint32_t>(sd.params.size() + sd.buffers.size()));
  for (auto& [n, p] : sd.params) detail::write_tensor(os, n, p->value);
  for (auto& [n, t] : sd.buffers) detail::write_tensor(os, n, *t);
  if (!os) throw CheckpointError("failed writing " + path);
}

struct LoadedCheckpoint {
  std::unique_ptr<Supernet> net;
  nlohmann::ordered_json metadata;
};

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint " + path);
  char magic[sizeof kCheckpointMagic];
  is.read(magic, sizeof magic);
  if (!is || !std::equal(magic, magic + sizeof magic, kCheckpointMagic))
    throw CheckpointError(path + ": not a checkpoint (bad magic)");
  const auto version = detail::read_u32(is);
  if (version != kCheckpointVersion)
    throw CheckpointError(path + ": unsupported checkpoint version " + std::to_string(version));
  nlohmann::ordered_json header;
  try {
    header = nlohmann::ordered_json::parse(detail::read_str(is));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(path + ": bad header: " + e.what());
  }
  LoadedCheckpoint out;
  out.net = std::make_unique<Supernet>(supernet_config_from_json(header.at("config")));
  out.metadata = header.value("metadata", nlohmann::ordered_json::object());
  auto sd = out.net->state_dict();
  std::map<std::string, Tensor*> slots;
  for (auto& [n, p] : sd.params) slots[n] = &p->value;
  for (auto& [n, t] : sd.buffers) slots[n] = t;
  const auto count = detail::read_u32(is);
  if (count != slots.size())
    throw CheckpointError(path + ": tensor count " + std::to_string(count) + " != " +
                          std::to_string(slots.size()));
  for (std::uint32_t k = 0; k < count; ++k) {
    const auto name = detail::read_str(is);
    const auto rank = detail::read_u32(is);
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<int>(detail::read_u32(is));
    auto it = slots.find(name);
    if (it == slots.end()) throw CheckpointError(path + ": unexpected tensor " + name);
    if (it->second->shape() != shape)
      throw CheckpointError(path + ": shape mismatch for " + name);
    is.read(reinterpret_cast<char*>(it->second->data()),
            static_cast<std::streamsize>(it->second->size() * sizeof(float)));
    if (!is) throw CheckpointError(path + ": truncated tensor " + name);
  }
  return out;
}

}  // namespace midas
