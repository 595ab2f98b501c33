#pragma once

// Experiment configuration, artifact persistence and the pipeline commands
// behind the command-line tool.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <memory>
#include <json.hpp>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "midas/analysis.hpp"
#include "midas/data.hpp"
#include "midas/decoder.hpp"
#include "midas/derived.hpp"
#include "midas/figures.hpp"
#include "midas/search_space.hpp"
#include "midas/supernet.hpp"
#include "midas/trainer.hpp"

namespace midas::harness {

namespace fs = std::filesystem;
using nlohmann::ordered_json;
using namespace midas::stats;

inline constexpr const char* kCodeVersion = "0.1.0";

enum class ErrorKind { usage, config, artifact, data, mismatch, runtime };

inline std::string_view error_kind_name(ErrorKind k) {
  switch (k) {
    case ErrorKind::usage: return "usage";
    case ErrorKind::config: return "config";
    case ErrorKind::artifact: return "artifact";
    case ErrorKind::data: return "data";
    case ErrorKind::mismatch: return "mismatch";
    case ErrorKind::runtime: return "runtime";
  }
  return "runtime";
}

inline int exit_code(ErrorKind k) { return 2 + static_cast<int>(k); }

class HarnessError : public std::runtime_error {
 public:
  HarnessError(ErrorKind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

inline ordered_json error_json(ErrorKind kind, const std::string& message, const std::string& command) {
  return {{"error", {{"kind", std::string(error_kind_name(kind))}, {"command", command}, {"message", message}}}};
}

enum class Profile { paper, desk };

inline std::string to_string(Profile p) { return p == Profile::paper ? "paper" : "desk"; }
inline Profile parse_profile(const std::string& s) {
  if (s == "paper") return Profile::paper;
  if (s == "desk") return Profile::desk;
  throw HarnessError(ErrorKind::config, "unknown profile '" + s + "' (expected paper or desk)");
}

struct DataSpec {
  std::string kind = "cifar10";  // cifar10 | cifar100 | planted | similarity
  std::string dir = "data/cifar-10-batches-bin";
  int size = 0;       // 0 keeps every training image; synthetic sets need a size
  int test_size = 0;  // synthetic test set size (0: same as size / 2)
  std::uint64_t seed = 2024;
  PlantedParams planted;
};

struct ExperimentConfig {
  Profile profile = Profile::paper;
  std::uint64_t seed = 1;
  SupernetConfig supernet;
  SearchHyperparams search;
  DecodingConfig decode;
  RetrainHyperparams retrain;
  int retrain_channels = 36;
  int retrain_layers = 20;
  bool retrain_auxiliary = true;
  DataSpec data;
  int analysis_n_boot = 1000;
  std::string analysis_trace = "decode";  // decode | split_A | split_B | holdout
  double analysis_alpha = 0.05;
  std::vector<int> ablation_patch_sizes{0, 4, 8};  // 0: one patch covers the map
  std::vector<int> ablation_cells{0, 1};
};

inline ExperimentConfig profile_defaults(Profile p) {
  ExperimentConfig c;
  c.profile = p;
  if (p == Profile::paper) {
    c.supernet.num_cells = 8;
    c.supernet.reduction_cells = {2, 5};
    c.supernet.init_channels = 16;
    c.supernet.nodes_per_cell = 4;
    c.supernet.patch_size = 8;
    c.search = SearchHyperparams{};
    c.search.split = {0.5, 0.5, 0.0};
    return c;
  }
  c.supernet.num_cells = 4;
  c.supernet.reduction_cells = {1, 2};
  c.supernet.init_channels = 8;
  c.supernet.nodes_per_cell = 2;
  c.supernet.patch_size = 8;
  c.search.epochs = 8;
  c.search.batch_size = 32;
  c.search.arch_lr = 3e-3;
  c.search.arch_weight_decay = 0.0;
  c.search.cutout_size = 0;
  c.search.split = {0.4, 0.4, 0.2};
  c.decode.subset_fraction = 1.0;
  c.retrain.epochs = 8;
  c.retrain.batch_size = 32;
  c.retrain.cutout_size = 0;
  c.retrain_channels = 8;
  c.retrain_layers = 5;
  c.data.kind = "planted";
  c.data.dir.clear();
  c.data.size = 800;
  c.data.test_size = 400;
  c.analysis_n_boot = 500;
  return c;
}

namespace detail {

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::string fmt_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline double parse_double(const std::string& key, const std::string& s) {
  double v = 0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size() || !std::isfinite(v))
    throw HarnessError(ErrorKind::config, key + ": expected a number, got '" + s + "'");
  return v;
}

inline long long parse_int(const std::string& key, const std::string& s) {
  long long v = 0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size())
    throw HarnessError(ErrorKind::config, key + ": expected an integer, got '" + s + "'");
  return v;
}

inline bool parse_bool(const std::string& key, const std::string& s) {
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  throw HarnessError(ErrorKind::config, key + ": expected true or false, got '" + s + "'");
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

inline std::string join_ints(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

inline std::vector<int> parse_ints(const std::string& key, const std::string& s) {
  std::vector<int> v;
  for (const auto& t : split_list(s)) v.push_back(static_cast<int>(parse_int(key, t)));
  return v;
}

inline int op_by_name(const std::string& key, const std::string& s) {
  for (const auto& k : default_catalog())
    if (k.name == s) return k.id;
  throw HarnessError(ErrorKind::config, key + ": unknown operation '" + s + "'");
}

template <typename F>
auto guarded(const std::string& key, F&& f) {
  try {
    return f();
  } catch (const std::invalid_argument& e) {
    throw HarnessError(ErrorKind::config, key + ": " + e.what());
  }
}

}  // namespace detail

/// One configuration key with its text conversion.
struct Field {
  std::string key;
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const std::string&)> set;
};

namespace detail {

template <typename Acc>
Field int_field(std::string key, Acc acc) {
  return {key, [acc](const ExperimentConfig& c) { return std::to_string(acc(const_cast<ExperimentConfig&>(c))); },
          [acc, key](ExperimentConfig& c, const std::string& v) {
            acc(c) = static_cast<std::remove_reference_t<decltype(acc(c))>>(parse_int(key, v));
          }};
}

template <typename Acc>
Field double_field(std::string key, Acc acc) {
  return {key, [acc](const ExperimentConfig& c) { return fmt_double(acc(const_cast<ExperimentConfig&>(c))); },
          [acc, key](ExperimentConfig& c, const std::string& v) { acc(c) = parse_double(key, v); }};
}

template <typename Acc>
Field bool_field(std::string key, Acc acc) {
  return {key, [acc](const ExperimentConfig& c) { return acc(const_cast<ExperimentConfig&>(c)) ? "true" : "false"; },
          [acc, key](ExperimentConfig& c, const std::string& v) { acc(c) = parse_bool(key, v); }};
}

template <typename Acc>
Field ints_field(std::string key, Acc acc) {
  return {key, [acc](const ExperimentConfig& c) { return join_ints(acc(const_cast<ExperimentConfig&>(c))); },
          [acc, key](ExperimentConfig& c, const std::string& v) { acc(c) = parse_ints(key, v); }};
}

template <typename Acc>
Field int_set_field(std::string key, Acc acc) {
  return {key,
          [acc](const ExperimentConfig& c) {
            const auto& s = acc(const_cast<ExperimentConfig&>(c));
            return join_ints(std::vector<int>(s.begin(), s.end()));
          },
          [acc, key](ExperimentConfig& c, const std::string& v) {
            const auto xs = parse_ints(key, v);
            acc(c) = std::set<int>(xs.begin(), xs.end());
          }};
}

template <typename Acc>
Field string_field(std::string key, Acc acc) {
  return {key, [acc](const ExperimentConfig& c) { return acc(const_cast<ExperimentConfig&>(c)); },
          [acc](ExperimentConfig& c, const std::string& v) { acc(c) = v; }};
}

}  // namespace detail

/// Every recognised key, in canonical order.
inline const std::vector<Field>& fields() {
  using namespace detail;
  using C = ExperimentConfig;
  static const std::vector<Field> f = [] {
    std::vector<Field> v;
    v.push_back({"profile", [](const C& c) { return to_string(c.profile); },
                 [](C& c, const std::string& s) { c.profile = parse_profile(s); }});
    v.push_back(int_field("seed", [](C& c) -> std::uint64_t& { return c.seed; }));

    v.push_back(int_field("supernet.cells", [](C& c) -> int& { return c.supernet.num_cells; }));
    v.push_back(int_set_field("supernet.reduction_cells", [](C& c) -> std::set<int>& { return c.supernet.reduction_cells; }));
    v.push_back(int_field("supernet.channels", [](C& c) -> int& { return c.supernet.init_channels; }));
    v.push_back(int_field("supernet.nodes", [](C& c) -> int& { return c.supernet.nodes_per_cell; }));
    v.push_back(int_field("supernet.stem_multiplier", [](C& c) -> int& { return c.supernet.stem_multiplier; }));
    v.push_back(int_field("supernet.patch_size", [](C& c) -> int& { return c.supernet.patch_size; }));
    v.push_back({"supernet.mode",
                 [](const C& c) { return std::string(c.supernet.mode == TopologyMode::pairwise ? "pairwise" : "per-edge"); },
                 [](C& c, const std::string& s) {
                   if (s == "pairwise") c.supernet.mode = TopologyMode::pairwise;
                   else if (s == "per-edge") c.supernet.mode = TopologyMode::per_edge;
                   else throw HarnessError(ErrorKind::config, "supernet.mode: expected pairwise or per-edge, got '" + s + "'");
                 }});
    v.push_back(bool_field("supernet.allow_partial_patches", [](C& c) -> bool& { return c.supernet.allow_partial_patches; }));

    v.push_back(int_field("search.epochs", [](C& c) -> int& { return c.search.epochs; }));
    v.push_back(int_field("search.batch_size", [](C& c) -> int& { return c.search.batch_size; }));
    v.push_back(double_field("search.w_lr", [](C& c) -> double& { return c.search.w_lr; }));
    v.push_back(double_field("search.w_lr_min", [](C& c) -> double& { return c.search.w_lr_min; }));
    v.push_back(double_field("search.w_momentum", [](C& c) -> double& { return c.search.w_momentum; }));
    v.push_back(double_field("search.w_weight_decay", [](C& c) -> double& { return c.search.w_weight_decay; }));
    v.push_back(double_field("search.arch_lr", [](C& c) -> double& { return c.search.arch_lr; }));
    v.push_back(double_field("search.arch_weight_decay", [](C& c) -> double& { return c.search.arch_weight_decay; }));
    v.push_back(int_field("search.cutout", [](C& c) -> int& { return c.search.cutout_size; }));
    v.push_back(int_field("search.arch_warmup_epochs", [](C& c) -> int& { return c.search.arch_warmup_epochs; }));
    v.push_back(bool_field("search.grad_clip", [](C& c) -> bool& { return c.search.grad_clip; }));
    v.push_back(double_field("search.grad_clip_norm", [](C& c) -> double& { return c.search.grad_clip_norm; }));
    v.push_back({"search.split",
                 [](const C& c) {
                   return fmt_double(c.search.split.a) + "," + fmt_double(c.search.split.b) + "," +
                          fmt_double(c.search.split.holdout);
                 },
                 [](C& c, const std::string& s) {
                   const auto parts = split_list(s);
                   if (parts.size() != 3)
                     throw HarnessError(ErrorKind::config, "search.split: expected three fractions A,B,holdout");
                   c.search.split = {parse_double("search.split", parts[0]), parse_double("search.split", parts[1]),
                                     parse_double("search.split", parts[2])};
                 }});

    v.push_back(double_field("decode.subset_fraction", [](C& c) -> double& { return c.decode.subset_fraction; }));
    v.push_back({"decode.source", [](const C& c) { return to_string(c.decode.source); },
                 [](C& c, const std::string& s) { c.decode.source = guarded("decode.source", [&] { return parse_subset_source(s); }); }});
    v.push_back({"decode.grouping", [](const C& c) { return to_string(c.decode.grouping); },
                 [](C& c, const std::string& s) { c.decode.grouping = guarded("decode.grouping", [&] { return parse_grouping(s); }); }});
    v.push_back({"decode.selection", [](const C& c) { return to_string(c.decode.selection); },
                 [](C& c, const std::string& s) { c.decode.selection = guarded("decode.selection", [&] { return parse_selection(s); }); }});

    v.push_back(int_field("analysis.n_boot", [](C& c) -> int& { return c.analysis_n_boot; }));
    v.push_back(string_field("analysis.trace", [](C& c) -> std::string& { return c.analysis_trace; }));
    v.push_back(double_field("analysis.alpha", [](C& c) -> double& { return c.analysis_alpha; }));

    v.push_back(int_field("retrain.epochs", [](C& c) -> int& { return c.retrain.epochs; }));
    v.push_back(int_field("retrain.batch_size", [](C& c) -> int& { return c.retrain.batch_size; }));
    v.push_back(double_field("retrain.lr", [](C& c) -> double& { return c.retrain.lr; }));
    v.push_back(double_field("retrain.lr_min", [](C& c) -> double& { return c.retrain.lr_min; }));
    v.push_back(double_field("retrain.momentum", [](C& c) -> double& { return c.retrain.momentum; }));
    v.push_back(double_field("retrain.weight_decay", [](C& c) -> double& { return c.retrain.weight_decay; }));
    v.push_back(int_field("retrain.cutout", [](C& c) -> int& { return c.retrain.cutout_size; }));
    v.push_back(double_field("retrain.drop_path", [](C& c) -> double& { return c.retrain.drop_path_max; }));
    v.push_back(double_field("retrain.aux_weight", [](C& c) -> double& { return c.retrain.aux_weight; }));
    v.push_back(double_field("retrain.grad_clip_norm", [](C& c) -> double& { return c.retrain.grad_clip_norm; }));
    v.push_back(int_field("retrain.channels", [](C& c) -> int& { return c.retrain_channels; }));
    v.push_back(int_field("retrain.layers", [](C& c) -> int& { return c.retrain_layers; }));
    v.push_back(bool_field("retrain.auxiliary", [](C& c) -> bool& { return c.retrain_auxiliary; }));

    v.push_back(string_field("data.kind", [](C& c) -> std::string& { return c.data.kind; }));
    v.push_back(string_field("data.dir", [](C& c) -> std::string& { return c.data.dir; }));
    v.push_back(int_field("data.size", [](C& c) -> int& { return c.data.size; }));
    v.push_back(int_field("data.test_size", [](C& c) -> int& { return c.data.test_size; }));
    v.push_back(int_field("data.seed", [](C& c) -> std::uint64_t& { return c.data.seed; }));
    v.push_back(int_field("data.image_size", [](C& c) -> int& { return c.data.planted.image_size; }));
    v.push_back(int_field("data.num_classes", [](C& c) -> int& { return c.data.planted.num_classes; }));
    v.push_back({"data.planted_op",
                 [](const C& c) { return default_catalog().at(static_cast<std::size_t>(c.data.planted.planted_op)).name; },
                 [](C& c, const std::string& s) { c.data.planted.planted_op = op_by_name("data.planted_op", s); }});
    v.push_back(double_field("data.signal_strength", [](C& c) -> double& { return c.data.planted.signal_strength; }));
    v.push_back(double_field("data.amplitude", [](C& c) -> double& { return c.data.planted.grating_amplitude; }));
    v.push_back(double_field("data.noise", [](C& c) -> double& { return c.data.planted.noise_std; }));
    v.push_back(double_field("data.clutter", [](C& c) -> double& { return c.data.planted.clutter_std; }));
    v.push_back(int_field("data.extent", [](C& c) -> int& { return c.data.planted.grating_extent; }));
    v.push_back(bool_field("data.modulated", [](C& c) -> bool& { return c.data.planted.modulated; }));

    v.push_back(ints_field("ablation.patch_sizes", [](C& c) -> std::vector<int>& { return c.ablation_patch_sizes; }));
    v.push_back(ints_field("ablation.cells", [](C& c) -> std::vector<int>& { return c.ablation_cells; }));
    return v;
  }();
  return f;
}

inline const Field* find_field(const std::string& key) {
  for (const auto& f : fields())
    if (f.key == key) return &f;
  return nullptr;
}

/// Assigns one key, rejecting unknown keys.
inline void set_value(ExperimentConfig& c, const std::string& key, const std::string& value) {
  const auto* f = find_field(key);
  if (!f) throw HarnessError(ErrorKind::config, "unknown configuration key '" + key + "'");
  f->set(c, value);
}

using KeyValues = std::vector<std::pair<std::string, std::string>>;

/// Parses `key = value` lines; `#` starts a comment and `[section]` prefixes
/// following keys with `section.`.
inline KeyValues parse_key_values(const std::string& text, const std::string& origin = "config") {
  KeyValues kv;
  std::istringstream is(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (const auto h = line.find('#'); h != std::string::npos) line.erase(h);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto where = origin + ":" + std::to_string(lineno);
    if (line.front() == '[') {
      if (line.back() != ']') throw HarnessError(ErrorKind::config, where + ": unterminated section header");
      section = detail::trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw HarnessError(ErrorKind::config, where + ": expected key = value");
    auto key = detail::trim(line.substr(0, eq));
    const auto value = detail::trim(line.substr(eq + 1));
    if (key.empty()) throw HarnessError(ErrorKind::config, where + ": empty key");
    if (!section.empty()) key = section + "." + key;
    kv.emplace_back(key, value);
  }
  return kv;
}

inline std::string read_text(const fs::path& p, ErrorKind kind = ErrorKind::config) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw HarnessError(kind, "cannot read " + p.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline void write_text(const fs::path& p, const std::string& s) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream f(p, std::ios::binary);
  if (!f) throw HarnessError(ErrorKind::artifact, "cannot write " + p.string());
  f << s;
  if (!f) throw HarnessError(ErrorKind::artifact, "failed writing " + p.string());
}

/// Profile defaults, then the file (which may name the profile), then
/// `overrides` in order.
inline ExperimentConfig build_config(const std::optional<Profile>& profile, const KeyValues& file_kv,
                                     const KeyValues& overrides = {}) {
  Profile p = Profile::paper;
  for (const auto& [k, v] : file_kv)
    if (k == "profile") p = parse_profile(v);
  if (profile) p = *profile;
  auto c = profile_defaults(p);
  for (const auto& [k, v] : file_kv)
    if (k != "profile") set_value(c, k, v);
  for (const auto& [k, v] : overrides) set_value(c, k, v);
  c.profile = p;
  return c;
}

/// Canonical key-value listing (every key, canonical order).
inline KeyValues canonical(const ExperimentConfig& c) {
  KeyValues kv;
  for (const auto& f : fields()) kv.emplace_back(f.key, f.get(c));
  return kv;
}

inline std::string canonical_text(const ExperimentConfig& c) {
  std::string s;
  for (const auto& [k, v] : canonical(c)) s += k + " = " + v + "\n";
  return s;
}

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Hash of the canonical configuration without the seed, so runs of one
/// experiment under different seeds share it.
inline std::string config_hash(const ExperimentConfig& c) {
  std::string s;
  for (const auto& [k, v] : canonical(c))
    if (k != "seed") s += k + "=" + v + "\n";
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(s)));
  return buf;
}

inline void validate(const ExperimentConfig& c) {
  detail::guarded("search", [&] {
    c.search.validate();
    return 0;
  });
  detail::guarded("decode", [&] {
    c.decode.validate();
    return 0;
  });
  const auto& k = c.data.kind;
  if (k != "cifar10" && k != "cifar100" && k != "planted" && k != "similarity")
    throw HarnessError(ErrorKind::config, "data.kind: expected cifar10, cifar100, planted or similarity, got '" + k + "'");
  if ((k == "planted" || k == "similarity") && c.data.size < 1)
    throw HarnessError(ErrorKind::config, "data.size: synthetic datasets need a positive size");
  if (c.data.size < 0 || c.data.test_size < 0) throw HarnessError(ErrorKind::config, "data sizes must be non-negative");
  const auto& t = c.analysis_trace;
  if (t != "decode" && t != "split_A" && t != "split_B" && t != "holdout")
    throw HarnessError(ErrorKind::config, "analysis.trace: expected decode, split_A, split_B or holdout, got '" + t + "'");
  if (c.analysis_n_boot < 200) throw HarnessError(ErrorKind::config, "analysis.n_boot must be >= 200");
  if (!(c.analysis_alpha > 0 && c.analysis_alpha < 1)) throw HarnessError(ErrorKind::config, "analysis.alpha must lie in (0, 1)");
  if (c.supernet.num_cells < 1 || c.supernet.init_channels < 1 || c.supernet.patch_size < 1)
    throw HarnessError(ErrorKind::config, "supernet cells, channels and patch size must be positive");
  for (int r : c.supernet.reduction_cells)
    if (r < 0 || r >= c.supernet.num_cells)
      throw HarnessError(ErrorKind::config, "supernet.reduction_cells: index " + std::to_string(r) + " out of range");
  if (c.retrain.epochs < 1 || c.retrain.batch_size < 1 || c.retrain_channels < 1 || c.retrain_layers < 1)
    throw HarnessError(ErrorKind::config, "retrain epochs, batch size, channels and layers must be positive");
  for (int p : c.ablation_patch_sizes)
    if (p < 0) throw HarnessError(ErrorKind::config, "ablation.patch_sizes must be >= 0");
}

inline ordered_json provenance(const ExperimentConfig& c, const std::string& command) {
  return {{"command", command},
          {"config_hash", config_hash(c)},
          {"seed", c.seed},
          {"code_version", kCodeVersion},
          {"profile", to_string(c.profile)}};
}

// ---------------------------------------------------------------- data

inline std::pair<Dataset, Dataset> load_datasets(const ExperimentConfig& c) {
  try {
    const auto& k = c.data.kind;
    if (k == "planted" || k == "similarity") {
      const int nt = c.data.test_size ? c.data.test_size : std::max(1, c.data.size / 2);
      if (k == "planted")
        return {generate_planted(c.data.planted, c.data.size, c.data.seed),
                generate_planted(c.data.planted, nt, c.data.seed + 1)};
      return {generate_similarity_set(c.data.planted.image_size, c.data.size, c.data.seed),
              generate_similarity_set(c.data.planted.image_size, nt, c.data.seed + 1)};
    }
    const auto v = k == "cifar10" ? CifarVariant::cifar10 : CifarVariant::cifar100;
    ChannelStats st;
    auto train = ingest_cifar(c.data.dir, v, true, nullptr, &st);
    auto test = ingest_cifar(c.data.dir, v, false, &st);
    if (c.data.size > 0 && c.data.size < train.size()) {
      std::vector<int> idx(static_cast<std::size_t>(c.data.size));
      for (int i = 0; i < c.data.size; ++i) idx[static_cast<std::size_t>(i)] = i;
      train = subset(train, idx);
    }
    return {std::move(train), std::move(test)};
  } catch (const DataError& e) {
    throw HarnessError(ErrorKind::data, e.what());
  } catch (const std::invalid_argument& e) {
    throw HarnessError(ErrorKind::config, std::string("data: ") + e.what());
  }
}

/// Supernet configuration completed with the dataset's shape.
inline SupernetConfig supernet_for(const ExperimentConfig& c, const Dataset& d, std::optional<int> patch = {}) {
  auto s = c.supernet;
  s.num_classes = d.num_classes;
  s.in_channels = d.channels();
  if (patch) s.patch_size = *patch > 0 ? *patch : d.images.dim(2);
  return s;
}

// ------------------------------------------------------------ artifacts

inline ordered_json config_json(const ExperimentConfig& c) {
  ordered_json j = ordered_json::object();
  for (const auto& [k, v] : canonical(c)) j[k] = v;
  return j;
}

inline ExperimentConfig config_from_json(const ordered_json& j) {
  KeyValues kv;
  for (const auto& [k, v] : j.items()) kv.emplace_back(k, v.get<std::string>());
  return build_config(std::nullopt, kv);
}

inline void write_json(const fs::path& p, const ordered_json& j) { write_text(p, j.dump(2) + "\n"); }

inline ordered_json read_json(const fs::path& p) {
  const auto text = read_text(p, ErrorKind::artifact);
  try {
    return ordered_json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw HarnessError(ErrorKind::artifact, p.string() + ": malformed JSON: " + e.what());
  }
}

inline void write_manifest(const fs::path& dir, const std::string& artifact, const ExperimentConfig& c,
                           const std::vector<std::string>& files, const ordered_json& extra = ordered_json::object()) {
  ordered_json m;
  m["artifact"] = artifact;
  m["provenance"] = provenance(c, artifact);
  for (const auto& [k, v] : extra.items()) m[k] = v;
  m["files"] = files;
  m["config"] = config_json(c);
  write_json(dir / "manifest.json", m);
}

struct Manifest {
  std::string artifact;
  ordered_json provenance;
  ordered_json json;
  ExperimentConfig config;
};

inline Manifest read_manifest(const fs::path& dir, const std::string& expect = "") {
  const auto p = dir / "manifest.json";
  if (!fs::exists(p)) throw HarnessError(ErrorKind::artifact, "missing " + p.string());
  Manifest m;
  m.json = read_json(p);
  try {
    m.artifact = m.json.at("artifact").get<std::string>();
    m.provenance = m.json.at("provenance");
    m.config = config_from_json(m.json.at("config"));
  } catch (const nlohmann::json::exception& e) {
    throw HarnessError(ErrorKind::artifact, p.string() + ": " + e.what());
  }
  if (!expect.empty() && m.artifact != expect)
    throw HarnessError(ErrorKind::artifact, p.string() + ": expected a " + expect + " artifact, found " + m.artifact);
  if (m.provenance.value("config_hash", "") != config_hash(m.config))
    throw HarnessError(ErrorKind::mismatch, p.string() + ": recorded config hash does not match the recorded config");
  return m;
}

inline ordered_json split_json(const DataSplit& s) { return {{"A", s.a}, {"B", s.b}, {"holdout", s.holdout}}; }

inline DataSplit split_from_json(const ordered_json& j) {
  DataSplit s;
  s.a = j.at("A").get<std::vector<int>>();
  s.b = j.at("B").get<std::vector<int>>();
  s.holdout = j.at("holdout").get<std::vector<int>>();
  return s;
}

// -------------------------------------------------------------- search

struct LoadedRun {
  fs::path dir;
  Manifest manifest;
  DataSplit split;
};

inline LoadedRun load_run(const fs::path& dir) {
  LoadedRun r;
  r.dir = dir;
  r.manifest = read_manifest(dir, "search");
  try {
    r.split = split_from_json(read_json(dir / "split.json").at("split"));
  } catch (const nlohmann::json::exception& e) {
    throw HarnessError(ErrorKind::artifact, (dir / "split.json").string() + ": " + e.what());
  }
  return r;
}

inline std::unique_ptr<Supernet> load_supernet(const fs::path& ckpt) {
  if (!fs::exists(ckpt)) throw HarnessError(ErrorKind::artifact, "missing checkpoint " + ckpt.string());
  try {
    return load_checkpoint(ckpt.string()).net;
  } catch (const CheckpointError& e) {
    throw HarnessError(ErrorKind::artifact, e.what());
  }
}

using Logger = std::function<void(const std::string&)>;

struct SearchSummary {
  fs::path dir;
  std::vector<EpochMetrics> metrics;
  DataSplit split;
};

/// Bilevel search; writes checkpoints, metrics.csv, split.json, config.kv and
/// manifest.json into `out`.
inline SearchSummary run_search_command(const ExperimentConfig& c, const fs::path& out, const Logger& log = {},
                                        const std::function<void(const EpochMetrics&, Supernet&)>& on_epoch = {}) {
  validate(c);
  auto [train, test] = load_datasets(c);
  (void)test;
  fs::create_directories(out);
  SearchOptions opt;
  opt.out_dir = out;
  opt.provenance = provenance(c, "search");
  opt.log = log;
  opt.on_epoch = on_epoch;
  SearchResult r;
  try {
    r = run_search(supernet_for(c, train), c.search, train, c.seed, opt);
  } catch (const NonFiniteLoss& e) {
    throw HarnessError(ErrorKind::runtime, e.what());
  } catch (const std::invalid_argument& e) {
    throw HarnessError(ErrorKind::config, e.what());
  }
  ordered_json sj;
  sj["provenance"] = provenance(c, "search");
  sj["split"] = split_json(r.split);
  write_json(out / "split.json", sj);
  write_text(out / "config.kv", canonical_text(c));
  std::vector<std::string> files{"config.kv", "split.json", "metrics.csv", "final.ckpt"};
  for (int e = 0; e < c.search.epochs; ++e) files.push_back("epoch_" + std::to_string(e) + ".ckpt");
  write_manifest(out, "search", c, files, {{"dataset", train.name}, {"samples", train.size()}});
  return {out, r.metrics, r.split};
}

inline std::vector<EpochMetrics> read_metrics_csv(const fs::path& p) {
  std::ifstream f(p);
  if (!f) throw HarnessError(ErrorKind::artifact, "missing " + p.string());
  std::vector<EpochMetrics> rows;
  std::string line;
  bool header = false;
  while (std::getline(f, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (!header) {
      header = true;
      continue;
    }
    const auto parts = detail::split_list(line);
    if (parts.size() < 5) throw HarnessError(ErrorKind::artifact, p.string() + ": short row '" + line + "'");
    EpochMetrics m;
    m.epoch = static_cast<int>(detail::parse_int("epoch", parts[0]));
    m.loss_a = detail::parse_double("loss_A", parts[1]);
    m.loss_b = detail::parse_double("loss_B", parts[2]);
    m.val_acc = detail::parse_double("val_acc", parts[3]);
    m.marginal_std_mean = detail::parse_double("marginal_std_mean", parts[4]);
    rows.push_back(m);
  }
  return rows;
}

// -------------------------------------------------------------- decode

inline const std::vector<int>& trace_indices(const DataSplit& s, const std::string& which, const std::vector<int>& decode) {
  if (which == "split_A") return s.a;
  if (which == "split_B") return s.b;
  if (which == "holdout") {
    if (s.holdout.empty()) throw HarnessError(ErrorKind::config, "analysis.trace = holdout but the split has no holdout");
    return s.holdout;
  }
  return decode;
}

struct DecodeSummary {
  fs::path dir;
  Genotype genotype;
  DecodeResult result;
};

/// Decodes the final checkpoint of a search run. `c` is the run configuration
/// with any decode overrides applied.
inline DecodeSummary run_decode_command(const LoadedRun& run, const ExperimentConfig& c, const fs::path& out,
                                        const std::string& checkpoint = "final.ckpt") {
  validate(c);
  auto [train, test] = load_datasets(c);
  (void)test;
  auto net = load_supernet(run.dir / checkpoint);
  DecodeSummary s;
  s.dir = out;
  try {
    s.result = decode_supernet(*net, train, run.split, c.decode, c.seed);
  } catch (const std::invalid_argument& e) {
    throw HarnessError(ErrorKind::config, e.what());
  } catch (const ShapeError& e) {
    throw HarnessError(ErrorKind::artifact, std::string("checkpoint does not match the dataset: ") + e.what());
  }
  s.genotype = s.result.genotype;
  auto g = genotype_to_json(s.genotype);
  g["provenance"] = provenance(c, "decode");
  write_json(out / "genotype.json", g);
  auto rep = decode_report_json(s.result, c.decode, net->space());
  rep["provenance"] = provenance(c, "decode");
  write_json(out / "decode_report.json", rep);
  write_manifest(out, "decode", c, {"genotype.json", "decode_report.json"},
                 {{"parent_config_hash", config_hash(run.manifest.config)}, {"checkpoint", checkpoint}});
  return s;
}

inline Genotype read_genotype(const fs::path& p) {
  const auto j = read_json(p);
  try {
    return genotype_from_json(j);
  } catch (const std::exception& e) {
    throw HarnessError(ErrorKind::artifact, p.string() + ": " + e.what());
  }
}

// ------------------------------------------------------------- analyze

struct AnalyzeSummary {
  fs::path dir;
  double fraction_unimodal = 0;
  KsResult pvalue_ks;
  std::vector<TraceDip> dips;
  SimilarityResult similarity;
  std::vector<int> nonlearnable_per_epoch;
};

inline std::string fmt6(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

/// Dip tests over the chosen trace, class similarity, the variance curve and
/// the epoch-wise count of non-learnable ops in the decoded normal cell.
inline AnalyzeSummary run_analyze_command(const LoadedRun& run, const ExperimentConfig& c, const fs::path& out) {
  validate(c);
  auto [train, test] = load_datasets(c);
  (void)test;
  auto net = load_supernet(run.dir / "final.ckpt");
  const auto dsub = decoding_subset(run.split, c.decode, c.seed);
  const auto& idx = trace_indices(run.split, c.analysis_trace, dsub);
  ArchTrace trace;
  evaluate(*net, train, idx, c.search.batch_size, &trace);
  AnalyzeSummary s;
  s.dir = out;
  fs::create_directories(out);

  try {
    s.dips = dip_over_trace(trace, c.analysis_n_boot, c.seed);
  } catch (const std::invalid_argument& e) {
    throw HarnessError(ErrorKind::data, e.what());
  }
  s.fraction_unimodal = fraction_unimodal(s.dips, c.analysis_alpha);
  std::vector<double> pv;
  std::string csv = "cell,node,edge,dip,p_value\n";
  for (const auto& d : s.dips) {
    pv.push_back(d.result.p_value);
    csv += std::to_string(d.node.first) + "," + std::to_string(d.node.second) + "," + std::to_string(d.edge) + "," +
           fmt6(d.result.statistic) + "," + fmt6(d.result.p_value) + "\n";
  }
  s.pvalue_ks = ks_uniform(pv);
  write_text(out / "dip_pvalues.csv", csv);
  fig::histogram(pv, 20, 0.0, 1.0, "Dip test p-values (" + std::to_string(trace.sample_count) + " samples)", "p-value",
                 c.analysis_alpha)
      .save(out / "dip_pvalues.svg");

  s.similarity = class_similarity(trace, train.num_classes);
  std::vector<std::string> labels;
  for (int k = 0; k < train.num_classes; ++k) labels.push_back("class " + std::to_string(k));
  {
    std::string m = "class";
    for (const auto& l : labels) m += "," + l;
    m += "\n";
    for (int a = 0; a < train.num_classes; ++a) {
      m += labels[static_cast<std::size_t>(a)];
      for (int b = 0; b < train.num_classes; ++b)
        m += "," + fmt6(s.similarity.matrix[static_cast<std::size_t>(a)][static_cast<std::size_t>(b)]);
      m += "\n";
    }
    write_text(out / "class_similarity.csv", m);
  }
  if (!s.similarity.matrix.empty())
    fig::heatmap(s.similarity.matrix, labels, "Class similarity of architecture parameters").save(out / "class_similarity.svg");

  const auto metrics = read_metrics_csv(run.dir / "metrics.csv");
  fig::Series var{"mean marginal std", {}, {}};
  std::string vcsv = "epoch,marginal_std_mean,nonlearnable_normal_ops\n";
  for (const auto& m : metrics) {
    const auto ck = run.dir / ("epoch_" + std::to_string(m.epoch) + ".ckpt");
    int count = -1;
    if (fs::exists(ck)) {
      auto en = load_supernet(ck);
      const auto d = decode_supernet(*en, train, run.split, c.decode, c.seed);
      count = count_nonlearnable_ops(d.genotype);
    }
    s.nonlearnable_per_epoch.push_back(count);
    var.x.push_back(m.epoch);
    var.y.push_back(m.marginal_std_mean);
    vcsv += std::to_string(m.epoch) + "," + fmt6(m.marginal_std_mean) + "," + std::to_string(count) + "\n";
  }
  write_text(out / "variance_curve.csv", vcsv);
  fig::line_chart({var}, "Input-specific variance of architecture parameters", "epoch", "std over samples")
      .save(out / "variance_curve.svg");

  ordered_json j;
  j["provenance"] = provenance(c, "analyze");
  j["trace"] = {{"source", c.analysis_trace}, {"samples", trace.sample_count}};
  j["dip"] = {{"parameters", s.dips.size()},
              {"alpha", c.analysis_alpha},
              {"fraction_unimodal", s.fraction_unimodal},
              {"pvalue_ks_statistic", s.pvalue_ks.statistic},
              {"pvalue_ks_p", s.pvalue_ks.p_value}};
  j["class_similarity"] = {{"matrix", s.similarity.matrix},
                           {"dims_used", s.similarity.dims_used},
                           {"degenerate", s.similarity.degenerate}};
  j["nonlearnable_normal_ops_per_epoch"] = s.nonlearnable_per_epoch;
  write_json(out / "analysis.json", j);
  write_manifest(out, "analyze", c,
                 {"analysis.json", "dip_pvalues.csv", "dip_pvalues.svg", "class_similarity.csv", "class_similarity.svg",
                  "variance_curve.csv", "variance_curve.svg"},
                 {{"parent_config_hash", config_hash(run.manifest.config)}});
  return s;
}

// ------------------------------------------------------------- retrain

struct RetrainSummary {
  fs::path dir;
  std::vector<RetrainEpoch> epochs;
  double test_acc = 0;
  std::size_t parameters = 0;
};

inline RetrainSummary run_retrain_command(const Genotype& g, const ExperimentConfig& c, const fs::path& out,
                                          const Logger& log = {}) {
  validate(c);
  auto [train, test] = load_datasets(c);
  DerivedConfig dc;
  dc.channels = c.retrain_channels;
  dc.layers = c.retrain_layers;
  dc.num_classes = train.num_classes;
  dc.in_channels = train.channels();
  dc.stem_multiplier = c.supernet.stem_multiplier;
  dc.auxiliary = c.retrain_auxiliary;
  dc.init_seed = c.seed;
  RetrainSummary s;
  s.dir = out;
  std::unique_ptr<DerivedNetwork> net;
  try {
    net = std::make_unique<DerivedNetwork>(g, dc);
  } catch (const std::invalid_argument& e) {
    throw HarnessError(ErrorKind::config, std::string("retrain: ") + e.what());
  }
  s.parameters = net->parameter_count();
  // Train on the whole training set, measure on the test set; both loaded as
  // one dataset so indices stay simple.
  Dataset all = train;
  all.images = Tensor({train.size() + test.size(), train.channels(), train.images.dim(2), train.images.dim(3)});
  std::copy(train.images.data(), train.images.data() + train.images.size(), all.images.data());
  std::copy(test.images.data(), test.images.data() + test.images.size(), all.images.data() + train.images.size());
  all.labels.insert(all.labels.end(), test.labels.begin(), test.labels.end());
  std::vector<int> tr(static_cast<std::size_t>(train.size())), te(static_cast<std::size_t>(test.size()));
  for (int i = 0; i < train.size(); ++i) tr[static_cast<std::size_t>(i)] = i;
  for (int i = 0; i < test.size(); ++i) te[static_cast<std::size_t>(i)] = train.size() + i;
  try {
    s.epochs = train_derived(*net, all, tr, te, c.retrain, c.seed, [&](const RetrainEpoch& e) {
      if (log)
        log("epoch " + std::to_string(e.epoch) + " train_loss " + fmt6(e.train_loss) + " train_acc " +
            fmt6(e.train_acc) + " test_acc " + fmt6(e.test_acc));
    });
  } catch (const NonFiniteLoss& e) {
    throw HarnessError(ErrorKind::runtime, e.what());
  }
  s.test_acc = s.epochs.empty() ? 0.0 : s.epochs.back().test_acc;
  std::string csv = "# " + provenance(c, "retrain").dump() + "\nepoch,lr,drop_path,train_loss,train_acc,test_acc\n";
  for (const auto& e : s.epochs)
    csv += std::to_string(e.epoch) + "," + fmt6(e.lr) + "," + fmt6(e.drop_path) + "," + fmt6(e.train_loss) + "," +
           fmt6(e.train_acc) + "," + fmt6(e.test_acc) + "\n";
  write_text(out / "retrain.csv", csv);
  ordered_json j;
  j["provenance"] = provenance(c, "retrain");
  j["genotype"] = genotype_to_json(g);
  j["parameters"] = s.parameters;
  j["test_acc"] = s.test_acc;
  write_json(out / "retrain.json", j);
  write_manifest(out, "retrain", c, {"retrain.csv", "retrain.json"});
  return s;
}

// -------------------------------------------------------- ablate-patch

struct AblationSummary {
  fs::path dir;
  std::vector<AblationRow> rows;
};

inline std::string patch_label(int p) { return p == 0 ? "full" : std::to_string(p); }

/// One search per patch size, then mean op importance in the chosen cells.
inline AblationSummary run_ablation_command(const ExperimentConfig& c, const fs::path& out, const Logger& log = {}) {
  validate(c);
  if (c.ablation_patch_sizes.size() < 2) throw HarnessError(ErrorKind::config, "ablation needs at least two patch sizes");
  auto [train, test] = load_datasets(c);
  (void)test;
  std::vector<MeanMarginals> means;
  std::vector<SupernetConfig> cfgs;
  std::vector<std::string> names;
  for (int p : c.ablation_patch_sizes) {
    auto vc = c;
    vc.supernet.patch_size = p > 0 ? p : train.images.dim(2);
    const auto dir = out / ("ps_" + patch_label(p));
    if (log) log("variant patch " + patch_label(p));
    run_search_command(vc, dir, log);
    auto net = load_supernet(dir / "final.ckpt");
    const auto run = load_run(dir);
    const auto idx = decoding_subset(run.split, vc.decode, vc.seed);
    means.push_back(accumulate_marginals(*net, train, idx, vc.search.batch_size));
    cfgs.push_back(net->config());
    names.push_back("PS=" + patch_label(p));
  }
  std::vector<std::pair<std::string, const MeanMarginals*>> variants;
  for (std::size_t i = 0; i < means.size(); ++i) variants.emplace_back(names[i], &means[i]);
  AblationSummary s;
  s.dir = out;
  try {
    s.rows = patch_ablation_report(variants, cfgs, c.ablation_cells);
  } catch (const std::invalid_argument& e) {
    throw HarnessError(ErrorKind::config, e.what());
  }
  const auto catalog = default_catalog();
  std::string csv = "# " + provenance(c, "ablate-patch").dump() + "\nvariant";
  for (const auto& k : catalog) csv += "," + k.name;
  csv += ",uniform_reference,learnable_spread\n";
  ordered_json rows = ordered_json::array();
  std::vector<std::vector<double>> groups;
  for (const auto& r : s.rows) {
    csv += r.variant;
    for (double v : r.op_importance) csv += "," + fmt6(v);
    csv += "," + fmt6(r.uniform_reference) + "," + fmt6(r.learnable_spread) + "\n";
    rows.push_back({{"variant", r.variant},
                    {"op_importance", r.op_importance},
                    {"uniform_reference", r.uniform_reference},
                    {"learnable_spread", r.learnable_spread}});
    groups.push_back(r.op_importance);
  }
  write_text(out / "ablation.csv", csv);
  ordered_json j;
  j["provenance"] = provenance(c, "ablate-patch");
  j["cells"] = c.ablation_cells;
  j["rows"] = rows;
  write_json(out / "ablation.json", j);
  std::vector<std::string> opnames;
  for (const auto& k : catalog) opnames.push_back(k.name);
  fig::grouped_bars(groups, names, opnames, "Operation importance by patch size", "mean marginal",
                    s.rows.front().uniform_reference)
      .save(out / "ablation.svg");
  write_manifest(out, "ablate-patch", c, {"ablation.csv", "ablation.json", "ablation.svg"});
  return s;
}

// -------------------------------------------------------------- report

struct ReportRow {
  std::uint64_t seed = 0;
  std::vector<double> values;
};

struct ReportTable {
  std::string config_hash;
  std::vector<std::string> columns;
  std::vector<ReportRow> rows;
  std::vector<double> mean, stdev;  // population std over seeds
};

namespace detail {

inline std::optional<std::string> sub_hash(const fs::path& dir, const std::string& artifact) {
  if (!fs::exists(dir / "manifest.json")) return std::nullopt;
  return read_manifest(dir, artifact).provenance.at("config_hash").get<std::string>();
}

}  // namespace detail

/// Aggregates search runs (and their decode/analyze/retrain sub-artifacts when
/// every run has them). All runs must share the configuration hash.
inline ReportTable build_report(const std::vector<fs::path>& runs) {
  if (runs.empty()) throw HarnessError(ErrorKind::usage, "report needs at least one run directory");
  ReportTable t;
  std::vector<LoadedRun> loaded;
  for (const auto& r : runs) loaded.push_back(load_run(r));
  t.config_hash = loaded.front().manifest.provenance.at("config_hash").get<std::string>();
  std::set<std::uint64_t> seeds;
  for (const auto& l : loaded) {
    const auto h = l.manifest.provenance.at("config_hash").get<std::string>();
    if (h != t.config_hash)
      throw HarnessError(ErrorKind::mismatch, "config hash mismatch: " + l.dir.string() + " has " + h + ", " +
                                                  loaded.front().dir.string() + " has " + t.config_hash);
    if (!seeds.insert(l.manifest.config.seed).second)
      throw HarnessError(ErrorKind::mismatch, "seed " + std::to_string(l.manifest.config.seed) + " appears twice");
  }
  auto all_have = [&](const std::string& sub, const std::string& artifact) {
    std::size_t n = 0;
    std::optional<std::string> first;
    for (const auto& l : loaded) {
      const auto h = detail::sub_hash(l.dir / sub, artifact);
      if (!h) continue;
      ++n;
      if (first && *h != *first)
        throw HarnessError(ErrorKind::mismatch, sub + " artifacts were produced under different configurations");
      first = h;
    }
    return n == loaded.size();
  };
  const bool dec = all_have("decode", "decode"), ana = all_have("analysis", "analyze"),
             ret = all_have("retrain", "retrain");
  t.columns = {"val_acc", "loss_A", "loss_B", "marginal_std_mean"};
  if (dec) t.columns.insert(t.columns.end(), {"nonlearnable_normal", "separable_edges"});
  if (ana) t.columns.push_back("fraction_unimodal");
  if (ret) t.columns.push_back("test_acc");
  for (const auto& l : loaded) {
    ReportRow row;
    row.seed = l.manifest.config.seed;
    const auto m = read_metrics_csv(l.dir / "metrics.csv");
    if (m.empty()) throw HarnessError(ErrorKind::artifact, l.dir.string() + ": empty metrics.csv");
    row.values = {m.back().val_acc, m.back().loss_a, m.back().loss_b, m.back().marginal_std_mean};
    if (dec) {
      const auto g = read_genotype(l.dir / "decode" / "genotype.json");
      row.values.push_back(count_nonlearnable_ops(g));
      row.values.push_back(family_histogram(g)[OpFamily::separable_conv]);
    }
    if (ana) row.values.push_back(read_json(l.dir / "analysis" / "analysis.json").at("dip").at("fraction_unimodal").get<double>());
    if (ret) row.values.push_back(read_json(l.dir / "retrain" / "retrain.json").at("test_acc").get<double>());
    t.rows.push_back(row);
  }
  std::sort(t.rows.begin(), t.rows.end(), [](const auto& a, const auto& b) { return a.seed < b.seed; });
  const std::size_t k = t.columns.size();
  t.mean.assign(k, 0.0);
  t.stdev.assign(k, 0.0);
  const double n = static_cast<double>(t.rows.size());
  for (const auto& r : t.rows)
    for (std::size_t i = 0; i < k; ++i) t.mean[i] += r.values[i] / n;
  for (const auto& r : t.rows)
    for (std::size_t i = 0; i < k; ++i) t.stdev[i] += (r.values[i] - t.mean[i]) * (r.values[i] - t.mean[i]) / n;
  for (auto& v : t.stdev) v = std::sqrt(v);
  return t;
}

inline std::string report_text(const ReportTable& t) {
  std::vector<std::vector<std::string>> cells;
  std::vector<std::string> head{"seed"};
  head.insert(head.end(), t.columns.begin(), t.columns.end());
  cells.push_back(head);
  for (const auto& r : t.rows) {
    std::vector<std::string> line{std::to_string(r.seed)};
    for (double v : r.values) line.push_back(fmt6(v));
    cells.push_back(line);
  }
  std::vector<std::string> last{"mean ± std"};
  for (std::size_t i = 0; i < t.columns.size(); ++i) last.push_back(fmt6(t.mean[i]) + " ± " + fmt6(t.stdev[i]));
  cells.push_back(last);
  // "±" is two bytes but one column wide
  auto width = [](const std::string& s) { return s.size() - (s.find("±") != std::string::npos ? 1 : 0); };
  std::vector<std::size_t> w(head.size(), 0);
  for (const auto& line : cells)
    for (std::size_t i = 0; i < line.size(); ++i) w[i] = std::max(w[i], width(line[i]));
  std::string out = "config " + t.config_hash + "\n";
  for (const auto& line : cells) {
    for (std::size_t i = 0; i < line.size(); ++i) out += line[i] + std::string(w[i] - width(line[i]) + 2, ' ');
    out += "\n";
  }
  return out;
}

inline void write_report(const ReportTable& t, const fs::path& out) {
  std::string csv = "seed";
  for (const auto& c : t.columns) csv += "," + c;
  csv += "\n";
  for (const auto& r : t.rows) {
    csv += std::to_string(r.seed);
    for (double v : r.values) csv += "," + fmt6(v);
    csv += "\n";
  }
  csv += "mean";
  for (double v : t.mean) csv += "," + fmt6(v);
  csv += "\nstd";
  for (double v : t.stdev) csv += "," + fmt6(v);
  csv += "\n";
  write_text(out / "summary.csv", csv);
  ordered_json j;
  j["config_hash"] = t.config_hash;
  j["code_version"] = kCodeVersion;
  j["columns"] = t.columns;
  auto rows = ordered_json::array();
  for (const auto& r : t.rows) rows.push_back({{"seed", r.seed}, {"values", r.values}});
  j["rows"] = rows;
  j["mean"] = t.mean;
  j["std"] = t.stdev;
  write_json(out / "summary.json", j);
  write_text(out / "summary.txt", report_text(t));
}

}  // namespace midas::harness
