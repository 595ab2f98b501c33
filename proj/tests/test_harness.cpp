#include <gtest/gtest.h>

#include <array>
#include <cstdio>
#include <filesystem>

#include "midas/harness.hpp"

using namespace midas;
using namespace midas::harness;

namespace {

fs::path temp_dir(const std::string& name) {
  auto d = fs::temp_directory_path() / ("midas_harness_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

// Two-epoch desk search on 80 planted images.
ExperimentConfig tiny(std::uint64_t seed = 1) {
  return build_config(Profile::desk, {},
                      {{"seed", std::to_string(seed)},
                       {"search.epochs", "2"},
                       {"data.size", "80"},
                       {"data.test_size", "40"},
                       {"analysis.n_boot", "200"},
                       {"retrain.epochs", "1"},
                       {"retrain.layers", "3"},
                       {"retrain.channels", "4"}});
}

ErrorKind kind_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const HarnessError& e) {
    return e.kind();
  }
  ADD_FAILURE() << "no HarnessError thrown";
  return ErrorKind::runtime;
}

struct Captured {
  int status = -1;
  std::string output;
};

Captured run_cli(const std::string& args) {
  Captured c;
  const std::string cmd = std::string(MIDAS_CLI_PATH) + " " + args + " 2>&1";
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return c;
  std::array<char, 512> buf{};
  while (fgets(buf.data(), buf.size(), p)) c.output += buf.data();
  const int st = pclose(p);
  c.status = WIFEXITED(st) ? WEXITSTATUS(st) : -1;
  return c;
}

}  // namespace

TEST(Config, ParsesSectionsCommentsAndReportsLines) {
  const auto kv = parse_key_values("# header\nprofile = desk\n[search]\nepochs = 3  # inline\n\n[decode]\ngrouping=per-level\n");
  ASSERT_EQ(kv.size(), 3u);
  EXPECT_EQ(kv[0], (std::pair<std::string, std::string>{"profile", "desk"}));
  EXPECT_EQ(kv[1], (std::pair<std::string, std::string>{"search.epochs", "3"}));
  EXPECT_EQ(kv[2], (std::pair<std::string, std::string>{"decode.grouping", "per-level"}));
  try {
    parse_key_values("a = 1\nnot a pair\n", "x.cfg");
    FAIL();
  } catch (const HarnessError& e) {
    EXPECT_EQ(e.kind(), ErrorKind::config);
    EXPECT_NE(std::string(e.what()).find("x.cfg:2"), std::string::npos);
  }
  EXPECT_EQ(kind_of([] { parse_key_values("[open\n"); }), ErrorKind::config);
}

TEST(Config, PrecedenceProfileFileOverrides) {
  const auto file = parse_key_values("profile = desk\nsearch.epochs = 3\nsupernet.patch_size = 4\n");
  auto c = build_config(std::nullopt, file, {{"supernet.patch_size", "2"}});
  EXPECT_EQ(c.profile, Profile::desk);
  EXPECT_EQ(c.search.epochs, 3);
  EXPECT_EQ(c.supernet.patch_size, 2);
  EXPECT_EQ(c.supernet.num_cells, 4);
  // Command-line profile wins over the file's, file values still apply on top.
  c = build_config(Profile::paper, file);
  EXPECT_EQ(c.profile, Profile::paper);
  EXPECT_EQ(c.supernet.num_cells, 8);
  EXPECT_EQ(c.search.epochs, 3);
  EXPECT_EQ(kind_of([] { build_config(Profile::desk, {{"search.epoch", "3"}}); }), ErrorKind::config);
  EXPECT_EQ(kind_of([] { build_config(Profile::desk, {{"search.epochs", "three"}}); }), ErrorKind::config);
  EXPECT_EQ(kind_of([] { build_config(Profile::desk, {{"decode.grouping", "mean"}}); }), ErrorKind::config);
  EXPECT_EQ(kind_of([] { build_config(Profile::desk, {{"data.planted_op", "conv_7x7"}}); }), ErrorKind::config);
}

TEST(Config, PaperProfileMatchesPublishedSettings) {
  const auto c = profile_defaults(Profile::paper);
  EXPECT_EQ(c.supernet.num_cells, 8);
  EXPECT_EQ(c.supernet.init_channels, 16);
  EXPECT_EQ(c.supernet.nodes_per_cell, 4);
  EXPECT_EQ(c.supernet.patch_size, 8);
  EXPECT_EQ(c.search.epochs, 50);
  EXPECT_EQ(c.search.batch_size, 64);
  EXPECT_DOUBLE_EQ(c.search.w_lr, 0.025);
  EXPECT_DOUBLE_EQ(c.search.w_lr_min, 1e-3);
  EXPECT_DOUBLE_EQ(c.search.w_momentum, 0.9);
  EXPECT_DOUBLE_EQ(c.search.w_weight_decay, 3e-3);
  EXPECT_DOUBLE_EQ(c.search.arch_lr, 1e-4);
  EXPECT_DOUBLE_EQ(c.search.arch_weight_decay, 1e-3);
  EXPECT_EQ(c.search.cutout_size, 16);
  EXPECT_DOUBLE_EQ(c.search.split.a, 0.5);
  EXPECT_DOUBLE_EQ(c.search.split.b, 0.5);
  EXPECT_EQ(c.retrain.epochs, 600);
  EXPECT_DOUBLE_EQ(c.retrain.lr, 0.025);
  EXPECT_DOUBLE_EQ(c.retrain.lr_min, 0.0);
  EXPECT_DOUBLE_EQ(c.retrain.weight_decay, 3e-4);
  EXPECT_EQ(c.retrain.cutout_size, 16);
  EXPECT_DOUBLE_EQ(c.retrain.drop_path_max, 0.2);
  EXPECT_DOUBLE_EQ(c.retrain.aux_weight, 0.4);
  EXPECT_EQ(c.retrain_channels, 36);
  EXPECT_EQ(c.retrain_layers, 20);
  EXPECT_DOUBLE_EQ(c.decode.subset_fraction, 0.1);

  const auto d = profile_defaults(Profile::desk);
  EXPECT_EQ(d.supernet.num_cells, 4);
  EXPECT_EQ(d.supernet.init_channels, 8);
  EXPECT_EQ(d.supernet.nodes_per_cell, 2);
  EXPECT_EQ(d.search.epochs, 8);
  EXPECT_GT(d.search.split.holdout, 0.0);
  EXPECT_NO_THROW(validate(c));
  EXPECT_NO_THROW(validate(d));
}

TEST(Config, CanonicalRoundTripAndEveryKeySettable) {
  const auto c = tiny();
  const auto back = config_from_json(config_json(c));
  EXPECT_EQ(canonical_text(back), canonical_text(c));
  for (const auto& f : fields()) {
    auto x = c;
    const auto v = f.get(x);
    f.set(x, v);
    EXPECT_EQ(f.get(x), v) << f.key;
  }
  EXPECT_EQ(fields().size(), canonical(c).size());
}

TEST(Config, HashIgnoresSeedOnly) {
  // FNV-1a 64 reference vectors.
  EXPECT_EQ(fnv1a64(""), 0xcbf29ce484222325ULL);
  EXPECT_EQ(fnv1a64("a"), 0xaf63dc4c8601ec8cULL);
  EXPECT_EQ(fnv1a64("foobar"), 0x85944171f73967e8ULL);
  const auto a = tiny(1), b = tiny(2);
  EXPECT_EQ(config_hash(a), config_hash(b));
  EXPECT_EQ(config_hash(a).size(), 16u);
  for (const auto& f : fields()) {
    if (f.key == "seed" || f.key == "profile") continue;
    auto x = a;
    const auto v = f.get(x);
    std::string alt;
    if (v == "true") alt = "false";
    else if (v == "false") alt = "true";
    else if (f.key == "decode.source") alt = "split_B";
    else if (f.key == "decode.grouping") alt = "per-level";
    else if (f.key == "decode.selection") alt = "top-pair";
    else if (f.key == "supernet.mode") alt = "per-edge";
    else if (f.key == "analysis.trace") alt = "holdout";
    else if (f.key == "data.kind") alt = "similarity";
    else if (f.key == "data.planted_op") alt = "dil_conv_3x3";
    else if (f.key == "search.split") alt = "0.5,0.3,0.2";
    else alt = v + "1";
    f.set(x, alt);
    EXPECT_NE(config_hash(x), config_hash(a)) << f.key;
  }
}

TEST(Config, ValidationRejectsInconsistentSettings) {
  EXPECT_EQ(kind_of([] { validate(build_config(Profile::desk, {{"search.split", "0.5,0.4,0.2"}})); }), ErrorKind::config);
  EXPECT_EQ(kind_of([] { validate(build_config(Profile::desk, {{"data.kind", "svhn"}})); }), ErrorKind::config);
  EXPECT_EQ(kind_of([] { validate(build_config(Profile::desk, {{"data.size", "0"}})); }), ErrorKind::config);
  EXPECT_EQ(kind_of([] { validate(build_config(Profile::desk, {{"supernet.reduction_cells", "1,9"}})); }),
            ErrorKind::config);
  EXPECT_EQ(kind_of([] { validate(build_config(Profile::desk, {{"decode.subset_fraction", "0"}})); }),
            ErrorKind::config);
  EXPECT_EQ(kind_of([] { validate(build_config(Profile::desk, {{"analysis.n_boot", "20"}})); }), ErrorKind::config);
  EXPECT_EQ(kind_of([] { validate(build_config(Profile::desk, {{"search.arch_warmup_epochs", "8"}})); }),
            ErrorKind::config);
}

TEST(Data, MissingCifarIsADataError) {
  auto c = build_config(Profile::paper, {{"data.dir", "/nonexistent/cifar"}});
  EXPECT_EQ(kind_of([&] { load_datasets(c); }), ErrorKind::data);
}

TEST(Pipeline, SearchDecodeAnalyzeRetrainReport) {
  const auto root = temp_dir("pipeline");
  std::vector<fs::path> runs;
  for (std::uint64_t seed : {1u, 2u}) {
    const auto c = tiny(seed);
    const auto dir = root / ("seed" + std::to_string(seed));
    const auto s = run_search_command(c, dir);
    EXPECT_EQ(s.metrics.size(), 2u);
    for (const auto* f : {"manifest.json", "config.kv", "split.json", "metrics.csv", "final.ckpt", "epoch_0.ckpt", "epoch_1.ckpt"})
      EXPECT_TRUE(fs::exists(dir / f)) << f;

    const auto run = load_run(dir);
    EXPECT_EQ(run.split.a, s.split.a);
    EXPECT_EQ(run.manifest.config.seed, seed);
    const auto prov = read_json(dir / "manifest.json").at("provenance");
    EXPECT_EQ(prov.at("config_hash"), config_hash(c));
    EXPECT_EQ(prov.at("seed"), seed);
    EXPECT_EQ(prov.at("code_version"), kCodeVersion);
    EXPECT_EQ(load_checkpoint((dir / "final.ckpt").string()).metadata.at("config_hash"), config_hash(c));
    EXPECT_NE(read_text(dir / "metrics.csv").find(config_hash(c)), std::string::npos);

    const auto d = run_decode_command(run, run.manifest.config, dir / "decode");
    EXPECT_TRUE(validate_genotype(d.genotype, SearchSpace::darts(2)).empty());
    const auto gtext = read_text(dir / "decode" / "genotype.json");
    const auto rtext = read_text(dir / "decode" / "decode_report.json");
    EXPECT_EQ(read_json(dir / "decode" / "genotype.json").at("provenance").at("config_hash"), config_hash(c));
    EXPECT_EQ(read_genotype(dir / "decode" / "genotype.json").cells.size(), 2u);
    run_decode_command(run, run.manifest.config, dir / "decode");
    EXPECT_EQ(read_text(dir / "decode" / "genotype.json"), gtext);
    EXPECT_EQ(read_text(dir / "decode" / "decode_report.json"), rtext);

    const auto a = run_analyze_command(run, run.manifest.config, dir / "analysis");
    EXPECT_FALSE(a.dips.empty());
    EXPECT_GE(a.fraction_unimodal, 0.0);
    EXPECT_LE(a.fraction_unimodal, 1.0);
    EXPECT_EQ(a.nonlearnable_per_epoch.size(), 2u);
    for (const auto* f : {"analysis.json", "dip_pvalues.svg", "class_similarity.svg", "variance_curve.svg"})
      EXPECT_TRUE(fs::exists(dir / "analysis" / f)) << f;

    const auto r = run_retrain_command(d.genotype, run.manifest.config, dir / "retrain");
    EXPECT_EQ(r.epochs.size(), 1u);
    EXPECT_GT(r.parameters, 0u);
    EXPECT_EQ(read_json(dir / "retrain" / "retrain.json").at("provenance").at("seed"), seed);
    runs.push_back(dir);
  }

  const auto t = build_report(runs);
  ASSERT_EQ(t.rows.size(), 2u);
  EXPECT_EQ(t.columns.back(), "test_acc");
  for (std::size_t i = 0; i < t.columns.size(); ++i) {
    const double x = t.rows[0].values[i], y = t.rows[1].values[i];
    EXPECT_NEAR(t.mean[i], (x + y) / 2, 1e-12);
    EXPECT_NEAR(t.stdev[i], std::abs(x - y) / 2, 1e-12);
  }
  const auto text = report_text(t);
  EXPECT_NE(text.find("mean ± std"), std::string::npos);
  write_report(t, root / "report");
  EXPECT_TRUE(fs::exists(root / "report" / "summary.csv"));

  // Same seed twice, a different configuration, and a tampered manifest.
  EXPECT_EQ(kind_of([&] { build_report({runs[0], runs[0]}); }), ErrorKind::mismatch);
  auto other = tiny(3);
  set_value(other, "search.epochs", "1");
  run_search_command(other, root / "other");
  EXPECT_EQ(kind_of([&] { build_report({runs[0], root / "other"}); }), ErrorKind::mismatch);
  auto m = read_json(runs[1] / "manifest.json");
  m["config"]["search.w_lr"] = "0.5";
  write_json(runs[1] / "manifest.json", m);
  EXPECT_EQ(kind_of([&] { load_run(runs[1]); }), ErrorKind::mismatch);
  EXPECT_EQ(kind_of([&] { load_run(root / "missing"); }), ErrorKind::artifact);
  fs::remove_all(root);
}

TEST(Pipeline, AblationWritesOneRowPerPatchSize) {
  const auto root = temp_dir("ablation");
  auto c = tiny();
  set_value(c, "search.epochs", "1");
  set_value(c, "ablation.patch_sizes", "0,4");
  const auto s = run_ablation_command(c, root);
  ASSERT_EQ(s.rows.size(), 2u);
  EXPECT_EQ(s.rows[0].variant, "PS=full");
  EXPECT_EQ(s.rows[1].variant, "PS=4");
  for (const auto& r : s.rows) {
    EXPECT_EQ(r.op_importance.size(), 7u);
    EXPECT_GE(r.learnable_spread, 0.0);
  }
  const auto svg = read_text(root / "ablation.svg");
  EXPECT_NE(svg.find("uniform"), std::string::npos);
  EXPECT_TRUE(fs::exists(root / "ps_4" / "final.ckpt"));
  fs::remove_all(root);
}

TEST(Figures, HistogramHeatmapAndBarsAreWellFormed) {
  const auto h = fig::histogram({0.01, 0.02, 0.5, 0.99, 1.0}, 10, 0, 1, "t", "p", 0.05).str();
  EXPECT_EQ(h.rfind("<svg", 0), 0u);
  EXPECT_NE(h.find("</svg>"), std::string::npos);
  EXPECT_NE(h.find("stroke-dasharray"), std::string::npos);
  const auto m = fig::heatmap({{1, -0.5}, {-0.5, 1}}, {"a", "b<c"}, "sim").str();
  EXPECT_NE(m.find("b&lt;c"), std::string::npos);
  EXPECT_NE(m.find("#ff0000"), std::string::npos);
  EXPECT_THROW(fig::histogram({}, 0, 0, 1, "t", "p"), std::invalid_argument);
  const auto l = fig::line_chart({{"s", {0, 1, 2}, {1, 2, 3}}}, "c", "x", "y").str();
  EXPECT_NE(l.find("<polyline"), std::string::npos);
  const auto b = fig::grouped_bars({{1, 2}, {3, 4}}, {"g1", "g2"}, {"x", "y"}, "bars", "v", 2.0).str();
  EXPECT_NE(b.find("uniform 2"), std::string::npos);
}

TEST(Cli, StructuredErrorsAndExitCodes) {
  auto r = run_cli("search --profile desk --set search.bogus=1 --out /tmp/midas_cli_bad");
  EXPECT_EQ(r.status, exit_code(ErrorKind::config));
  const auto j = nlohmann::json::parse(r.output);
  EXPECT_EQ(j.at("error").at("kind"), "config");
  EXPECT_EQ(j.at("error").at("command"), "search");
  EXPECT_NE(j.at("error").at("message").get<std::string>().find("search.bogus"), std::string::npos);

  r = run_cli("decode --in /nonexistent/run");
  EXPECT_EQ(r.status, exit_code(ErrorKind::artifact));
  EXPECT_EQ(nlohmann::json::parse(r.output).at("error").at("kind"), "artifact");

  r = run_cli("frobnicate");
  EXPECT_EQ(r.status, exit_code(ErrorKind::usage));
  r = run_cli("search --profile desk");
  EXPECT_EQ(r.status, exit_code(ErrorKind::usage));
  r = run_cli("search --profile desk --seed 4 --print-config");
  EXPECT_EQ(r.status, 0);
  EXPECT_NE(r.output.find("seed = 4"), std::string::npos);
  EXPECT_NE(r.output.find("# config_hash " + config_hash(build_config(Profile::desk, {}))), std::string::npos);
}
