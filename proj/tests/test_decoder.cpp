#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "midas/decoder.hpp"

using namespace midas;

namespace {

SupernetConfig tiny_config() {
  SupernetConfig c;
  c.num_cells = 3;
  c.reduction_cells = {1};
  c.init_channels = 4;
  c.nodes_per_cell = 2;
  c.patch_size = 4;
  c.num_classes = 2;
  c.init_seed = 5;
  return c;
}

Dataset tiny_data(int n, std::uint64_t seed) {
  PlantedParams p;
  p.image_size = 8;
  p.grating_extent = 4;
  return generate_planted(p, n, seed);
}

std::vector<double> random_simplex_scaled(int E, std::mt19937_64& rng) {
  std::gamma_distribution<double> g(1.0, 1.0);
  std::vector<double> v(static_cast<std::size_t>(E));
  double s = 0;
  for (auto& x : v) s += (x = g(rng));
  for (auto& x : v) x *= 2.0 / s;
  return v;
}

MeanMarginals random_means(const SupernetConfig& cfg, std::mt19937_64& rng) {
  MeanMarginals m;
  m.sample_count = 1;
  for (int c = 0; c < cfg.num_cells; ++c)
    for (int k = 0; k < cfg.nodes_per_cell; ++k)
      m.nodes[{c, k}].edges = random_simplex_scaled(SearchSpace::inputs_to_node(k) * 7, rng);
  return m;
}

}  // namespace

TEST(Accumulate, SingleSampleEqualsItsMarginals) {
  Supernet net(tiny_config());
  const auto data = tiny_data(4, 1);
  ArchTrace trace;
  const auto m = accumulate_marginals(net, data, {2}, 8, false, &trace);
  EXPECT_EQ(m.sample_count, 1);
  for (const auto& [k, n] : m.nodes)
    for (std::size_t e = 0; e < n.edges.size(); ++e)
      EXPECT_NEAR(n.edges[e], trace.value(k, 0, static_cast<int>(e)), 1e-7);
}

TEST(Accumulate, DuplicatedSubsetKeepsMeans) {
  Supernet net(tiny_config());
  const auto data = tiny_data(6, 2);
  const auto once = accumulate_marginals(net, data, {0, 1, 2, 3, 4, 5}, 4);
  const auto twice = accumulate_marginals(net, data, {0, 1, 2, 3, 4, 5, 0, 1, 2, 3, 4, 5}, 4);
  for (const auto& [k, n] : once.nodes)
    for (std::size_t e = 0; e < n.edges.size(); ++e) EXPECT_NEAR(n.edges[e], (twice.nodes.at(k).edges[e]), 1e-7);
}

TEST(Accumulate, MatchesTwoPassAverageAndSumsToTwo) {
  Supernet net(tiny_config());
  const auto data = tiny_data(10, 3);
  std::vector<int> idx{0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
  ArchTrace trace;
  const auto m = accumulate_marginals(net, data, idx, 3, true, &trace);
  for (const auto& [k, n] : m.nodes) {
    double total = 0;
    for (std::size_t e = 0; e < n.edges.size(); ++e) {
      double s = 0;
      for (int i = 0; i < trace.sample_count; ++i) s += trace.value(k, i, static_cast<int>(e));
      EXPECT_NEAR(n.edges[e], s / trace.sample_count, 1e-6);
      total += n.edges[e];
    }
    EXPECT_NEAR(total, 2.0, 1e-4);
    double pair_total = 0;
    for (double p : n.pairs) pair_total += p;
    EXPECT_NEAR(pair_total, 1.0, 1e-4);
  }
}

TEST(Accumulate, SubsetOrderDoesNotMatter) {
  Supernet net(tiny_config());
  const auto data = tiny_data(8, 4);
  const auto a = accumulate_marginals(net, data, {0, 1, 2, 3, 4, 5, 6, 7}, 3);
  const auto b = accumulate_marginals(net, data, {7, 3, 5, 1, 0, 6, 2, 4}, 3);
  const auto ga = decode_genotype(group_cells(a, net.config(), Grouping::shared), Selection::top2, net.space());
  const auto gb = decode_genotype(group_cells(b, net.config(), Grouping::shared), Selection::top2, net.space());
  EXPECT_EQ(ga, gb);
  for (const auto& [k, n] : a.nodes)
    for (std::size_t e = 0; e < n.edges.size(); ++e) EXPECT_NEAR(n.edges[e], b.nodes.at(k).edges[e], 1e-7);
}

TEST(Accumulate, EmptySubsetRejected) {
  Supernet net(tiny_config());
  const auto data = tiny_data(2, 5);
  EXPECT_THROW(accumulate_marginals(net, data, {}), std::invalid_argument);
}

TEST(Subset, FractionSourceAndDeterminism) {
  DataSplit s;
  for (int i = 0; i < 40; ++i) (i % 2 ? s.b : s.a).push_back(i);
  DecodingConfig c;
  c.subset_fraction = 0.1;
  const auto x = decoding_subset(s, c, 7);
  EXPECT_EQ(x.size(), 2u);
  for (int i : x) EXPECT_EQ(i % 2, 0);
  EXPECT_EQ(x, decoding_subset(s, c, 7));
  EXPECT_TRUE(std::is_sorted(x.begin(), x.end()));
  c.source = SubsetSource::split_b;
  for (int i : decoding_subset(s, c, 7)) EXPECT_EQ(i % 2, 1);
  c.source = SubsetSource::holdout;
  EXPECT_THROW(decoding_subset(s, c, 7), std::invalid_argument);
  c.subset_fraction = 0.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(Grouping, IdenticalCellsGiveIdentity) {
  auto cfg = tiny_config();
  std::mt19937_64 rng(1);
  auto m = random_means(cfg, rng);
  for (int c = 1; c < cfg.num_cells; ++c)
    for (int k = 0; k < cfg.nodes_per_cell; ++k) m.nodes[{c, k}] = m.nodes[{0, k}];
  const auto g = group_cells(m, cfg, Grouping::shared);
  ASSERT_EQ(g.cells.size(), 2u);
  for (const auto& cell : g.cells)
    for (int k = 0; k < cfg.nodes_per_cell; ++k)
      for (std::size_t e = 0; e < cell.nodes[static_cast<std::size_t>(k)].edges.size(); ++e)
        EXPECT_NEAR(cell.nodes[static_cast<std::size_t>(k)].edges[e], (m.nodes[{0, k}].edges[e]), 1e-12);
}

TEST(Grouping, SharedAverageIsElementwiseMean) {
  auto cfg = tiny_config();
  std::mt19937_64 rng(2);
  const auto m = random_means(cfg, rng);
  const auto g = group_cells(m, cfg, Grouping::shared);
  EXPECT_EQ(g.cells[0].role, CellRole::normal);
  EXPECT_EQ(g.cells[0].source_cells, (std::vector<int>{0, 2}));
  EXPECT_EQ(g.cells[1].role, CellRole::reduction);
  EXPECT_EQ(g.cells[1].source_cells, (std::vector<int>{1}));
  for (int k = 0; k < 2; ++k)
    for (std::size_t e = 0; e < m.nodes.at({0, k}).edges.size(); ++e) {
      const double want = (m.nodes.at({0, k}).edges[e] + m.nodes.at({2, k}).edges[e]) / 2;
      EXPECT_NEAR(g.cells[0].nodes[static_cast<std::size_t>(k)].edges[e], want, 1e-12);
    }
  EXPECT_EQ(g.repeats, (std::vector<int>{2, 1}));
}

TEST(Grouping, PerLevelKeepsFiveCellsStackingTwenty) {
  SupernetConfig cfg;
  cfg.num_cells = 8;
  cfg.reduction_cells = {2, 5};
  cfg.nodes_per_cell = 4;
  std::mt19937_64 rng(3);
  const auto m = random_means(cfg, rng);
  const auto g = group_cells(m, cfg, Grouping::per_level);
  ASSERT_EQ(g.cells.size(), 5u);
  std::vector<int> src;
  for (const auto& c : g.cells) src.push_back(c.source_cells.at(0));
  EXPECT_EQ(src, (std::vector<int>{0, 2, 3, 5, 6}));
  EXPECT_EQ(g.cells[1].role, CellRole::reduction);
  EXPECT_EQ(g.cells[3].role, CellRole::reduction);
  int depth = 0;
  for (int r : g.repeats) depth += r;
  EXPECT_EQ(depth, 20);
  auto bad = cfg;
  bad.reduction_cells = {1, 4};
  EXPECT_THROW(group_cells(m, bad, Grouping::per_level), std::invalid_argument);
}

TEST(Selection, TwoClearMaxima) {
  std::vector<double> m(14, 0.05);
  m[edge_index({0, 3}, 7)] = 0.6;
  m[edge_index({1, 5}, 7)] = 0.5;
  const auto s = select_top2(m, 7);
  EXPECT_EQ(s, (std::vector<CandidateEdge>{{0, 3}, {1, 5}}));
}

TEST(Selection, TopTwoOnSameInputForcesDistinctInput) {
  std::vector<double> m(21, 0.0);
  m[edge_index({0, 3}, 7)] = 0.7;
  m[edge_index({0, 4}, 7)] = 0.6;
  m[edge_index({2, 1}, 7)] = 0.3;
  m[edge_index({1, 6}, 7)] = 0.2;
  const auto s = select_top2(m, 7);
  // Enumerate every constraint-satisfying choice containing the top edge.
  CandidateEdge best{-1, -1};
  double bv = -1;
  for (int e = 0; e < 21; ++e)
    if (e / 7 != 0 && m[static_cast<std::size_t>(e)] > bv) {
      bv = m[static_cast<std::size_t>(e)];
      best = edge_at(e, 7);
    }
  EXPECT_EQ(s, (std::vector<CandidateEdge>{{0, 3}, best}));
  EXPECT_NE(s[0].input, s[1].input);
}

TEST(Selection, TiesGoToLowerIndex) {
  std::vector<double> m(14, 0.1);
  for (int run = 0; run < 3; ++run) {
    const auto s = select_top2(m, 7);
    EXPECT_EQ(s, (std::vector<CandidateEdge>{{0, 0}, {1, 0}}));
  }
  m[edge_index({1, 2}, 7)] = 0.3;
  m[edge_index({1, 4}, 7)] = 0.3;
  EXPECT_EQ(select_top2(m, 7), (std::vector<CandidateEdge>{{0, 0}, {1, 2}}));
}

TEST(Selection, TopPairCanDisagreeWithTopTwo) {
  // Pairs for 2 inputs x 2 ops: (00,10) (00,11) (01,10) (01,11).
  const std::vector<double> pairs{0.4, 0.0, 0.3, 0.3};
  std::vector<double> edges(4, 0.0);
  const auto enumerated = enumerate_pairs(2, 2);
  for (std::size_t q = 0; q < pairs.size(); ++q) {
    edges[static_cast<std::size_t>(edge_index(enumerated[q].first, 2))] += pairs[q];
    edges[static_cast<std::size_t>(edge_index(enumerated[q].second, 2))] += pairs[q];
  }
  EXPECT_EQ(select_top2(edges, 2), (std::vector<CandidateEdge>{{0, 1}, {1, 0}}));
  EXPECT_EQ(select_top_pair(pairs, 2, 2), (std::vector<CandidateEdge>{{0, 0}, {1, 0}}));
  EXPECT_THROW(select_top_pair({}, 2, 2), std::invalid_argument);
}

TEST(Selection, PerEdgeArgmaxPerInput) {
  std::vector<double> m(21, 0.0);
  m[edge_index({0, 2}, 7)] = 0.4;
  m[edge_index({1, 6}, 7)] = 0.9;
  m[edge_index({2, 0}, 7)] = 0.1;
  m[edge_index({2, 1}, 7)] = 0.1;
  EXPECT_EQ(select_per_edge(m, 7), (std::vector<CandidateEdge>{{0, 2}, {1, 6}, {2, 0}}));
}

TEST(Decode, RandomMeansAlwaysValid) {
  auto cfg = tiny_config();
  const auto space = SearchSpace::darts(cfg.nodes_per_cell);
  std::mt19937_64 rng(9);
  for (int t = 0; t < 200; ++t) {
    const auto m = random_means(cfg, rng);
    const auto g = decode_genotype(group_cells(m, cfg, Grouping::shared), Selection::top2, space);
    EXPECT_TRUE(validate_genotype(g, space).empty());
  }
}

TEST(Decode, ReportIsByteStableAndSurfacesDisagreements) {
  Supernet net(tiny_config());
  const auto data = tiny_data(12, 6);
  DataSplit split;
  for (int i = 0; i < 12; ++i) (i < 6 ? split.a : split.b).push_back(i);
  DecodingConfig c;
  c.subset_fraction = 1.0;
  const auto r1 = decode_supernet(net, data, split, c, 3, 4);
  const auto r2 = decode_supernet(net, data, split, c, 3, 4);
  const auto j1 = decode_report_json(r1, c, net.space()).dump(2);
  EXPECT_EQ(j1, decode_report_json(r2, c, net.space()).dump(2));
  const auto j = decode_report_json(r1, c, net.space());
  EXPECT_TRUE(j.at("pair_probabilities_recorded").get<bool>());
  EXPECT_EQ(j.at("subset").at("count").get<int>(), 6);
  EXPECT_EQ(j.at("disagreements").size(), r1.disagreements.size());
  EXPECT_EQ(genotype_from_json(j.at("genotype")), r1.genotype);
  c.selection = Selection::top_pair;
  const auto rp = decode_supernet(net, data, split, c, 3, 4);
  EXPECT_TRUE(validate_genotype(rp.genotype, net.space()).empty());
}

TEST(Decode, EdgeAgreement) {
  Genotype a;
  a.cells.push_back({CellRole::normal, {{{0, 3}, {1, 3}}, {{0, 1}, {2, 4}}}});
  auto b = a;
  EXPECT_DOUBLE_EQ(edge_agreement(a, b), 1.0);
  b.cells[0].nodes[1][1] = {2, 5};
  EXPECT_DOUBLE_EQ(edge_agreement(a, b), 0.75);
}
