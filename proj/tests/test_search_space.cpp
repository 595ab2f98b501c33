#include <gtest/gtest.h>

#include <map>
#include <random>

#include "midas/search_space.hpp"

using namespace midas;

TEST(Catalog, SevenOpsInFixedOrder) {
  const auto ops = default_catalog();
  ASSERT_EQ(ops.size(), 7u);
  EXPECT_EQ(ops[2].name, "skip_connect");
  const std::vector<bool> learnable{false, false, false, true, true, true, true};
  for (std::size_t i = 0; i < ops.size(); ++i) {
    EXPECT_EQ(ops[i].id, static_cast<int>(i));
    EXPECT_EQ(ops[i].learnable, learnable[i]) << ops[i].name;
    EXPECT_NE(ops[i].name, "none");
    EXPECT_NE(ops[i].name, "zero");
  }
  EXPECT_EQ(ops[op_id::dil_conv_5x5].kernel_extent, 9);
  EXPECT_EQ(default_catalog(), ops);
}

TEST(SearchSpace, RejectsDegenerateShapes) {
  auto ops = default_catalog();
  EXPECT_THROW(SearchSpace({ops[0]}, 4), std::invalid_argument);
  EXPECT_THROW(SearchSpace(ops, 0), std::invalid_argument);
  EXPECT_EQ(SearchSpace::darts().edges_at_node(3), 35);
}

TEST(EnumeratePairs, PinnedCounts) {
  EXPECT_EQ(enumerate_pairs(2, 7).size(), 49u);
  EXPECT_EQ(enumerate_pairs(3, 7).size(), 147u);
  const auto one = enumerate_pairs(2, 1);
  ASSERT_EQ(one.size(), 1u);
  EXPECT_EQ(one[0], (PairIndex{{0, 0}, {1, 0}}));
  EXPECT_THROW(enumerate_pairs(1, 7), std::invalid_argument);
  EXPECT_THROW(enumerate_pairs(3, 0), std::invalid_argument);
}

TEST(EnumeratePairs, MatchesDoubleLoopAndCoversEdgesEvenly) {
  for (int k = 2; k <= 6; ++k)
    for (int m = 1; m <= 7; ++m) {
      const auto pairs = enumerate_pairs(k, m);
      // Independent enumeration: all unordered pairs of flat edges with distinct inputs.
      std::vector<PairIndex> ref;
      for (int a = 0; a < k * m; ++a)
        for (int b = a + 1; b < k * m; ++b) {
          auto ea = edge_at(a, m), eb = edge_at(b, m);
          if (ea.input != eb.input) ref.push_back({ea, eb});
        }
      ASSERT_EQ(pairs.size(), static_cast<std::size_t>(k * (k - 1) / 2 * m * m));
      ASSERT_EQ(pairs, ref) << "k=" << k << " m=" << m;
      EXPECT_TRUE(std::is_sorted(pairs.begin(), pairs.end()));
      std::map<CandidateEdge, int> count;
      for (const auto& p : pairs) {
        EXPECT_LT(p.first.input, p.second.input);
        ++count[p.first];
        ++count[p.second];
      }
      ASSERT_EQ(count.size(), static_cast<std::size_t>(k * m));
      for (const auto& [e, c] : count) EXPECT_EQ(c, (k - 1) * m);
    }
}

TEST(EnumeratePairs, SameOperationOnBothEdgesAllowed) {
  bool found = false;
  for (const auto& p : enumerate_pairs(2, 7)) found |= p.first.op == p.second.op;
  EXPECT_TRUE(found);
}

static Genotype uniform_genotype(const SearchSpace& s, int op) {
  Genotype g;
  for (auto role : {CellRole::normal, CellRole::reduction}) {
    CellGenotype c{role, {}};
    for (int k = 0; k < s.nodes_per_cell(); ++k) c.nodes.push_back({{0, op}, {1, op}});
    g.cells.push_back(c);
  }
  return g;
}

TEST(ValidateGenotype, ReportsEachViolationKind) {
  const auto s = SearchSpace::darts(4);
  auto g = uniform_genotype(s, op_id::sep_conv_3x3);
  EXPECT_TRUE(validate_genotype(g, s).empty());

  auto dup = g;
  dup.cells[0].nodes[0] = {{0, 3}, {0, 5}};
  auto r = validate_genotype(dup, s);
  ASSERT_EQ(r.size(), 1u);
  EXPECT_EQ(r[0].message, "duplicate input index");
  EXPECT_EQ(r[0].cell, 0);
  EXPECT_EQ(r[0].node, 0);

  auto bad_op = g;
  bad_op.cells[1].nodes[2][1].op = 7;
  r = validate_genotype(bad_op, s);
  ASSERT_EQ(r.size(), 1u);
  EXPECT_EQ(r[0].message, "op index out of range");

  auto bad_in = g;
  bad_in.cells[0].nodes[1][1].input = 3;  // node 1 sees inputs 0..2
  r = validate_genotype(bad_in, s);
  ASSERT_EQ(r.size(), 1u);
  EXPECT_EQ(r[0].message, "input index out of range");

  auto three = g;
  three.cells[0].nodes[3].push_back({2, 1});
  r = validate_genotype(three, s);
  ASSERT_EQ(r.size(), 1u);
  EXPECT_NE(r[0].message.find("edge count"), std::string::npos);

  auto several = g;
  several.cells[0].nodes[0] = {{0, 9}, {0, 9}};
  EXPECT_EQ(validate_genotype(several, s).size(), 3u);
}

TEST(ValidateGenotype, PerEdgeModeWantsOneEdgePerInput) {
  const auto s = SearchSpace::darts(2, TopologyMode::per_edge);
  Genotype g{{CellGenotype{CellRole::normal, {{{0, 1}, {1, 2}}, {{0, 3}, {1, 3}, {2, 6}}}}}};
  EXPECT_TRUE(validate_genotype(g, s).empty());
  g.cells[0].nodes[1].pop_back();
  EXPECT_EQ(validate_genotype(g, s).size(), 1u);
}

TEST(GenotypeJson, CanonicalLayout) {
  Genotype g{{CellGenotype{CellRole::normal, {{{0, 3}, {1, 2}}}}}};
  EXPECT_EQ(genotype_to_string(g), R"({"cells":[{"role":"normal","nodes":[[[0,3],[1,2]]]}]})");
}

TEST(GenotypeJson, RoundTripOnRandomValidGenotypes) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    const int nodes = 1 + static_cast<int>(rng() % 5);
    const auto s = SearchSpace::darts(nodes);
    Genotype g;
    const int cells = 1 + static_cast<int>(rng() % 5);
    for (int c = 0; c < cells; ++c) {
      CellGenotype cg{rng() % 2 ? CellRole::normal : CellRole::reduction, {}};
      for (int k = 0; k < nodes; ++k) {
        const int n_in = SearchSpace::inputs_to_node(k);
        const int a = static_cast<int>(rng() % n_in);
        int b = static_cast<int>(rng() % (n_in - 1));
        if (b >= a) ++b;
        cg.nodes.push_back({{a, static_cast<int>(rng() % 7)}, {b, static_cast<int>(rng() % 7)}});
      }
      g.cells.push_back(cg);
    }
    ASSERT_TRUE(validate_genotype(g, s).empty());
    const auto text = genotype_to_string(g);
    const auto back = genotype_from_string(text);
    EXPECT_EQ(back, g);
    EXPECT_EQ(genotype_to_string(back), text);
  }
}

TEST(GenotypeJson, MalformedInputRaisesFormatError) {
  EXPECT_THROW(genotype_from_string("{"), FormatError);
  EXPECT_THROW(genotype_from_string(R"({"cells":[{"role":"odd","nodes":[]}]})"), FormatError);
  EXPECT_THROW(genotype_from_string(R"({"cells":[{"role":"normal","nodes":[[[0,1.5]]]}]})"),
               FormatError);
  EXPECT_THROW(genotype_from_string(R"({"cells":[{"nodes":[]}]})"), FormatError);
}
