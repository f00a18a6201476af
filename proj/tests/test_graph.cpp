#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <set>

#include "oracles.hpp"
#include "stalemp/graph.hpp"

using namespace stalemp;
namespace fs = std::filesystem;

namespace {

Graph triangle() { return Graph::from_edges(3, std::vector<Edge>{{0, 1}, {1, 2}, {0, 2}}); }
Graph path3() { return Graph::from_edges(3, std::vector<Edge>{{0, 1}, {1, 2}}); }

struct TempFiles {
  fs::path dir;
  TempFiles() {
    dir = fs::path(::testing::TempDir()) /
          ("stalemp_graph_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::create_directories(dir);
  }
  ~TempFiles() { fs::remove_all(dir); }
  std::string write(const std::string& name, const std::string& body) const {
    const auto p = (dir / name).string();
    std::ofstream(p) << body;
    return p;
  }
  std::string features(std::size_t n, std::size_t d) const {
    const auto p = (dir / "x.bin").string();
    write_features(p, Tensor(n, d, 0.5));
    return p;
  }
  std::string labels(std::size_t n) const {
    std::string body;
    for (std::size_t i = 0; i < n; ++i) body += std::to_string(i % 2) + "\n";
    return write("y.txt", body);
  }
};

}  // namespace

TEST(Graph, TriangleDegrees) {
  const Graph g = triangle();
  EXPECT_EQ(g.degrees(), (std::vector<std::uint32_t>{2, 2, 2}));
  EXPECT_TRUE(g.valid());
}

TEST(Graph, PathOffsets) { EXPECT_EQ(path3().offsets(), (std::vector<std::size_t>{0, 1, 3, 4})); }

TEST(Graph, SymmetrizesAndDeduplicates) {
  const Graph g = Graph::from_edges(3, std::vector<Edge>{{0, 1}, {1, 0}, {0, 1}, {2, 1}});
  EXPECT_EQ(g.num_edges(), 4u);
  EXPECT_EQ(g.undirected_edges().size(), 2u);
  EXPECT_TRUE(g.valid());
}

TEST(Graph, SelfLoopsOptIn) {
  const Graph g = path3().with_self_loops();
  EXPECT_EQ(g.degrees(), (std::vector<std::uint32_t>{2, 3, 2}));
}

TEST(LoadEdgeList, TriangleFromFiles) {
  TempFiles t;
  const auto ds = load_edge_list(t.write("e.tsv", "# comment\n0\t1\n1\t2\n0\t2\n"), t.features(3, 2), t.labels(3));
  EXPECT_EQ(ds.graph.degrees(), (std::vector<std::uint32_t>{2, 2, 2}));
  EXPECT_EQ(ds.features.rows(), 3u);
  EXPECT_EQ(ds.num_classes(), 2u);
}

TEST(LoadEdgeList, EmptyEdgeFile) {
  TempFiles t;
  const auto ds = load_edge_list(t.write("e.tsv", ""), t.features(3, 2), t.labels(3));
  EXPECT_EQ(ds.graph.degrees(), (std::vector<std::uint32_t>{0, 0, 0}));
}

TEST(LoadEdgeList, PathOffsets) {
  TempFiles t;
  const auto ds = load_edge_list(t.write("e.tsv", "0\t1\n1\t2\n"), t.features(3, 1), t.labels(3));
  EXPECT_EQ(ds.graph.offsets(), (std::vector<std::size_t>{0, 1, 3, 4}));
}

TEST(LoadEdgeList, MalformedLineReportsLineNumber) {
  TempFiles t;
  try {
    load_edge_list(t.write("e.tsv", "0\t1\nbogus\n"), t.features(3, 1), t.labels(3));
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find(":2:"), std::string::npos) << e.what();
  }
}

TEST(LoadEdgeList, IdGapAndRemap) {
  TempFiles t;
  const auto e = t.write("e.tsv", "0\t10\n10\t20\n");
  EXPECT_THROW(load_edge_list(e, t.features(3, 1), t.labels(3)), FormatError);
  const auto ds = load_edge_list(e, t.features(3, 1), t.labels(3), {.remap_ids = true});
  EXPECT_EQ(ds.graph.offsets(), (std::vector<std::size_t>{0, 1, 3, 4}));
  EXPECT_EQ(ds.original_ids, (std::vector<std::uint64_t>{0, 10, 20}));
}

TEST(LoadEdgeList, CountMismatches) {
  TempFiles t;
  const auto e = t.write("e.tsv", "0\t1\n");
  EXPECT_THROW(load_edge_list(e, t.features(3, 1), t.labels(4)), FormatError);
  const auto bad = t.write("trunc.bin", std::string(12, '\0'));
  EXPECT_THROW(load_edge_list(e, bad, t.labels(3)), FormatError);
}

TEST(Features, RoundTripAsFloat32) {
  TempFiles t;
  const auto p = (t.dir / "f.bin").string();
  write_features(p, Tensor(2, 2, {0.5, -1.25, 3.0, 0.0}));
  EXPECT_EQ(read_features(p), Tensor(2, 2, {0.5, -1.25, 3.0, 0.0}));
  EXPECT_EQ(fs::file_size(p), 16u + 4 * 4);
}

TEST(Normalize, SingleEdge) {
  const Graph g = Graph::from_edges(2, std::vector<Edge>{{0, 1}});
  EXPECT_EQ(symmetric_normalize(g).weights, (std::vector<double>{1.0, 1.0}));
}

TEST(Normalize, Triangle) {
  for (double w : symmetric_normalize(triangle()).weights) EXPECT_DOUBLE_EQ(w, 0.5);
}

TEST(Normalize, StarCenterLeaf) {
  const Graph g = Graph::from_edges(5, std::vector<Edge>{{0, 1}, {0, 2}, {0, 3}, {0, 4}});
  for (double w : symmetric_normalize(g).weights) EXPECT_DOUBLE_EQ(w, 0.5);
}

TEST(Normalize, ZeroDegreeHasNoEntries) {
  const Graph g = Graph::from_edges(3, std::vector<Edge>{{0, 1}});
  const auto a = symmetric_normalize(g);
  EXPECT_EQ(a.weights.size(), 2u);
  EXPECT_EQ(a.row_norm(g, 2), 0.0);
}

TEST(Normalize, RegularGraphGivesOneOverD) {
  // cycle (d=2), K5 (d=4), 3-cube (d=3)
  std::vector<std::pair<std::size_t, std::vector<Edge>>> cases;
  std::vector<Edge> cycle, k5, cube;
  for (NodeId i = 0; i < 7; ++i) cycle.emplace_back(i, (i + 1) % 7);
  for (NodeId i = 0; i < 5; ++i)
    for (NodeId j = i + 1; j < 5; ++j) k5.emplace_back(i, j);
  for (NodeId i = 0; i < 8; ++i)
    for (NodeId b = 1; b < 8; b <<= 1)
      if (!(i & b)) cube.emplace_back(i, i | b);
  cases.emplace_back(7, cycle);
  cases.emplace_back(5, k5);
  cases.emplace_back(8, cube);
  for (const auto& [n, edges] : cases) {
    const Graph g = Graph::from_edges(n, edges);
    const double d = g.degree(0);
    for (double w : symmetric_normalize(g).weights) EXPECT_NEAR(w, 1.0 / d, 1e-15);
  }
}

TEST(Centrality, Examples) {
  const auto tri = degree_centrality(triangle());
  EXPECT_EQ(tri.c, (std::vector<double>{2, 2, 2}));
  EXPECT_EQ(tri.c_avg, 2.0);
  const auto star = degree_centrality(Graph::from_edges(4, std::vector<Edge>{{0, 1}, {0, 2}, {0, 3}}));
  EXPECT_EQ(star.c, (std::vector<double>{3, 1, 1, 1}));
  EXPECT_EQ(star.c_avg, 1.5);
  const auto empty = degree_centrality(Graph::from_edges(2, std::vector<Edge>{}));
  EXPECT_EQ(empty.c, (std::vector<double>{0, 0}));
  EXPECT_EQ(empty.c_avg, 0.0);
}

TEST(Partition, SingleCluster) {
  const auto p = partition_greedy(triangle(), 1, 3);
  EXPECT_EQ(p.assignment, (std::vector<std::uint32_t>{0, 0, 0}));
}

TEST(Partition, OneNodePerCluster) {
  const auto p = partition_greedy(path3(), 3, 3);
  EXPECT_EQ(p.sizes(), (std::vector<std::size_t>{1, 1, 1}));
}

TEST(Partition, PathTwoClusters) {
  const Graph g = path3();
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto p = partition_greedy(g, 2, seed);
    const auto big = p.members(0), small = p.members(1);
    ASSERT_EQ(big.size(), 2u);
    ASSERT_EQ(small.size(), 1u);
    EXPECT_EQ(std::abs(static_cast<int>(big[0]) - static_cast<int>(big[1])), 1) << "seed " << seed;
  }
}

TEST(Partition, Errors) {
  EXPECT_THROW(partition_greedy(path3(), 4, 0), std::invalid_argument);
  EXPECT_THROW(partition_greedy(path3(), 0, 0), std::invalid_argument);
}

TEST(Partition, BalancedNonemptyDeterministicAndCovering) {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t n = 10 + trial * 7;
    const Graph g = oracle::random_graph(n, n / 2, rng);
    const std::size_t k = 1 + trial % 9;
    const auto p = partition_greedy(g, k, trial);
    EXPECT_EQ(p.assignment, partition_greedy(g, k, trial).assignment);
    const std::size_t hi = (n + k - 1) / k;
    for (auto s : p.sizes()) {
      EXPECT_GE(s, 1u);
      EXPECT_LE(s, hi);
      EXPECT_GE(s + 1, hi);
    }
    std::vector<std::uint32_t> all(k);
    std::iota(all.begin(), all.end(), 0u);
    const auto ctx = make_batch(p, all, g);
    std::vector<NodeId> expect(n);
    std::iota(expect.begin(), expect.end(), 0u);
    EXPECT_EQ(ctx.in_batch, expect);
    EXPECT_TRUE(ctx.full_batch());
  }
}

TEST(Batch, MiddleOfPath) {
  const auto ctx = make_batch_from_nodes(path3(), {1});
  EXPECT_EQ(ctx.frontier, (std::vector<NodeId>{0, 2}));
}

TEST(Batch, TriangleSingleNode) {
  const auto ctx = make_batch_from_nodes(triangle(), {0});
  EXPECT_EQ(ctx.frontier, (std::vector<NodeId>{1, 2}));
  EXPECT_EQ(ctx.in_offsets, (std::vector<std::size_t>{0, 0}));
  EXPECT_EQ(ctx.out_offsets, (std::vector<std::size_t>{0, 2}));
}

TEST(Batch, Errors) {
  const auto p = partition_greedy(path3(), 2, 0);
  EXPECT_THROW(make_batch(p, std::vector<std::uint32_t>{}, path3()), std::invalid_argument);
  EXPECT_THROW(make_batch(p, std::vector<std::uint32_t>{5}, path3()), std::invalid_argument);
}

TEST(Batch, SplitPartitionsNeighborhoods) {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 5 + trial;
    const Graph g = oracle::random_graph(n, n, rng);
    const auto p = partition_greedy(g, 1 + trial % 5, trial);
    std::vector<std::uint32_t> ids{static_cast<std::uint32_t>(trial % p.num_clusters)};
    const auto ctx = make_batch(p, ids, g);
    std::set<NodeId> in(ctx.in_batch.begin(), ctx.in_batch.end());
    for (NodeId f : ctx.frontier) {
      EXPECT_FALSE(in.count(f));
      bool touches = false;
      for (NodeId j : g.neighbors_of(f)) touches |= in.count(j) > 0;
      EXPECT_TRUE(touches);
    }
    for (std::size_t t = 0; t < ctx.size(); ++t) {
      const NodeId i = ctx.in_batch[t];
      const std::size_t n_in = ctx.in_offsets[t + 1] - ctx.in_offsets[t];
      const std::size_t n_out = ctx.out_offsets[t + 1] - ctx.out_offsets[t];
      EXPECT_EQ(n_in + n_out, g.degree(i));
      std::multiset<NodeId> got;
      for (std::size_t e = ctx.in_offsets[t]; e < ctx.in_offsets[t + 1]; ++e) got.insert(ctx.in_batch[ctx.in_src[e]]);
      for (std::size_t e = ctx.out_offsets[t]; e < ctx.out_offsets[t + 1]; ++e) got.insert(ctx.frontier[ctx.out_src[e]]);
      const auto nb = g.neighbors_of(i);
      EXPECT_EQ(got, std::multiset<NodeId>(nb.begin(), nb.end()));
    }
  }
}

TEST(Sbm, TwoDisjointCliques) {
  const auto ds = synth_sbm({.n = 10, .blocks = 2, .p_in = 1.0, .p_out = 0.0, .feat_dim = 3, .noise = 0.0, .seed = 1});
  for (NodeId i = 0; i < 10; ++i) {
    EXPECT_EQ(ds.graph.degree(i), 4u);
    for (NodeId j : ds.graph.neighbors_of(i)) EXPECT_EQ(ds.labels[i], ds.labels[j]);
  }
}

TEST(Sbm, EqualProbabilitiesGiveEqualDensities) {
  const auto ds = synth_sbm({.n = 400, .blocks = 2, .p_in = 0.1, .p_out = 0.1, .feat_dim = 2, .noise = 0.1, .seed = 4});
  double within = 0, between = 0;
  for (auto [u, v] : ds.graph.undirected_edges()) (ds.labels[u] == ds.labels[v] ? within : between) += 1;
  const double within_pairs = 2 * 200.0 * 199 / 2, between_pairs = 200.0 * 200;
  EXPECT_NEAR(within / within_pairs, between / between_pairs, 0.01);
}

TEST(Sbm, EdgeCountWithinThreeSigma) {
  const auto ds = synth_sbm({.n = 40, .blocks = 2, .p_in = 0.5, .p_out = 0.05, .feat_dim = 4, .noise = 0.1, .seed = 7});
  const double within_pairs = 2 * 20.0 * 19 / 2, between_pairs = 20.0 * 20;
  const double mean = within_pairs * 0.5 + between_pairs * 0.05;
  const double sigma = std::sqrt(within_pairs * 0.25 + between_pairs * 0.05 * 0.95);
  const double m = static_cast<double>(ds.graph.undirected_edges().size());
  EXPECT_LE(std::abs(m - mean), 3 * sigma) << m << " vs " << mean;
}

TEST(Sbm, DeterministicAndValidated) {
  const SbmParams prm{.n = 60, .blocks = 3, .p_in = 0.3, .p_out = 0.02, .feat_dim = 5, .noise = 0.3, .seed = 11};
  const auto a = synth_sbm(prm), b = synth_sbm(prm);
  EXPECT_EQ(a.graph.offsets(), b.graph.offsets());
  EXPECT_EQ(a.graph.neighbors(), b.graph.neighbors());
  EXPECT_EQ(a.features, b.features);
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_THROW(synth_sbm({.p_in = 1.5}), std::invalid_argument);
  EXPECT_THROW(synth_sbm({.p_out = -0.1}), std::invalid_argument);
  EXPECT_THROW(synth_sbm({.blocks = 0}), std::invalid_argument);
}

TEST(Sbm, SeparableAtZeroNoise) {
  const auto ds = synth_sbm({.n = 30, .blocks = 3, .p_in = 0.2, .p_out = 0.0, .feat_dim = 4, .noise = 0.0, .seed = 2});
  EXPECT_EQ(oracle::logistic_regression_accuracy(ds.features, ds.labels, 3), 1.0);
}
