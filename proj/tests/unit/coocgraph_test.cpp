#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "s2gr/coocgraph.hpp"
#include "s2gr/errors.hpp"
#include "s2gr/rng.hpp"
#include "test_util.hpp"

namespace s2gr::graph {
namespace {

nx::Tensor<double> identity2() { return nx::Tensor<double>({2, 2}, {1, 0, 0, 1}); }

TEST(BuildCoocGraph, SingleUserPair) {
  const auto g = build_cooc_graph({{0, 1}}, 2, 2);
  EXPECT_EQ(g.weight(0, 1), 1);
  EXPECT_EQ(g.weight(1, 0), 1);
}

TEST(BuildCoocGraph, SumsOverUsers) {
  const auto g = build_cooc_graph({{0, 1}, {0, 1}}, 2, 2);
  EXPECT_EQ(g.weight(0, 1), 2);
}

TEST(BuildCoocGraph, FarItemsHaveNoEdge) {
  const auto g = build_cooc_graph({{0, 1, 2, 3}}, 4, 2);
  EXPECT_EQ(g.weight(0, 1), 1);
  EXPECT_EQ(g.weight(0, 2), 0);
  EXPECT_EQ(g.weight(0, 3), 0);
  EXPECT_EQ(g.edges.size(), 3u);
}

TEST(BuildCoocGraph, WindowAndSelfPairs) {
  const auto g2 = build_cooc_graph({{0, 0, 1, 2}}, 3, 2);
  EXPECT_EQ(g2.weight(0, 0), 0);
  EXPECT_EQ(g2.weight(0, 1), 1);
  EXPECT_EQ(g2.weight(0, 2), 0);
  EXPECT_EQ(g2.weight(1, 2), 1);
  // Window 3 reaches two positions ahead; the user still counts once per pair.
  const auto g3 = build_cooc_graph({{0, 0, 1, 2}}, 3, 3);
  EXPECT_EQ(g3.weight(0, 1), 1);
  EXPECT_EQ(g3.weight(0, 2), 1);
  EXPECT_THROW(build_cooc_graph({{0, 1}}, 2, 1), ConfigError);
}

TEST(BuildCoocGraph, OrderInvariantAcrossUsers) {
  Rng rng(11);
  std::vector<std::vector<int>> seqs(30);
  for (auto& s : seqs)
    for (int i = 0; i < 12; ++i) s.push_back(static_cast<int>(rng.index(15)));
  const auto a = build_cooc_graph(seqs, 15, 4);
  rng.shuffle(seqs);
  const auto b = build_cooc_graph(seqs, 15, 4);
  EXPECT_EQ(a.edges, b.edges);
  for (const auto& e : a.edges) {
    EXPECT_LT(e.i, e.j);
    EXPECT_GT(e.w, 0);
  }
}

TEST(NormalizeAdjacency, SingleEdgeAndIsolatedNode) {
  CoocGraph g;
  g.num_nodes = 3;
  g.window = 2;
  g.edges = {{0, 1, 4}};
  const auto a = normalize_adjacency(g);
  EXPECT_DOUBLE_EQ(a.at(0, 1), 1.0);
  EXPECT_DOUBLE_EQ(a.at(1, 0), 1.0);
  for (int k = 0; k < 3; ++k) {
    EXPECT_EQ(a.at(2, k), 0.0);
    EXPECT_EQ(a.at(k, 2), 0.0);
  }
}

TEST(NormalizeAdjacency, SymmetricWithBoundedSpectrum) {
  Rng rng(2);
  std::vector<std::vector<int>> seqs(20);
  for (auto& s : seqs)
    for (int i = 0; i < 8; ++i) s.push_back(static_cast<int>(rng.index(6)));
  const auto a = normalize_adjacency(build_cooc_graph(seqs, 6, 3)).to_dense();
  for (int i = 0; i < 6; ++i)
    for (int j = 0; j < 6; ++j) EXPECT_DOUBLE_EQ(a(i, j), a(j, i));
  // Power iteration on the symmetric matrix bounds |lambda_max|.
  std::vector<double> v(6, 1.0);
  double lambda = 0;
  for (int it = 0; it < 200; ++it) {
    std::vector<double> w(6, 0.0);
    for (int i = 0; i < 6; ++i)
      for (int j = 0; j < 6; ++j) w[i] += a(i, j) * v[j];
    lambda = std::sqrt(std::inner_product(w.begin(), w.end(), w.begin(), 0.0));
    for (auto& x : w) x /= lambda;
    v = w;
  }
  EXPECT_LE(lambda, 1.0 + 1e-9);
}

SparseMatrix two_node() {
  CoocGraph g;
  g.num_nodes = 2;
  g.window = 2;
  g.edges = {{0, 1, 1}};
  return normalize_adjacency(g);
}

TEST(Propagate, AlphaOneKeepsX) {
  const auto hs = propagate(identity2(), two_node(), {1.0, 3});
  ASSERT_EQ(hs.size(), 4u);
  for (const auto& h : hs) EXPECT_EQ(h.data, identity2().data);
}

TEST(Propagate, ZeroHops) {
  const auto hs = propagate(identity2(), two_node(), {0.5, 0});
  ASSERT_EQ(hs.size(), 1u);
  EXPECT_EQ(hs[0].data, identity2().data);
}

TEST(Propagate, TwoNodeHandProduct) {
  const auto hs = propagate(identity2(), two_node(), {0.5, 1});
  for (double v : hs[1].data) EXPECT_DOUBLE_EQ(v, 0.5);
}

TEST(Propagate, MatchesDenseOracle) {
  Rng rng(8);
  std::vector<std::vector<int>> seqs(10);
  for (auto& s : seqs)
    for (int i = 0; i < 6; ++i) s.push_back(static_cast<int>(rng.index(7)));
  const auto a = normalize_adjacency(build_cooc_graph(seqs, 7, 3));
  const auto dense = a.to_dense();
  const auto x = testutil::random_tensor<double>(rng, 7, 3);
  const PropagationConfig cfg{0.2, 3};
  const auto hs = propagate(x, a, cfg);
  nx::Tensor<double> h = x;
  for (int k = 1; k <= 3; ++k) {
    nx::Tensor<double> next(7, 3);
    for (int i = 0; i < 7; ++i)
      for (int c = 0; c < 3; ++c) {
        double s = 0;
        for (int j = 0; j < 7; ++j) s += dense(i, j) * h(j, c);
        next(i, c) = 0.8 * s + 0.2 * x(i, c);
      }
    h = next;
    for (std::size_t i = 0; i < h.data.size(); ++i) EXPECT_NEAR(hs[k].data[i], h.data[i], 1e-12);
  }
}

TEST(Fuse, BetaWeights) {
  const auto beta = fusion_weights({0.5, 2});
  ASSERT_EQ(beta.size(), 3u);
  EXPECT_NEAR(beta[0], 4.0 / 7, 1e-15);
  EXPECT_NEAR(beta[1], 2.0 / 7, 1e-15);
  EXPECT_NEAR(beta[2], 1.0 / 7, 1e-15);
  const auto one = fusion_weights({1.0, 3});
  EXPECT_EQ(one[0], 1.0);
  for (std::size_t k = 1; k < one.size(); ++k) EXPECT_EQ(one[k], 0.0);
}

TEST(Fuse, WeightsSumToOne) {
  for (double alpha : {0.01, 0.15, 0.5, 0.9, 1.0})
    for (int hops : {0, 1, 3, 10, 50}) {
      const auto beta = fusion_weights({alpha, hops});
      EXPECT_NEAR(std::accumulate(beta.begin(), beta.end(), 0.0), 1.0, 1e-12);
    }
}

TEST(Fuse, AlphaOneGivesX) {
  const PropagationConfig cfg{1.0, 2};
  const auto h = fuse(propagate(identity2(), two_node(), cfg), cfg);
  EXPECT_EQ(h.data, identity2().data);
}

TEST(Fuse, TwoNodeChain) {
  const PropagationConfig cfg{0.5, 1};
  const auto h = fuse(propagate(identity2(), two_node(), cfg), cfg);
  EXPECT_NEAR(h(0, 0), 5.0 / 6, 1e-12);
  EXPECT_NEAR(h(0, 1), 1.0 / 6, 1e-12);
  EXPECT_NEAR(h(1, 0), 1.0 / 6, 1e-12);
  EXPECT_NEAR(h(1, 1), 5.0 / 6, 1e-12);
}

TEST(Fuse, ConnectedPairMovesCloser) {
  Rng rng(21);
  for (int trial = 0; trial < 20; ++trial) {
    const auto x = testutil::random_tensor<double>(rng, 2, 4);
    const PropagationConfig cfg{rng.uniform(0.05, 0.95), 1 + static_cast<int>(rng.index(4))};
    const auto h = fuse(propagate(x, two_node(), cfg), cfg);
    auto dist = [](const nx::Tensor<double>& m) {
      double s = 0;
      for (int c = 0; c < 4; ++c) s += (m(0, c) - m(1, c)) * (m(0, c) - m(1, c));
      return s;
    };
    EXPECT_LT(dist(h), dist(x));
  }
}

TEST(GraphIo, RoundTrip) {
  const auto g = build_cooc_graph({{0, 1, 2}, {2, 1}}, 4, 3);
  const auto path = testutil::temp_path("graph.tsv");
  write_graph(path, g);
  const auto back = read_graph(path, 4, 3);
  EXPECT_EQ(back.edges, g.edges);
}

TEST(AlignEmbeddings, ShapePreservedAndFinite) {
  Rng rng(3);
  const auto x = testutil::random_tensor<float>(rng, 5, 3);
  const auto g = build_cooc_graph({{0, 1, 2}, {3, 4}}, 5, 2);
  const auto h = align_embeddings(x, g, {});
  EXPECT_EQ(h.shape, x.shape);
  EXPECT_TRUE(h.all_finite());
  EXPECT_THROW(align_embeddings(x, build_cooc_graph({{0, 1}}, 4, 2), {}), ShapeError);
}

}  // namespace
}  // namespace s2gr::graph
