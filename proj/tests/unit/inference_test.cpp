#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <set>

#include "s2gr/errors.hpp"
#include "s2gr/inference.hpp"
#include "s2gr/io.hpp"
#include "test_util.hpp"

namespace s2gr::infer {
namespace {

using model::ModelConfig;
using model::S2GRModel;

ModelConfig small_config(bool no_reason = false) {
  ModelConfig c;
  c.encoder_layers = 2;
  c.decoder_layers = 2;
  c.d_model = 16;
  c.heads = 2;
  c.ffn = 32;
  c.dropout = 0;
  c.max_history = 8;
  c.no_reason = no_reason;
  return c;
}

std::vector<SemanticId> all_sids(int levels, int k) {
  std::vector<SemanticId> out{{}};
  for (int l = 0; l < levels; ++l) {
    std::vector<SemanticId> next;
    for (const auto& p : out)
      for (int c = 0; c < k; ++c) {
        auto s = p;
        s.push_back(c);
        next.push_back(s);
      }
    out = std::move(next);
  }
  return out;
}

std::vector<SemanticId> history(Rng& rng, int n, int levels, int k) {
  std::vector<SemanticId> h(static_cast<std::size_t>(n));
  for (auto& s : h)
    for (int l = 0; l < levels; ++l) s.push_back(static_cast<int>(rng.index(static_cast<std::size_t>(k))));
  return h;
}

TEST(BeamSearch, MatchesExhaustiveEnumeration) {
  for (bool no_reason : {false, true}) {
    for (std::uint64_t seed : {1, 2, 3}) {
      Rng rng(seed);
      S2GRModel m(small_config(no_reason), 2, 4, rng);
      const auto hist = history(rng, 5, 2, 4);
      auto sids = all_sids(2, 4);
      const auto lp = sequence_log_probs(m, hist, sids);
      std::vector<int> order(sids.size());
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return lp[a] > lp[b]; });

      const auto beams = beam_search(m, hist, 16, false, nullptr);
      ASSERT_EQ(beams.size(), 16u);
      for (std::size_t r = 0; r < 16; ++r) {
        EXPECT_EQ(beams[r].sid, sids[order[r]]) << "rank " << r;
        EXPECT_NEAR(beams[r].score, lp[order[r]], 1e-5);
      }
    }
  }
}

TEST(BeamSearch, GreedyWithWidthOne) {
  Rng rng(4);
  S2GRModel m(small_config(), 3, 5, rng);
  const auto hist = history(rng, 3, 3, 5);
  const auto best = beam_search(m, hist, 1, false, nullptr);
  ASSERT_EQ(best.size(), 1u);
  // Argmax chain, level by level, from full recomputation.
  SemanticId chain;
  for (int l = 0; l < 3; ++l) {
    std::vector<SemanticId> cands;
    for (int c = 0; c < 5; ++c) {
      auto s = chain;
      s.push_back(c);
      while (static_cast<int>(s.size()) < 3) s.push_back(0);
      cands.push_back(s);
    }
    // Level-l logits depend only on the teacher-forced prefix.
    nx::Tape<float> tape(false);
    const auto w = m.bind(tape);
    const std::vector<std::vector<SemanticId>> h(5, hist);
    const auto cross = m.cross_kv(w, m.encode_history(w, h, false, nullptr));
    const auto tr = m.stepwise_decode_train(w, cross, cands, false, nullptr);
    const auto row = tr.logits[l].value().row(0);
    chain.push_back(static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin()));
  }
  EXPECT_EQ(best[0].sid, chain);
}

TEST(BeamSearch, SortedDistinctAndMonotoneInWidth) {
  Rng rng(5);
  S2GRModel m(small_config(), 2, 4, rng);
  const auto hist = history(rng, 4, 2, 4);
  double prev_top = -1e300;
  for (int b = 1; b <= 16; ++b) {
    const auto beams = beam_search(m, hist, b, false, nullptr);
    EXPECT_EQ(static_cast<int>(beams.size()), b);
    std::set<SemanticId> distinct;
    for (std::size_t i = 0; i < beams.size(); ++i) {
      distinct.insert(beams[i].sid);
      if (i) EXPECT_GE(beams[i - 1].score, beams[i].score);
    }
    EXPECT_EQ(distinct.size(), beams.size());
    EXPECT_GE(beams[0].score, prev_top - 1e-5);
    prev_top = beams[0].score;
  }
}

TEST(BeamSearch, IncrementalScoresMatchRecomputation) {
  Rng rng(6);
  S2GRModel m(small_config(), 3, 6, rng);
  const std::vector<std::vector<SemanticId>> hists{history(rng, 2, 3, 6), history(rng, 7, 3, 6),
                                                   history(rng, 4, 3, 6)};
  const auto res = beam_search(m, hists, 8, false, nullptr);
  for (std::size_t u = 0; u < hists.size(); ++u) {
    std::vector<SemanticId> sids;
    for (const auto& s : res[u]) sids.push_back(s.sid);
    const auto lp = sequence_log_probs(m, hists[u], sids);
    for (std::size_t i = 0; i < sids.size(); ++i) EXPECT_NEAR(res[u][i].score, lp[i], 1e-5);
  }
}

TEST(BeamSearch, BatchedEqualsPerUser) {
  Rng rng(7);
  S2GRModel m(small_config(), 2, 5, rng);
  const std::vector<std::vector<SemanticId>> hists{history(rng, 3, 2, 5), history(rng, 6, 2, 5)};
  const auto batched = beam_search(m, hists, 6, false, nullptr);
  for (std::size_t u = 0; u < hists.size(); ++u) {
    const auto single = beam_search(m, hists[u], 6, false, nullptr);
    ASSERT_EQ(single.size(), batched[u].size());
    for (std::size_t i = 0; i < single.size(); ++i) {
      EXPECT_EQ(single[i].sid, batched[u][i].sid);
      EXPECT_NEAR(single[i].score, batched[u][i].score, 1e-5);
    }
  }
}

TEST(BeamSearch, ConstrainedOutputsAreCatalogSids) {
  Rng rng(8);
  S2GRModel m(small_config(), 3, 4, rng);
  const tok::SidTable table(3, 4, {{0, 1, 2}, {0, 1, 3}, {3, 3, 3}, {2, 0, 1}, {0, 2, 2}});
  const PrefixTrie trie(table);
  const auto beams = beam_search(m, history(rng, 3, 3, 4), 10, true, &trie);
  EXPECT_EQ(beams.size(), 5u);
  for (const auto& b : beams) EXPECT_TRUE(table.contains(b.sid));

  EXPECT_THROW(beam_search(m, history(rng, 3, 3, 4), 10, true, nullptr), ConfigError);
  const PrefixTrie empty;
  EXPECT_THROW(beam_search(m, history(rng, 3, 3, 4), 10, true, &empty), ConfigError);
  EXPECT_THROW(beam_search(m, history(rng, 3, 3, 4), 0, false, nullptr), ConfigError);
}

TEST(PrefixTrie, Allows) {
  const tok::SidTable table(2, 3, {{0, 1}, {2, 2}});
  const PrefixTrie trie(table);
  EXPECT_TRUE(trie.allows(std::vector<int>{}, 0));
  EXPECT_FALSE(trie.allows(std::vector<int>{}, 1));
  EXPECT_TRUE(trie.allows(std::vector<int>{0}, 1));
  EXPECT_FALSE(trie.allows(std::vector<int>{0}, 2));
  EXPECT_TRUE(trie.allows(std::vector<int>{2}, 2));
}

TEST(ResolveItems, OrderCollisionsAndInvalid) {
  const tok::SidTable table(2, 4, {{0, 0}, {1, 1}, {2, 2}, {1, 1}, {3, 0}});
  const std::vector<ScoredSid> unique{{{2, 2}, -0.1}, {{0, 0}, -0.5}, {{3, 0}, -0.9}};
  const auto a = resolve_items(unique, table, 10);
  EXPECT_EQ(a.items, (std::vector<int>{2, 0, 4}));
  EXPECT_EQ(a.scores, (std::vector<double>{-0.1, -0.5, -0.9}));

  const std::vector<ScoredSid> collide{{{1, 1}, -0.2}, {{0, 0}, -0.3}};
  const auto b = resolve_items(collide, table, 10);
  EXPECT_EQ(b.items, (std::vector<int>{1, 3, 0}));
  EXPECT_EQ(b.scores[0], b.scores[1]);

  const std::vector<ScoredSid> invalid{{{3, 3}, -0.1}, {{2, 2}, -0.4}};
  EXPECT_EQ(resolve_items(invalid, table, 10).items, std::vector<int>{2});
  EXPECT_EQ(resolve_items(collide, table, 2).items, (std::vector<int>{1, 3}));
}

TEST(Recommendations, TsvRoundTrip) {
  std::vector<Recommendation> recs(2);
  recs[0].user = 0;
  recs[0].ranked.items = {4, 1, 7};
  recs[0].ranked.scores = {-0.25, -1.5, -3.125};
  recs[1].user = 1;
  recs[1].ranked.items = {2};
  recs[1].ranked.scores = {-0.75};
  const std::vector<std::string> names{"alice", "bob"};
  const auto path = testutil::temp_path("recs.tsv");
  write_recommendations(path, recs, &names);
  const auto text = io::read_text(path);
  EXPECT_EQ(text.substr(0, text.find('\n')), "alice\t1\t4\t-0.25");
  const auto back = read_recommendations(path, &names);
  ASSERT_EQ(back.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(back[i].user, recs[i].user);
    EXPECT_EQ(back[i].ranked.items, recs[i].ranked.items);
    EXPECT_EQ(back[i].ranked.scores, recs[i].ranked.scores);
  }
}

TEST(Recommendations, RecommendProducesCatalogItems) {
  Rng rng(9);
  S2GRModel m(small_config(), 2, 4, rng);
  std::vector<SemanticId> codes;
  for (int i = 0; i < 12; ++i) codes.push_back({i % 4, (i / 4) % 4});
  const tok::SidTable table(2, 4, codes);
  std::vector<corpus::UserExample> ex{{0, {1, 2, 3}, 4}, {1, {5}, 6}, {2, {7, 8, 9, 10}, 11}};
  InferenceConfig cfg;
  cfg.k_eval = 5;
  cfg.chunk = 2;
  const auto recs = recommend(m, ex, table, cfg);
  ASSERT_EQ(recs.size(), 3u);
  for (std::size_t u = 0; u < 3; ++u) {
    EXPECT_EQ(recs[u].user, ex[u].user);
    EXPECT_EQ(recs[u].ranked.items.size(), 5u);
    std::set<int> distinct(recs[u].ranked.items.begin(), recs[u].ranked.items.end());
    EXPECT_EQ(distinct.size(), 5u);
  }
}

}  // namespace
}  // namespace s2gr::infer
