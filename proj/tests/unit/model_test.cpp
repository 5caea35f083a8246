#include <fmt/format.h>
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "s2gr/errors.hpp"
#include "s2gr/model.hpp"
#include "s2gr/numerics/gradcheck.hpp"
#include "test_util.hpp"

namespace s2gr::model {
namespace {

using nx::Tensor;
using testutil::random_tensor;
using VarD = nx::Var<double>;

ModelConfig tiny_config() {
  ModelConfig c;
  c.encoder_layers = 2;
  c.decoder_layers = 2;
  c.d_model = 16;
  c.heads = 2;
  c.ffn = 32;
  c.dropout = 0.0;
  c.max_history = 6;
  c.clusters = 3;
  c.val_users = 0;
  return c;
}

std::vector<SemanticId> random_history(Rng& rng, int n, int levels, int k) {
  std::vector<SemanticId> h(static_cast<std::size_t>(n), SemanticId(static_cast<std::size_t>(levels)));
  for (auto& s : h)
    for (auto& c : s) c = static_cast<int>(rng.index(static_cast<std::size_t>(k)));
  return h;
}

double max_abs_diff(const Tensor<float>& a, const Tensor<float>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) m = std::max(m, std::abs(double(a.data[i]) - b.data[i]));
  return m;
}

// ---- closed-form losses ----------------------------------------------------

TEST(AlignLoss, SingleClusterIsZero) {
  nx::Tape<double> tape;
  auto t = tape.leaf(Tensor<double>({2, 2}, {1, 2, -3, 0.5}));
  auto loss = align_loss<double>(t, Tensor<double>({1, 2}, {0.3, 0.1}), std::vector<int>{0, 0}, 0.07);
  EXPECT_NEAR(loss.item(), 0.0, 1e-12);
}

TEST(AlignLoss, TwoClassClosedForm) {
  nx::Tape<double> tape;
  auto t = tape.leaf(Tensor<double>({1, 2}, {2, 0}));
  auto loss = align_loss<double>(t, Tensor<double>({2, 2}, {1, 0, 0, 3}), std::vector<int>{0}, 1.0);
  const double e = std::exp(1.0);
  EXPECT_NEAR(loss.item(), -std::log(e / (e + 1)), 1e-12);
  EXPECT_NEAR(loss.item(), 0.3133, 1e-4);
}

TEST(AlignLoss, EqualCosineGivesLogK) {
  nx::Tape<double> tape;
  // t along (1,1,1,1); centroids are the four unit axes.
  auto t = tape.leaf(Tensor<double>({1, 4}, {1, 1, 1, 1}));
  Tensor<double> c(4, 4, 0.0);
  for (int i = 0; i < 4; ++i) c(i, i) = 1 + i;
  auto loss = align_loss<double>(t, c, std::vector<int>{2}, 0.5);
  EXPECT_NEAR(loss.item(), std::log(4.0), 1e-12);
}

TEST(AlignLoss, ZeroNormIsDomainError) {
  nx::Tape<double> tape;
  auto t = tape.leaf(Tensor<double>(1, 2, 0.0));
  EXPECT_THROW(align_loss<double>(t, Tensor<double>({1, 2}, {1, 0}), std::vector<int>{0}, 1.0), DomainError);
}

TEST(AlignLoss, InvariantToPositiveScaling) {
  Rng rng(4);
  const auto t = random_tensor<double>(rng, 5, 6);
  const auto c = random_tensor<double>(rng, 4, 6);
  const std::vector<int> cl{0, 3, 1, 1, 2};
  nx::Tape<double> tape;
  const double base = align_loss<double>(tape.leaf(t), c, cl, 0.07).item();
  for (double s : {0.01, 0.5, 3.0, 250.0}) {
    auto scaled = t;
    for (auto& v : scaled.data) v *= s;
    EXPECT_NEAR(align_loss<double>(tape.leaf(scaled), c, cl, 0.07).item(), base, 1e-6);
  }
}

TEST(InfoNce, ClosedForms) {
  nx::Tape<double> tape;
  auto one = infonce_loss<double>(tape.leaf(Tensor<double>({1, 2}, {1, 2})), tape.leaf(Tensor<double>({1, 2}, {-1, 5})), 0.07);
  EXPECT_NEAR(one.item(), 0.0, 1e-12);

  auto two = infonce_loss<double>(tape.leaf(Tensor<double>({2, 2}, {1, 0, 0, 2})),
                                  tape.leaf(Tensor<double>({2, 2}, {3, 0, 0, 1})), 1.0);
  const double e = std::exp(1.0);
  EXPECT_NEAR(two.item(), -std::log(e / (e + 1)), 1e-12);

  // Every pair has the same cosine.
  auto flat = infonce_loss<double>(tape.leaf(Tensor<double>({3, 2}, {1, 1, 2, 2, 3, 3})),
                                   tape.leaf(Tensor<double>({3, 2}, {1, 1, 5, 5, 0.1, 0.1})), 0.3);
  EXPECT_NEAR(flat.item(), std::log(3.0), 1e-12);
}

TEST(RegLoss, ClosedFormsAndStopGradient) {
  nx::Tape<double> tape;
  auto t = tape.leaf(Tensor<double>({3, 2}, {1, 2, 1, 0, 1, 1}));
  EXPECT_NEAR(reg_loss<double>(t, tape.leaf(Tensor<double>({3, 2}, {2, 4, 3, 0, 5, 5}))).item(), 0.0, 1e-12);
  EXPECT_NEAR(reg_loss<double>(tape.leaf(Tensor<double>({1, 2}, {1, 0})), tape.leaf(Tensor<double>({1, 2}, {0, 4})))
                  .item(),
              1.0, 1e-12);
  EXPECT_NEAR(reg_loss<double>(tape.leaf(Tensor<double>({1, 2}, {1, 1})), tape.leaf(Tensor<double>({1, 2}, {-2, -2})))
                  .item(),
              2.0, 1e-12);

  Rng rng(3);
  nx::Tape<double> g;
  auto t1 = g.leaf(random_tensor<double>(rng, 4, 5));
  auto vg = g.leaf(random_tensor<double>(rng, 4, 5));
  auto loss = reg_loss<double>(t1, vg);
  g.backward(loss);
  for (double v : vg.grad().data) EXPECT_EQ(v, 0.0);
  double tn = 0;
  for (double v : t1.grad().data) tn += std::abs(v);
  EXPECT_GT(tn, 0.0);
}

TEST(RecLoss, UniformLogitsGiveLLogK) {
  nx::Tape<double> tape;
  const std::vector<VarD> logits{tape.leaf(Tensor<double>(2, 4, 0.0)), tape.leaf(Tensor<double>(2, 4, 0.0)),
                                 tape.leaf(Tensor<double>(2, 4, 0.0))};
  auto loss = rec_loss<double>(logits, {{0, 1}, {2, 3}, {3, 3}});
  EXPECT_NEAR(loss.item(), 3 * std::log(4.0), 1e-12);
}

// ---- gradient checks -------------------------------------------------------

TEST(ModelLosses, PassGradCheck) {
  Rng rng(21);
  for (int trial = 0; trial < 3; ++trial) {
    const auto c = random_tensor<double>(rng, 4, 6);
    const std::vector<int> cl{0, 3, 1, 2, 1};
    auto align = nx::grad_check(
        [&](nx::Tape<double>&, std::span<const VarD> in) { return align_loss<double>(in[0], c, cl, 0.07); },
        {random_tensor<double>(rng, 5, 6)});
    EXPECT_TRUE(align.ok(1e-4)) << align.max_rel_error;

    auto nce = nx::grad_check(
        [&](nx::Tape<double>&, std::span<const VarD> in) { return infonce_loss<double>(in[0], in[1], 0.07); },
        {random_tensor<double>(rng, 5, 6), random_tensor<double>(rng, 5, 6)});
    EXPECT_TRUE(nce.ok(1e-4)) << nce.max_rel_error;

    auto reg = nx::grad_check(
        [&](nx::Tape<double>&, std::span<const VarD> in) { return reg_loss<double>(in[0], in[1]); },
        {random_tensor<double>(rng, 5, 6), random_tensor<double>(rng, 5, 6)});
    EXPECT_TRUE(reg.ok(1e-4)) << reg.max_rel_error;

    const std::vector<std::vector<int>> targets{{1, 0, 3}, {2, 2, 0}};
    auto rec = nx::grad_check(
        [&](nx::Tape<double>&, std::span<const VarD> in) { return rec_loss<double>(in, targets); },
        {random_tensor<double>(rng, 3, 4, 2.0), random_tensor<double>(rng, 3, 4, 2.0)});
    EXPECT_TRUE(rec.ok(1e-4)) << rec.max_rel_error;
  }
}

// ---- architecture ----------------------------------------------------------

class ModelFixture : public ::testing::Test {
 protected:
  void SetUp() override {
    Rng rng(5);
    model = S2GRModel(tiny_config(), 3, 4, rng);
  }
  S2GRModel model;
};

TEST_F(ModelFixture, EncoderShapesAndTruncation) {
  Rng rng(1);
  nx::Tape<float> tape(false);
  const auto w = model.bind(tape);
  const auto five = random_history(rng, 5, 3, 4);
  const auto enc = model.encode_history(w, {five}, false, nullptr);
  EXPECT_EQ(enc.h.rows(), 15u);
  EXPECT_EQ(enc.h.cols(), 16u);
  EXPECT_EQ(enc.key_len, std::vector<int>{15});

  auto nine = random_history(rng, 3, 3, 4);
  const auto recent = random_history(rng, 6, 3, 4);
  nine.insert(nine.end(), recent.begin(), recent.end());
  const auto a = model.encode_history(w, {nine}, false, nullptr);
  const auto b = model.encode_history(w, {recent}, false, nullptr);
  EXPECT_EQ(a.h.rows(), 18u);
  EXPECT_EQ(a.h.value().data, b.h.value().data);
  EXPECT_THROW(model.encode_history(w, {{}}, false, nullptr), DomainError);
}

TEST_F(ModelFixture, PaddingDoesNotLeak) {
  Rng rng(2);
  nx::Tape<float> tape(false);
  const auto w = model.bind(tape);
  const auto shortest = random_history(rng, 2, 3, 4);
  const auto longest = random_history(rng, 5, 3, 4);
  const auto alone = model.encode_history(w, {shortest}, false, nullptr);
  const auto batched = model.encode_history(w, {longest, shortest}, false, nullptr);
  for (std::size_t r = 0; r < 6; ++r)
    for (std::size_t c = 0; c < 16; ++c) EXPECT_NEAR(alone.h.value()(r, c), batched.h.value()(15 + r, c), 1e-5);
}

TEST_F(ModelFixture, TraceShapes) {
  Rng rng(3);
  nx::Tape<float> tape(false);
  const auto w = model.bind(tape);
  const auto cross = model.cross_kv(w, model.encode_history(w, {random_history(rng, 4, 3, 4)}, false, nullptr));
  const std::vector<SemanticId> target{{1, 2, 3}};
  const auto tr = model.stepwise_decode_train(w, cross, target, false, nullptr);
  EXPECT_EQ(tr.think.size(), 3u);
  EXPECT_EQ(tr.logits.size(), 3u);
  EXPECT_EQ(tr.decoder_input_len, 7);
  for (const auto& l : tr.logits) {
    EXPECT_EQ(l.cols(), 4u);
    EXPECT_TRUE(l.value().all_finite());
  }
  for (const auto& t : tr.think) EXPECT_EQ(t.cols(), 16u);
  EXPECT_EQ(model.global_decode(w, cross, false, nullptr).cols(), 16u);
}

TEST(ModelShapes, NoReasonAndSingleLevel) {
  Rng rng(4);
  auto cfg = tiny_config();
  cfg.no_reason = true;
  S2GRModel m(cfg, 3, 4, rng);
  nx::Tape<float> tape(false);
  const auto w = m.bind(tape);
  const auto cross = m.cross_kv(w, m.encode_history(w, {random_history(rng, 3, 3, 4)}, false, nullptr));
  const std::vector<SemanticId> target{{0, 1, 2}};
  const auto tr = m.stepwise_decode_train(w, cross, target, false, nullptr);
  EXPECT_TRUE(tr.think.empty());
  EXPECT_EQ(tr.logits.size(), 3u);
  EXPECT_EQ(tr.decoder_input_len, 4);

  S2GRModel one(tiny_config(), 1, 5, rng);
  nx::Tape<float> t1(false);
  const auto w1 = one.bind(t1);
  const auto c1 = one.cross_kv(w1, one.encode_history(w1, {random_history(rng, 2, 1, 5)}, false, nullptr));
  const std::vector<SemanticId> tgt{{4}};
  const auto tr1 = one.stepwise_decode_train(w1, c1, tgt, false, nullptr);
  EXPECT_EQ(tr1.think.size(), 1u);
  EXPECT_EQ(tr1.logits.size(), 1u);
  EXPECT_EQ(tr1.decoder_input_len, 3);
}

TEST_F(ModelFixture, IncrementalMatchesFullRecomputation) {
  Rng rng(6);
  for (bool no_reason : {false, true}) {
    auto cfg = tiny_config();
    cfg.no_reason = no_reason;
    Rng init(9);
    S2GRModel m(cfg, 3, 4, init);
    nx::Tape<float> tape(false);
    const auto w = m.bind(tape);
    const std::vector<std::vector<SemanticId>> hist{random_history(rng, 4, 3, 4), random_history(rng, 2, 3, 4)};
    const auto cross = m.cross_kv(w, m.encode_history(w, hist, false, nullptr));
    const std::vector<SemanticId> targets{{3, 0, 1}, {2, 2, 2}};
    const auto full = m.stepwise_decode_train(w, cross, targets, false, nullptr);
    const auto inc = m.stepwise_decode_incremental(w, cross, targets);
    ASSERT_EQ(full.logits.size(), inc.logits.size());
    for (std::size_t l = 0; l < full.logits.size(); ++l)
      EXPECT_LE(max_abs_diff(full.logits[l].value(), inc.logits[l].value()), 1e-5);
    for (std::size_t l = 0; l < full.think.size(); ++l)
      EXPECT_LE(max_abs_diff(full.think[l].value(), inc.think[l].value()), 1e-5);
  }
}

TEST_F(ModelFixture, GlobalDecodeIgnoresTarget) {
  Rng rng(7);
  const auto hist = random_history(rng, 3, 3, 4);
  nx::Tape<float> tape(false);
  const auto w = model.bind(tape);
  const auto cross = model.cross_kv(w, model.encode_history(w, {hist, hist}, false, nullptr));
  const auto vg = model.global_decode(w, cross, false, nullptr).value();
  for (std::size_t c = 0; c < vg.cols(); ++c) EXPECT_NEAR(vg(0, c), vg(1, c), 1e-6);
  const auto again = model.global_decode(w, cross, false, nullptr).value();
  EXPECT_EQ(vg.data, again.data);
}

TEST(TargetEmbedding, MeanOfCodeEmbeddings) {
  Rng rng(8);
  auto cfg = tiny_config();
  cfg.d_model = 2;
  cfg.heads = 1;
  S2GRModel m(cfg, 3, 2, rng);
  auto& emb = m.params().find("tok_emb")->value;
  const float rows[3][2] = {{1, 0}, {0, 1}, {1, 1}};
  for (int l = 0; l < 3; ++l)
    for (int c = 0; c < 2; ++c) emb(m.token_id(l, 1), c) = rows[l][c];
  nx::Tape<float> tape;
  const std::vector<SemanticId> target{{1, 1, 1}};
  auto v = m.target_item_embedding(m.bind(tape), target).value();
  EXPECT_NEAR(v(0, 0), 2.0 / 3, 1e-6);
  EXPECT_NEAR(v(0, 1), 2.0 / 3, 1e-6);

  for (auto& x : emb.data) x *= 2;
  nx::Tape<float> t2;
  auto v2 = m.target_item_embedding(m.bind(t2), target).value();
  EXPECT_NEAR(v2(0, 0), 4.0 / 3, 1e-6);
}

// ---- total loss ------------------------------------------------------------

AlignContext random_context(Rng& rng, int levels, int k, int kp, int d) {
  AlignContext ctx;
  for (int l = 0; l < levels; ++l) {
    ctx.centroids.push_back(random_tensor<float>(rng, kp, d));
    std::vector<int> map(static_cast<std::size_t>(k));
    for (int c = 0; c < k; ++c) map[c] = c % kp;
    ctx.code_cluster.push_back(map);
  }
  return ctx;
}

TEST_F(ModelFixture, LossBreakdownAdditivity) {
  Rng rng(10);
  const auto ctx = random_context(rng, 3, 4, 3, 16);
  const std::vector<std::vector<SemanticId>> hist{random_history(rng, 3, 3, 4), random_history(rng, 5, 3, 4),
                                                  random_history(rng, 1, 3, 4)};
  const std::vector<SemanticId> targets{{0, 1, 2}, {3, 3, 3}, {1, 0, 2}};
  nx::Tape<float> tape;
  const auto w = model.bind(tape);
  const auto cross = model.cross_kv(w, model.encode_history(w, hist, false, nullptr));
  const auto lb = total_loss(model, w, cross, targets, ctx, false, nullptr);
  double align = 0;
  for (double a : lb.align) align += a;
  EXPECT_NEAR(lb.think, align + lb.infonce + model.config().lambda * lb.reg, 1e-6);
  EXPECT_NEAR(lb.total, lb.rec + lb.think, 1e-6);
  EXPECT_NEAR(lb.total_var.item(), lb.total, 1e-5 * (1 + std::abs(lb.total)));
  EXPECT_EQ(lb.align.size(), 3u);
}

TEST_F(ModelFixture, UniformLogitsAndLambdaLinearity) {
  Rng rng(11);
  model.params().find("out.w")->value.data.assign(model.params().find("out.w")->value.data.size(), 0.0f);
  const auto ctx = random_context(rng, 3, 4, 3, 16);
  const std::vector<std::vector<SemanticId>> hist{random_history(rng, 3, 3, 4)};
  const std::vector<SemanticId> targets{{2, 1, 0}};
  auto run = [&](const S2GRModel& m) {
    nx::Tape<float> tape;
    const auto w = m.bind(tape);
    return total_loss(m, w, m.cross_kv(w, m.encode_history(w, hist, false, nullptr)), targets, ctx, false, nullptr);
  };
  const auto base = run(model);
  EXPECT_NEAR(base.rec, 3 * std::log(4.0), 1e-5);

  auto cfg = model.config();
  cfg.lambda *= 2;
  auto ck = model.to_checkpoint();
  for (auto& [k, v] : ck.meta)
    if (k == "lambda") v = fmt::format("{}", cfg.lambda);
  const auto doubled = S2GRModel::from_checkpoint(ck);
  const auto twice = run(doubled);
  EXPECT_NEAR(twice.total - base.total, model.config().lambda * base.reg, 1e-6);
}

TEST_F(ModelFixture, NoThinkLossDropsThinkTerms) {
  Rng rng(12);
  const auto ctx = random_context(rng, 3, 4, 3, 16);
  auto ck = model.to_checkpoint();
  for (auto& [k, v] : ck.meta)
    if (k == "no_think_loss") v = "1";
  const auto m = S2GRModel::from_checkpoint(ck);
  nx::Tape<float> tape;
  const auto w = m.bind(tape);
  const std::vector<std::vector<SemanticId>> hist{random_history(rng, 2, 3, 4)};
  const std::vector<SemanticId> targets{{1, 1, 1}};
  const auto lb = total_loss(m, w, m.cross_kv(w, m.encode_history(w, hist, false, nullptr)), targets, ctx, false,
                             nullptr);
  EXPECT_EQ(lb.think, 0.0);
  EXPECT_EQ(lb.total, lb.rec);
}

TEST_F(ModelFixture, CheckpointRoundTrip) {
  Rng rng(13);
  const auto path = testutil::temp_path("model.ckpt");
  nx::write_checkpoint(path, model.to_checkpoint());
  const auto back = S2GRModel::from_checkpoint(nx::read_checkpoint(path));
  const std::vector<std::vector<SemanticId>> hist{random_history(rng, 3, 3, 4)};
  const std::vector<SemanticId> targets{{0, 3, 1}};
  auto logits = [&](const S2GRModel& m) {
    nx::Tape<float> tape(false);
    const auto w = m.bind(tape);
    return m.stepwise_decode_train(w, m.cross_kv(w, m.encode_history(w, hist, false, nullptr)), targets, false,
                                   nullptr)
        .logits[2]
        .value();
  };
  EXPECT_EQ(logits(model).data, logits(back).data);
}

// ---- training --------------------------------------------------------------

struct TinyCorpus {
  corpus::SplitDataset data;
  tok::SidTable table;
  sem::CentroidSet centroids;
};

TinyCorpus ten_sequences(int d) {
  TinyCorpus c;
  Rng rng(31);
  std::vector<SemanticId> codes;
  for (int i = 0; i < 30; ++i) codes.push_back({i % 8, (i / 8) * 2 + i % 2});
  c.table = tok::SidTable(2, 8, codes);
  for (int u = 0; u < 10; ++u) c.data.train_sequences.push_back({3 * u, 3 * u + 1, 3 * u + 2});
  std::vector<Tensor<double>> books{random_tensor<double>(rng, 8, d), random_tensor<double>(rng, 8, d)};
  c.centroids = sem::cluster_codebooks(books, 4, 1);
  return c;
}

ModelConfig overfit_config() {
  auto cfg = tiny_config();
  cfg.d_model = 32;
  cfg.heads = 2;
  cfg.ffn = 64;
  cfg.clusters = 4;
  cfg.epochs = 150;
  cfg.batch_size = 20;
  cfg.lr = 3e-3;
  return cfg;
}

TEST(TrainModel, OverfitsTenSequences) {
  auto c = ten_sequences(32);
  const auto cfg = overfit_config();
  Rng rng(cfg.seed);
  S2GRModel m(cfg, 2, 8, rng);
  const auto report = train_model(m, {&c.data, &c.table, &c.centroids, nullptr});
  ASSERT_EQ(report.epochs.size(), 150u);
  EXPECT_LT(report.epochs.back().loss_rec, 0.1);
  EXPECT_LT(report.epochs.back().loss_total, report.epochs.front().loss_total);
}

TEST(TrainModel, SameSeedGivesIdenticalCurves) {
  auto c = ten_sequences(32);
  auto cfg = overfit_config();
  cfg.epochs = 4;
  cfg.dropout = 0.1;
  auto run = [&] {
    Rng rng(cfg.seed);
    S2GRModel m(cfg, 2, 8, rng);
    std::vector<std::string> lines;
    train_model(m, {&c.data, &c.table, &c.centroids, nullptr}, {},
                [&](const EpochLog& e) { lines.push_back(format_epoch_log(e)); });
    return lines;
  };
  const auto a = run();
  EXPECT_EQ(a, run());
  ASSERT_EQ(a.size(), 4u);
  EXPECT_EQ(std::count(a[0].begin(), a[0].end(), '\t'), 4);
}

TEST(TrainModel, RejectsMismatchedArtifacts) {
  auto c = ten_sequences(32);
  auto cfg = overfit_config();
  cfg.d_model = 16;
  Rng rng(1);
  S2GRModel m(cfg, 2, 8, rng);
  EXPECT_THROW(train_model(m, {&c.data, &c.table, &c.centroids, nullptr}), ConfigError);
  S2GRModel wrong_k(overfit_config(), 2, 9, rng);
  EXPECT_THROW(train_model(wrong_k, {&c.data, &c.table, &c.centroids, nullptr}), ConfigError);
}

TEST(ModelConfig, Validation) {
  auto cfg = tiny_config();
  cfg.heads = 3;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = tiny_config();
  cfg.tau = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = tiny_config();
  cfg.lambda = -1;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

}  // namespace
}  // namespace s2gr::model
