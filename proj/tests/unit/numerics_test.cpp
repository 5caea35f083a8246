#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <vector>

#include "s2gr/numerics/adam.hpp"
#include "s2gr/numerics/checkpoint.hpp"
#include "s2gr/numerics/functional.hpp"
#include "s2gr/numerics/gradcheck.hpp"
#include "s2gr/numerics/ops.hpp"
#include "test_util.hpp"

namespace s2gr::nx {
namespace {

using testutil::random_tensor;

TEST(CosineSim, ParallelOrthogonalAndDiagonal) {
  const std::vector<double> a{1, 2};
  EXPECT_NEAR(cosine_sim(a, a), 1.0, 1e-15);
  EXPECT_NEAR(cosine_sim(std::vector<double>{1, 0}, std::vector<double>{0, 1}), 0.0, 1e-15);
  EXPECT_NEAR(cosine_sim(std::vector<double>{1, 0}, std::vector<double>{1, 1}), 0.70710678, 1e-8);
}

TEST(CosineSim, ZeroNormIsDomainError) {
  EXPECT_THROW(cosine_sim(std::vector<double>{0, 0}, std::vector<double>{1, 1}), DomainError);
}

TEST(SoftmaxCrossEntropy, Examples) {
  EXPECT_NEAR(softmax_cross_entropy(std::vector<double>{0.3, 0.3, 0.3, 0.3}, 2), std::log(4.0), 1e-12);
  // Direct evaluation: log(1 + 2 e^-10).
  EXPECT_NEAR(softmax_cross_entropy(std::vector<double>{10, 0, 0}, 0), std::log1p(2 * std::exp(-10.0)),
              1e-15);
  EXPECT_NEAR(softmax_cross_entropy(std::vector<double>{10, 0, 0}, 0), 9.0799e-5, 1e-8);
  EXPECT_NEAR(softmax_cross_entropy(std::vector<double>{0, 0}, 1), std::log(2.0), 1e-12);
  EXPECT_THROW(softmax_cross_entropy(std::vector<double>{0, 0}, 2), IndexError);
  EXPECT_THROW(softmax_cross_entropy(std::vector<double>{0, 0}, -1), IndexError);
}

TEST(Softmax, SumsToOne) {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> v(7);
    for (auto& x : v) x = rng.normal(0, 10);
    const auto p = softmax<double>(v);
    EXPECT_NEAR(std::accumulate(p.begin(), p.end(), 0.0), 1.0, 1e-9);
  }
}

TEST(Adam, ZeroGradientLeavesParamsUnchanged) {
  Tensor<double> p(2, 3, 1.5);
  Tensor<double> g(2, 3, 0.0);
  AdamState<double> st;
  Tensor<double>* ps[] = {&p};
  const Tensor<double>* gs[] = {&g};
  adam_update<double>(ps, gs, st);
  for (double x : p.data) EXPECT_EQ(x, 1.5);
  EXPECT_EQ(st.step, 1);
}

TEST(Adam, FirstStepMatchesClosedForm) {
  Tensor<double> p = Tensor<double>::scalar(0.0);
  Tensor<double> g = Tensor<double>::scalar(2.0);
  AdamState<double> st;
  st.config.lr = 0.1;
  Tensor<double>* ps[] = {&p};
  const Tensor<double>* gs[] = {&g};
  adam_update<double>(ps, gs, st);
  EXPECT_NEAR(p.data[0], -0.1 * 2.0 / (2.0 + 1e-8), 1e-12);
}

TEST(Adam, StepCounterIncreasesAndShapesChecked) {
  Tensor<double> p(1, 2), g(1, 2, 1.0), bad(2, 1, 1.0);
  AdamState<double> st;
  Tensor<double>* ps[] = {&p};
  const Tensor<double>* gs[] = {&g};
  for (int i = 1; i <= 3; ++i) {
    adam_update<double>(ps, gs, st);
    EXPECT_EQ(st.step, i);
  }
  const Tensor<double>* bs[] = {&bad};
  EXPECT_THROW(adam_update<double>(ps, bs, st), ShapeError);
}

TEST(Adam, DeterministicAcrossRuns) {
  auto run = [] {
    Rng rng(11);
    Tensor<float> p = random_tensor<float>(rng, 4, 4);
    AdamState<float> st;
    for (int i = 0; i < 20; ++i) {
      Tensor<float> g = random_tensor<float>(rng, 4, 4);
      Tensor<float>* ps[] = {&p};
      const Tensor<float>* gs[] = {&g};
      adam_update<float>(ps, gs, st);
    }
    return p.data;
  };
  EXPECT_EQ(run(), run());
}

TEST(GradCheck, QuadraticIsExact) {
  const auto r = grad_check([](Tape<double>&, const Var<double>& x) { return sum(mul(x, x)); },
                            Tensor<double>::scalar(3.0));
  EXPECT_TRUE(r.finite);
  EXPECT_LE(r.max_rel_error, 1e-8);
}

TEST(GradCheck, ReportsNonFinite) {
  const auto r = grad_check(
      [](Tape<double>&, const Var<double>& x) { return sum(exp(scale(x, 1000.0))); },
      Tensor<double>::scalar(1.0));
  EXPECT_FALSE(r.finite);
}

TEST(GradCheck, RejectsNonPositiveStep) {
  EXPECT_THROW(grad_check([](Tape<double>&, const Var<double>& x) { return sum(x); },
                          Tensor<double>::scalar(1.0), 0.0),
               ConfigError);
}

TEST(StopGradient, CutsGradientButPassesValue) {
  Tape<double> t;
  auto x = t.leaf(Tensor<double>::row_vector({2.0, -1.0}));
  auto y = sum(mul(x, stop_gradient(x)));
  EXPECT_DOUBLE_EQ(y.item(), 5.0);
  t.backward(y);
  const auto g = x.grad();
  EXPECT_DOUBLE_EQ(g.data[0], 2.0);  // only the live branch contributes
  EXPECT_DOUBLE_EQ(g.data[1], -1.0);
}

TEST(StopGradient, GradCheckHoldsBlockedBranchFixed) {
  // f(x) = sum(x * sg(x)); with sg replay the FD derivative is sg(x), not 2x.
  const auto r = grad_check(
      [](Tape<double>&, std::span<const Var<double>> in) { return sum(mul(in[0], stop_gradient(in[0]))); },
      {Tensor<double>::row_vector({0.7, -1.3, 2.0})});
  EXPECT_LE(r.max_rel_error, 1e-8);
}

// Per-op gradient checks at 64-bit.
class OpGradient : public ::testing::Test {
 protected:
  Rng rng{1234};
  void expect_ok(const TapeFunction& f, const std::vector<Tensor<double>>& pt, double tol = 1e-6) {
    const auto r = grad_check(f, pt);
    EXPECT_TRUE(r.finite);
    EXPECT_LE(r.max_rel_error, tol);
  }
};

TEST_F(OpGradient, ElementwiseAndBroadcast) {
  auto a = random_tensor<double>(rng, 3, 4), b = random_tensor<double>(rng, 3, 4);
  auto row = random_tensor<double>(rng, 1, 4), col = random_tensor<double>(rng, 3, 1);
  auto w = random_tensor<double>(rng, 3, 4);
  expect_ok(
      [&](Tape<double>& t, std::span<const Var<double>> in) {
        auto y = add_row(mul(sub(in[0], in[1]), add(in[0], in[1])), in[2]);
        y = mul_col(y, in[3]);
        return sum(mul(add_scalar(scale(y, 0.5), 0.1), t.constant(w)));
      },
      {a, b, row, col});
}

TEST_F(OpGradient, MatmulVariants) {
  auto a = random_tensor<double>(rng, 3, 5), b = random_tensor<double>(rng, 5, 2),
       c = random_tensor<double>(rng, 4, 5), bias = random_tensor<double>(rng, 1, 2);
  expect_ok(
      [](Tape<double>&, std::span<const Var<double>> in) {
        auto y = linear(in[0], in[1], in[3]);
        auto z = matmul_nt(in[0], in[2]);
        return add(sum(mul(y, y)), sum(mul(z, z)));
      },
      {a, b, c, bias});
}

TEST_F(OpGradient, ReluExpLog) {
  auto a = random_tensor<double>(rng, 2, 5);
  for (auto& v : a.data)
    if (std::abs(v) < 0.05) v = 0.3;  // keep away from the kink
  expect_ok(
      [](Tape<double>&, std::span<const Var<double>> in) {
        auto y = relu(in[0]);
        return sum(log(add_scalar(exp(y), 1.0)));
      },
      {a});
}

TEST_F(OpGradient, SlicesGatherConcatInterleave) {
  auto a = random_tensor<double>(rng, 4, 3), b = random_tensor<double>(rng, 2, 3);
  auto w = random_tensor<double>(rng, 7, 3);
  expect_ok(
      [&](Tape<double>& t, std::span<const Var<double>> in) {
        const std::vector<int> ids{3, 0, 3};
        auto g = gather_rows(in[0], ids);
        auto s = slice_rows(in[0], 1, 2);
        std::vector<Var<double>> parts{g, s, in[1]};
        auto c = concat_rows(std::span<const Var<double>>(parts));
        auto cc = slice_cols(c, 1, 2);
        std::vector<Var<double>> pieces{in[0], in[1]};
        const std::vector<int> part{0, 1, 0, 1}, row{2, 0, 1, 1};
        auto il = interleave_rows(std::span<const Var<double>>(pieces), part, row);
        return add(sum(mul(c, t.constant(w))), add(sum(mul(cc, cc)), sum(mul(il, il))));
      },
      {a, b});
}

TEST_F(OpGradient, LayerNorm) {
  auto x = random_tensor<double>(rng, 3, 6), g = random_tensor<double>(rng, 1, 6),
       b = random_tensor<double>(rng, 1, 6), w = random_tensor<double>(rng, 3, 6);
  expect_ok(
      [&](Tape<double>& t, std::span<const Var<double>> in) {
        return sum(mul(layer_norm(in[0], in[1], in[2]), t.constant(w)));
      },
      {x, g, b});
}

TEST_F(OpGradient, CosineAndLogSoftmax) {
  auto a = random_tensor<double>(rng, 3, 4), b = random_tensor<double>(rng, 3, 4),
       c = random_tensor<double>(rng, 5, 4);
  expect_ok(
      [](Tape<double>&, std::span<const Var<double>> in) {
        auto cr = cosine_rows(in[0], in[1]);
        auto cm = cosine_matrix(in[0], in[2]);
        const std::vector<int> tgt{4, 0, 2};
        return add(sum(cr), sum(cross_entropy_rows(scale(cm, 3.0), tgt)));
      },
      {a, b, c});
}

TEST_F(OpGradient, PairwiseSquaredDistance) {
  auto x = random_tensor<double>(rng, 5, 3), w = random_tensor<double>(rng, 5, 5);
  expect_ok(
      [&](Tape<double>& t, std::span<const Var<double>> in) {
        return sum(mul(exp(scale(pairwise_sq_dist(in[0]), -0.5)), t.constant(w)));
      },
      {x});
}

TEST_F(OpGradient, AttentionCausalPaddedAndShared) {
  // Two query blocks share one key block; causal with offset and a key limit.
  auto q = random_tensor<double>(rng, 2 * 3, 4), k = random_tensor<double>(rng, 4, 4),
       v = random_tensor<double>(rng, 4, 4), w = random_tensor<double>(rng, 6, 4);
  AttentionSpec spec;
  spec.batch = 2;
  spec.q_len = 3;
  spec.k_len = 4;
  spec.heads = 2;
  spec.causal = true;
  spec.q_offset = 1;
  spec.key_len = {4, 3};
  spec.kv_index = {0, 0};
  expect_ok(
      [&](Tape<double>& t, std::span<const Var<double>> in) {
        return sum(mul(attention(in[0], in[1], in[2], spec), t.constant(w)));
      },
      {q, k, v});
}

TEST(Attention, MaskedKeysAreIgnored) {
  Tape<double> t(false);
  Rng rng(5);
  auto q = t.constant(random_tensor<double>(rng, 1, 2));
  auto k = random_tensor<double>(rng, 3, 2), v = random_tensor<double>(rng, 3, 2);
  AttentionSpec spec;
  spec.k_len = 3;
  spec.key_len = {2};
  auto out1 = attention(q, t.constant(k), t.constant(v), spec);
  k.data[4] = 100;  // row 2 is masked
  v.data[5] = -100;
  auto out2 = attention(q, t.constant(k), t.constant(v), spec);
  EXPECT_EQ(out1.value().data, out2.value().data);
}

TEST(Ops, NormalizeZeroRowThrows) {
  Tape<double> t;
  auto x = t.leaf(Tensor<double>(2, 3, 0.0));
  EXPECT_THROW(normalize_rows(x), DomainError);
}

TEST(Ops, GatherOutOfRangeThrows) {
  Tape<double> t;
  auto x = t.leaf(Tensor<double>(2, 3, 1.0));
  const std::vector<int> ids{2};
  EXPECT_THROW(gather_rows(x, ids), IndexError);
}

TEST(Ops, ParameterGradientsAccumulate) {
  ParameterStore<double> store;
  auto& p = store.add("w", Tensor<double>::row_vector({1.0, 2.0}));
  for (int i = 0; i < 2; ++i) {
    Tape<double> t;
    auto w = t.param(p);
    t.backward(sum(mul(w, w)));
  }
  EXPECT_DOUBLE_EQ(p.grad.data[0], 4.0);
  EXPECT_DOUBLE_EQ(p.grad.data[1], 8.0);
  store.zero_grad();
  EXPECT_DOUBLE_EQ(p.grad.data[1], 0.0);
}

TEST(Checkpoint, RoundTripPreservesTensorsAndMeta) {
  ParameterStore<float> store;
  Rng rng(9);
  store.add("enc.w", random_tensor<float>(rng, 3, 2));
  store.add("enc.b", random_tensor<float>(rng, 1, 2));
  Checkpoint ckpt;
  ckpt.meta = {{"levels", "3"}, {"kind", "tokenizer"}};
  append_parameters(ckpt, store, "q.");
  const auto path = testutil::temp_path("ckpt_roundtrip.bin");
  write_checkpoint(path, ckpt);
  const Checkpoint back = read_checkpoint(path);
  EXPECT_EQ(back.meta_value("kind"), "tokenizer");
  ParameterStore<float> other;
  other.add("enc.w", Tensor<float>(3, 2));
  other.add("enc.b", Tensor<float>(1, 2));
  load_parameters(back, other, "q.");
  EXPECT_EQ(other[0].value.data, store[0].value.data);
  EXPECT_EQ(other[1].value.data, store[1].value.data);

  ParameterStore<float> wrong;
  wrong.add("enc.w", Tensor<float>(2, 3));
  wrong.add("enc.b", Tensor<float>(1, 2));
  EXPECT_THROW(load_parameters(back, wrong, "q."), ShapeError);
}

TEST(Checkpoint, LayoutIsLittleEndianWithMagic) {
  Checkpoint ckpt;
  ckpt.tensors.push_back({"x", Tensor<float>(std::vector<std::size_t>{1}, std::vector<float>{1.0f})});
  const auto path = testutil::temp_path("ckpt_layout.bin");
  write_checkpoint(path, ckpt);
  std::ifstream in(path, std::ios::binary);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), {});
  // magic(8) version(4) n_meta(4) n_tensor(4) name_len(4) 'x' rank(4) extent(4) f32(4)
  ASSERT_EQ(bytes.size(), 8u + 4 + 4 + 4 + 4 + 1 + 4 + 4 + 4);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 8), "S2GRCKPT");
  EXPECT_EQ(bytes[8], 1);
  EXPECT_EQ(bytes[9], 0);
  // 1.0f = 0x3f800000 little-endian
  EXPECT_EQ(bytes[bytes.size() - 1], 0x3f);
  EXPECT_EQ(bytes[bytes.size() - 2], 0x80);
}

TEST(Checkpoint, BadMagicRejected) {
  const auto path = testutil::temp_path("ckpt_bad.bin");
  std::ofstream(path, std::ios::binary) << "NOTACKPTxxxxxxxx";
  EXPECT_THROW(read_checkpoint(path), ParseError);
}

}  // namespace
}  // namespace s2gr::nx
