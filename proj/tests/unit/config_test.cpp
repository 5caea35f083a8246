#include <gtest/gtest.h>

#include <cstdlib>

#include "s2gr/config.hpp"
#include "s2gr/errors.hpp"
#include "s2gr/pipeline.hpp"

namespace s2gr {
namespace {

std::string message_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const std::exception& e) {
    return e.what();
  }
  return "";
}

TEST(Config, ParsesSectionsCommentsAndTypes) {
  const auto c = cfg::Config::parse(
      "# top comment\n"
      "[model]\n"
      "d_model = 64   \n"
      "; another\n"
      "lr=3e-4\n"
      "\n"
      "[eval]\n"
      "cutoffs = 5, 10 ,20\n"
      "flag = yes\n");
  EXPECT_EQ(c.get_int("model.d_model", 0), 64);
  EXPECT_DOUBLE_EQ(c.get_double("model.lr", 0), 3e-4);
  EXPECT_EQ(c.get_ints("eval.cutoffs", {}), (std::vector<int>{5, 10, 20}));
  EXPECT_TRUE(c.get_bool("eval.flag", false));
  EXPECT_EQ(c.get_int("model.heads", 7), 7);
  EXPECT_TRUE(c.unused().empty());
}

TEST(Config, ParseErrorsCarryLineNumbers) {
  try {
    cfg::Config::parse("[a]\nx = 1\nbroken line\n");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 3);
  }
  EXPECT_THROW(cfg::Config::parse("x = 1\n"), ParseError);
  EXPECT_THROW(cfg::Config::parse("[a]\nx = 1\nx = 2\n"), ParseError);
  EXPECT_THROW(cfg::Config::parse("[a\n"), ParseError);
}

TEST(Config, TypedGettersNameTheField) {
  const auto c = cfg::Config::parse("[model]\nheads = four\nlr = fast\n");
  EXPECT_EQ(message_of([&] { c.get_int("model.heads", 1); }), "model.heads: expected an integer, got 'four'");
  EXPECT_THROW(c.get_double("model.lr", 0), ConfigError);
}

TEST(Config, OverridesReplaceFileValues) {
  auto c = cfg::Config::parse("[model]\nd_model = 64\n");
  c.apply_override("--model.d_model=32");
  c.apply_override("tokenizer.levels=2");
  EXPECT_EQ(c.get_int("model.d_model", 0), 32);
  EXPECT_EQ(c.get_int("tokenizer.levels", 0), 2);
  EXPECT_THROW(c.apply_override("--model.d_model"), ConfigError);
  EXPECT_THROW(c.apply_override("--nodot=1"), ConfigError);
}

TEST(Config, LoadMissingFileIsConfigError) {
  EXPECT_THROW(cfg::Config::load("/nonexistent/run.cfg"), ConfigError);
}

cfg::Config small() {
  return cfg::Config::parse(
      "[paths]\nwork_dir = /tmp/w\n"
      "[tokenizer]\nlatent_dim = 32\ncodebook_size = 16\n"
      "[semantics]\nclusters = 8\n"
      "[model]\nd_model = 32\n");
}

TEST(RunConfig, DefaultsResolveAndHashIsStable) {
  const auto a = pipeline::RunConfig::from(small(), false);
  const auto b = pipeline::RunConfig::from(small(), false);
  EXPECT_EQ(a.hash(), b.hash());
  EXPECT_NE(a.resolved.find("model.lr=0.001"), std::string::npos);
  EXPECT_NE(a.resolved.find("paths.interactions=$work/synth/interactions.tsv"), std::string::npos);
  EXPECT_EQ(a.model.clusters, 8);
  EXPECT_EQ(a.tokenizer.seed, a.seed);
}

TEST(RunConfig, WorkDirAndThreadsDoNotChangeHash) {
  auto c = small();
  const auto a = pipeline::RunConfig::from(c, false);
  c.set("paths.work_dir", "/tmp/elsewhere");
  c.set("run.threads", "4");
  const auto b = pipeline::RunConfig::from(c, false);
  EXPECT_EQ(a.hash(), b.hash());
  c.set("model.lr", "0.002");
  EXPECT_NE(pipeline::RunConfig::from(c, false).hash(), a.hash());
}

TEST(RunConfig, FieldLevelValidation) {
  auto c = small();
  c.set("model.d_model", "64");
  EXPECT_EQ(message_of([&] { pipeline::RunConfig::from(c, false); }),
            "model.d_model (64) must equal tokenizer.latent_dim (32)");
  auto u = small();
  u.set("model.colour", "red");
  EXPECT_EQ(message_of([&] { pipeline::RunConfig::from(u, false); }), "unknown config key(s): model.colour");
  auto w = small();
  w.set("coocgraph.window", "1");
  EXPECT_THROW(pipeline::RunConfig::from(w, false), ConfigError);
  auto k = small();
  k.set("semantics.clusters", "17");
  EXPECT_THROW(pipeline::RunConfig::from(k, false), ConfigError);
  auto e = small();
  e.set("eval.cutoffs", "5,20");
  EXPECT_THROW(pipeline::RunConfig::from(e, false), ConfigError);
}

TEST(RunConfig, EnvironmentSeedOverridesConfig) {
  ::setenv("S2GR_SEED", "77", 1);
  const auto a = pipeline::RunConfig::from(small(), true);
  ::setenv("S2GR_SEED", "not-a-number", 1);
  EXPECT_THROW(pipeline::RunConfig::from(small(), true), ConfigError);
  ::unsetenv("S2GR_SEED");
  EXPECT_EQ(a.seed, 77u);
  EXPECT_EQ(a.model.seed, 77u);
  EXPECT_EQ(pipeline::RunConfig::from(small(), true).seed, 1u);
}

TEST(RunConfig, RoundTripsThroughConfig) {
  const auto a = pipeline::RunConfig::from(small(), false);
  const auto b = pipeline::RunConfig::from(a.to_config(), false);
  EXPECT_EQ(a.resolved, b.resolved);
  EXPECT_EQ(b.work_dir, a.work_dir);
}

TEST(RunConfig, VariantsFollowAblationSwitches) {
  const auto base = pipeline::RunConfig::from(small(), false);
  const auto v = eval::standard_variants();
  const auto coba = pipeline::apply_variant(base, v[1]);
  EXPECT_FALSE(coba.tokenizer.balance);
  EXPECT_EQ(coba.tokenizer.w_uniform, 0.0);
  EXPECT_EQ(coba.tokenizer_input, "raw");
  EXPECT_TRUE(pipeline::apply_variant(base, v[2]).model.no_reason);
  EXPECT_TRUE(pipeline::apply_variant(base, v[3]).model.no_think_loss);
  const auto full = pipeline::apply_variant(base, v[0]);
  EXPECT_EQ(full.hash(), base.hash());
}

TEST(RunConfig, ShippedConfigsAreValid) {
  for (const char* name : {"configs/synthetic.cfg", "tests/cli/tiny.cfg"}) {
    const auto rc = pipeline::RunConfig::from(cfg::Config::load(std::string(S2GR_SOURCE_DIR) + "/" + name), false);
    EXPECT_EQ(rc.model.d_model, rc.tokenizer.latent_dim) << name;
  }
}

}  // namespace
}  // namespace s2gr
