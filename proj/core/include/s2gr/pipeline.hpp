#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "s2gr/coocgraph.hpp"
#include "s2gr/config.hpp"
#include "s2gr/corpus.hpp"
#include "s2gr/evalkit.hpp"
#include "s2gr/inference.hpp"
#include "s2gr/model.hpp"
#include "s2gr/tokenizer.hpp"

namespace s2gr::pipeline {

struct RunConfig {
  std::filesystem::path interactions, embeddings, hierarchy, work_dir;

  corpus::SyntheticSpec synth;
  int min_test_len = 10;

  int window = 5;
  graph::PropagationConfig propagation;
  std::string graph_source = "train";  // train | full

  tok::QuantizerConfig tokenizer;
  std::string tokenizer_input = "aligned";  // aligned | raw

  int clusters = 32;
  std::uint64_t cluster_seed = 1;

  model::ModelConfig model;

  infer::InferenceConfig infer;
  bool report_unconstrained = true;

  std::vector<int> cutoffs{5, 10};
  std::vector<int> bucket_edges{10, 50};
  std::vector<int> ablation_seeds{1, 2, 3};

  std::uint64_t seed = 1;
  int threads = 1;

  // Every resolved setting as sorted key=value lines, excluding the work dir.
  std::string resolved;
  // Resolved values as read, paths as given.
  std::map<std::string, std::string> settings;
  std::string hash() const;

  /// Reads every known key (defaults filled in), applies S2GR_SEED when set,
  /// and validates cross-section consistency. Unknown keys are a ConfigError.
  static RunConfig from(const cfg::Config& c, bool apply_env = true);
  /// The same settings as a Config, e.g. to derive a variant.
  cfg::Config to_config() const;
};

// Ordered key/value lines `key \t value`.
struct Manifest {
  std::vector<std::pair<std::string, std::string>> entries;

  void add(const std::string& key, const std::string& value) { entries.emplace_back(key, value); }
  std::string get(const std::string& key, const std::string& fallback = "") const;
  std::string text() const;
  void write(const std::filesystem::path& path) const;
  static Manifest read(const std::filesystem::path& path);
};

struct Options {
  bool allow_leakage = false;
  std::ostream* log = nullptr;
};

// Artifact locations under the work dir.
struct Layout {
  std::filesystem::path root;
  std::filesystem::path dir(const std::string& stage) const { return root / stage; }
  std::filesystem::path graph_tsv() const { return root / "graph" / "graph.tsv"; }
  std::filesystem::path aligned_emb() const { return root / "graph" / "aligned.emb"; }
  std::filesystem::path tokenizer_ckpt() const { return root / "tokenizer" / "tokenizer.ckpt"; }
  std::filesystem::path sids_tsv() const { return root / "sids" / "sids.tsv"; }
  std::filesystem::path centroids_dir() const { return root / "semantics"; }
  std::filesystem::path model_ckpt() const { return root / "model" / "model.ckpt"; }
  std::filesystem::path recs_tsv(bool constrained) const {
    return root / "infer" / (constrained ? "recommendations.tsv" : "recommendations_unconstrained.tsv");
  }
  std::filesystem::path report_txt() const { return root / "eval" / "report.txt"; }
  std::filesystem::path manifest(const std::string& stage) const { return root / stage / "manifest.tsv"; }
};

void synth(const RunConfig& rc, const Options& opt);
void build_graph(const RunConfig& rc, const Options& opt);
void train_tokenizer(const RunConfig& rc, const Options& opt);
void assign_sids(const RunConfig& rc, const Options& opt);
void cluster_codebooks(const RunConfig& rc, const Options& opt);
void train_model(const RunConfig& rc, const Options& opt);
void infer(const RunConfig& rc, const Options& opt);
eval::MetricReport evaluate(const RunConfig& rc, const Options& opt);
std::vector<eval::AblationRow> ablate(const RunConfig& rc, const Options& opt);
/// build-graph through evaluate.
eval::MetricReport run_all(const RunConfig& rc, const Options& opt);

/// Runs one named subcommand. Throws ConfigError for an unknown name.
void run_command(const std::string& name, const RunConfig& rc, const Options& opt);
const std::vector<std::string>& command_names();

/// Applies an ablation variant's switches to a config.
RunConfig apply_variant(const RunConfig& base, const eval::AblationVariant& v);

}  // namespace s2gr::pipeline
