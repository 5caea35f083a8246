#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "s2gr/numerics/tensor.hpp"

namespace s2gr::corpus {

struct Interaction {
  int user = 0;
  int item = 0;
  std::int64_t timestamp = 0;
  friend bool operator==(const Interaction&, const Interaction&) = default;
};

// Event stream. After loading, records are grouped by dense user id and
// sorted by timestamp within a user, ties kept in file order.
struct InteractionLog {
  std::vector<Interaction> records;
  std::vector<std::string> user_names;  // dense user id -> raw token
  int num_items = 0;                    // catalog size N; item ids are in [0, N)

  int num_users() const { return static_cast<int>(user_names.size()); }
  std::vector<std::vector<int>> sequences() const;
  std::vector<std::vector<std::int64_t>> timestamps() const;

  friend bool operator==(const InteractionLog&, const InteractionLog&) = default;
};

/// Parses `user_id \t item_id \t timestamp` rows (no header). User tokens are
/// densified in order of first appearance; item ids must be integers in
/// [0, catalog_size) or, with catalog_size < 0, the catalog is max id + 1.
/// Throws ParseError with a line number on a malformed row and on empty input.
InteractionLog parse_interactions(std::string_view text, int catalog_size = -1);
InteractionLog load_interactions(const std::filesystem::path& path, int catalog_size = -1);
void write_interactions(const std::filesystem::path& path, const InteractionLog& log);
// `dense \t raw` user id map.
void write_user_map(const std::filesystem::path& path, const InteractionLog& log);

enum class EmbeddingSource { kExternalFile, kSynthetic, kDerived };

struct ItemEmbeddingMatrix {
  nx::Tensor<float> values;  // N x d
  EmbeddingSource source = EmbeddingSource::kExternalFile;
  int num_items() const { return static_cast<int>(values.rows()); }
  int dim() const { return static_cast<int>(values.cols()); }
};

// EMB1: "EMB1", u32 N, u32 d, 4 zero bytes, then N*d little-endian f32.
void write_emb1(const std::filesystem::path& path, const nx::Tensor<float>& matrix);
nx::Tensor<float> read_emb1(const std::filesystem::path& path);

/// Reads an EMB1 file; expected_N < 0 skips the catalog-size check. Throws
/// ParseError on a size mismatch or a non-finite entry (naming the row).
ItemEmbeddingMatrix load_item_embeddings(const std::filesystem::path& path, int expected_N);

struct UserExample {
  int user = 0;
  std::vector<int> history;  // oldest -> newest
  int target = 0;
};

struct SplitDataset {
  std::vector<std::vector<int>> train_sequences;  // per user, targets of valid/test removed
  std::vector<UserExample> valid;
  std::vector<UserExample> test;
  int min_test_len = 0;
  bool min_length_filter_applied = false;

  /// Every prefix of every training sequence with at least `min_history`
  /// items, paired with the next item.
  std::vector<UserExample> training_examples(int min_history = 1) const;
};

/// Leave-one-out split. Users with fewer than 3 events are train-only; users
/// with fewer than min_test_len events are dropped from test only.
SplitDataset chronological_split(const InteractionLog& log, int min_test_len = 10);

struct SyntheticSpec {
  int top_categories = 4;
  int subcategories_per_top = 4;
  int items_per_sub = 60;
  int dim = 32;
  double noise = 0.1;
  double p_stay = 0.8;
  int users = 500;
  int min_session = 8;
  int max_session = 20;
  std::uint64_t seed = 1;
  // Spread of category centres and sub-category offsets.
  double top_scale = 1.0;
  double sub_scale = 0.5;

  int num_items() const { return top_categories * subcategories_per_top * items_per_sub; }
  void validate() const;
};

struct PlantedHierarchy {
  std::vector<int> top;  // per item
  std::vector<int> sub;  // per item, global sub-category index in [0, T*S)
};

struct SyntheticCorpus {
  InteractionLog log;
  ItemEmbeddingMatrix embeddings;
  PlantedHierarchy hierarchy;
};

/// Item embedding = top centre + sub-category offset + N(0, noise^2). Each
/// user walks a session: stay in the current sub-category with p_stay,
/// otherwise jump to a different sub-category. Deterministic under seed.
SyntheticCorpus generate_synthetic(const SyntheticSpec& spec);

// `item_id \t top_label \t sub_label`
void write_hierarchy(const std::filesystem::path& path, const PlantedHierarchy& h);
PlantedHierarchy read_hierarchy(const std::filesystem::path& path);

}  // namespace s2gr::corpus
