#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "s2gr/corpus.hpp"
#include "s2gr/model.hpp"
#include "s2gr/tokenizer.hpp"

namespace s2gr::infer {

using tok::SemanticId;

// Prefixes of every SID in a table, per length.
class PrefixTrie {
 public:
  PrefixTrie() = default;
  explicit PrefixTrie(const tok::SidTable& table);

  bool empty() const { return levels_ == 0 || prefixes_.empty() || prefixes_[0].empty(); }
  int levels() const { return levels_; }
  /// True when prefix + code is a prefix of at least one catalog SID.
  bool allows(std::span<const int> prefix, int code) const;

 private:
  std::uint64_t key(std::span<const int> prefix, int code) const;

  int levels_ = 0;
  int k_ = 0;
  std::vector<std::unordered_set<std::uint64_t>> prefixes_;
};

struct ScoredSid {
  SemanticId sid;
  double score = 0;  // summed per-level log-softmax
};

/// Beam search for a batch of users sharing one tape. Per level each beam
/// emits its thinking token (full mode), then expands over the level's codes;
/// the global top-B per user survive (ties: parent rank, then code). Output is
/// per user, sorted by descending score.
std::vector<std::vector<ScoredSid>> beam_search(const model::S2GRModel& m,
                                                const std::vector<std::vector<SemanticId>>& histories, int beam,
                                                bool constrain, const PrefixTrie* trie);
std::vector<ScoredSid> beam_search(const model::S2GRModel& m, const std::vector<SemanticId>& history, int beam,
                                   bool constrain, const PrefixTrie* trie);

/// Log-probabilities of complete SIDs given one history, each recomputed from
/// scratch with the full teacher-forced decoder.
std::vector<double> sequence_log_probs(const model::S2GRModel& m, const std::vector<SemanticId>& history,
                                       const std::vector<SemanticId>& sids);

struct RankedItems {
  std::vector<int> items;
  std::vector<double> scores;
  int k_eval = 0;
};

/// Walks SIDs in rank order through the reverse map. Colliding items share the
/// beam score in ascending id order; SIDs absent from the table are skipped.
RankedItems resolve_items(std::span<const ScoredSid> ranked, const tok::SidTable& table, int k_eval);

struct InferenceConfig {
  int beam = 0;  // 0 selects 2 x k_eval
  bool constrain = true;
  int k_eval = 10;
  int chunk = 32;  // users per shared tape
};

struct Recommendation {
  int user = 0;
  RankedItems ranked;
};

std::vector<Recommendation> recommend(const model::S2GRModel& m, std::span<const corpus::UserExample> examples,
                                      const tok::SidTable& table, const InferenceConfig& cfg);

// `user_id \t rank \t item_id \t score`, rank from 1. User ids are written as
// names when `user_names` is given.
void write_recommendations(const std::filesystem::path& path, std::span<const Recommendation> recs,
                           const std::vector<std::string>* user_names = nullptr);
std::string format_recommendations(std::span<const Recommendation> recs,
                                   const std::vector<std::string>* user_names = nullptr);
/// Inverse of write_recommendations; user ids map back through `user_names`
/// when given, otherwise they must be integers.
std::vector<Recommendation> read_recommendations(const std::filesystem::path& path,
                                                 const std::vector<std::string>* user_names = nullptr);

}  // namespace s2gr::infer
