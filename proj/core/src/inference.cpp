#include "s2gr/inference.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_map>

#include "s2gr/errors.hpp"
#include "s2gr/io.hpp"
#include "s2gr/numerics/functional.hpp"

namespace s2gr::infer {

using model::S2GRModel;
using model::Var;

PrefixTrie::PrefixTrie(const tok::SidTable& table) : levels_(table.levels()), k_(table.codebook_size()) {
  prefixes_.resize(static_cast<std::size_t>(levels_));
  for (const auto& sid : table.codes())
    for (int l = 0; l < levels_; ++l)
      prefixes_[l].insert(key(std::span<const int>(sid.data(), static_cast<std::size_t>(l)), sid[l]));
}

std::uint64_t PrefixTrie::key(std::span<const int> prefix, int code) const {
  std::uint64_t k = 0;
  for (int c : prefix) k = k * static_cast<std::uint64_t>(k_) + static_cast<std::uint64_t>(c);
  return k * static_cast<std::uint64_t>(k_) + static_cast<std::uint64_t>(code);
}

bool PrefixTrie::allows(std::span<const int> prefix, int code) const {
  const auto l = prefix.size();
  if (l >= prefixes_.size() || code < 0 || code >= k_) return false;
  return prefixes_[l].count(key(prefix, code)) > 0;
}

namespace {

struct Beam {
  SemanticId codes;
  double score = 0;
};

struct Candidate {
  int parent;  // index within the user's beam list
  int code;
  double score;
};

std::vector<double> row_log_softmax(const nx::Tensor<float>& logits, std::size_t r) {
  const auto row = logits.row(r);
  std::vector<double> v(row.begin(), row.end());
  nx::log_softmax_inplace<double>(std::span<double>(v));
  return v;
}

// Gathers cache rows (row, pos) for the surviving parents.
Var reorder(const Var& cache, std::span<const int> parent_rows, int len) {
  std::vector<int> ids;
  ids.reserve(parent_rows.size() * static_cast<std::size_t>(len));
  for (int p : parent_rows)
    for (int t = 0; t < len; ++t) ids.push_back(p * len + t);
  return nx::gather_rows<float>(cache, ids);
}

std::vector<std::vector<ScoredSid>> search_chunk(const S2GRModel& m,
                                                 const std::vector<std::vector<SemanticId>>& histories, int width,
                                                 bool constrain, const PrefixTrie* trie) {
  nx::Tape<float> tape(false);
  const auto w = m.bind(tape);
  const auto enc = m.encode_history(w, histories, false, nullptr);
  const auto cross = m.cross_kv(w, enc);
  const int users = static_cast<int>(histories.size());
  const int levels = m.levels(), k = m.codebook_size();
  const bool reason = !m.config().no_reason;

  std::vector<std::vector<Beam>> beams(static_cast<std::size_t>(users), std::vector<Beam>(1));
  std::vector<int> kv(static_cast<std::size_t>(users));
  std::iota(kv.begin(), kv.end(), 0);
  model::SelfKV cache;
  Var next = m.bos_inputs(w, users);
  for (int l = 0; l < levels; ++l) {
    const int rows = static_cast<int>(kv.size());
    Var h = m.decoder_step(w, next, rows, 1, cache, cross, kv, false, nullptr);
    if (reason) h = m.decoder_step(w, m.think_token(w, h, l), rows, 1, cache, cross, kv, false, nullptr);
    const auto& logits = m.level_logits(w, h, l).value();

    std::vector<int> parent_rows, next_tokens, next_kv;
    int row0 = 0;
    for (int u = 0; u < users; ++u) {
      auto& ub = beams[u];
      std::vector<Candidate> cand;
      for (int b = 0; b < static_cast<int>(ub.size()); ++b) {
        const auto lp = row_log_softmax(logits, static_cast<std::size_t>(row0 + b));
        for (int c = 0; c < k; ++c) {
          if (constrain && !trie->allows(ub[b].codes, c)) continue;
          cand.push_back({b, c, ub[b].score + lp[c]});
        }
      }
      std::stable_sort(cand.begin(), cand.end(), [](const Candidate& a, const Candidate& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.parent != b.parent) return a.parent < b.parent;
        return a.code < b.code;
      });
      if (static_cast<int>(cand.size()) > width) cand.resize(static_cast<std::size_t>(width));
      std::vector<Beam> nb;
      for (const auto& c : cand) {
        Beam b = ub[c.parent];
        b.codes.push_back(c.code);
        b.score = c.score;
        nb.push_back(std::move(b));
        parent_rows.push_back(row0 + c.parent);
        next_tokens.push_back(m.token_id(l, c.code));
        next_kv.push_back(u);
      }
      row0 += static_cast<int>(ub.size());
      ub = std::move(nb);
    }
    if (l + 1 == levels) break;
    if (parent_rows.empty()) break;
    for (std::size_t i = 0; i < cache.k.size(); ++i) {
      cache.k[i] = reorder(cache.k[i], parent_rows, cache.len);
      cache.v[i] = reorder(cache.v[i], parent_rows, cache.len);
    }
    kv = std::move(next_kv);
    next = m.input_embedding(w, next_tokens, reason ? 2 * l + 2 : l + 1);
  }
  std::vector<std::vector<ScoredSid>> out(static_cast<std::size_t>(users));
  for (int u = 0; u < users; ++u)
    for (auto& b : beams[u])
      if (static_cast<int>(b.codes.size()) == levels) out[u].push_back({std::move(b.codes), b.score});
  return out;
}

}  // namespace

std::vector<std::vector<ScoredSid>> beam_search(const S2GRModel& m,
                                                const std::vector<std::vector<SemanticId>>& histories, int beam,
                                                bool constrain, const PrefixTrie* trie) {
  if (beam < 1) throw ConfigError("beam width must be >= 1");
  if (constrain) {
    if (!trie || trie->empty()) throw ConfigError("constrained decoding needs a nonempty prefix trie");
    if (trie->levels() != m.levels()) throw ConfigError("prefix trie depth differs from the model's L");
  }
  if (histories.empty()) return {};
  return search_chunk(m, histories, beam, constrain, trie);
}

std::vector<ScoredSid> beam_search(const S2GRModel& m, const std::vector<SemanticId>& history, int beam,
                                   bool constrain, const PrefixTrie* trie) {
  return beam_search(m, std::vector<std::vector<SemanticId>>{history}, beam, constrain, trie).front();
}

std::vector<double> sequence_log_probs(const S2GRModel& m, const std::vector<SemanticId>& history,
                                       const std::vector<SemanticId>& sids) {
  if (sids.empty()) return {};
  nx::Tape<float> tape(false);
  const auto w = m.bind(tape);
  const std::vector<std::vector<SemanticId>> hist(sids.size(), history);
  const auto cross = m.cross_kv(w, m.encode_history(w, hist, false, nullptr));
  const auto tr = m.stepwise_decode_train(w, cross, sids, false, nullptr);
  std::vector<double> out(sids.size(), 0.0);
  for (int l = 0; l < m.levels(); ++l)
    for (std::size_t i = 0; i < sids.size(); ++i) out[i] += row_log_softmax(tr.logits[l].value(), i)[sids[i][l]];
  return out;
}

RankedItems resolve_items(std::span<const ScoredSid> ranked, const tok::SidTable& table, int k_eval) {
  if (table.num_items() == 0) throw ConfigError("resolve_items: empty SID table");
  RankedItems out;
  out.k_eval = k_eval;
  std::unordered_set<int> seen;
  for (const auto& s : ranked) {
    for (int item : table.items(s.sid)) {
      if (static_cast<int>(out.items.size()) >= k_eval) return out;
      if (!seen.insert(item).second) continue;
      out.items.push_back(item);
      out.scores.push_back(s.score);
    }
    if (static_cast<int>(out.items.size()) >= k_eval) break;
  }
  return out;
}

std::vector<Recommendation> recommend(const S2GRModel& m, std::span<const corpus::UserExample> examples,
                                      const tok::SidTable& table, const InferenceConfig& cfg) {
  if (cfg.k_eval < 1) throw ConfigError("infer.k_eval must be >= 1");
  if (cfg.chunk < 1) throw ConfigError("infer.chunk must be >= 1");
  const int width = cfg.beam > 0 ? cfg.beam : 2 * cfg.k_eval;
  const PrefixTrie trie(table);
  std::vector<Recommendation> out;
  out.reserve(examples.size());
  for (std::size_t start = 0; start < examples.size(); start += static_cast<std::size_t>(cfg.chunk)) {
    const auto end = std::min(examples.size(), start + static_cast<std::size_t>(cfg.chunk));
    std::vector<std::vector<SemanticId>> hist;
    for (std::size_t i = start; i < end; ++i) {
      std::vector<SemanticId> h;
      for (int item : examples[i].history) h.push_back(table.sid(item));
      hist.push_back(std::move(h));
    }
    const auto res = beam_search(m, hist, width, cfg.constrain, &trie);
    for (std::size_t i = start; i < end; ++i)
      out.push_back({examples[i].user, resolve_items(res[i - start], table, cfg.k_eval)});
  }
  return out;
}

std::string format_recommendations(std::span<const Recommendation> recs, const std::vector<std::string>* names) {
  std::string out;
  for (const auto& r : recs) {
    const std::string user = names ? names->at(static_cast<std::size_t>(r.user)) : std::to_string(r.user);
    for (std::size_t i = 0; i < r.ranked.items.size(); ++i)
      out += fmt::format("{}\t{}\t{}\t{:.9g}\n", user, i + 1, r.ranked.items[i], r.ranked.scores[i]);
  }
  return out;
}

void write_recommendations(const std::filesystem::path& path, std::span<const Recommendation> recs,
                           const std::vector<std::string>* names) {
  io::write_text(path, format_recommendations(recs, names));
}

std::vector<Recommendation> read_recommendations(const std::filesystem::path& path,
                                                 const std::vector<std::string>* names) {
  std::unordered_map<std::string, int> by_name;
  if (names)
    for (std::size_t i = 0; i < names->size(); ++i) by_name.emplace((*names)[i], static_cast<int>(i));
  std::vector<Recommendation> out;
  std::istringstream in(io::read_text(path));
  std::string line;
  long line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (io::trim(line).empty()) continue;
    const auto f = io::split(line, '\t');
    if (f.size() != 4) throw ParseError("expected user, rank, item, score", line_no);
    int user = 0, rank = 0, item = 0;
    auto parse_int = [&](std::string_view s, int& v) {
      auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
      if (ec != std::errc() || p != s.data() + s.size()) throw ParseError("malformed integer field", line_no);
    };
    if (names) {
      auto it = by_name.find(std::string(f[0]));
      if (it == by_name.end()) throw ParseError("unknown user '" + std::string(f[0]) + "'", line_no);
      user = it->second;
    } else {
      parse_int(f[0], user);
    }
    parse_int(f[1], rank);
    parse_int(f[2], item);
    double score = 0;
    try {
      score = std::stod(std::string(f[3]));
    } catch (const std::exception&) {
      throw ParseError("malformed score", line_no);
    }
    if (out.empty() || out.back().user != user || rank == 1) {
      if (rank != 1) throw ParseError("ranks must start at 1 for each user", line_no);
      out.push_back({user, {}});
    } else if (rank != static_cast<int>(out.back().ranked.items.size()) + 1) {
      throw ParseError("ranks must be consecutive", line_no);
    }
    out.back().ranked.items.push_back(item);
    out.back().ranked.scores.push_back(score);
    out.back().ranked.k_eval = std::max(out.back().ranked.k_eval, rank);
  }
  return out;
}

}  // namespace s2gr::infer
