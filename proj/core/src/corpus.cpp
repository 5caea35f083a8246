#include "s2gr/corpus.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <unordered_map>

#include "s2gr/errors.hpp"
#include "s2gr/io.hpp"
#include "s2gr/rng.hpp"

namespace s2gr::corpus {
namespace {

template <typename Int>
bool parse_int(std::string_view s, Int& out) {
  s = io::trim(s);
  if (s.empty()) return false;
  const auto* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc() && ptr == end;
}

}  // namespace

std::vector<std::vector<int>> InteractionLog::sequences() const {
  std::vector<std::vector<int>> seqs(user_names.size());
  for (const auto& r : records) seqs[static_cast<std::size_t>(r.user)].push_back(r.item);
  return seqs;
}

std::vector<std::vector<std::int64_t>> InteractionLog::timestamps() const {
  std::vector<std::vector<std::int64_t>> ts(user_names.size());
  for (const auto& r : records) ts[static_cast<std::size_t>(r.user)].push_back(r.timestamp);
  return ts;
}

InteractionLog parse_interactions(std::string_view text, int catalog_size) {
  InteractionLog log;
  std::unordered_map<std::string, int> user_index;
  long line_no = 0;
  int max_item = -1;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t eol = text.find('\n', pos);
    if (eol == std::string_view::npos) eol = text.size();
    std::string_view line = text.substr(pos, eol - pos);
    pos = eol + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (io::trim(line).empty()) continue;
    const auto fields = io::split(line, '\t');
    if (fields.size() != 3) throw ParseError("expected 3 tab-separated columns", line_no);
    const std::string user(io::trim(fields[0]));
    if (user.empty()) throw ParseError("empty user id", line_no);
    int item = 0;
    if (!parse_int(fields[1], item) || item < 0) throw ParseError("item id must be a non-negative integer", line_no);
    std::int64_t ts = 0;
    if (!parse_int(fields[2], ts)) throw ParseError("timestamp must be an integer", line_no);
    if (catalog_size >= 0 && item >= catalog_size)
      throw ParseError("item id " + std::to_string(item) + " outside catalog of " +
                           std::to_string(catalog_size),
                       line_no);
    auto [it, inserted] = user_index.try_emplace(user, static_cast<int>(log.user_names.size()));
    if (inserted) log.user_names.push_back(user);
    log.records.push_back({it->second, item, ts});
    max_item = std::max(max_item, item);
  }
  if (log.records.empty()) throw ParseError("interaction file is empty");
  log.num_items = catalog_size >= 0 ? catalog_size : max_item + 1;
  std::stable_sort(log.records.begin(), log.records.end(), [](const Interaction& a, const Interaction& b) {
    return a.user != b.user ? a.user < b.user : a.timestamp < b.timestamp;
  });
  return log;
}

InteractionLog load_interactions(const std::filesystem::path& path, int catalog_size) {
  if (!std::filesystem::exists(path)) throw ParseError("interaction file not found: " + path.string());
  return parse_interactions(io::read_text(path), catalog_size);
}

void write_interactions(const std::filesystem::path& path, const InteractionLog& log) {
  std::ostringstream ss;
  for (const auto& r : log.records)
    ss << log.user_names[static_cast<std::size_t>(r.user)] << '\t' << r.item << '\t' << r.timestamp << '\n';
  io::write_text(path, ss.str());
}

void write_user_map(const std::filesystem::path& path, const InteractionLog& log) {
  std::ostringstream ss;
  for (std::size_t u = 0; u < log.user_names.size(); ++u) ss << u << '\t' << log.user_names[u] << '\n';
  io::write_text(path, ss.str());
}

void write_emb1(const std::filesystem::path& path, const nx::Tensor<float>& m) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  io::write_bytes(out, "EMB1");
  io::write_u32(out, static_cast<std::uint32_t>(m.rows()));
  io::write_u32(out, static_cast<std::uint32_t>(m.cols()));
  io::write_u32(out, 0);
  for (float v : m.data) io::write_f32(out, v);
}

nx::Tensor<float> read_emb1(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open embedding file " + path.string());
  if (io::read_bytes(in, 4) != "EMB1") throw ParseError("bad EMB1 magic in " + path.string());
  const std::uint32_t n = io::read_u32(in);
  const std::uint32_t d = io::read_u32(in);
  io::read_u32(in);  // reserved
  nx::Tensor<float> m(n, d);
  for (auto& v : m.data) v = io::read_f32(in);
  return m;
}

ItemEmbeddingMatrix load_item_embeddings(const std::filesystem::path& path, int expected_N) {
  ItemEmbeddingMatrix out;
  out.values = read_emb1(path);
  if (expected_N >= 0 && out.num_items() != expected_N)
    throw ParseError("embedding file has N=" + std::to_string(out.num_items()) + " but catalog has " +
                     std::to_string(expected_N) + " items");
  for (std::size_t r = 0; r < out.values.rows(); ++r) {
    double sq = 0;
    for (float v : out.values.row(r)) sq += static_cast<double>(v) * v;
    if (!std::isfinite(sq)) throw ParseError("non-finite embedding entry at row " + std::to_string(r));
  }
  out.source = EmbeddingSource::kExternalFile;
  return out;
}

std::vector<UserExample> SplitDataset::training_examples(int min_history) const {
  std::vector<UserExample> out;
  for (std::size_t u = 0; u < train_sequences.size(); ++u) {
    const auto& seq = train_sequences[u];
    for (std::size_t t = static_cast<std::size_t>(std::max(1, min_history)); t < seq.size(); ++t)
      out.push_back({static_cast<int>(u), std::vector<int>(seq.begin(), seq.begin() + static_cast<std::ptrdiff_t>(t)),
                     seq[t]});
  }
  return out;
}

SplitDataset chronological_split(const InteractionLog& log, int min_test_len) {
  if (log.records.empty()) throw ConfigError("chronological_split: empty log");
  SplitDataset ds;
  ds.min_test_len = min_test_len;
  ds.min_length_filter_applied = min_test_len > 0;
  const auto seqs = log.sequences();
  ds.train_sequences.resize(seqs.size());
  for (std::size_t u = 0; u < seqs.size(); ++u) {
    const auto& s = seqs[u];
    const int user = static_cast<int>(u);
    const std::size_t n = s.size();
    if (n < 3) {
      ds.train_sequences[u] = s;
      continue;
    }
    ds.train_sequences[u].assign(s.begin(), s.end() - 2);
    ds.valid.push_back({user, std::vector<int>(s.begin(), s.end() - 2), s[n - 2]});
    if (static_cast<int>(n) >= min_test_len)
      ds.test.push_back({user, std::vector<int>(s.begin(), s.end() - 1), s[n - 1]});
  }
  return ds;
}

void SyntheticSpec::validate() const {
  if (top_categories < 1 || subcategories_per_top < 1 || items_per_sub < 1)
    throw ConfigError("synthetic: category counts must be >= 1");
  if (dim < 1) throw ConfigError("synthetic: dim must be >= 1");
  if (!(noise >= 0.0)) throw ConfigError("synthetic: noise must be >= 0");
  if (!(p_stay >= 0.0 && p_stay <= 1.0)) throw ConfigError("synthetic: p_stay must be in [0, 1]");
  if (users < 1) throw ConfigError("synthetic: users must be >= 1");
  if (min_session < 1 || max_session < min_session)
    throw ConfigError("synthetic: need 1 <= min_session <= max_session");
  if (p_stay < 1.0 && top_categories * subcategories_per_top < 2)
    throw ConfigError("synthetic: jumping needs at least two sub-categories");
}

SyntheticCorpus generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  const int T = spec.top_categories, S = spec.subcategories_per_top, M = spec.items_per_sub;
  const int n_sub = T * S, N = spec.num_items(), d = spec.dim;

  SyntheticCorpus out;
  out.hierarchy.top.resize(static_cast<std::size_t>(N));
  out.hierarchy.sub.resize(static_cast<std::size_t>(N));

  std::vector<double> top_centre(static_cast<std::size_t>(T * d)), sub_offset(static_cast<std::size_t>(n_sub * d));
  for (auto& v : top_centre) v = rng.normal(0.0, spec.top_scale);
  for (auto& v : sub_offset) v = rng.normal(0.0, spec.sub_scale);

  nx::Tensor<float> x(static_cast<std::size_t>(N), static_cast<std::size_t>(d));
  for (int item = 0; item < N; ++item) {
    const int sub = item / M, top = sub / S;
    out.hierarchy.top[static_cast<std::size_t>(item)] = top;
    out.hierarchy.sub[static_cast<std::size_t>(item)] = sub;
    for (int c = 0; c < d; ++c) {
      const double noise = spec.noise > 0 ? rng.normal(0.0, spec.noise) : 0.0;
      x(static_cast<std::size_t>(item), static_cast<std::size_t>(c)) = static_cast<float>(
          top_centre[static_cast<std::size_t>(top * d + c)] + sub_offset[static_cast<std::size_t>(sub * d + c)] +
          noise);
    }
  }
  out.embeddings.values = std::move(x);
  out.embeddings.source = EmbeddingSource::kSynthetic;

  auto& log = out.log;
  log.num_items = N;
  for (int u = 0; u < spec.users; ++u) {
    log.user_names.push_back(std::to_string(u));
    const int len = static_cast<int>(rng.integer(spec.min_session, spec.max_session));
    int sub = static_cast<int>(rng.index(static_cast<std::size_t>(n_sub)));
    std::int64_t ts = 1'600'000'000 + static_cast<std::int64_t>(u) * 100'000;
    for (int step = 0; step < len; ++step) {
      if (step > 0 && !rng.bernoulli(spec.p_stay)) {
        // Jump to a different sub-category.
        const int offset = 1 + static_cast<int>(rng.index(static_cast<std::size_t>(n_sub - 1)));
        sub = (sub + offset) % n_sub;
      }
      const int item = sub * M + static_cast<int>(rng.index(static_cast<std::size_t>(M)));
      ts += 60 + rng.integer(0, 600);
      log.records.push_back({u, item, ts});
    }
  }
  return out;
}

void write_hierarchy(const std::filesystem::path& path, const PlantedHierarchy& h) {
  std::ostringstream ss;
  for (std::size_t i = 0; i < h.top.size(); ++i) ss << i << '\t' << h.top[i] << '\t' << h.sub[i] << '\n';
  io::write_text(path, ss.str());
}

PlantedHierarchy read_hierarchy(const std::filesystem::path& path) {
  PlantedHierarchy h;
  std::istringstream in(io::read_text(path));
  std::string line;
  long line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (io::trim(line).empty()) continue;
    const auto f = io::split(line, '\t');
    int item = 0, top = 0, sub = 0;
    if (f.size() != 3 || !parse_int(f[0], item) || !parse_int(f[1], top) || !parse_int(f[2], sub))
      throw ParseError("malformed hierarchy row", line_no);
    if (item != static_cast<int>(h.top.size())) throw ParseError("hierarchy rows must be in item order", line_no);
    h.top.push_back(top);
    h.sub.push_back(sub);
  }
  return h;
}

}  // namespace s2gr::corpus
