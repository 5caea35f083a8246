#include "s2gr/semantics.hpp"

#include <fmt/format.h>

#include <charconv>
#include <map>
#include <sstream>

#include "s2gr/corpus.hpp"
#include "s2gr/errors.hpp"
#include "s2gr/io.hpp"
#include "s2gr/kmeans.hpp"

namespace s2gr::sem {

LevelClusters cluster_codebook(const nx::Tensor<double>& codebook, int k_prime, std::uint64_t seed) {
  const int k = static_cast<int>(codebook.rows());
  if (k_prime < 1) throw ConfigError("semantics.clusters must be >= 1");
  if (k_prime > k) throw ConfigError(fmt::format("semantics.clusters = {} exceeds codebook size {}", k_prime, k));
  KMeansConfig kc;
  kc.k = k_prime;
  kc.max_iter = 100;
  kc.tol = 1e-6;
  kc.seed = seed;
  auto km = kmeans(codebook, kc);
  return {std::move(km.centroids), std::move(km.assignment), std::move(km.objective)};
}

CentroidSet::CentroidSet(int num_clusters, std::vector<LevelClusters> levels)
    : num_clusters_(num_clusters), levels_(std::move(levels)) {
  for (std::size_t l = 0; l < levels_.size(); ++l) {
    const auto& lc = levels_[l];
    if (lc.centroids.rows() != static_cast<std::size_t>(num_clusters))
      throw ShapeError(fmt::format("level {} has {} centroids, expected {}", l, lc.centroids.rows(), num_clusters));
    for (int c : lc.assignment)
      if (c < 0 || c >= num_clusters) throw IndexError(fmt::format("level {} maps a code to cluster {}", l, c));
  }
}

const LevelClusters& CentroidSet::level(int l) const {
  if (l < 0 || l >= levels()) throw IndexError(fmt::format("centroid level {} out of range", l));
  return levels_[static_cast<std::size_t>(l)];
}

int CentroidSet::cluster_of(int l, int code) const {
  const auto& lc = level(l);
  if (code < 0 || code >= static_cast<int>(lc.assignment.size()))
    throw IndexError(fmt::format("code {} out of range at level {}", code, l));
  return lc.assignment[static_cast<std::size_t>(code)];
}

std::span<const double> CentroidSet::code_to_centroid(int l, int code) const {
  return level(l).centroids.row(static_cast<std::size_t>(cluster_of(l, code)));
}

CentroidSet cluster_codebooks(const std::vector<nx::Tensor<double>>& codebooks, int k_prime, std::uint64_t seed) {
  std::vector<LevelClusters> levels;
  for (std::size_t l = 0; l < codebooks.size(); ++l)
    levels.push_back(cluster_codebook(codebooks[l], k_prime, seed + 104729 * l));
  return CentroidSet(k_prime, std::move(levels));
}

void write_centroid_set(const std::filesystem::path& dir, const CentroidSet& set) {
  std::filesystem::create_directories(dir);
  std::string tsv;
  for (int l = 0; l < set.levels(); ++l) {
    const auto& lc = set.level(l);
    for (std::size_t c = 0; c < lc.assignment.size(); ++c) tsv += fmt::format("{}\t{}\t{}\n", l, c, lc.assignment[c]);
    corpus::write_emb1(dir / fmt::format("centroids_{}.emb", l), lc.centroids.cast<float>());
  }
  io::write_text(dir / "clusters.tsv", tsv);
}

CentroidSet read_centroid_set(const std::filesystem::path& dir) {
  const auto tsv_path = dir / "clusters.tsv";
  if (!std::filesystem::exists(tsv_path)) throw ParseError("missing " + tsv_path.string());
  std::map<int, std::vector<int>> maps;
  std::istringstream in(io::read_text(tsv_path));
  std::string line;
  long line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (io::trim(line).empty()) continue;
    const auto f = io::split(line, '\t');
    int v[3];
    bool ok = f.size() == 3;
    for (std::size_t i = 0; ok && i < 3; ++i) {
      const auto s = io::trim(f[i]);
      auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v[i]);
      ok = ec == std::errc() && p == s.data() + s.size();
    }
    if (!ok) throw ParseError("malformed cluster row", line_no);
    auto& m = maps[v[0]];
    if (v[1] != static_cast<int>(m.size())) throw ParseError("cluster rows must be in code order", line_no);
    m.push_back(v[2]);
  }
  std::vector<LevelClusters> levels;
  int k_prime = -1;
  for (const auto& [l, assignment] : maps) {
    if (l != static_cast<int>(levels.size())) throw ParseError("cluster levels must be contiguous from 0");
    LevelClusters lc;
    lc.centroids = corpus::read_emb1(dir / fmt::format("centroids_{}.emb", l)).cast<double>();
    lc.assignment = assignment;
    if (k_prime < 0) k_prime = static_cast<int>(lc.centroids.rows());
    levels.push_back(std::move(lc));
  }
  if (levels.empty()) throw ParseError("cluster map is empty: " + tsv_path.string());
  return CentroidSet(k_prime, std::move(levels));
}

}  // namespace s2gr::sem
