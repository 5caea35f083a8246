#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "s2gr/numerics/tensor.hpp"

namespace s2gr::sem {

struct LevelClusters {
  nx::Tensor<double> centroids;   // K' x d
  std::vector<int> assignment;    // code -> cluster, size K
  std::vector<double> objective;  // k-means objective per iteration
};

/// Seeded k-means++ / Lloyd over one level's K codewords (cap 100 iterations,
/// tolerance 1e-6). Throws ConfigError if k_prime > K or k_prime < 1.
LevelClusters cluster_codebook(const nx::Tensor<double>& codebook, int k_prime, std::uint64_t seed);

class CentroidSet {
 public:
  CentroidSet() = default;
  CentroidSet(int num_clusters, std::vector<LevelClusters> levels);

  int num_clusters() const { return num_clusters_; }
  int levels() const { return static_cast<int>(levels_.size()); }
  int codebook_size() const { return levels_.empty() ? 0 : static_cast<int>(levels_[0].assignment.size()); }
  int dim() const { return levels_.empty() ? 0 : static_cast<int>(levels_[0].centroids.cols()); }
  const LevelClusters& level(int l) const;

  /// Cluster index of `code` at `level`; IndexError when out of range.
  int cluster_of(int level, int code) const;
  /// C_l[a_l[code]].
  std::span<const double> code_to_centroid(int level, int code) const;

 private:
  int num_clusters_ = 0;
  std::vector<LevelClusters> levels_;
};

CentroidSet cluster_codebooks(const std::vector<nx::Tensor<double>>& codebooks, int k_prime, std::uint64_t seed);

// `clusters.tsv` (`level \t code \t cluster`) plus `centroids_<l>.emb` per level.
void write_centroid_set(const std::filesystem::path& dir, const CentroidSet& set);
CentroidSet read_centroid_set(const std::filesystem::path& dir);

}  // namespace s2gr::sem
