#pragma once

#include <cstdint>
#include <vector>

#include "s2gr/numerics/tensor.hpp"

namespace s2gr {

struct KMeansConfig {
  int k = 8;
  int max_iter = 100;
  double tol = 1e-6;  // max centre shift (Euclidean) that counts as converged
  std::uint64_t seed = 0;
};

struct KMeansResult {
  nx::Tensor<double> centroids;  // k x d, each the mean of its members
  std::vector<int> assignment;   // per row
  std::vector<double> objective; // sum of squared distances after each assignment step
  int iterations = 0;
  bool converged = false;
};

/// Lloyd iterations from a k-means++ seeding. Nearest-centre ties go to the
/// lowest index. A cluster that empties takes the point farthest from its
/// centre out of some cluster with at least two members, so every cluster
/// stays nonempty. Throws ConfigError if k < 1 or k > rows.
KMeansResult kmeans(const nx::Tensor<double>& data, const KMeansConfig& cfg);

/// Index of the nearest row of `centroids` to each row of `data`.
std::vector<int> nearest_centroid(const nx::Tensor<double>& data, const nx::Tensor<double>& centroids);

}  // namespace s2gr
