#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "s2gr/corpus.hpp"
#include "s2gr/numerics/tensor.hpp"

namespace s2gr::graph {

struct Edge {
  int i = 0;
  int j = 0;  // i < j
  std::int64_t w = 0;
  friend bool operator==(const Edge&, const Edge&) = default;
};

// Symmetric co-occurrence graph stored as its upper triangle, sorted by (i, j).
struct CoocGraph {
  int num_nodes = 0;
  int window = 0;
  std::vector<Edge> edges;

  std::int64_t weight(int i, int j) const;
  std::vector<double> degrees() const;
};

/// w_ij = number of users in whose sequence i and j appear within `window`
/// consecutive positions. Throws ConfigError if window < 2.
CoocGraph build_cooc_graph(const std::vector<std::vector<int>>& sequences, int num_items, int window = 5);
CoocGraph build_cooc_graph(const corpus::InteractionLog& log, int window = 5);

// CSR, both triangles stored.
struct SparseMatrix {
  int n = 0;
  std::vector<int> row_ptr;
  std::vector<int> col;
  std::vector<double> val;

  double at(int i, int j) const;
  nx::Tensor<double> to_dense() const;
  // this * dense (n x d).
  nx::Tensor<double> multiply(const nx::Tensor<double>& dense) const;
};

/// D^-1/2 A D^-1/2; isolated nodes give zero rows and columns.
SparseMatrix normalize_adjacency(const CoocGraph& g);

struct PropagationConfig {
  double alpha = 0.15;
  int hops = 3;
  void validate() const;
};

/// [H0 = X, ..., HK] with Hk = (1 - alpha) A_hat H(k-1) + alpha X.
std::vector<nx::Tensor<double>> propagate(const nx::Tensor<double>& x, const SparseMatrix& a_hat,
                                          const PropagationConfig& cfg);
/// beta_k = alpha (1 - alpha)^k, normalized over k = 0..K.
std::vector<double> fusion_weights(const PropagationConfig& cfg);
nx::Tensor<double> fuse(const std::vector<nx::Tensor<double>>& hs, const PropagationConfig& cfg);

/// Full smoothing pipeline: normalize, propagate, fuse.
nx::Tensor<float> align_embeddings(const nx::Tensor<float>& x, const CoocGraph& g, const PropagationConfig& cfg);

// `i \t j \t w`, i < j.
void write_graph(const std::filesystem::path& path, const CoocGraph& g);
CoocGraph read_graph(const std::filesystem::path& path, int num_nodes, int window);

}  // namespace s2gr::graph
