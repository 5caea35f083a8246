#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "s2gr/numerics/tape.hpp"
#include "s2gr/rng.hpp"

namespace s2gr::nx {

// Differentiable ops over rank-2 values. Explicitly instantiated for float and
// double in ops.cpp.

template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> scale(const Var<T>& a, double s);
template <typename T> Var<T> add_scalar(const Var<T>& a, double s);
// a (rows x n) + row (1 x n), broadcast over rows.
template <typename T> Var<T> add_row(const Var<T>& a, const Var<T>& row);
// a (rows x n) * col (rows x 1), broadcast over columns.
template <typename T> Var<T> mul_col(const Var<T>& a, const Var<T>& col);

template <typename T> Var<T> matmul(const Var<T>& a, const Var<T>& b);
// a * b^T
template <typename T> Var<T> matmul_nt(const Var<T>& a, const Var<T>& b);
// x W + b with W stored (in x out); b may be invalid for no bias.
template <typename T> Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b);

template <typename T> Var<T> relu(const Var<T>& a);
template <typename T> Var<T> exp(const Var<T>& a);
template <typename T> Var<T> log(const Var<T>& a);

template <typename T> Var<T> sum(const Var<T>& a);
template <typename T> Var<T> mean(const Var<T>& a);
// Per-row sum: (rows x n) -> (rows x 1).
template <typename T> Var<T> sum_cols(const Var<T>& a);

template <typename T> Var<T> slice_rows(const Var<T>& a, std::size_t begin, std::size_t count);
template <typename T> Var<T> slice_cols(const Var<T>& a, std::size_t begin, std::size_t count);
template <typename T> Var<T> gather_rows(const Var<T>& a, std::span<const int> ids);
template <typename T> Var<T> concat_rows(std::span<const Var<T>> parts);
// Row r of the result is parts[part_of_row[r]] row row_in_part[r]. Builds
// decoder prefixes from per-step pieces.
template <typename T> Var<T> interleave_rows(std::span<const Var<T>> parts,
                                             std::span<const int> part_of_row,
                                             std::span<const int> row_in_part);

template <typename T> Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias,
                                        double eps = 1e-5);
// Inverted dropout; identity when p == 0 or rng is null.
template <typename T> Var<T> dropout(const Var<T>& x, double p, Rng* rng);

// Row-wise L2 normalisation. Throws DomainError on a zero row.
template <typename T> Var<T> normalize_rows(const Var<T>& x);
// Row-wise cosine similarity of two equally shaped matrices -> (rows x 1).
template <typename T> Var<T> cosine_rows(const Var<T>& a, const Var<T>& b);
// All-pairs cosine similarity: (n x d), (m x d) -> (n x m).
template <typename T> Var<T> cosine_matrix(const Var<T>& a, const Var<T>& b);

template <typename T> Var<T> log_softmax_rows(const Var<T>& x);
// out[r] = x[r, idx[r]] -> (rows x 1).
template <typename T> Var<T> pick(const Var<T>& x, std::span<const int> idx);
// Per-row -log softmax(x)[target] with max-subtraction -> (rows x 1).
template <typename T> Var<T> cross_entropy_rows(const Var<T>& logits, std::span<const int> targets);

// Value passes, gradient is cut. Honors the tape's record/replay mode.
template <typename T> Var<T> stop_gradient(const Var<T>& x);

// D_ij = |x_i - x_j|^2 computed directly (not via the Gram expansion).
template <typename T> Var<T> pairwise_sq_dist(const Var<T>& x);

// Multi-head scaled dot-product attention over a batch of blocks.
// q is (batch*q_len x d); k, v are (kv_blocks*k_len x d). Query block b
// attends to key block kv_index[b] (identity when empty), using only the
// first key_len[b] keys (all when empty). With `causal`, query row i sits at
// absolute position q_offset + i and sees keys j <= q_offset + i.
struct AttentionSpec {
  int batch = 1;
  int q_len = 1;
  int k_len = 1;
  int heads = 1;
  bool causal = false;
  int q_offset = 0;
  std::vector<int> key_len;
  std::vector<int> kv_index;
};
template <typename T> Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v,
                                       const AttentionSpec& spec);

}  // namespace s2gr::nx
