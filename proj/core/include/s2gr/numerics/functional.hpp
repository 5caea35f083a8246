#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace s2gr::nx {

// Plain (non-taped) numeric helpers used by inference and tests.

/// a.b / (|a||b|). Throws DomainError on a zero-norm input, ShapeError on a
/// length mismatch.
double cosine_sim(std::span<const double> a, std::span<const double> b);

/// -log softmax(logits)[target], computed with max-subtraction.
double softmax_cross_entropy(std::span<const double> logits, int target);

template <typename T>
void log_softmax_inplace(std::span<T> v);

template <typename T>
std::vector<T> softmax(std::span<const T> v);

}  // namespace s2gr::nx
