#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "s2gr/errors.hpp"

namespace s2gr::nx {

// Dense row-major tensor. Most of the engine works on rank-2 values; vectors
// are 1 x n rows so every op can assume two extents.
template <typename T>
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<T> data;

  Tensor() = default;
  Tensor(std::size_t rows, std::size_t cols, T fill = T(0))
      : shape{rows, cols}, data(rows * cols, fill) {}
  Tensor(std::vector<std::size_t> extents, std::vector<T> values)
      : shape(std::move(extents)), data(std::move(values)) {
    if (numel_of(shape) != data.size()) throw ShapeError("tensor: shape/data length mismatch");
  }

  static Tensor zeros_like(const Tensor& other) {
    Tensor t;
    t.shape = other.shape;
    t.data.assign(other.data.size(), T(0));
    return t;
  }
  static Tensor row_vector(std::vector<T> values) {
    const std::size_t n = values.size();
    return Tensor({1, n}, std::move(values));
  }
  static Tensor scalar(T v) { return Tensor({1, 1}, {v}); }

  static std::size_t numel_of(const std::vector<std::size_t>& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
  }

  std::size_t numel() const { return data.size(); }
  std::size_t rows() const { return shape.size() >= 2 ? numel() / shape.back() : 1; }
  std::size_t cols() const { return shape.empty() ? 1 : shape.back(); }

  T& operator()(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
  T operator()(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }

  std::span<T> row(std::size_t r) { return {data.data() + r * cols(), cols()}; }
  std::span<const T> row(std::size_t r) const { return {data.data() + r * cols(), cols()}; }

  bool all_finite() const {
    for (T v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  std::string shape_str() const {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) s += (i ? "x" : "") + std::to_string(shape[i]);
    return s + "]";
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.data.assign(data.begin(), data.end());
    return out;
  }
};

}  // namespace s2gr::nx
