#include "s2gr/numerics/functional.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "s2gr/errors.hpp"

namespace s2gr::nx {

double cosine_sim(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("cosine_sim: length mismatch");
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) throw DomainError("cosine_sim: zero-norm input");
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

double softmax_cross_entropy(std::span<const double> logits, int target) {
  if (target < 0 || static_cast<std::size_t>(target) >= logits.size())
    throw IndexError("softmax_cross_entropy: target " + std::to_string(target) +
                     " out of range [0, " + std::to_string(logits.size()) + ")");
  const double mx = *std::max_element(logits.begin(), logits.end());
  double s = 0;
  for (double v : logits) s += std::exp(v - mx);
  return mx + std::log(s) - logits[static_cast<std::size_t>(target)];
}

template <typename T>
void log_softmax_inplace(std::span<T> v) {
  if (v.empty()) return;
  const T mx = *std::max_element(v.begin(), v.end());
  T s = 0;
  for (T x : v) s += std::exp(x - mx);
  const T lse = mx + std::log(s);
  for (T& x : v) x -= lse;
}

template <typename T>
std::vector<T> softmax(std::span<const T> v) {
  std::vector<T> out(v.begin(), v.end());
  if (out.empty()) return out;
  const T mx = *std::max_element(out.begin(), out.end());
  T s = 0;
  for (T& x : out) {
    x = std::exp(x - mx);
    s += x;
  }
  for (T& x : out) x /= s;
  return out;
}

template void log_softmax_inplace<float>(std::span<float>);
template void log_softmax_inplace<double>(std::span<double>);
template std::vector<float> softmax<float>(std::span<const float>);
template std::vector<double> softmax<double>(std::span<const double>);

}  // namespace s2gr::nx
