#include "s2gr/kmeans.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>

#include "s2gr/errors.hpp"
#include "s2gr/rng.hpp"

namespace s2gr {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;

ConstMap as_map(const nx::Tensor<double>& t) {
  return ConstMap(t.data.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

double sq_dist(const double* a, const double* b, std::size_t d) {
  double s = 0;
  for (std::size_t c = 0; c < d; ++c) {
    const double diff = a[c] - b[c];
    s += diff * diff;
  }
  return s;
}

// Squared distances of every data row to every centre (n x k). Uses the Gram
// expansion for speed, clamped at zero.
RowMat all_sq_dist(const nx::Tensor<double>& data, const nx::Tensor<double>& centres) {
  const auto x = as_map(data);
  const auto c = as_map(centres);
  RowMat d = -2.0 * x * c.transpose();
  d.colwise() += x.rowwise().squaredNorm();
  d.rowwise() += c.rowwise().squaredNorm().transpose();
  return d.cwiseMax(0.0);
}

std::vector<int> argmin_rows(const RowMat& d) {
  std::vector<int> a(static_cast<std::size_t>(d.rows()));
  for (Eigen::Index i = 0; i < d.rows(); ++i) {
    int best = 0;
    for (Eigen::Index j = 1; j < d.cols(); ++j)
      if (d(i, j) < d(i, best)) best = static_cast<int>(j);
    a[static_cast<std::size_t>(i)] = best;
  }
  return a;
}

nx::Tensor<double> plus_plus_init(const nx::Tensor<double>& data, int k, Rng& rng) {
  const std::size_t n = data.rows(), d = data.cols();
  nx::Tensor<double> centres(static_cast<std::size_t>(k), d);
  std::vector<double> best(n, std::numeric_limits<double>::infinity());
  std::vector<bool> chosen(n, false);
  std::size_t pick = rng.index(n);
  for (int c = 0; c < k; ++c) {
    chosen[pick] = true;
    std::copy_n(data.data.begin() + static_cast<std::ptrdiff_t>(pick * d), d,
                centres.data.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(c) * d));
    if (c + 1 == k) break;
    double total = 0;
    for (std::size_t i = 0; i < n; ++i) {
      best[i] = std::min(best[i], sq_dist(&data.data[i * d], &data.data[pick * d], d));
      total += best[i];
    }
    if (total > 0) {
      double u = rng.uniform() * total;
      pick = n - 1;
      for (std::size_t i = 0; i < n; ++i) {
        u -= best[i];
        if (u < 0 && best[i] > 0) {
          pick = i;
          break;
        }
      }
      while (best[pick] == 0 && pick > 0) --pick;
    } else {
      // All remaining points coincide with a centre; take any unchosen row.
      std::vector<std::size_t> rest;
      for (std::size_t i = 0; i < n; ++i)
        if (!chosen[i]) rest.push_back(i);
      pick = rest[rng.index(rest.size())];
    }
  }
  return centres;
}

}  // namespace

std::vector<int> nearest_centroid(const nx::Tensor<double>& data, const nx::Tensor<double>& centroids) {
  if (data.cols() != centroids.cols())
    throw ShapeError("nearest_centroid: " + data.shape_str() + " vs " + centroids.shape_str());
  return argmin_rows(all_sq_dist(data, centroids));
}

KMeansResult kmeans(const nx::Tensor<double>& data, const KMeansConfig& cfg) {
  const std::size_t n = data.rows(), d = data.cols();
  if (cfg.k < 1) throw ConfigError("kmeans: k must be >= 1");
  if (static_cast<std::size_t>(cfg.k) > n)
    throw ConfigError("kmeans: k = " + std::to_string(cfg.k) + " exceeds " + std::to_string(n) + " points");
  if (cfg.max_iter < 1) throw ConfigError("kmeans: max_iter must be >= 1");
  const auto k = static_cast<std::size_t>(cfg.k);
  Rng rng(cfg.seed);

  KMeansResult res;
  res.centroids = plus_plus_init(data, cfg.k, rng);
  for (int it = 1; it <= cfg.max_iter; ++it) {
    const RowMat dist = all_sq_dist(data, res.centroids);
    std::vector<int> a = argmin_rows(dist);

    std::vector<int> size(k, 0);
    for (int c : a) ++size[static_cast<std::size_t>(c)];
    std::vector<double> own(n);
    for (std::size_t i = 0; i < n; ++i)
      own[i] = sq_dist(&data.data[i * d], &res.centroids.data[static_cast<std::size_t>(a[i]) * d], d);
    for (std::size_t c = 0; c < k; ++c) {
      if (size[c] > 0) continue;
      std::size_t far = n;
      for (std::size_t i = 0; i < n; ++i)
        if (size[static_cast<std::size_t>(a[i])] >= 2 && (far == n || own[i] > own[far])) far = i;
      --size[static_cast<std::size_t>(a[far])];
      a[far] = static_cast<int>(c);
      size[c] = 1;
      own[far] = 0;
      std::copy_n(data.data.begin() + static_cast<std::ptrdiff_t>(far * d), d,
                  res.centroids.data.begin() + static_cast<std::ptrdiff_t>(c * d));
    }
    double objective = 0;
    for (double v : own) objective += v;
    res.objective.push_back(objective);

    nx::Tensor<double> next(k, d);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < d; ++c) next.data[static_cast<std::size_t>(a[i]) * d + c] += data.data[i * d + c];
    double shift = 0;
    for (std::size_t c = 0; c < k; ++c) {
      for (std::size_t j = 0; j < d; ++j) next.data[c * d + j] /= size[c];
      shift = std::max(shift, std::sqrt(sq_dist(&next.data[c * d], &res.centroids.data[c * d], d)));
    }
    res.centroids = std::move(next);
    res.assignment = std::move(a);
    res.iterations = it;
    if (shift <= cfg.tol) {
      res.converged = true;
      break;
    }
  }
  return res;
}

}  // namespace s2gr
