#pragma once

#include <cstdint>
#include <limits>
#include <random>
#include <vector>

#include "pmx/error.hpp"
#include "pmx/nn.hpp"

namespace pmx {

struct KMeansOptions {
  std::size_t max_iterations = 100;
  double tolerance = 1e-6; // stop once inertia improves by no more than this
};

struct KMeansResult {
  Matrix centroids;
  std::vector<std::size_t> assignment;
  std::vector<double> inertia_history; // one entry per assignment step
  double inertia = 0.0;
};

namespace detail {

inline double squared_distance(const Matrix& a, Eigen::Index i, const Matrix& b, Eigen::Index j) {
  return (a.row(i) - b.row(j)).squaredNorm();
}

/// Nearest centroid per point (ties to the lowest index); returns total inertia.
inline double assign_points(const Matrix& points, const Matrix& centroids, std::vector<std::size_t>& assignment) {
  double inertia = 0.0;
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t arg = 0;
    for (Eigen::Index c = 0; c < centroids.rows(); ++c) {
      double d = squared_distance(points, i, centroids, c);
      if (d < best) {
        best = d;
        arg = static_cast<std::size_t>(c);
      }
    }
    assignment[static_cast<std::size_t>(i)] = arg;
    inertia += best;
  }
  return inertia;
}

inline Matrix kmeanspp_seed(const Matrix& points, std::size_t k, Rng& rng) {
  const auto n = static_cast<std::size_t>(points.rows());
  Matrix centroids(static_cast<Eigen::Index>(k), points.cols());
  std::vector<bool> chosen(n, false);
  std::uniform_int_distribution<std::size_t> first(0, n - 1);
  std::size_t idx = first(rng);
  centroids.row(0) = points.row(static_cast<Eigen::Index>(idx));
  chosen[idx] = true;

  std::vector<double> d2(n, std::numeric_limits<double>::infinity());
  for (std::size_t c = 1; c < k; ++c) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      d2[i] = std::min(d2[i], squared_distance(points, static_cast<Eigen::Index>(i), centroids,
                                               static_cast<Eigen::Index>(c - 1)));
      total += d2[i];
    }
    std::size_t pick = n;
    if (total > 0.0) {
      std::uniform_real_distribution<double> u(0.0, total);
      double r = u(rng);
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        acc += d2[i];
        if (acc >= r && d2[i] > 0.0) {
          pick = i;
          break;
        }
      }
    }
    // Degenerate case (all remaining mass zero, or rounding at the tail): first unchosen point.
    if (pick == n) {
      for (std::size_t i = n; i-- > 0;) {
        if (d2[i] > 0.0) { pick = i; break; }
      }
      if (pick == n)
        for (std::size_t i = 0; i < n; ++i)
          if (!chosen[i]) { pick = i; break; }
    }
    chosen[pick] = true;
    centroids.row(static_cast<Eigen::Index>(c)) = points.row(static_cast<Eigen::Index>(pick));
  }
  return centroids;
}

} // namespace detail

/// Lloyd's k-means with k-means++ seeding, deterministic under `seed`.
inline KMeansResult kmeans(const Matrix& points, std::size_t k, std::uint64_t seed, const KMeansOptions& opt = {}) {
  if (k == 0) throw ConfigError("k-means needs k >= 1");
  if (static_cast<std::size_t>(points.rows()) < k)
    throw DataError("k-means needs at least k=" + std::to_string(k) + " points, got " + std::to_string(points.rows()));

  Rng rng(seed);
  KMeansResult res;
  res.centroids = detail::kmeanspp_seed(points, k, rng);
  res.assignment.assign(static_cast<std::size_t>(points.rows()), 0);

  double prev = std::numeric_limits<double>::infinity();
  for (std::size_t iter = 0; iter < opt.max_iterations; ++iter) {
    double inertia = detail::assign_points(points, res.centroids, res.assignment);
    res.inertia_history.push_back(inertia);
    res.inertia = inertia;
    if (prev - inertia <= opt.tolerance) break;
    prev = inertia;

    Matrix sums = Matrix::Zero(res.centroids.rows(), res.centroids.cols());
    std::vector<std::size_t> counts(k, 0);
    for (Eigen::Index i = 0; i < points.rows(); ++i) {
      sums.row(static_cast<Eigen::Index>(res.assignment[static_cast<std::size_t>(i)])) += points.row(i);
      ++counts[res.assignment[static_cast<std::size_t>(i)]];
    }
    for (std::size_t c = 0; c < k; ++c) {
      // Empty clusters keep their previous centroid.
      if (counts[c] > 0)
        res.centroids.row(static_cast<Eigen::Index>(c)) = sums.row(static_cast<Eigen::Index>(c)) / static_cast<double>(counts[c]);
    }
  }
  return res;
}

} // namespace pmx
