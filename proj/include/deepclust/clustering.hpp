#pragma once

#include "deepclust/error.hpp"
#include "deepclust/random.hpp"
#include "deepclust/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

namespace deepclust::clustering {

using Labels = std::vector<std::uint32_t>;

/// N x D row-major feature matrix; rows are images.
struct FeatureMatrix
{
  std::size_t         rows{0};
  std::size_t         dim{0};
  std::vector<double> data;
  bool                normalized{false};
  std::vector<bool>   zero_rows;  // rows that were all-zero at normalization time

  FeatureMatrix() = default;

  FeatureMatrix(std::size_t n, std::size_t d, std::vector<double> values = {})
    : rows(n)
    , dim(d)
    , data(std::move(values))
  {
    if (data.empty())
      data.assign(n * d, 0.0);
    if (data.size() != n * d)
      throw DimensionError("feature buffer length " + std::to_string(data.size()) + " != " +
                           std::to_string(n) + " x " + std::to_string(d));
  }

  template <typename T>
  static FeatureMatrix from_tensor(Tensor<T> const &t)
  {
    if (t.rank() != 2)
      throw DimensionError("feature tensor must be (N, D), got " + shape_string(t.shape()));
    return FeatureMatrix(t.dim(0), t.dim(1), std::vector<double>(t.values().begin(), t.values().end()));
  }

  double const *row(std::size_t i) const
  {
    return data.data() + i * dim;
  }

  double *row(std::size_t i)
  {
    return data.data() + i * dim;
  }
};

/// Divides each nonzero row by its Euclidean norm; zero rows stay zero and are flagged.
inline FeatureMatrix l2_normalize(FeatureMatrix features)
{
  features.zero_rows.assign(features.rows, false);
  for (std::size_t i = 0; i < features.rows; ++i)
  {
    double *r  = features.row(i);
    double  sq = 0.0;
    for (std::size_t j = 0; j < features.dim; ++j)
    {
      if (!std::isfinite(r[j]))
        throw ValueError("non-finite feature value in row " + std::to_string(i));
      sq += r[j] * r[j];
    }
    if (sq == 0.0)
    {
      features.zero_rows[i] = true;
      continue;
    }
    double const norm = std::sqrt(sq);
    for (std::size_t j = 0; j < features.dim; ++j)
      r[j] /= norm;
  }
  features.normalized = true;
  return features;
}

struct ClusteringResult
{
  std::size_t         k{0};
  std::size_t         dim{0};
  std::vector<double> centroids;  // k x dim
  Labels              assignments;
  double              inertia{0.0};
  std::size_t         iterations_run{0};
  std::size_t         empty_repairs{0};
  std::vector<double> inertia_history;  // after each assignment step
};

struct KMeansOptions
{
  std::size_t   k{2};
  std::uint64_t seed{0};
  std::size_t   max_iters{20};
  std::size_t   restarts{1};
};

namespace detail {

inline double squared_distance(double const *a, double const *b, std::size_t dim)
{
  double s = 0.0;
  for (std::size_t j = 0; j < dim; ++j)
  {
    double const d = a[j] - b[j];
    s += d * d;
  }
  return s;
}

/// Nearest centroid with ties to the lowest index.
inline std::pair<std::uint32_t, double> nearest(double const *point, std::vector<double> const &centroids,
                                                std::size_t k, std::size_t dim)
{
  std::uint32_t best   = 0;
  double        best_d = squared_distance(point, centroids.data(), dim);
  for (std::size_t c = 1; c < k; ++c)
  {
    double const d = squared_distance(point, centroids.data() + c * dim, dim);
    if (d < best_d)
    {
      best_d = d;
      best   = static_cast<std::uint32_t>(c);
    }
  }
  return {best, best_d};
}

inline std::vector<double> seed_plus_plus(FeatureMatrix const &f, std::size_t k, Rng &rng)
{
  std::vector<double> centroids(k * f.dim);
  std::vector<double> dist(f.rows, std::numeric_limits<double>::infinity());
  std::vector<bool>   chosen(f.rows, false);
  std::size_t         pick = rng.below(f.rows);
  for (std::size_t c = 0; c < k; ++c)
  {
    if (c > 0)
    {
      double total = 0.0;
      for (double d : dist)
        total += d;
      if (total > 0.0)
      {
        double target = rng.uniform() * total;
        pick          = f.rows;
        for (std::size_t i = 0; i < f.rows; ++i)
        {
          if (dist[i] <= 0.0)
            continue;
          pick = i;
          target -= dist[i];
          if (target < 0.0)
            break;
        }
      }
      else
      {
        // Every remaining point coincides with a chosen centroid.
        std::vector<std::size_t> free;
        for (std::size_t i = 0; i < f.rows; ++i)
          if (!chosen[i])
            free.push_back(i);
        pick = free[rng.below(free.size())];
      }
    }
    chosen[pick] = true;
    std::copy_n(f.row(pick), f.dim, centroids.begin() + static_cast<std::ptrdiff_t>(c * f.dim));
    for (std::size_t i = 0; i < f.rows; ++i)
      dist[i] = std::min(dist[i], squared_distance(f.row(i), centroids.data() + c * f.dim, f.dim));
  }
  return centroids;
}

inline double assign(FeatureMatrix const &f, std::vector<double> const &centroids, std::size_t k,
                     Labels &labels, std::vector<double> &dist)
{
  double inertia = 0.0;
  for (std::size_t i = 0; i < f.rows; ++i)
  {
    auto const [c, d] = nearest(f.row(i), centroids, k, f.dim);
    labels[i]         = c;
    dist[i]           = d;
    inertia += d;
  }
  return inertia;
}

/**
 * Gives every empty cluster a member.
 *
 * The empty cluster's centroid moves onto the point farthest from its own
 * centroid inside the currently largest cluster, and points are reassigned.
 * Exact duplicates can leave the new centroid tied with a lower index; such a
 * point is then placed in the empty cluster directly, which keeps its
 * distance (zero) and so does not change the inertia.
 */
inline std::size_t repair_empty(FeatureMatrix const &f, std::vector<double> &centroids, std::size_t k,
                                Labels &labels, std::vector<double> &dist)
{
  std::size_t                                       repairs = 0;
  std::vector<std::pair<std::size_t, std::uint32_t>> forced;
  for (std::size_t attempt = 0; attempt <= k; ++attempt)
  {
    std::vector<std::size_t> counts(k, 0);
    for (auto l : labels)
      ++counts[l];
    auto const empty = std::find(counts.begin(), counts.end(), 0);
    if (empty == counts.end())
      return repairs;
    std::size_t const target  = static_cast<std::size_t>(empty - counts.begin());
    std::size_t const largest = static_cast<std::size_t>(std::max_element(counts.begin(), counts.end()) - counts.begin());
    std::size_t       far     = f.rows;
    for (std::size_t i = 0; i < f.rows; ++i)
      if (labels[i] == largest && (far == f.rows || dist[i] > dist[far]))
        far = i;
    std::copy_n(f.row(far), f.dim, centroids.begin() + static_cast<std::ptrdiff_t>(target * f.dim));
    ++repairs;
    assign(f, centroids, k, labels, dist);
    for (auto const &[point, cluster] : forced)
      labels[point] = cluster;
    if (labels[far] != target && dist[far] == 0.0)
    {
      std::vector<std::size_t> now(k, 0);
      for (auto l : labels)
        ++now[l];
      if (now[target] == 0 && now[labels[far]] > 1)
      {
        labels[far] = static_cast<std::uint32_t>(target);
        forced.emplace_back(far, static_cast<std::uint32_t>(target));
      }
    }
  }
  return repairs;
}

inline ClusteringResult lloyd(FeatureMatrix const &f, std::size_t k, std::size_t max_iters, Rng &rng)
{
  ClusteringResult res;
  res.k         = k;
  res.dim       = f.dim;
  res.centroids = seed_plus_plus(f, k, rng);
  res.assignments.assign(f.rows, 0);
  std::vector<double> dist(f.rows, 0.0);
  Labels              previous;

  for (std::size_t it = 0; it < max_iters; ++it)
  {
    assign(f, res.centroids, k, res.assignments, dist);
    std::size_t const repairs = repair_empty(f, res.centroids, k, res.assignments, dist);
    res.empty_repairs += repairs;
    double inertia = 0.0;
    for (double d : dist)
      inertia += d;
    // dist is stale for a force-placed duplicate, but its value (0) is exact.
    res.inertia = inertia;
    res.inertia_history.push_back(inertia);
    res.iterations_run = it + 1;
    if (repairs == 0 && res.assignments == previous)
      break;
    if (it + 1 == max_iters)
      break;
    previous = res.assignments;

    // Centroid update with fixed-order accumulation.
    std::vector<double>      sums(k * f.dim, 0.0);
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < f.rows; ++i)
    {
      std::size_t const c = res.assignments[i];
      ++counts[c];
      double const *r = f.row(i);
      for (std::size_t j = 0; j < f.dim; ++j)
        sums[c * f.dim + j] += r[j];
    }
    for (std::size_t c = 0; c < k; ++c)
    {
      if (counts[c] == 0)
        continue;
      for (std::size_t j = 0; j < f.dim; ++j)
        res.centroids[c * f.dim + j] = sums[c * f.dim + j] / static_cast<double>(counts[c]);
    }
  }
  return res;
}

}  // namespace detail

/**
 * Lloyd's K-means from k-means++ seeding.
 *
 * Stops at an assignment fixpoint or after max_iters assignment steps. The
 * returned centroids are the ones the final assignments were computed
 * against, so every point is at its nearest centroid (ties to the lowest
 * index). With restarts > 1 the lowest-inertia run wins (first on ties).
 */
inline ClusteringResult kmeans(FeatureMatrix const &features, KMeansOptions const &opts)
{
  if (!features.normalized)
    throw ValueError("kmeans expects l2-normalized features");
  if (opts.k == 0)
    throw ValueError("kmeans: k must be >= 1");
  if (opts.k > features.rows)
    throw ValueError("kmeans: k = " + std::to_string(opts.k) + " exceeds the number of points " +
                     std::to_string(features.rows));
  if (opts.max_iters < 1)
    throw ValueError("kmeans: max_iters must be >= 1");

  ClusteringResult best;
  bool             have = false;
  for (std::size_t r = 0; r < std::max<std::size_t>(opts.restarts, 1); ++r)
  {
    Rng  rng(derive_seed(opts.seed, stream::kKMeans, r));
    auto res = detail::lloyd(features, opts.k, opts.max_iters, rng);
    if (!have || res.inertia < best.inertia)
    {
      best = std::move(res);
      have = true;
    }
  }
  return best;
}

inline ClusteringResult kmeans(FeatureMatrix const &features, std::size_t k, std::uint64_t seed,
                               std::size_t max_iters = 20)
{
  return kmeans(features, KMeansOptions{k, seed, max_iters, 1});
}

inline Labels const &pseudo_labels(ClusteringResult const &result)
{
  return result.assignments;
}

/// Sum of squared distances from points to the means of their assigned groups.
inline double partition_inertia(FeatureMatrix const &f, Labels const &labels, std::size_t k)
{
  std::vector<double>      sums(k * f.dim, 0.0);
  std::vector<std::size_t> counts(k, 0);
  for (std::size_t i = 0; i < f.rows; ++i)
  {
    ++counts[labels[i]];
    for (std::size_t j = 0; j < f.dim; ++j)
      sums[labels[i] * f.dim + j] += f.row(i)[j];
  }
  double total = 0.0;
  for (std::size_t i = 0; i < f.rows; ++i)
  {
    for (std::size_t j = 0; j < f.dim; ++j)
    {
      double const mean = sums[labels[i] * f.dim + j] / static_cast<double>(counts[labels[i]]);
      double const d    = f.row(i)[j] - mean;
      total += d * d;
    }
  }
  return total;
}

}  // namespace deepclust::clustering
