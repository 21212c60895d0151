#pragma once

#include "deepclust/error.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace deepclust::metrics {

/**
 * Joint counts of two partitions of the same N items.
 *
 * Rows index the distinct labels of x in ascending order, columns the
 * distinct labels of y; labels need not be contiguous.
 */
struct ContingencyTable
{
  std::vector<std::uint32_t> row_labels;
  std::vector<std::uint32_t> col_labels;
  std::vector<std::size_t>   counts;  // rows x cols
  std::size_t                total{0};

  std::size_t rows() const
  {
    return row_labels.size();
  }
  std::size_t cols() const
  {
    return col_labels.size();
  }
  std::size_t at(std::size_t r, std::size_t c) const
  {
    return counts[r * cols() + c];
  }
  std::vector<std::size_t> row_sums() const
  {
    std::vector<std::size_t> s(rows(), 0);
    for (std::size_t r = 0; r < rows(); ++r)
      for (std::size_t c = 0; c < cols(); ++c)
        s[r] += at(r, c);
    return s;
  }
  std::vector<std::size_t> col_sums() const
  {
    std::vector<std::size_t> s(cols(), 0);
    for (std::size_t r = 0; r < rows(); ++r)
      for (std::size_t c = 0; c < cols(); ++c)
        s[c] += at(r, c);
    return s;
  }
};

namespace detail {

inline std::vector<std::uint32_t> distinct(std::span<const std::uint32_t> v)
{
  std::vector<std::uint32_t> d(v.begin(), v.end());
  std::sort(d.begin(), d.end());
  d.erase(std::unique(d.begin(), d.end()), d.end());
  return d;
}

inline std::size_t index_of(std::vector<std::uint32_t> const &sorted, std::uint32_t v)
{
  return static_cast<std::size_t>(std::lower_bound(sorted.begin(), sorted.end(), v) - sorted.begin());
}

inline double entropy(std::vector<std::size_t> const &counts, double n)
{
  double h = 0.0;
  for (auto c : counts)
  {
    if (c == 0)
      continue;
    double const p = static_cast<double>(c) / n;
    h -= p * std::log(p);
  }
  return h;
}

}  // namespace detail

inline ContingencyTable contingency(std::span<const std::uint32_t> x, std::span<const std::uint32_t> y)
{
  if (x.size() != y.size())
    throw DimensionError("label vectors differ in length: " + std::to_string(x.size()) + " vs " +
                         std::to_string(y.size()));
  if (x.empty())
    throw ValueError("label vectors must be non-empty");
  ContingencyTable t;
  t.row_labels = detail::distinct(x);
  t.col_labels = detail::distinct(y);
  t.counts.assign(t.rows() * t.cols(), 0);
  t.total = x.size();
  for (std::size_t n = 0; n < x.size(); ++n)
  {
    ++t.counts[detail::index_of(t.row_labels, x[n]) * t.cols() + detail::index_of(t.col_labels, y[n])];
  }
  return t;
}

/**
 * Normalized mutual information 2 I(X;Y) / (H(X) + H(Y)) with plug-in
 * entropies (natural log).
 *
 * Two single-block partitions score 1; exactly one single-block partition
 * scores 0.
 */
inline double nmi(ContingencyTable const &t)
{
  double const n    = static_cast<double>(t.total);
  auto const   rows = t.row_sums();
  auto const   cols = t.col_sums();
  double const hx   = detail::entropy(rows, n);
  double const hy   = detail::entropy(cols, n);
  if (t.rows() == 1 && t.cols() == 1)
    return 1.0;
  if (t.rows() == 1 || t.cols() == 1)
    return 0.0;
  // Terms are summed in sorted order so that nmi(x, y) == nmi(y, x) bit for bit.
  std::vector<double> terms;
  for (std::size_t r = 0; r < t.rows(); ++r)
  {
    for (std::size_t c = 0; c < t.cols(); ++c)
    {
      auto const nrc = t.at(r, c);
      if (nrc == 0)
        continue;
      double const joint = static_cast<double>(nrc);
      terms.push_back(joint / n * std::log(joint * n / (static_cast<double>(rows[r]) * static_cast<double>(cols[c]))));
    }
  }
  std::sort(terms.begin(), terms.end());
  double mi = 0.0;
  for (double v : terms)
    mi += v;
  double const value = 2.0 * mi / (hx + hy);
  return std::clamp(value, 0.0, 1.0);
}

inline double nmi(std::span<const std::uint32_t> x, std::span<const std::uint32_t> y)
{
  return nmi(contingency(x, y));
}

/// Fraction of items that belong to the majority class of their cluster.
inline double purity(std::span<const std::uint32_t> assignments, std::span<const std::uint32_t> truth)
{
  auto const  t      = contingency(assignments, truth);
  std::size_t agreed = 0;
  for (std::size_t r = 0; r < t.rows(); ++r)
  {
    std::size_t best = 0;
    for (std::size_t c = 0; c < t.cols(); ++c)
      best = std::max(best, t.at(r, c));
    agreed += best;
  }
  return static_cast<double>(agreed) / static_cast<double>(t.total);
}

struct ClusterSizes
{
  std::size_t min{0};
  std::size_t max{0};
  std::size_t nonempty{0};

  friend bool operator==(ClusterSizes const &, ClusterSizes const &) = default;
};

inline ClusterSizes cluster_sizes(std::span<const std::uint32_t> assignments, std::size_t k)
{
  std::vector<std::size_t> counts(k, 0);
  for (auto a : assignments)
  {
    if (a >= k)
      throw ValueError("cluster index " + std::to_string(a) + " out of range [0, " + std::to_string(k) + ")");
    ++counts[a];
  }
  ClusterSizes s;
  s.min      = *std::min_element(counts.begin(), counts.end());
  s.max      = *std::max_element(counts.begin(), counts.end());
  s.nonempty = static_cast<std::size_t>(std::count_if(counts.begin(), counts.end(), [](auto c) { return c > 0; }));
  return s;
}

/// One row of the training log.
struct EpochMetrics
{
  std::size_t           epoch{0};
  double                loss{0.0};
  std::optional<double> nmi_prev;  // absent at the first epoch
  double                nmi_labels{0.0};
  double                purity{0.0};
  ClusterSizes          sizes;

  friend bool operator==(EpochMetrics const &, EpochMetrics const &) = default;
};

inline constexpr char const *kMetricsHeader =
    "epoch,loss,nmi_prev,nmi_labels,purity,min_cluster,max_cluster,nonempty_clusters";

/// Shortest decimal text that parses back to the same double.
inline std::string format_real(double v)
{
  char buf[64];
  for (int precision = 1; precision <= 17; ++precision)
  {
    std::snprintf(buf, sizeof(buf), "%.*g", precision, v);
    if (std::strtod(buf, nullptr) == v)
      break;
  }
  return buf;
}

inline std::string to_csv_row(EpochMetrics const &m)
{
  std::string row = std::to_string(m.epoch) + ',' + format_real(m.loss) + ',';
  if (m.nmi_prev)
    row += format_real(*m.nmi_prev);
  row += ',' + format_real(m.nmi_labels) + ',' + format_real(m.purity) + ',' + std::to_string(m.sizes.min) + ',' +
         std::to_string(m.sizes.max) + ',' + std::to_string(m.sizes.nonempty);
  return row;
}

}  // namespace deepclust::metrics
