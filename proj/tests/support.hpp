#pragma once

// Independent oracles and fixtures shared by the unit tests and the acceptance runner.

#include "deepclust/clustering.hpp"
#include "deepclust/nn/network.hpp"

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace support {

using namespace deepclust;

// ---------------------------------------------------------------- files

inline std::filesystem::path scratch_dir(std::string const &name)
{
  auto dir = std::filesystem::temp_directory_path() / ("deepclust_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline std::string read_bytes(std::filesystem::path const &path)
{
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// ---------------------------------------------------------------- gradient check

/// Small network with every layer kind: conv, bn, relu, maxpool, conv, bn, relu, adaptive pool, flatten, linear.
inline nn::Network<double> random_mini_network(Rng &rng, std::size_t classes)
{
  std::size_t const c1     = 2 + rng.below(2);
  std::size_t const c2     = 2 + rng.below(2);
  std::size_t const stride = 1 + rng.below(2);
  std::size_t const pool   = 1 + rng.below(2);
  std::vector<nn::LayerSpec> specs = {
      nn::LayerSpec::conv2d(1, c1, 3, 1, 1), nn::LayerSpec::batchnorm2d(c1), nn::LayerSpec::relu(),
      nn::LayerSpec::maxpool2d(2),           nn::LayerSpec::conv2d(c1, c2, 3, stride, 1),
      nn::LayerSpec::batchnorm2d(c2),        nn::LayerSpec::relu(),
      nn::LayerSpec::adaptive_avg_pool2d(pool), nn::LayerSpec::flatten()};
  std::vector<nn::Layer<double>> features;
  for (auto const &s : specs)
    features.push_back(nn::make_layer<double>(s, rng));
  // Non-trivial affine batch-norm parameters so their gradients are exercised away from the defaults.
  for (auto &l : features)
    if (l.spec.kind == nn::LayerKind::batchnorm2d)
      for (auto &p : l.params)
        for (auto &v : p.values())
          v += rng.uniform(-0.3, 0.3);
  std::vector<nn::Layer<double>> head;
  head.push_back(nn::make_layer<double>(nn::LayerSpec::linear(c2 * pool * pool, classes), rng));
  for (auto &v : head[0].params[1].values())
    v = rng.uniform(-0.1, 0.1);
  return nn::Network<double>(nn::Architecture{}, std::move(features), std::move(head), rng.next_u64());
}

struct GradCheckReport
{
  std::size_t checked{0};
  std::size_t failed{0};
  double      worst{0.0};
  std::string worst_name;
  std::vector<bool> kind_seen = std::vector<bool>(8, false);
};

/// |a - n| / max(|a|, |n|, floor): relative error with an absolute floor for near-zero gradients.
inline double relative_error(double analytic, double numeric, double floor = 1e-6)
{
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/**
 * Compares every analytic parameter gradient of a train-mode forward pass
 * with central differences of the mean cross-entropy loss.
 */
inline void gradient_check(nn::Network<double> &net, Tensor<double> const &batch,
                           std::vector<std::uint32_t> const &labels, double eps, double tol, GradCheckReport &report)
{
  auto loss_at = [&] {
    auto fwd = net.forward(batch, nn::Mode::train);
    return nn::cross_entropy_loss(fwd.logits, labels).loss;
  };
  auto       fwd      = net.forward(batch, nn::Mode::train);
  auto const loss     = nn::cross_entropy_loss(fwd.logits, labels);
  auto const analytic = net.backward(fwd.cache, loss.dlogits);
  auto       params   = net.parameters();

  std::vector<nn::LayerKind> owner;
  for (auto const *layers : {&net.feature_layers(), &net.classifier_layers()})
    for (auto const &l : *layers)
      for (std::size_t p = 0; p < l.params.size(); ++p)
        owner.push_back(l.spec.kind);
  for (auto const *layers : {&net.feature_layers(), &net.classifier_layers()})
    for (auto const &l : *layers)
      report.kind_seen[static_cast<std::size_t>(l.spec.kind)] = true;

  for (std::size_t i = 0; i < params.size(); ++i)
  {
    auto &value = *params[i].value;
    for (std::size_t j = 0; j < value.size(); ++j)
    {
      double const saved = value[j];
      value[j]           = saved + eps;
      double const up    = loss_at();
      value[j]           = saved - eps;
      double const down  = loss_at();
      value[j]           = saved;
      double const numeric = (up - down) / (2.0 * eps);
      double const err     = relative_error(analytic[i][j], numeric);
      ++report.checked;
      if (err > tol)
        ++report.failed;
      if (err > report.worst)
      {
        report.worst      = err;
        report.worst_name = params[i].name + "[" + std::to_string(j) + "]";
      }
    }
  }
}

inline Tensor<double> random_batch(Rng &rng, std::size_t n, std::size_t side)
{
  Tensor<double> batch(Shape{n, 1, side, side});
  for (auto &v : batch.values())
    v = rng.normal();
  return batch;
}

// ---------------------------------------------------------------- k-means oracle

/// Sum of squared distances to per-cluster means, computed directly.
inline double oracle_inertia(std::vector<std::vector<double>> const &points, std::vector<std::uint32_t> const &labels,
                             std::size_t k)
{
  std::size_t const                dim = points[0].size();
  std::vector<std::vector<double>> sums(k, std::vector<double>(dim, 0.0));
  std::vector<std::size_t>         counts(k, 0);
  for (std::size_t i = 0; i < points.size(); ++i)
  {
    ++counts[labels[i]];
    for (std::size_t d = 0; d < dim; ++d)
      sums[labels[i]][d] += points[i][d];
  }
  double total = 0.0;
  for (std::size_t i = 0; i < points.size(); ++i)
  {
    auto const c = labels[i];
    for (std::size_t d = 0; d < dim; ++d)
    {
      double const diff = points[i][d] - sums[c][d] / static_cast<double>(counts[c]);
      total += diff * diff;
    }
  }
  return total;
}

/// Minimum inertia over every partition into at most k blocks (restricted growth strings).
inline double brute_force_inertia(std::vector<std::vector<double>> const &points, std::size_t k)
{
  std::size_t const          n = points.size();
  std::vector<std::uint32_t> labels(n, 0);
  double                     best = std::numeric_limits<double>::infinity();
  auto recurse = [&](auto &self, std::size_t i, std::uint32_t used) -> void {
    if (i == n)
    {
      best = std::min(best, oracle_inertia(points, labels, used));
      return;
    }
    for (std::uint32_t c = 0; c <= used && c < k; ++c)
    {
      labels[i] = c;
      self(self, i + 1, std::max<std::uint32_t>(used, c + 1));
    }
  };
  recurse(recurse, 0, 0);
  return best;
}

inline clustering::FeatureMatrix to_matrix(std::vector<std::vector<double>> const &points)
{
  clustering::FeatureMatrix f(points.size(), points[0].size());
  for (std::size_t i = 0; i < points.size(); ++i)
    for (std::size_t d = 0; d < points[i].size(); ++d)
      f.row(i)[d] = points[i][d];
  return f;
}

inline std::vector<std::vector<double>> random_unit_points(Rng &rng, std::size_t n, std::size_t dim)
{
  std::vector<std::vector<double>> pts(n, std::vector<double>(dim));
  for (auto &p : pts)
  {
    double norm = 0.0;
    for (auto &v : p)
    {
      v = rng.normal();
      norm += v * v;
    }
    norm = std::sqrt(norm);
    for (auto &v : p)
      v /= norm;
  }
  return pts;
}

// ---------------------------------------------------------------- metric oracles

/// NMI from joint and marginal probabilities, summed in map order.
inline double oracle_nmi(std::vector<std::uint32_t> const &x, std::vector<std::uint32_t> const &y)
{
  double const                                          n = static_cast<double>(x.size());
  std::map<std::uint32_t, double>                       px, py;
  std::map<std::pair<std::uint32_t, std::uint32_t>, double> pxy;
  for (std::size_t i = 0; i < x.size(); ++i)
  {
    px[x[i]] += 1.0 / n;
    py[y[i]] += 1.0 / n;
    pxy[{x[i], y[i]}] += 1.0 / n;
  }
  if (px.size() == 1 && py.size() == 1)
    return 1.0;
  double hx = 0.0, hy = 0.0, mi = 0.0;
  for (auto const &[k, p] : px)
    hx -= p * std::log(p);
  for (auto const &[k, p] : py)
    hy -= p * std::log(p);
  for (auto const &[key, p] : pxy)
    mi += p * std::log(p / (px[key.first] * py[key.second]));
  if (hx + hy <= 0.0)
    return 0.0;
  return std::clamp(2.0 * mi / (hx + hy), 0.0, 1.0);
}

/// Purity by scanning every cluster against every class.
inline double oracle_purity(std::vector<std::uint32_t> const &assign, std::vector<std::uint32_t> const &truth)
{
  std::uint32_t const kmax = *std::max_element(assign.begin(), assign.end());
  std::uint32_t const cmax = *std::max_element(truth.begin(), truth.end());
  std::size_t         agreed = 0;
  for (std::uint32_t k = 0; k <= kmax; ++k)
  {
    std::size_t best = 0;
    for (std::uint32_t c = 0; c <= cmax; ++c)
    {
      std::size_t count = 0;
      for (std::size_t i = 0; i < assign.size(); ++i)
        if (assign[i] == k && truth[i] == c)
          ++count;
      best = std::max(best, count);
    }
    agreed += best;
  }
  return static_cast<double>(agreed) / static_cast<double>(assign.size());
}

inline std::vector<std::uint32_t> random_labels(Rng &rng, std::size_t n, std::uint32_t k)
{
  std::vector<std::uint32_t> v(n);
  for (auto &x : v)
    x = static_cast<std::uint32_t>(rng.below(k));
  return v;
}

}  // namespace support
