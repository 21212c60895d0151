#pragma once

#include "deepclust/error.hpp"
#include "deepclust/random.hpp"

#include <cstdint>
#include <map>
#include <span>
#include <vector>

namespace deepclust::data {

/**
 * Per-image draw probability of the pseudo-label-balanced sampler:
 * 1 / (G * |cluster of i|) where G is the number of nonempty clusters, so
 * each nonempty cluster receives exactly 1/G of the mass.
 */
inline std::vector<double> balanced_weights(std::span<const std::uint32_t> pseudo_labels)
{
  if (pseudo_labels.empty())
    throw ValueError("balanced sampler needs at least one labelled image");
  std::map<std::uint32_t, std::size_t> sizes;
  for (auto l : pseudo_labels)
    ++sizes[l];
  double const        groups = static_cast<double>(sizes.size());
  std::vector<double> w(pseudo_labels.size());
  for (std::size_t i = 0; i < w.size(); ++i)
    w[i] = 1.0 / (groups * static_cast<double>(sizes[pseudo_labels[i]]));
  return w;
}

/**
 * Draws epoch_size indices with replacement: a nonempty pseudo-label is
 * picked uniformly, then a member of it uniformly.
 */
inline std::vector<std::size_t> balanced_epoch_indices(std::span<const std::uint32_t> pseudo_labels,
                                                       std::size_t epoch_size, Rng &rng)
{
  if (pseudo_labels.empty())
    throw ValueError("balanced sampler needs at least one labelled image");
  std::map<std::uint32_t, std::vector<std::size_t>> members;
  for (std::size_t i = 0; i < pseudo_labels.size(); ++i)
    members[pseudo_labels[i]].push_back(i);
  std::vector<std::vector<std::size_t> const *> groups;
  for (auto const &[label, idx] : members)
    groups.push_back(&idx);
  std::vector<std::size_t> out(epoch_size);
  for (auto &o : out)
  {
    auto const &g = *groups[rng.below(groups.size())];
    o             = g[rng.below(g.size())];
  }
  return out;
}

}  // namespace deepclust::data
