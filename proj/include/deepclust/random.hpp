#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string_view>

namespace deepclust {

/// SplitMix64 finalizer; a bijective 64-bit mixer.
constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept
{
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30U)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27U)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31U);
}

/// Derives an independent stream seed from a root seed and any number of keys.
template <typename... Keys>
constexpr std::uint64_t derive_seed(std::uint64_t root, Keys... keys) noexcept
{
  std::uint64_t h = splitmix64(root);
  ((h = splitmix64(h ^ static_cast<std::uint64_t>(keys))), ...);
  return h;
}

/// FNV-1a over a string, used to key streams by image id.
constexpr std::uint64_t hash_string(std::string_view s) noexcept
{
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : s)
  {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Stream tags for derive_seed. Each consumer of randomness owns a tag so that
// the streams stay independent and resuming at an epoch reproduces them.
namespace stream {
inline constexpr std::uint64_t kInit        = 0x11;
inline constexpr std::uint64_t kHeadReset   = 0x12;
inline constexpr std::uint64_t kClusterAug  = 0x21;
inline constexpr std::uint64_t kTrainAug    = 0x22;
inline constexpr std::uint64_t kKMeans      = 0x31;
inline constexpr std::uint64_t kSampler     = 0x41;
inline constexpr std::uint64_t kGenerate    = 0x51;
inline constexpr std::uint64_t kEvaluateAug = 0x61;
}  // namespace stream

/**
 * Seeded random stream.
 *
 * Wraps std::mt19937_64, whose output sequence is fixed by the standard; the
 * conversions to real and integer ranges are done here rather than through
 * the std distributions, whose algorithms are implementation-defined.
 */
class Rng
{
public:
  explicit Rng(std::uint64_t seed)
    : engine_(seed)
  {}

  std::uint64_t next_u64()
  {
    return engine_();
  }

  /// Uniform in [0, 1).
  double uniform()
  {
    return static_cast<double>(engine_() >> 11U) * 0x1.0p-53;
  }

  double uniform(double lo, double hi)
  {
    return lo + (hi - lo) * uniform();
  }

  /// Uniform integer in [0, n), unbiased (Lemire rejection).
  std::uint64_t below(std::uint64_t n)
  {
    if (n <= 1)
    {
      return 0;
    }
    std::uint64_t const threshold = (0 - n) % n;
    for (;;)
    {
      std::uint64_t const r = engine_();
      if (r >= threshold)
      {
        return r % n;
      }
    }
  }

  /// Standard normal via Box-Muller.
  double normal()
  {
    if (has_spare_)
    {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0)
    {
      u1 = uniform();
    }
    double const u2     = uniform();
    double const radius = std::sqrt(-2.0 * std::log(u1));
    double const theta  = 2.0 * std::numbers::pi * u2;
    spare_              = radius * std::sin(theta);
    has_spare_          = true;
    return radius * std::cos(theta);
  }

  double normal(double mean, double stddev)
  {
    return mean + stddev * normal();
  }

private:
  std::mt19937_64 engine_;
  double          spare_{0.0};
  bool            has_spare_{false};
};

}  // namespace deepclust
