#include "support.hpp"

#include "deepclust/data/augment.hpp"
#include "deepclust/data/dataset.hpp"
#include "deepclust/data/sampler.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

using namespace deepclust;
using namespace deepclust::data;

namespace {

void moments(Image const &img, double &mean, double &sd)
{
  double sum = 0.0, sq = 0.0;
  for (float v : img.values())
    sum += v;
  mean = sum / static_cast<double>(img.size());
  for (float v : img.values())
    sq += (v - mean) * (v - mean);
  sd = std::sqrt(sq / static_cast<double>(img.size()));
}

Image random_image(Rng &rng, std::size_t h, std::size_t w)
{
  Image img(Shape{h, w});
  for (auto &v : img.values())
    v = static_cast<float>(rng.uniform(0.1, 0.9));
  return img;
}

}  // namespace

TEST(ZScore, Moments)
{
  Image const img(Shape{2, 2}, std::vector<float>{1, 2, 3, 4});
  double      mean = 0, sd = 0;
  moments(zscore(img), mean, sd);
  EXPECT_NEAR(mean, 0.0, 1e-6);
  EXPECT_NEAR(sd, 1.0, 1e-5);
}

TEST(ZScore, ConstantImageBecomesZeroAndIdempotent)
{
  auto const flat = zscore(Image(Shape{3, 3}, 0.7f));
  for (float v : flat.values())
    EXPECT_EQ(v, 0.0f);
  Rng        rng(3);
  auto const once  = zscore(random_image(rng, 16, 16));
  auto const twice = zscore(once);
  for (std::size_t i = 0; i < once.size(); ++i)
    EXPECT_NEAR(once[i], twice[i], 1e-6);
}

TEST(Augment, DegenerateConfigIsIdentity)
{
  Rng           rng(1);
  AugmentConfig cfg{0.0, 1.0, 1.0, 1.0, 1.0, 12};
  auto const    img = random_image(rng, 12, 12);
  auto const    out = augment(img, cfg, rng);
  ASSERT_EQ(out.shape(), img.shape());
  for (std::size_t i = 0; i < img.size(); ++i)
    EXPECT_NEAR(out[i], img[i], 1e-6);
}

TEST(Augment, ShapeAlwaysOutputSize)
{
  Rng rng(2);
  for (int i = 0; i < 1000; ++i)
  {
    AugmentConfig cfg;
    cfg.rotation_degrees = rng.uniform(0.0, 45.0);
    cfg.scale_lo         = rng.uniform(0.05, 1.0);
    cfg.scale_hi         = rng.uniform(cfg.scale_lo, 1.0);
    cfg.aspect_lo        = rng.uniform(0.2, 1.0);
    cfg.aspect_hi        = rng.uniform(1.0, 5.0);
    cfg.output_size      = 1 + rng.below(40);
    auto const img       = random_image(rng, 4 + rng.below(30), 4 + rng.below(30));
    auto const out       = augment(img, cfg, rng);
    ASSERT_EQ(out.shape(), (Shape{cfg.output_size, cfg.output_size}));
  }
}

TEST(Augment, ValuesStayInsideInterpolationHull)
{
  Rng rng(4);
  for (int i = 0; i < 200; ++i)
  {
    AugmentConfig cfg;
    cfg.rotation_degrees = i % 2 == 0 ? 0.0 : 30.0;
    auto const img       = random_image(rng, 24, 24);
    auto const [lo, hi]  = std::minmax_element(img.values().begin(), img.values().end());
    // Rotation fills uncovered corners with zero, which joins the hull.
    double const floor = cfg.rotation_degrees > 0.0 ? std::min<double>(*lo, 0.0) : *lo;
    double const ceil  = cfg.rotation_degrees > 0.0 ? std::max<double>(*hi, 0.0) : *hi;
    for (float v : augment(img, cfg, rng).values())
    {
      EXPECT_GE(v, floor - 1e-6);
      EXPECT_LE(v, ceil + 1e-6);
    }
  }
}

TEST(Augment, SeededDeterminism)
{
  Rng        src(5);
  auto const img = random_image(src, 32, 32);
  Rng        a(77), b(77);
  EXPECT_EQ(augment(img, AugmentConfig{}, a), augment(img, AugmentConfig{}, b));
}

TEST(Augment, InfeasibleCropFallsBackToCenter)
{
  // A 2 x 40 strip cannot host any crop of aspect near 1 covering half its area.
  AugmentConfig cfg{0.0, 0.9, 1.0, 0.9, 1.1, 8};
  Rng           rng(6);
  auto const    box = sample_crop(2, 40, cfg, rng);
  EXPECT_LE(box.height, 2u);
  EXPECT_LE(box.width, 40u);
  EXPECT_EQ(box.top, (2 - box.height) / 2);
  EXPECT_EQ(box.left, (40 - box.width) / 2);
}

TEST(Sampler, SingleGroupIsUniform)
{
  std::vector<std::uint32_t> labels(8, 5);
  for (double w : balanced_weights(labels))
    EXPECT_DOUBLE_EQ(w, 1.0 / 8.0);
}

TEST(Sampler, NineAndOne)
{
  std::vector<std::uint32_t> labels(10, 0);
  labels[3]    = 1;
  auto const w = balanced_weights(labels);
  EXPECT_DOUBLE_EQ(w[3], 1.0 / 2.0);
  EXPECT_DOUBLE_EQ(w[0], 1.0 / 18.0);
}

TEST(Sampler, WeightsSumToOneAndClustersGetEqualMass)
{
  Rng rng(9);
  for (int trial = 0; trial < 50; ++trial)
  {
    auto const labels = support::random_labels(rng, 1 + rng.below(500), 1 + static_cast<std::uint32_t>(rng.below(30)));
    auto const w      = balanced_weights(labels);
    EXPECT_NEAR(std::accumulate(w.begin(), w.end(), 0.0), 1.0, 1e-12);
    std::map<std::uint32_t, double> mass;
    for (std::size_t i = 0; i < w.size(); ++i)
      mass[labels[i]] += w[i];
    for (auto const &[label, m] : mass)
      EXPECT_NEAR(m, 1.0 / static_cast<double>(mass.size()), 1e-12);
  }
}

TEST(Sampler, DrawsWithReplacementFromNonemptyGroups)
{
  std::vector<std::uint32_t> labels{0, 0, 0, 0, 0, 0, 0, 0, 0, 7};
  Rng                        rng(10);
  auto const                 idx = balanced_epoch_indices(labels, 4000, rng);
  EXPECT_EQ(idx.size(), 4000u);
  auto const singleton = std::count(idx.begin(), idx.end(), 9u);
  EXPECT_NEAR(static_cast<double>(singleton) / 4000.0, 0.5, 0.05);
  EXPECT_THROW(balanced_epoch_indices(std::vector<std::uint32_t>{}, 1, rng), ValueError);
}

TEST(Dataset, BalancedPresetCounts)
{
  auto const records = generate_dataset(preset_config("balanced3", 900, 1));
  EXPECT_EQ(records.size(), 900u);
  EXPECT_EQ(class_histogram(records), (std::vector<std::size_t>{300, 300, 300}));
  for (auto const &r : records)
  {
    EXPECT_EQ(r.pixels.shape(), (Shape{32, 32}));
    for (float v : r.pixels.values())
    {
      ASSERT_GE(v, 0.0f);
      ASSERT_LE(v, 1.0f);
    }
  }
}

TEST(Dataset, SmallImbalancedDominantShare)
{
  auto const   cfg   = preset_config("imbalanced13-small", 2400, 1);
  double const ref   = 10339.0 / 23943.0;
  double const share = static_cast<double>(*std::max_element(cfg.counts.begin(), cfg.counts.end())) / 2400.0;
  EXPECT_EQ(cfg.total(), 2400u);
  EXPECT_EQ(cfg.counts.size(), 13u);
  EXPECT_NEAR(share, ref, 0.01);
  EXPECT_NEAR(ref, 0.432, 5e-4);
}

TEST(Dataset, ReferenceTotals)
{
  auto sum = [](auto const &a) { return std::accumulate(a.begin(), a.end(), std::size_t{0}); };
  EXPECT_EQ(sum(kBalancedCounts), 47637u);
  EXPECT_EQ(sum(kLargeCounts), 192272u);
  EXPECT_EQ(sum(kSmallCounts), 23943u);
}

TEST(Dataset, SeededDeterminismAndErrors)
{
  auto const a = generate_dataset(preset_config("balanced3", 60, 4));
  auto const b = generate_dataset(preset_config("balanced3", 60, 4));
  for (std::size_t i = 0; i < a.size(); ++i)
  {
    EXPECT_EQ(a[i].id, b[i].id);
    EXPECT_EQ(a[i].pixels, b[i].pixels);
  }
  DatasetConfig cfg = preset_config("balanced3", 60, 4);
  cfg.families.assign(14, Family::blob);
  cfg.counts.assign(14, 1);
  EXPECT_THROW(generate_dataset(cfg), ValueError);
  EXPECT_THROW(preset_config("nope"), ValueError);
}

TEST(Dataset, NearestCentroidSeparatesBalancedClasses)
{
  auto const records = generate_dataset(preset_config("balanced3", 900, 2));
  std::size_t const px = 32 * 32;
  std::vector<std::vector<double>> centroid(3, std::vector<double>(px, 0.0));
  std::vector<std::size_t>         counts(3, 0);
  for (std::size_t i = 0; i < 450; ++i)
  {
    auto const &r = records[i];
    ++counts[r.truth_class];
    for (std::size_t p = 0; p < px; ++p)
      centroid[r.truth_class][p] += r.pixels[p];
  }
  for (std::size_t c = 0; c < 3; ++c)
    for (auto &v : centroid[c])
      v /= static_cast<double>(counts[c]);
  std::size_t correct = 0;
  for (std::size_t i = 450; i < 900; ++i)
  {
    std::size_t best = 0;
    double      best_d = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < 3; ++c)
    {
      double d = 0.0;
      for (std::size_t p = 0; p < px; ++p)
        d += (records[i].pixels[p] - centroid[c][p]) * (records[i].pixels[p] - centroid[c][p]);
      if (d < best_d)
      {
        best_d = d;
        best   = c;
      }
    }
    correct += best == records[i].truth_class ? 1 : 0;
  }
  EXPECT_GT(static_cast<double>(correct) / 450.0, 0.8);
}

TEST(Dataset, DiskRoundTrip)
{
  auto const dir     = support::scratch_dir("dataset_io");
  auto const records = generate_dataset(preset_config("imbalanced13-small", 60, 3));
  write_dataset(dir, records);
  auto const loaded = load_dataset(dir);
  ASSERT_EQ(loaded.size(), records.size());
  for (std::size_t i = 0; i < records.size(); ++i)
  {
    EXPECT_EQ(loaded[i].id, records[i].id);
    EXPECT_EQ(loaded[i].truth_class, records[i].truth_class);
    for (std::size_t p = 0; p < records[i].pixels.size(); ++p)
      EXPECT_NEAR(loaded[i].pixels[p], records[i].pixels[p], 0.5 / 255.0 + 1e-6);
  }
  {
    std::ofstream bad(dir / "labels.csv", std::ios::app);
    bad << "img_broken\n";
  }
  try
  {
    load_dataset(dir);
    FAIL();
  }
  catch (IoError const &e)
  {
    EXPECT_NE(std::string(e.what()).find(":" + std::to_string(records.size() + 2) + ":"), std::string::npos)
        << e.what();
  }
}

TEST(Pipeline, DatasetAndAugmentSeedsReproduceBatches)
{
  auto const a = generate_dataset(preset_config("balanced3", 30, 8));
  auto const b = generate_dataset(preset_config("balanced3", 30, 8));
  for (std::size_t i = 0; i < a.size(); ++i)
  {
    Rng ra(derive_seed(5, hash_string(a[i].id))), rb(derive_seed(5, hash_string(b[i].id)));
    EXPECT_EQ(zscore(augment(a[i].pixels, AugmentConfig{}, ra)), zscore(augment(b[i].pixels, AugmentConfig{}, rb)));
  }
}
