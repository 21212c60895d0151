#pragma once

#include "deepclust/data/image.hpp"
#include "deepclust/random.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <span>
#include <string>
#include <vector>

namespace deepclust::data {

/**
 * One dataset item.
 *
 * truth_class is for evaluation only; the training path reads pixels and id.
 */
struct ImageRecord
{
  std::string   id;
  Image         pixels;
  std::uint32_t truth_class{0};
  std::uint32_t pseudo_label{0};
};

/// Synthetic image families standing in for the 13 cardiac MR sequences/views.
enum class Family : std::uint8_t
{
  blob,            // AO
  grating,         // FLOW
  rings,           // FLOW MAG
  checkerboard,    // FLOW PHA
  bar,             // LA 2ch
  diagonal,        // LA 3ch
  cross,           // LA 4ch
  annulus,         // LVOT
  twin_blobs,      // SA
  wedges,          // SHMOLLI
  frame,           // SHMOLLI FITPAR
  ramp,            // SHMOLLI T1MAP
  dot_grid,        // CINE TAG
};

inline constexpr std::size_t kFamilyCount = 13;

inline constexpr std::array<char const *, kFamilyCount> kClassNames = {
    "AO",      "FLOW",           "FLOW MAG",      "FLOW PHA", "LA (2 ch)", "LA (3 ch)", "LA (4 ch)",
    "LVOT",    "SA",             "SHMOLLI",       "SHMOLLI FITPAR", "SHMOLLI T1MAP", "CINE TAG"};

// Per-class image counts of the three reference datasets, in kClassNames order.
inline constexpr std::array<std::size_t, kFamilyCount> kBalancedCounts = {0, 0, 0, 0, 15868, 15889, 15880,
                                                                         0, 0, 0, 0, 0,     0};
inline constexpr std::array<std::size_t, kFamilyCount> kLargeCounts = {
    7859, 7782, 7782, 7782, 7931, 7943, 7937, 7831, 83372, 7565, 7561, 7560, 23367};
inline constexpr std::array<std::size_t, kFamilyCount> kSmallCounts = {
    982, 971, 971, 971, 990, 992, 990, 979, 10339, 944, 944, 944, 2926};

struct DatasetConfig
{
  std::string                preset{"balanced3"};
  std::vector<Family>        families;  // class index -> family
  std::vector<std::size_t>   counts;    // class index -> image count
  std::size_t                image_size{32};
  double                     noise_level{0.1};
  std::uint64_t              seed{0};

  void validate() const
  {
    if (families.empty() || families.size() != counts.size())
      throw ValueError("dataset config needs one count per class");
    if (families.size() > kFamilyCount)
      throw ValueError("requested " + std::to_string(families.size()) + " classes but only " +
                       std::to_string(kFamilyCount) + " image families exist");
    for (auto c : counts)
      if (c < 1)
        throw ValueError("every class count must be >= 1");
    if (image_size < 8)
      throw ValueError("image_size must be >= 8");
    if (!(noise_level >= 0.0))
      throw ValueError("noise_level must be >= 0");
  }

  std::size_t total() const
  {
    std::size_t n = 0;
    for (auto c : counts)
      n += c;
    return n;
  }
};

/// Scales reference counts to a total by largest remainder (ties to lower index), each >= 1.
inline std::vector<std::size_t> scale_counts(std::vector<std::size_t> const &reference, std::size_t total)
{
  if (total < reference.size())
    throw ValueError("dataset size " + std::to_string(total) + " is smaller than the class count " +
                     std::to_string(reference.size()));
  double sum = 0.0;
  for (auto r : reference)
    sum += static_cast<double>(r);
  std::vector<std::size_t> out(reference.size());
  std::vector<double>      frac(reference.size());
  std::size_t              used = 0;
  for (std::size_t i = 0; i < reference.size(); ++i)
  {
    double const exact = static_cast<double>(total) * static_cast<double>(reference[i]) / sum;
    out[i]             = static_cast<std::size_t>(std::floor(exact));
    frac[i]            = exact - std::floor(exact);
    used += out[i];
  }
  std::vector<std::size_t> order(reference.size());
  for (std::size_t i = 0; i < order.size(); ++i)
    order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return frac[a] > frac[b]; });
  for (std::size_t r = 0; used < total; ++r, ++used)
    ++out[order[r % order.size()]];
  // Lift empty classes by borrowing from the largest.
  for (auto &c : out)
  {
    if (c == 0)
    {
      ++c;
      --*std::max_element(out.begin(), out.end());
    }
  }
  return out;
}

/**
 * Preset configurations:
 *   balanced3           three classes in the proportions of the balanced reference set
 *   imbalanced13-large  13 classes, large imbalanced reference proportions
 *   imbalanced13-small  13 classes, small imbalanced reference proportions
 * size = 0 picks a desk-scale default (900, 9600, 2400).
 */
inline DatasetConfig preset_config(std::string const &preset, std::size_t size = 0, std::uint64_t seed = 0)
{
  DatasetConfig cfg;
  cfg.preset = preset;
  cfg.seed   = seed;
  std::array<std::size_t, kFamilyCount> const *ref = nullptr;
  if (preset == "balanced3")
  {
    ref  = &kBalancedCounts;
    size = size == 0 ? 900 : size;
  }
  else if (preset == "imbalanced13-large")
  {
    ref  = &kLargeCounts;
    size = size == 0 ? 9600 : size;
  }
  else if (preset == "imbalanced13-small")
  {
    ref  = &kSmallCounts;
    size = size == 0 ? 2400 : size;
  }
  else
  {
    throw ValueError("unknown dataset preset '" + preset +
                     "' (expected balanced3, imbalanced13-large or imbalanced13-small)");
  }
  std::vector<std::size_t> reference;
  for (std::size_t f = 0; f < kFamilyCount; ++f)
  {
    if ((*ref)[f] == 0)
      continue;
    cfg.families.push_back(static_cast<Family>(f));
    reference.push_back((*ref)[f]);
  }
  cfg.counts = scale_counts(reference, size);
  return cfg;
}

namespace detail {

struct Jitter
{
  double angle;      // radians
  double shift_x, shift_y;
  double scale;
  double phase;
  double contrast;
  double background;
};

inline double gauss(double d2, double sigma)
{
  return std::exp(-d2 / (2.0 * sigma * sigma));
}

// Pattern intensity in [0, 1] at jittered coordinates (u, v) in roughly [-1, 1].
inline double pattern(Family family, double u, double v, Jitter const &j)
{
  double const pi = std::numbers::pi;
  double const r  = std::sqrt(u * u + v * v);
  switch (family)
  {
  case Family::blob:
    return gauss((u + 0.4) * (u + 0.4) + v * v, 0.25);
  case Family::grating:
    return 0.5 + 0.5 * std::cos(3.0 * pi * v + j.phase);
  case Family::rings:
    return 0.5 + 0.5 * std::cos(4.0 * pi * r + j.phase * 0.3);
  case Family::checkerboard:
    return (std::sin(2.0 * pi * u + j.phase * 0.2) * std::sin(2.0 * pi * v + j.phase * 0.2)) > 0.0 ? 1.0 : 0.0;
  case Family::bar:
    return std::abs(u) < 0.22 ? 1.0 : 0.0;
  case Family::diagonal:
    return 0.5 + 0.5 * std::cos(2.0 * pi * (u + v) / std::numbers::sqrt2 + j.phase * 0.3);
  case Family::cross:
    return (std::abs(u) < 0.16 || std::abs(v) < 0.16) ? 1.0 : 0.0;
  case Family::annulus:
    return gauss((r - 0.5) * (r - 0.5), 0.09);
  case Family::twin_blobs:
    return std::max(gauss((u - 0.45) * (u - 0.45) + v * v, 0.18), gauss((u + 0.45) * (u + 0.45) + v * v, 0.18));
  case Family::wedges:
    return 0.5 + 0.5 * std::cos(6.0 * std::atan2(v, u) + j.phase * 0.3);
  case Family::frame: {
    double const m = std::max(std::abs(u), std::abs(v));
    return (m > 0.5 && m < 0.72) ? 1.0 : 0.0;
  }
  case Family::ramp:
    return std::clamp(0.5 + 0.5 * u, 0.0, 1.0);
  case Family::dot_grid:
    return (0.5 + 0.5 * std::cos(4.0 * pi * u + j.phase * 0.2)) * (0.5 + 0.5 * std::cos(4.0 * pi * v + j.phase * 0.2));
  }
  return 0.0;
}

}  // namespace detail

/**
 * Renders one image of a family. Each image draws its own small rotation,
 * shift, scale, phase, contrast and background offset, then Gaussian pixel
 * noise; values are clamped to [0, 1].
 */
inline Image render(Family family, std::size_t size, double noise_level, Rng &rng)
{
  detail::Jitter j{};
  j.angle      = rng.uniform(-10.0, 10.0) * std::numbers::pi / 180.0;
  j.shift_x    = rng.uniform(-0.08, 0.08);
  j.shift_y    = rng.uniform(-0.08, 0.08);
  j.scale      = rng.uniform(0.9, 1.1);
  j.phase      = rng.uniform(-std::numbers::pi, std::numbers::pi);
  j.contrast   = rng.uniform(0.6, 0.9);
  j.background = rng.uniform(0.05, 0.2);

  Image        img(Shape{size, size});
  double const c = std::cos(j.angle), s = std::sin(j.angle);
  double const half = static_cast<double>(size) / 2.0;
  for (std::size_t y = 0; y < size; ++y)
  {
    for (std::size_t x = 0; x < size; ++x)
    {
      double const px = (static_cast<double>(x) + 0.5 - half) / half - j.shift_x;
      double const py = (static_cast<double>(y) + 0.5 - half) / half - j.shift_y;
      double const u  = (c * px + s * py) / j.scale;
      double const v  = (-s * px + c * py) / j.scale;
      double const p  = detail::pattern(family, u, v, j);
      double const value = j.background + j.contrast * p + noise_level * rng.normal();
      img[y * size + x]  = static_cast<float>(std::clamp(value, 0.0, 1.0));
    }
  }
  return img;
}

/**
 * Generates the dataset described by cfg.
 *
 * Records are shuffled with the dataset seed and given neutral ids
 * ("img_000000", ...) so neither order nor id reveals the class.
 */
inline std::vector<ImageRecord> generate_dataset(DatasetConfig const &cfg)
{
  cfg.validate();
  std::vector<ImageRecord> records;
  records.reserve(cfg.total());
  for (std::size_t cls = 0; cls < cfg.families.size(); ++cls)
  {
    for (std::size_t i = 0; i < cfg.counts[cls]; ++i)
    {
      Rng rng(derive_seed(cfg.seed, stream::kGenerate, cls, i));
      records.push_back({{}, render(cfg.families[cls], cfg.image_size, cfg.noise_level, rng),
                         static_cast<std::uint32_t>(cls), 0});
    }
  }
  Rng shuffle(derive_seed(cfg.seed, stream::kGenerate, 0xfeed));
  for (std::size_t i = records.size(); i > 1; --i)
  {
    std::swap(records[i - 1], records[shuffle.below(i)]);
  }
  for (std::size_t i = 0; i < records.size(); ++i)
  {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "img_%06zu", i);
    records[i].id = buf;
  }
  return records;
}

inline std::vector<std::uint32_t> truth_labels(std::span<const ImageRecord> records)
{
  std::vector<std::uint32_t> out(records.size());
  for (std::size_t i = 0; i < records.size(); ++i)
    out[i] = records[i].truth_class;
  return out;
}

inline std::vector<std::size_t> class_histogram(std::vector<ImageRecord> const &records)
{
  std::vector<std::size_t> hist;
  for (auto const &r : records)
  {
    if (r.truth_class >= hist.size())
      hist.resize(r.truth_class + 1, 0);
    ++hist[r.truth_class];
  }
  return hist;
}

/// Writes images/<id>.png and labels.csv (id,class).
inline void write_dataset(std::filesystem::path const &dir, std::vector<ImageRecord> const &records)
{
  std::filesystem::create_directories(dir / "images");
  std::ofstream labels(dir / "labels.csv", std::ios::binary);
  if (!labels)
    throw IoError("cannot write " + (dir / "labels.csv").string());
  labels << "id,class\n";
  for (auto const &r : records)
  {
    write_png(dir / "images" / (r.id + ".png"), r.pixels);
    labels << r.id << ',' << r.truth_class << '\n';
  }
  if (!labels.flush())
    throw IoError("write failed for " + (dir / "labels.csv").string());
}

/// Loads a dataset directory written by write_dataset; record order follows labels.csv.
inline std::vector<ImageRecord> load_dataset(std::filesystem::path const &dir)
{
  auto const    csv = dir / "labels.csv";
  std::ifstream in(csv, std::ios::binary);
  if (!in)
    throw IoError("cannot open " + csv.string());
  std::string line;
  if (!std::getline(in, line) || (line != "id,class" && line != "id,class\r"))
    throw IoError(csv.string() + ": expected header 'id,class'");
  std::vector<ImageRecord> records;
  std::size_t              line_no = 1;
  while (std::getline(in, line))
  {
    ++line_no;
    if (!line.empty() && line.back() == '\r')
      line.pop_back();
    if (line.empty())
      continue;
    auto const comma = line.find(',');
    if (comma == std::string::npos || comma == 0 || line.find(',', comma + 1) != std::string::npos)
      throw IoError(csv.string() + ":" + std::to_string(line_no) + ": expected 'id,class'");
    ImageRecord rec;
    rec.id = line.substr(0, comma);
    try
    {
      std::size_t used = 0;
      auto const  cls  = std::stoul(line.substr(comma + 1), &used);
      if (used != line.size() - comma - 1)
        throw std::invalid_argument("trailing characters");
      rec.truth_class = static_cast<std::uint32_t>(cls);
    }
    catch (std::exception const &)
    {
      throw IoError(csv.string() + ":" + std::to_string(line_no) + ": invalid class '" + line.substr(comma + 1) + "'");
    }
    rec.pixels = read_png(dir / "images" / (rec.id + ".png"));
    records.push_back(std::move(rec));
  }
  if (records.empty())
    throw IoError(csv.string() + " lists no images");
  return records;
}

}  // namespace deepclust::data
