#pragma once

#include "deepclust/data/image.hpp"
#include "deepclust/random.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace deepclust::data {

/// Random rotation, then random resized crop, then bilinear resize.
struct AugmentConfig
{
  double      rotation_degrees{15.0};
  double      scale_lo{0.5};  // crop area as a fraction of the image
  double      scale_hi{1.0};
  double      aspect_lo{3.0 / 4.0};
  double      aspect_hi{4.0 / 3.0};
  std::size_t output_size{32};

  void validate() const
  {
    if (!(rotation_degrees >= 0.0))
      throw ValueError("augment rotation_degrees must be >= 0");
    if (!(scale_lo > 0.0 && scale_lo <= scale_hi && scale_hi <= 1.0))
      throw ValueError("augment scale range must satisfy 0 < lo <= hi <= 1");
    if (!(aspect_lo > 0.0 && aspect_lo <= aspect_hi))
      throw ValueError("augment aspect range must satisfy 0 < lo <= hi");
    if (output_size < 1)
      throw ValueError("augment output_size must be >= 1");
  }
};

struct CropBox
{
  std::size_t top{0};
  std::size_t left{0};
  std::size_t height{0};
  std::size_t width{0};
};

namespace detail {

// Bilinear sample with zeros outside the image.
inline float sample_zero(Image const &img, double y, double x)
{
  auto const   h  = static_cast<std::ptrdiff_t>(img.dim(0));
  auto const   w  = static_cast<std::ptrdiff_t>(img.dim(1));
  double const fy = std::floor(y), fx = std::floor(x);
  auto const   y0 = static_cast<std::ptrdiff_t>(fy), x0 = static_cast<std::ptrdiff_t>(fx);
  double const dy = y - fy, dx = x - fx;
  auto         at = [&](std::ptrdiff_t yy, std::ptrdiff_t xx) -> double {
    if (yy < 0 || xx < 0 || yy >= h || xx >= w)
      return 0.0;
    return img[static_cast<std::size_t>(yy * w + xx)];
  };
  double const v = (1 - dy) * ((1 - dx) * at(y0, x0) + dx * at(y0, x0 + 1)) +
                   dy * ((1 - dx) * at(y0 + 1, x0) + dx * at(y0 + 1, x0 + 1));
  return static_cast<float>(v);
}

}  // namespace detail

/// Rotates about the image center by the given angle; uncovered corners are zero.
inline Image rotate(Image const &img, double degrees)
{
  if (degrees == 0.0)
    return img;
  double const rad = degrees * std::numbers::pi / 180.0;
  double const c = std::cos(rad), s = std::sin(rad);
  double const cy = (static_cast<double>(img.dim(0)) - 1.0) / 2.0;
  double const cx = (static_cast<double>(img.dim(1)) - 1.0) / 2.0;
  Image        out(img.shape());
  for (std::size_t y = 0; y < img.dim(0); ++y)
  {
    for (std::size_t x = 0; x < img.dim(1); ++x)
    {
      double const ry                = static_cast<double>(y) - cy;
      double const rx                = static_cast<double>(x) - cx;
      double const sx                = c * rx + s * ry + cx;
      double const sy                = -s * rx + c * ry + cy;
      out[y * img.dim(1) + x] = detail::sample_zero(img, sy, sx);
    }
  }
  return out;
}

/// Bilinear resize of a crop box to size x size (half-pixel centers, edge clamped).
inline Image resize_crop(Image const &img, CropBox const &box, std::size_t size)
{
  Image        out(Shape{size, size});
  double const sy = static_cast<double>(box.height) / static_cast<double>(size);
  double const sx = static_cast<double>(box.width) / static_cast<double>(size);
  std::size_t  w  = img.dim(1);
  for (std::size_t oy = 0; oy < size; ++oy)
  {
    double const y  = std::clamp((static_cast<double>(oy) + 0.5) * sy - 0.5, 0.0, static_cast<double>(box.height - 1));
    auto const   y0 = static_cast<std::size_t>(y);
    std::size_t  y1 = std::min(y0 + 1, box.height - 1);
    double const dy = y - static_cast<double>(y0);
    for (std::size_t ox = 0; ox < size; ++ox)
    {
      double const x  = std::clamp((static_cast<double>(ox) + 0.5) * sx - 0.5, 0.0, static_cast<double>(box.width - 1));
      auto const   x0 = static_cast<std::size_t>(x);
      std::size_t  x1 = std::min(x0 + 1, box.width - 1);
      double const dx = x - static_cast<double>(x0);
      auto         at = [&](std::size_t yy, std::size_t xx) -> double {
        return img[(box.top + yy) * w + box.left + xx];
      };
      double const v = (1 - dy) * ((1 - dx) * at(y0, x0) + dx * at(y0, x1)) + dy * ((1 - dx) * at(y1, x0) + dx * at(y1, x1));
      out[oy * size + ox] = static_cast<float>(v);
    }
  }
  return out;
}

/**
 * Samples a crop with area fraction in [scale_lo, scale_hi] and log-uniform
 * aspect ratio in [aspect_lo, aspect_hi]. After 10 rejected draws it falls
 * back to the largest centered crop whose aspect lies in the range.
 */
inline CropBox sample_crop(std::size_t height, std::size_t width, AugmentConfig const &cfg, Rng &rng)
{
  double const area = static_cast<double>(height * width);
  for (int attempt = 0; attempt < 10; ++attempt)
  {
    double const target = area * rng.uniform(cfg.scale_lo, cfg.scale_hi);
    double const aspect = std::exp(rng.uniform(std::log(cfg.aspect_lo), std::log(cfg.aspect_hi)));
    auto const   w      = static_cast<std::size_t>(std::lround(std::sqrt(target * aspect)));
    auto const   h      = static_cast<std::size_t>(std::lround(std::sqrt(target / aspect)));
    if (w >= 1 && h >= 1 && w <= width && h <= height)
    {
      std::size_t const top  = static_cast<std::size_t>(rng.below(height - h + 1));
      std::size_t const left = static_cast<std::size_t>(rng.below(width - w + 1));
      return {top, left, h, w};
    }
  }
  double const ratio = static_cast<double>(width) / static_cast<double>(height);
  std::size_t  w = width, h = height;
  if (ratio < cfg.aspect_lo)
    h = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(static_cast<double>(w) / cfg.aspect_lo)));
  else if (ratio > cfg.aspect_hi)
    w = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(static_cast<double>(h) * cfg.aspect_hi)));
  h = std::min(h, height);
  w = std::min(w, width);
  return {(height - h) / 2, (width - w) / 2, h, w};
}

/// One random view of an image, sized output_size x output_size.
inline Image augment(Image const &img, AugmentConfig const &cfg, Rng &rng)
{
  if (img.rank() != 2)
    throw DimensionError("augment expects an H x W image, got " + shape_string(img.shape()));
  double const angle = cfg.rotation_degrees > 0.0 ? rng.uniform(-cfg.rotation_degrees, cfg.rotation_degrees) : 0.0;
  Image const  rotated = rotate(img, angle);
  CropBox const box    = sample_crop(img.dim(0), img.dim(1), cfg, rng);
  return resize_crop(rotated, box, cfg.output_size);
}

}  // namespace deepclust::data
