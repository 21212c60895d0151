#pragma once

#include "deepclust/error.hpp"
#include "deepclust/tensor.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace deepclust::data {

/// Single-channel H x W image; pixel values in [0, 1] until z-scored.
using Image = Tensor<float>;

/**
 * Per-image standardization to zero mean and unit population std.
 *
 * Images whose std is below 1e-8 map to all zeros.
 */
inline Image zscore(Image const &image)
{
  double sum = 0.0;
  for (float v : image.values())
    sum += v;
  double const n    = static_cast<double>(image.size());
  double const mean = sum / n;
  double       sq   = 0.0;
  for (float v : image.values())
  {
    double const d = v - mean;
    sq += d * d;
  }
  double const sigma = std::sqrt(sq / n);
  Image        out(image.shape());
  if (sigma < 1e-8)
    return out;
  for (std::size_t i = 0; i < image.size(); ++i)
    out[i] = static_cast<float>((image[i] - mean) / sigma);
  return out;
}

/// Writes an 8-bit grayscale PNG; values are clamped to [0, 1] and rounded.
inline void write_png(std::filesystem::path const &path, Image const &image)
{
  if (image.rank() != 2)
    throw DimensionError("write_png expects an H x W image, got " + shape_string(image.shape()));
  std::vector<png_byte> bytes(image.size());
  for (std::size_t i = 0; i < image.size(); ++i)
  {
    float const v = std::clamp(image[i], 0.0F, 1.0F);
    bytes[i]      = static_cast<png_byte>(std::lround(v * 255.0F));
  }
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  png.width   = static_cast<png_uint_32>(image.dim(1));
  png.height  = static_cast<png_uint_32>(image.dim(0));
  png.format  = PNG_FORMAT_GRAY;
  if (png_image_write_to_file(&png, path.c_str(), 0, bytes.data(), 0, nullptr) == 0)
  {
    std::string const msg = png.message;
    png_image_free(&png);
    throw IoError("cannot write " + path.string() + ": " + msg);
  }
}

/// Reads any PNG as 8-bit grayscale and scales to [0, 1].
inline Image read_png(std::filesystem::path const &path)
{
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  if (png_image_begin_read_from_file(&png, path.c_str()) == 0)
  {
    std::string const msg = png.message;
    png_image_free(&png);
    throw IoError("cannot read " + path.string() + ": " + msg);
  }
  png.format = PNG_FORMAT_GRAY;
  std::vector<png_byte> bytes(PNG_IMAGE_SIZE(png));
  if (png_image_finish_read(&png, nullptr, bytes.data(), 0, nullptr) == 0)
  {
    std::string const msg = png.message;
    png_image_free(&png);
    throw IoError("cannot decode " + path.string() + ": " + msg);
  }
  Image out(Shape{png.height, png.width});
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<float>(bytes[i]) / 255.0F;
  return out;
}

}  // namespace deepclust::data
