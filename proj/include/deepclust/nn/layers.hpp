#pragma once

#include "deepclust/error.hpp"
#include "deepclust/parallel.hpp"
#include "deepclust/random.hpp"
#include "deepclust/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

namespace deepclust::nn {

enum class LayerKind : std::uint8_t
{
  conv2d              = 1,
  batchnorm2d         = 2,
  relu                = 3,
  maxpool2d           = 4,
  adaptive_avg_pool2d = 5,
  flatten             = 6,
  linear              = 7,
};

inline std::string to_string(LayerKind kind)
{
  switch (kind)
  {
  case LayerKind::conv2d:
    return "conv2d";
  case LayerKind::batchnorm2d:
    return "batchnorm2d";
  case LayerKind::relu:
    return "relu";
  case LayerKind::maxpool2d:
    return "maxpool2d";
  case LayerKind::adaptive_avg_pool2d:
    return "adaptive-avg-pool2d";
  case LayerKind::flatten:
    return "flatten";
  case LayerKind::linear:
    return "linear";
  }
  return "unknown";
}

enum class Mode
{
  train,
  infer
};

/**
 * Hyperparameters of one layer.
 *
 * Field use per kind:
 *   conv2d       in_channels, out_channels, kernel, stride, padding
 *   batchnorm2d  out_channels
 *   maxpool2d    kernel, stride
 *   adaptive     output_size
 *   linear       in_channels (fan-in), out_channels (fan-out)
 */
struct LayerSpec
{
  LayerKind   kind{LayerKind::relu};
  std::size_t in_channels{0};
  std::size_t out_channels{0};
  std::size_t kernel{1};
  std::size_t stride{1};
  std::size_t padding{0};
  std::size_t output_size{1};

  static LayerSpec conv2d(std::size_t in, std::size_t out, std::size_t kernel,
                          std::size_t stride = 1, std::size_t padding = 0)
  {
    return {LayerKind::conv2d, in, out, kernel, stride, padding, 1};
  }

  static LayerSpec batchnorm2d(std::size_t channels)
  {
    return {LayerKind::batchnorm2d, channels, channels, 1, 1, 0, 1};
  }

  static LayerSpec relu()
  {
    return {LayerKind::relu};
  }

  static LayerSpec maxpool2d(std::size_t kernel, std::size_t stride = 0)
  {
    return {LayerKind::maxpool2d, 0, 0, kernel, stride == 0 ? kernel : stride, 0, 1};
  }

  static LayerSpec adaptive_avg_pool2d(std::size_t output_size)
  {
    return {LayerKind::adaptive_avg_pool2d, 0, 0, 1, 1, 0, output_size};
  }

  static LayerSpec flatten()
  {
    return {LayerKind::flatten};
  }

  static LayerSpec linear(std::size_t in, std::size_t out)
  {
    return {LayerKind::linear, in, out, 1, 1, 0, 1};
  }

  void validate() const
  {
    auto fail = [&](std::string const &why) {
      throw ValueError("invalid " + to_string(kind) + " layer: " + why);
    };
    switch (kind)
    {
    case LayerKind::conv2d:
      if (in_channels == 0 || out_channels == 0)
        fail("channel counts must be >= 1");
      if (kernel < 1)
        fail("kernel size must be >= 1");
      if (stride < 1)
        fail("stride must be >= 1");
      break;
    case LayerKind::batchnorm2d:
      if (out_channels == 0)
        fail("channel count must be >= 1");
      break;
    case LayerKind::maxpool2d:
      if (kernel < 1 || stride < 1)
        fail("kernel and stride must be >= 1");
      break;
    case LayerKind::adaptive_avg_pool2d:
      if (output_size < 1)
        fail("output size must be >= 1");
      break;
    case LayerKind::linear:
      if (in_channels == 0 || out_channels == 0)
        fail("feature counts must be >= 1");
      break;
    case LayerKind::relu:
    case LayerKind::flatten:
      break;
    default:
      fail("unknown layer kind");
    }
  }

  friend bool operator==(LayerSpec const &, LayerSpec const &) = default;
};

/// Parameters, optimizer slots and non-trainable buffers of one layer.
template <typename T>
struct Layer
{
  LayerSpec              spec;
  std::vector<Tensor<T>> params;    // conv/linear: weight, bias; batchnorm: scale, shift
  std::vector<Tensor<T>> momentum;  // one per param, same shape
  std::vector<Tensor<T>> buffers;   // batchnorm: running mean, running variance
};

/// Per-layer activation record kept by a train-mode forward pass.
template <typename T>
struct LayerCache
{
  Tensor<T>                  input;
  Tensor<T>                  normalized;  // batchnorm x-hat
  std::vector<T>             inv_std;     // batchnorm
  std::vector<std::uint32_t> argmax;      // maxpool source offsets
};

inline constexpr double kBatchNormEps      = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

namespace detail {

inline void require_rank(Shape const &shape, std::size_t rank, LayerSpec const &spec)
{
  if (shape.size() != rank)
  {
    throw DimensionError(to_string(spec.kind) + " expects a rank-" + std::to_string(rank) +
                         " input, got shape " + shape_string(shape));
  }
}

inline void require_channels(Shape const &shape, std::size_t channels, LayerSpec const &spec)
{
  if (shape[1] != channels)
  {
    throw DimensionError(to_string(spec.kind) + " expects " + std::to_string(channels) +
                         " input channels, got shape " + shape_string(shape));
  }
}

// out[m x n] = a[m x k] * b[k x n], row-major.
template <typename T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, T const *a, T const *b, T *out)
{
  for (std::size_t i = 0; i < m; ++i)
  {
    T *row = out + i * n;
    std::fill(row, row + n, T{0});
    for (std::size_t p = 0; p < k; ++p)
    {
      T const  av   = a[i * k + p];
      T const *brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j)
      {
        row[j] += av * brow[j];
      }
    }
  }
}

// out[m x n] += a[m x k] * b[n x k]^T
// Dot products use eight fixed lanes so the compiler can vectorize them
// without reassociating; the summation order stays the same on every run.
template <typename T>
void gemm_nt_acc(std::size_t m, std::size_t n, std::size_t k, T const *a, T const *b, T *out)
{
  constexpr std::size_t kLanes = 8;
  std::size_t const     body   = k - k % kLanes;
  for (std::size_t i = 0; i < m; ++i)
  {
    T const *arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j)
    {
      T const *brow = b + j * k;
      T        lane[kLanes] = {};
      for (std::size_t p = 0; p < body; p += kLanes)
        for (std::size_t l = 0; l < kLanes; ++l)
          lane[l] += arow[p + l] * brow[p + l];
      T acc = T{0};
      for (std::size_t p = body; p < k; ++p)
        acc += arow[p] * brow[p];
      for (std::size_t l = 0; l < kLanes; ++l)
        acc += lane[l];
      out[i * n + j] += acc;
    }
  }
}

// out[m x n] = a[k x m]^T * b[k x n]
template <typename T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, T const *a, T const *b, T *out)
{
  std::fill(out, out + m * n, T{0});
  for (std::size_t p = 0; p < k; ++p)
  {
    T const *brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i)
    {
      T const av  = a[p * m + i];
      T      *row = out + i * n;
      for (std::size_t j = 0; j < n; ++j)
      {
        row[j] += av * brow[j];
      }
    }
  }
}

struct ConvGeometry
{
  std::size_t cin, h, w, k, stride, pad, oh, ow;

  std::size_t patch() const
  {
    return cin * k * k;
  }
  std::size_t pixels() const
  {
    return oh * ow;
  }
};

// Valid output columns [lo, hi) whose input column ox*stride + kx - pad lies inside [0, w).
inline std::pair<std::size_t, std::size_t> valid_span(std::size_t kx, ConvGeometry const &g)
{
  std::size_t lo = 0;
  while (lo < g.ow && lo * g.stride + kx < g.pad)
    ++lo;
  std::size_t hi = lo;
  while (hi < g.ow && hi * g.stride + kx < g.pad + g.w)
    ++hi;
  return {lo, hi};
}

template <typename T>
void im2col(ConvGeometry const &g, T const *image, T *col)
{
  for (std::size_t c = 0; c < g.cin; ++c)
  {
    for (std::size_t ky = 0; ky < g.k; ++ky)
    {
      for (std::size_t kx = 0; kx < g.k; ++kx)
      {
        T *dst             = col + ((c * g.k + ky) * g.k + kx) * g.pixels();
        auto const [lo, hi] = valid_span(kx, g);
        for (std::size_t oy = 0; oy < g.oh; ++oy)
        {
          T         *row = dst + oy * g.ow;
          auto const iy  = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h) || lo >= hi)
          {
            std::fill(row, row + g.ow, T{0});
            continue;
          }
          T const *src = image + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
          std::fill(row, row + lo, T{0});
          for (std::size_t ox = lo; ox < hi; ++ox)
            row[ox] = src[ox * g.stride + kx - g.pad];
          std::fill(row + hi, row + g.ow, T{0});
        }
      }
    }
  }
}

template <typename T>
void col2im_acc(ConvGeometry const &g, T const *col, T *image)
{
  for (std::size_t c = 0; c < g.cin; ++c)
  {
    for (std::size_t ky = 0; ky < g.k; ++ky)
    {
      for (std::size_t kx = 0; kx < g.k; ++kx)
      {
        T const   *src      = col + ((c * g.k + ky) * g.k + kx) * g.pixels();
        auto const [lo, hi] = valid_span(kx, g);
        for (std::size_t oy = 0; oy < g.oh; ++oy)
        {
          auto const iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h))
            continue;
          T       *dst = image + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
          T const *row = src + oy * g.ow;
          for (std::size_t ox = lo; ox < hi; ++ox)
            dst[ox * g.stride + kx - g.pad] += row[ox];
        }
      }
    }
  }
}

// Fixed partition of a batch into reduction chunks; independent of thread count.
inline std::size_t reduction_chunks(std::size_t batch)
{
  return std::min<std::size_t>(batch, 8);
}

inline std::pair<std::size_t, std::size_t> chunk_range(std::size_t chunk, std::size_t chunks,
                                                       std::size_t batch)
{
  return {chunk * batch / chunks, (chunk + 1) * batch / chunks};
}

inline std::size_t adaptive_start(std::size_t i, std::size_t in, std::size_t out)
{
  return (i * in) / out;
}

inline std::size_t adaptive_end(std::size_t i, std::size_t in, std::size_t out)
{
  return ((i + 1) * in + out - 1) / out;
}

}  // namespace detail

/// Output shape of a layer for a given input shape; throws DimensionError if incompatible.
inline Shape output_shape(LayerSpec const &spec, Shape const &in)
{
  switch (spec.kind)
  {
  case LayerKind::conv2d: {
    detail::require_rank(in, 4, spec);
    detail::require_channels(in, spec.in_channels, spec);
    std::size_t const h = in[2] + 2 * spec.padding;
    std::size_t const w = in[3] + 2 * spec.padding;
    if (h < spec.kernel || w < spec.kernel)
    {
      throw DimensionError("conv2d kernel " + std::to_string(spec.kernel) +
                           " larger than padded input " + shape_string(in));
    }
    return {in[0], spec.out_channels, (h - spec.kernel) / spec.stride + 1,
            (w - spec.kernel) / spec.stride + 1};
  }
  case LayerKind::batchnorm2d:
    detail::require_rank(in, 4, spec);
    detail::require_channels(in, spec.out_channels, spec);
    return in;
  case LayerKind::relu:
    return in;
  case LayerKind::maxpool2d:
    detail::require_rank(in, 4, spec);
    if (in[2] < spec.kernel || in[3] < spec.kernel)
    {
      throw DimensionError("maxpool2d window " + std::to_string(spec.kernel) +
                           " larger than input " + shape_string(in));
    }
    return {in[0], in[1], (in[2] - spec.kernel) / spec.stride + 1,
            (in[3] - spec.kernel) / spec.stride + 1};
  case LayerKind::adaptive_avg_pool2d:
    detail::require_rank(in, 4, spec);
    return {in[0], in[1], spec.output_size, spec.output_size};
  case LayerKind::flatten: {
    if (in.size() < 2)
    {
      throw DimensionError("flatten expects rank >= 2, got " + shape_string(in));
    }
    std::size_t inner = 1;
    for (std::size_t i = 1; i < in.size(); ++i)
      inner *= in[i];
    return {in[0], inner};
  }
  case LayerKind::linear:
    detail::require_rank(in, 2, spec);
    detail::require_channels(in, spec.in_channels, spec);
    return {in[0], spec.out_channels};
  }
  throw ValueError("unknown layer kind");
}

/// Shapes of the trainable parameters of a layer, in declaration order.
inline std::vector<Shape> parameter_shapes(LayerSpec const &spec)
{
  switch (spec.kind)
  {
  case LayerKind::conv2d:
    return {{spec.out_channels, spec.in_channels, spec.kernel, spec.kernel}, {spec.out_channels}};
  case LayerKind::batchnorm2d:
    return {{spec.out_channels}, {spec.out_channels}};
  case LayerKind::linear:
    return {{spec.out_channels, spec.in_channels}, {spec.out_channels}};
  default:
    return {};
  }
}

inline std::vector<Shape> buffer_shapes(LayerSpec const &spec)
{
  if (spec.kind == LayerKind::batchnorm2d)
  {
    return {{spec.out_channels}, {spec.out_channels}};
  }
  return {};
}

/**
 * Builds a layer with freshly initialized parameters.
 *
 * conv2d and linear weights are drawn from U(-b, b) with b = sqrt(6 / fan_in)
 * and biases start at zero; batchnorm starts at scale 1, shift 0, running
 * mean 0 and running variance 1.
 */
template <typename T>
Layer<T> make_layer(LayerSpec const &spec, Rng &rng)
{
  spec.validate();
  Layer<T> layer{spec, {}, {}, {}};
  for (auto const &shape : parameter_shapes(spec))
  {
    layer.params.emplace_back(shape);
    layer.momentum.emplace_back(shape);
  }
  if (spec.kind == LayerKind::conv2d || spec.kind == LayerKind::linear)
  {
    std::size_t const fan_in = spec.kind == LayerKind::conv2d
                                   ? spec.in_channels * spec.kernel * spec.kernel
                                   : spec.in_channels;
    double const bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (auto &w : layer.params[0].values())
    {
      w = static_cast<T>(rng.uniform(-bound, bound));
    }
  }
  if (spec.kind == LayerKind::batchnorm2d)
  {
    layer.params[0].fill(T{1});
    layer.buffers.emplace_back(Shape{spec.out_channels}, T{0});
    layer.buffers.emplace_back(Shape{spec.out_channels}, T{1});
  }
  return layer;
}

// ---------------------------------------------------------------------------
// Forward kernels
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
Tensor<T> conv_forward(Layer<T> const &layer, Tensor<T> const &x)
{
  auto const &s     = layer.spec;
  Shape const out_s = output_shape(s, x.shape());
  ConvGeometry const g{s.in_channels, x.dim(2), x.dim(3), s.kernel, s.stride, s.padding,
                       out_s[2],      out_s[3]};
  Tensor<T>          y(out_s);
  T const           *weight = layer.params[0].data();
  T const           *bias   = layer.params[1].data();
  std::size_t const  in_sz  = g.cin * g.h * g.w;
  std::size_t const  out_sz = s.out_channels * g.pixels();

  parallel_for(x.dim(0), [&](std::size_t n) {
    std::vector<T> col(g.patch() * g.pixels());
    im2col(g, x.data() + n * in_sz, col.data());
    T *dst = y.data() + n * out_sz;
    gemm_nn(s.out_channels, g.pixels(), g.patch(), weight, col.data(), dst);
    for (std::size_t c = 0; c < s.out_channels; ++c)
    {
      for (std::size_t p = 0; p < g.pixels(); ++p)
      {
        dst[c * g.pixels() + p] += bias[c];
      }
    }
  });
  return y;
}

template <typename T>
Tensor<T> batchnorm_forward(Layer<T> &layer, Tensor<T> const &x, Mode mode, LayerCache<T> *cache)
{
  output_shape(layer.spec, x.shape());
  std::size_t const batch    = x.dim(0);
  std::size_t const channels = x.dim(1);
  std::size_t const spatial  = x.dim(2) * x.dim(3);
  T const          *scale    = layer.params[0].data();
  T const          *shift    = layer.params[1].data();
  Tensor<T>         y(x.shape());

  if (mode == Mode::infer)
  {
    T const *running_mean = layer.buffers[0].data();
    T const *running_var  = layer.buffers[1].data();
    for (std::size_t c = 0; c < channels; ++c)
    {
      T const inv = static_cast<T>(1.0 / std::sqrt(static_cast<double>(running_var[c]) + kBatchNormEps));
      for (std::size_t n = 0; n < batch; ++n)
      {
        T const *src = x.data() + (n * channels + c) * spatial;
        T       *dst = y.data() + (n * channels + c) * spatial;
        for (std::size_t i = 0; i < spatial; ++i)
        {
          dst[i] = (src[i] - running_mean[c]) * inv * scale[c] + shift[c];
        }
      }
    }
    return y;
  }

  std::size_t const count = batch * spatial;
  Tensor<T>         xhat(x.shape());
  std::vector<T>    inv_std(channels);
  for (std::size_t c = 0; c < channels; ++c)
  {
    double sum = 0.0;
    for (std::size_t n = 0; n < batch; ++n)
    {
      T const *src = x.data() + (n * channels + c) * spatial;
      for (std::size_t i = 0; i < spatial; ++i)
        sum += static_cast<double>(src[i]);
    }
    double const mean = sum / static_cast<double>(count);
    double       sq   = 0.0;
    for (std::size_t n = 0; n < batch; ++n)
    {
      T const *src = x.data() + (n * channels + c) * spatial;
      for (std::size_t i = 0; i < spatial; ++i)
      {
        double const d = static_cast<double>(src[i]) - mean;
        sq += d * d;
      }
    }
    double const var = sq / static_cast<double>(count);
    double const inv = 1.0 / std::sqrt(var + kBatchNormEps);
    inv_std[c]       = static_cast<T>(inv);
    for (std::size_t n = 0; n < batch; ++n)
    {
      std::size_t const off = (n * channels + c) * spatial;
      for (std::size_t i = 0; i < spatial; ++i)
      {
        T const v              = static_cast<T>((static_cast<double>(x[off + i]) - mean) * inv);
        xhat[off + i]          = v;
        y[off + i]             = v * scale[c] + shift[c];
      }
    }
    double const unbiased = count > 1 ? var * static_cast<double>(count) / static_cast<double>(count - 1) : var;
    T &rm = layer.buffers[0][c];
    T &rv = layer.buffers[1][c];
    rm    = static_cast<T>((1.0 - kBatchNormMomentum) * static_cast<double>(rm) + kBatchNormMomentum * mean);
    rv    = static_cast<T>((1.0 - kBatchNormMomentum) * static_cast<double>(rv) + kBatchNormMomentum * unbiased);
  }
  if (cache != nullptr)
  {
    cache->normalized = std::move(xhat);
    cache->inv_std    = std::move(inv_std);
  }
  return y;
}

template <typename T>
Tensor<T> maxpool_forward(LayerSpec const &s, Tensor<T> const &x, LayerCache<T> *cache)
{
  Shape const out_s = output_shape(s, x.shape());
  Tensor<T>   y(out_s);
  std::size_t const planes = out_s[0] * out_s[1];
  std::size_t const h = x.dim(2), w = x.dim(3), oh = out_s[2], ow = out_s[3];
  std::vector<std::uint32_t> argmax(y.size());
  for (std::size_t p = 0; p < planes; ++p)
  {
    T const *src = x.data() + p * h * w;
    for (std::size_t oy = 0; oy < oh; ++oy)
    {
      for (std::size_t ox = 0; ox < ow; ++ox)
      {
        std::size_t best_at = (oy * s.stride) * w + ox * s.stride;
        T           best    = src[best_at];
        for (std::size_t ky = 0; ky < s.kernel; ++ky)
        {
          for (std::size_t kx = 0; kx < s.kernel; ++kx)
          {
            std::size_t const at = (oy * s.stride + ky) * w + ox * s.stride + kx;
            if (src[at] > best)
            {
              best    = src[at];
              best_at = at;
            }
          }
        }
        std::size_t const o = (p * oh + oy) * ow + ox;
        y[o]                = best;
        argmax[o]           = static_cast<std::uint32_t>(p * h * w + best_at);
      }
    }
  }
  if (cache != nullptr)
    cache->argmax = std::move(argmax);
  return y;
}

template <typename T>
Tensor<T> adaptive_pool_forward(LayerSpec const &s, Tensor<T> const &x)
{
  Shape const       out_s  = output_shape(s, x.shape());
  Tensor<T>         y(out_s);
  std::size_t const planes = out_s[0] * out_s[1];
  std::size_t const h = x.dim(2), w = x.dim(3), o = s.output_size;
  for (std::size_t p = 0; p < planes; ++p)
  {
    T const *src = x.data() + p * h * w;
    for (std::size_t oy = 0; oy < o; ++oy)
    {
      std::size_t const y0 = adaptive_start(oy, h, o), y1 = adaptive_end(oy, h, o);
      for (std::size_t ox = 0; ox < o; ++ox)
      {
        std::size_t const x0 = adaptive_start(ox, w, o), x1 = adaptive_end(ox, w, o);
        T                 acc = T{0};
        for (std::size_t iy = y0; iy < y1; ++iy)
          for (std::size_t ix = x0; ix < x1; ++ix)
            acc += src[iy * w + ix];
        y[(p * o + oy) * o + ox] = acc / static_cast<T>((y1 - y0) * (x1 - x0));
      }
    }
  }
  return y;
}

template <typename T>
Tensor<T> linear_forward(Layer<T> const &layer, Tensor<T> const &x)
{
  Shape const       out_s = output_shape(layer.spec, x.shape());
  Tensor<T>         y(out_s);
  std::size_t const batch = x.dim(0), in = layer.spec.in_channels, out = layer.spec.out_channels;
  T const          *weight = layer.params[0].data();
  T const          *bias   = layer.params[1].data();
  for (std::size_t n = 0; n < batch; ++n)
  {
    T const *row = x.data() + n * in;
    for (std::size_t j = 0; j < out; ++j)
    {
      T        acc  = bias[j];
      T const *wrow = weight + j * in;
      for (std::size_t i = 0; i < in; ++i)
        acc += wrow[i] * row[i];
      y[n * out + j] = acc;
    }
  }
  return y;
}

}  // namespace detail

/// Runs one layer. When cache is non-null the inputs needed by backward are recorded.
template <typename T>
Tensor<T> layer_forward(Layer<T> &layer, Tensor<T> const &x, Mode mode, LayerCache<T> *cache)
{
  if (cache != nullptr)
  {
    cache->input = x;
  }
  switch (layer.spec.kind)
  {
  case LayerKind::conv2d:
    return detail::conv_forward(layer, x);
  case LayerKind::batchnorm2d:
    return detail::batchnorm_forward(layer, x, mode, cache);
  case LayerKind::relu: {
    Tensor<T> y = x;
    for (auto &v : y.values())
      v = v > T{0} ? v : T{0};
    return y;
  }
  case LayerKind::maxpool2d:
    return detail::maxpool_forward(layer.spec, x, cache);
  case LayerKind::adaptive_avg_pool2d:
    return detail::adaptive_pool_forward(layer.spec, x);
  case LayerKind::flatten:
    return x.reshaped(output_shape(layer.spec, x.shape()));
  case LayerKind::linear:
    return detail::linear_forward(layer, x);
  }
  throw ValueError("unknown layer kind");
}

// ---------------------------------------------------------------------------
// Backward kernels
// ---------------------------------------------------------------------------

/**
 * Backpropagates dy through one layer.
 *
 * Parameter gradients are written to grads (resized to the layer's parameter
 * list); the return value is the gradient with respect to the layer input,
 * left zero for conv2d when input_grad is false.
 */
template <typename T>
Tensor<T> layer_backward(Layer<T> const &layer, LayerCache<T> const &cache, Tensor<T> const &dy,
                         std::vector<Tensor<T>> &grads, bool input_grad = true)
{
  auto const &s = layer.spec;
  auto const &x = cache.input;
  if (x.empty())
  {
    throw ValueError(to_string(s.kind) + " backward called without a train-mode cache");
  }
  grads.clear();
  for (auto const &shape : parameter_shapes(s))
    grads.emplace_back(shape);

  switch (s.kind)
  {
  case LayerKind::conv2d: {
    Shape const out_s = output_shape(s, x.shape());
    if (dy.shape() != out_s)
      throw DimensionError("conv2d backward: gradient shape " + shape_string(dy.shape()) +
                           " != output shape " + shape_string(out_s));
    detail::ConvGeometry const g{s.in_channels, x.dim(2), x.dim(3), s.kernel, s.stride, s.padding,
                                 out_s[2],      out_s[3]};
    std::size_t const batch  = x.dim(0);
    std::size_t const in_sz  = g.cin * g.h * g.w;
    std::size_t const out_sz = s.out_channels * g.pixels();
    std::size_t const wsize  = layer.params[0].size();
    std::size_t const chunks = detail::reduction_chunks(batch);
    std::vector<std::vector<T>> dw(chunks, std::vector<T>(wsize, T{0}));
    std::vector<std::vector<T>> db(chunks, std::vector<T>(s.out_channels, T{0}));
    Tensor<T>                   dx(x.shape());
    T const                    *weight = layer.params[0].data();

    parallel_for(chunks, [&](std::size_t chunk) {
      auto const [lo, hi] = detail::chunk_range(chunk, chunks, batch);
      std::vector<T> col(g.patch() * g.pixels());
      std::vector<T> dcol(g.patch() * g.pixels());
      for (std::size_t n = lo; n < hi; ++n)
      {
        T const *g_out = dy.data() + n * out_sz;
        im2col(g, x.data() + n * in_sz, col.data());
        detail::gemm_nt_acc(s.out_channels, g.patch(), g.pixels(), g_out, col.data(),
                            dw[chunk].data());
        for (std::size_t c = 0; c < s.out_channels; ++c)
        {
          T acc = T{0};
          for (std::size_t p = 0; p < g.pixels(); ++p)
            acc += g_out[c * g.pixels() + p];
          db[chunk][c] += acc;
        }
        if (input_grad)
        {
          detail::gemm_tn(g.patch(), g.pixels(), s.out_channels, weight, g_out, dcol.data());
          detail::col2im_acc(g, dcol.data(), dx.data() + n * in_sz);
        }
      }
    });
    for (std::size_t chunk = 0; chunk < chunks; ++chunk)
    {
      for (std::size_t i = 0; i < wsize; ++i)
        grads[0][i] += dw[chunk][i];
      for (std::size_t c = 0; c < s.out_channels; ++c)
        grads[1][c] += db[chunk][c];
    }
    return dx;
  }
  case LayerKind::batchnorm2d: {
    if (cache.inv_std.empty())
      throw ValueError("batchnorm2d backward requires a train-mode cache");
    std::size_t const batch = x.dim(0), channels = x.dim(1), spatial = x.dim(2) * x.dim(3);
    double const      count = static_cast<double>(batch * spatial);
    Tensor<T>         dx(x.shape());
    T const          *scale = layer.params[0].data();
    for (std::size_t c = 0; c < channels; ++c)
    {
      double sum_dy = 0.0, sum_dy_xhat = 0.0;
      for (std::size_t n = 0; n < batch; ++n)
      {
        std::size_t const off = (n * channels + c) * spatial;
        for (std::size_t i = 0; i < spatial; ++i)
        {
          sum_dy += static_cast<double>(dy[off + i]);
          sum_dy_xhat += static_cast<double>(dy[off + i]) * static_cast<double>(cache.normalized[off + i]);
        }
      }
      grads[0][c]       = static_cast<T>(sum_dy_xhat);
      grads[1][c]       = static_cast<T>(sum_dy);
      double const coef = static_cast<double>(scale[c]) * static_cast<double>(cache.inv_std[c]) / count;
      for (std::size_t n = 0; n < batch; ++n)
      {
        std::size_t const off = (n * channels + c) * spatial;
        for (std::size_t i = 0; i < spatial; ++i)
        {
          double const v = count * static_cast<double>(dy[off + i]) - sum_dy -
                           static_cast<double>(cache.normalized[off + i]) * sum_dy_xhat;
          dx[off + i] = static_cast<T>(coef * v);
        }
      }
    }
    return dx;
  }
  case LayerKind::relu: {
    Tensor<T> dx(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i)
      dx[i] = x[i] > T{0} ? dy[i] : T{0};
    return dx;
  }
  case LayerKind::maxpool2d: {
    Tensor<T> dx(x.shape());
    for (std::size_t o = 0; o < dy.size(); ++o)
      dx[cache.argmax[o]] += dy[o];
    return dx;
  }
  case LayerKind::adaptive_avg_pool2d: {
    Tensor<T>         dx(x.shape());
    std::size_t const planes = x.dim(0) * x.dim(1);
    std::size_t const h = x.dim(2), w = x.dim(3), o = s.output_size;
    for (std::size_t p = 0; p < planes; ++p)
    {
      T *dst = dx.data() + p * h * w;
      for (std::size_t oy = 0; oy < o; ++oy)
      {
        std::size_t const y0 = detail::adaptive_start(oy, h, o), y1 = detail::adaptive_end(oy, h, o);
        for (std::size_t ox = 0; ox < o; ++ox)
        {
          std::size_t const x0 = detail::adaptive_start(ox, w, o), x1 = detail::adaptive_end(ox, w, o);
          T const g = dy[(p * o + oy) * o + ox] / static_cast<T>((y1 - y0) * (x1 - x0));
          for (std::size_t iy = y0; iy < y1; ++iy)
            for (std::size_t ix = x0; ix < x1; ++ix)
              dst[iy * w + ix] += g;
        }
      }
    }
    return dx;
  }
  case LayerKind::flatten:
    return dy.reshaped(x.shape());
  case LayerKind::linear: {
    std::size_t const batch = x.dim(0), in = s.in_channels, out = s.out_channels;
    if (dy.shape() != Shape{batch, out})
      throw DimensionError("linear backward: gradient shape " + shape_string(dy.shape()) +
                           " != output shape " + shape_string({batch, out}));
    Tensor<T> dx(x.shape());
    T const  *weight = layer.params[0].data();
    for (std::size_t n = 0; n < batch; ++n)
    {
      T const *xrow  = x.data() + n * in;
      T const *dyrow = dy.data() + n * out;
      T       *dxrow = dx.data() + n * in;
      for (std::size_t j = 0; j < out; ++j)
      {
        T const g = dyrow[j];
        grads[1][j] += g;
        T       *gw   = grads[0].data() + j * in;
        T const *wrow = weight + j * in;
        for (std::size_t i = 0; i < in; ++i)
        {
          gw[i] += g * xrow[i];
          dxrow[i] += g * wrow[i];
        }
      }
    }
    return dx;
  }
  }
  throw ValueError("unknown layer kind");
}

}  // namespace deepclust::nn
