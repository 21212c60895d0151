#pragma once

#include "deepclust/nn/layers.hpp"

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace deepclust::nn {

/// Network shape chosen by preset name plus the knobs shared by all presets.
struct Architecture
{
  std::string preset{"mini"};  // "mini" or "vgg16bn"
  std::size_t input_channels{1};
  std::size_t pool_output{2};  // adaptive-avg-pool output side
};

/// Convolutional trunk of a preset, ending with adaptive pooling and flatten.
inline std::vector<LayerSpec> feature_specs(Architecture const &arch)
{
  std::vector<LayerSpec>   specs;
  std::vector<std::size_t> plan;  // 0 = max pool, otherwise conv width
  if (arch.preset == "mini")
  {
    plan = {16, 0, 32, 0};
  }
  else if (arch.preset == "vgg16bn")
  {
    plan = {64, 64, 0, 128, 128, 0, 256, 256, 256, 0, 512, 512, 512, 0, 512, 512, 512, 0};
  }
  else
  {
    throw ValueError("unknown architecture preset '" + arch.preset + "' (expected mini or vgg16bn)");
  }
  std::size_t channels = arch.input_channels;
  for (auto width : plan)
  {
    if (width == 0)
    {
      specs.push_back(LayerSpec::maxpool2d(2));
      continue;
    }
    specs.push_back(LayerSpec::conv2d(channels, width, 3, 1, 1));
    specs.push_back(LayerSpec::batchnorm2d(width));
    specs.push_back(LayerSpec::relu());
    channels = width;
  }
  specs.push_back(LayerSpec::adaptive_avg_pool2d(arch.pool_output));
  specs.push_back(LayerSpec::flatten());
  return specs;
}

template <typename T>
struct ForwardCache
{
  bool                       train{false};
  std::uint64_t              signature{0};
  std::vector<LayerCache<T>> features;
  std::vector<LayerCache<T>> classifier;
};

template <typename T>
struct ForwardResult
{
  Tensor<T>       logits;
  Tensor<T>       features;
  ForwardCache<T> cache;
};

/// Loss value and its gradient with respect to the logits.
template <typename T>
struct LossResult
{
  double    loss{0.0};
  Tensor<T> dlogits;
};

struct SgdConfig
{
  double learning_rate{0.05};
  double momentum{0.9};
  double weight_decay{1e-5};

  void validate() const
  {
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate))
      throw ValueError("sgd learning_rate must be > 0");
    if (!(momentum >= 0.0 && momentum < 1.0))
      throw ValueError("sgd momentum must be in [0, 1)");
    if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay))
      throw ValueError("sgd weight_decay must be >= 0");
  }
};

/// Reference to one parameter tensor with a readable owner name.
template <typename T>
struct ParamRef
{
  std::string name;
  Tensor<T>  *value;
  Tensor<T>  *momentum;
};

/**
 * Feature trunk f plus classifier head g, with SGD momentum slots.
 *
 * The trunk ends with adaptive-avg-pool + flatten; its output is the feature
 * vector used for clustering. The head is a single linear layer whose width
 * equals the number of pseudo-label classes and is redrawn every time the
 * pseudo-labels are recomputed.
 */
template <typename T>
class Network
{
public:
  Network() = default;

  Network(Architecture arch, std::size_t outputs, std::uint64_t seed)
    : arch_(std::move(arch))
    , seed_(seed)
  {
    auto specs = feature_specs(arch_);
    for (std::size_t i = 0; i < specs.size(); ++i)
    {
      Rng rng(derive_seed(seed, stream::kInit, i));
      features_.push_back(make_layer<T>(specs[i], rng));
    }
    reset_classifier(outputs, derive_seed(seed, stream::kHeadReset));
  }

  /// Reassembles a network from explicit layers (checkpoint loading, tests).
  Network(Architecture arch, std::vector<Layer<T>> features, std::vector<Layer<T>> classifier,
          std::uint64_t seed)
    : arch_(std::move(arch))
    , seed_(seed)
    , features_(std::move(features))
    , classifier_(std::move(classifier))
  {
    validate();
  }

  Architecture const &architecture() const noexcept
  {
    return arch_;
  }

  std::uint64_t seed() const noexcept
  {
    return seed_;
  }

  std::vector<Layer<T>> const &feature_layers() const noexcept
  {
    return features_;
  }

  std::vector<Layer<T>> const &classifier_layers() const noexcept
  {
    return classifier_;
  }

  std::vector<Layer<T>> &feature_layers() noexcept
  {
    return features_;
  }

  std::vector<Layer<T>> &classifier_layers() noexcept
  {
    return classifier_;
  }

  /// Dimension D of the flattened pooled feature vector.
  std::size_t feature_dim() const
  {
    for (auto it = features_.rbegin(); it != features_.rend(); ++it)
    {
      if (it->spec.kind == LayerKind::conv2d)
      {
        auto const pool = features_[features_.size() - 2].spec.output_size;
        return it->spec.out_channels * pool * pool;
      }
    }
    throw ValueError("network has no convolutional layer");
  }

  std::size_t output_width() const
  {
    return classifier_.back().spec.out_channels;
  }

  std::size_t input_channels() const
  {
    return features_.front().spec.in_channels;
  }

  /// Stable hash of the layer structure; ties caches to the network that made them.
  std::uint64_t signature() const
  {
    std::uint64_t h = 0x5eed;
    auto          mix_specs = [&](std::vector<Layer<T>> const &layers) {
      for (auto const &l : layers)
      {
        h = derive_seed(h, static_cast<std::uint64_t>(l.spec.kind), l.spec.in_channels,
                        l.spec.out_channels, l.spec.kernel, l.spec.stride, l.spec.padding,
                        l.spec.output_size);
      }
    };
    mix_specs(features_);
    h = derive_seed(h, 0xb0);
    mix_specs(classifier_);
    return h;
  }

  /**
   * Draws a new classifier head of the given width.
   *
   * Feature layers are left bit-identical; the head's momentum slots are zero.
   */
  void reset_classifier(std::size_t output_width, std::uint64_t seed)
  {
    if (output_width < 2)
    {
      throw ValueError("classifier output width must be >= 2, got " + std::to_string(output_width));
    }
    classifier_.clear();
    Rng rng(seed);
    classifier_.push_back(make_layer<T>(LayerSpec::linear(feature_dim(), output_width), rng));
  }

  /// All trainable tensors in declaration order (trunk first, then head).
  std::vector<ParamRef<T>> parameters()
  {
    std::vector<ParamRef<T>> refs;
    auto collect = [&](std::vector<Layer<T>> &layers, char const *section) {
      for (std::size_t i = 0; i < layers.size(); ++i)
      {
        for (std::size_t p = 0; p < layers[i].params.size(); ++p)
        {
          refs.push_back({std::string(section) + " layer " + std::to_string(i) + " (" +
                              to_string(layers[i].spec.kind) + ") param " + std::to_string(p),
                          &layers[i].params[p], &layers[i].momentum[p]});
        }
      }
    };
    collect(features_, "feature");
    collect(classifier_, "classifier");
    return refs;
  }

  std::vector<Tensor<T> const *> parameter_values() const
  {
    std::vector<Tensor<T> const *> out;
    for (auto const *layers : {&features_, &classifier_})
      for (auto const &l : *layers)
        for (auto const &p : l.params)
          out.push_back(&p);
    return out;
  }

  ForwardResult<T> forward(Tensor<T> const &batch, Mode mode)
  {
    if (batch.rank() != 4)
    {
      throw DimensionError("network input must be (B, C, H, W), got " + shape_string(batch.shape()));
    }
    if (batch.dim(1) != input_channels())
    {
      throw DimensionError("network expects " + std::to_string(input_channels()) +
                           " input channels, got " + std::to_string(batch.dim(1)));
    }
    if (!batch.all_finite())
    {
      throw ValueError("network input contains non-finite values");
    }
    ForwardResult<T> result;
    result.cache.train     = mode == Mode::train;
    result.cache.signature = signature();
    bool const keep        = mode == Mode::train;
    if (keep)
    {
      result.cache.features.resize(features_.size());
      result.cache.classifier.resize(classifier_.size());
    }
    Tensor<T> act = batch;
    for (std::size_t i = 0; i < features_.size(); ++i)
    {
      act = layer_forward(features_[i], act, mode, keep ? &result.cache.features[i] : nullptr);
    }
    result.features = act;
    for (std::size_t i = 0; i < classifier_.size(); ++i)
    {
      act = layer_forward(classifier_[i], act, mode, keep ? &result.cache.classifier[i] : nullptr);
    }
    result.logits = std::move(act);
    return result;
  }

  /// Gradients of the loss for every parameter, in parameters() order.
  std::vector<Tensor<T>> backward(ForwardCache<T> const &cache, Tensor<T> const &dlogits) const
  {
    if (!cache.train)
    {
      throw ValueError("backward requires a cache from a train-mode forward pass");
    }
    if (cache.signature != signature() || cache.features.size() != features_.size() ||
        cache.classifier.size() != classifier_.size())
    {
      throw ValueError("forward cache was produced by a different network");
    }
    std::vector<std::vector<Tensor<T>>> head_grads(classifier_.size());
    std::vector<std::vector<Tensor<T>>> trunk_grads(features_.size());
    Tensor<T>                           grad = dlogits;
    for (std::size_t i = classifier_.size(); i-- > 0;)
    {
      grad = layer_backward(classifier_[i], cache.classifier[i], grad, head_grads[i]);
    }
    for (std::size_t i = features_.size(); i-- > 0;)
    {
      grad = layer_backward(features_[i], cache.features[i], grad, trunk_grads[i], i != 0);
    }
    std::vector<Tensor<T>> out;
    for (auto *group : {&trunk_grads, &head_grads})
      for (auto &layer_grads : *group)
        for (auto &g : layer_grads)
          out.push_back(std::move(g));
    return out;
  }

private:
  void validate() const
  {
    if (features_.size() < 2 || features_[features_.size() - 2].spec.kind != LayerKind::adaptive_avg_pool2d ||
        features_.back().spec.kind != LayerKind::flatten)
    {
      throw ValueError("feature layers must end with adaptive-avg-pool2d followed by flatten");
    }
    if (classifier_.empty())
    {
      throw ValueError("classifier must have at least one layer");
    }
    for (auto const *layers : {&features_, &classifier_})
    {
      for (auto const &l : *layers)
      {
        l.spec.validate();
        auto const shapes = parameter_shapes(l.spec);
        if (l.params.size() != shapes.size() || l.momentum.size() != shapes.size())
          throw DimensionError(to_string(l.spec.kind) + " layer has wrong parameter count");
        for (std::size_t p = 0; p < shapes.size(); ++p)
        {
          if (l.params[p].shape() != shapes[p] || l.momentum[p].shape() != shapes[p])
            throw DimensionError(to_string(l.spec.kind) + " parameter shape mismatch: expected " +
                                 shape_string(shapes[p]));
        }
        if (l.buffers.size() != buffer_shapes(l.spec).size())
          throw DimensionError(to_string(l.spec.kind) + " layer has wrong buffer count");
      }
    }
  }

  Architecture          arch_;
  std::uint64_t         seed_{0};
  std::vector<Layer<T>> features_;
  std::vector<Layer<T>> classifier_;
};

/**
 * Mean multinomial logistic loss over the batch, with its exact gradient.
 *
 * Log-softmax is evaluated with max subtraction so large logits do not overflow.
 */
template <typename T>
LossResult<T> cross_entropy_loss(Tensor<T> const &logits, std::span<const std::uint32_t> labels)
{
  if (logits.rank() != 2)
    throw DimensionError("logits must be (B, K), got " + shape_string(logits.shape()));
  std::size_t const batch = logits.dim(0), classes = logits.dim(1);
  if (labels.size() != batch)
    throw DimensionError("label count " + std::to_string(labels.size()) + " != batch size " +
                         std::to_string(batch));
  if (!logits.all_finite())
    throw ValueError("logits contain non-finite values");

  LossResult<T> out{0.0, Tensor<T>(logits.shape())};
  double        total = 0.0;
  for (std::size_t n = 0; n < batch; ++n)
  {
    if (labels[n] >= classes)
      throw ValueError("label " + std::to_string(labels[n]) + " out of range [0, " +
                       std::to_string(classes) + ")");
    T const *row   = logits.data() + n * classes;
    double   max_v = static_cast<double>(row[0]);
    for (std::size_t j = 1; j < classes; ++j)
      max_v = std::max(max_v, static_cast<double>(row[j]));
    double denom = 0.0;
    for (std::size_t j = 0; j < classes; ++j)
      denom += std::exp(static_cast<double>(row[j]) - max_v);
    double const log_denom = std::log(denom);
    total += -(static_cast<double>(row[labels[n]]) - max_v - log_denom);
    for (std::size_t j = 0; j < classes; ++j)
    {
      double const p = std::exp(static_cast<double>(row[j]) - max_v - log_denom);
      out.dlogits[n * classes + j] =
          static_cast<T>((p - (j == labels[n] ? 1.0 : 0.0)) / static_cast<double>(batch));
    }
  }
  out.loss = total / static_cast<double>(batch);
  return out;
}

/**
 * One SGD step with momentum and L2 weight decay:
 *   g = grad + weight_decay * p;  m = momentum * m + g;  p = p - learning_rate * m
 */
template <typename T>
void sgd_step(Network<T> &net, std::vector<Tensor<T>> const &grads, SgdConfig const &cfg)
{
  cfg.validate();
  auto params = net.parameters();
  if (grads.size() != params.size())
  {
    throw DimensionError("gradient count " + std::to_string(grads.size()) + " != parameter count " +
                         std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i)
  {
    if (grads[i].shape() != params[i].value->shape())
      throw DimensionError("gradient shape " + shape_string(grads[i].shape()) + " != parameter shape " +
                           shape_string(params[i].value->shape()) + " for " + params[i].name);
    if (!grads[i].all_finite())
      throw ValueError("non-finite gradient in " + params[i].name);
  }
  T const lr  = static_cast<T>(cfg.learning_rate);
  T const mom = static_cast<T>(cfg.momentum);
  T const wd  = static_cast<T>(cfg.weight_decay);
  for (std::size_t i = 0; i < params.size(); ++i)
  {
    auto &p = *params[i].value;
    auto &m = *params[i].momentum;
    for (std::size_t j = 0; j < p.size(); ++j)
    {
      T const g = grads[i][j] + wd * p[j];
      m[j]      = mom * m[j] + g;
      p[j]      = p[j] - lr * m[j];
    }
  }
}

/// Order-sensitive FNV-1a over the raw bytes of a set of tensors.
template <typename T>
std::uint64_t checksum(std::vector<Layer<T>> const &layers)
{
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (auto const &l : layers)
  {
    for (auto const *group : {&l.params, &l.momentum, &l.buffers})
    {
      for (auto const &t : *group)
      {
        auto const *bytes = reinterpret_cast<unsigned char const *>(t.data());
        for (std::size_t i = 0; i < t.size() * sizeof(T); ++i)
        {
          h ^= bytes[i];
          h *= 0x100000001b3ULL;
        }
      }
    }
  }
  return h;
}

}  // namespace deepclust::nn
