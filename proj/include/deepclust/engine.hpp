#pragma once

#include "deepclust/checkpoint.hpp"
#include "deepclust/clustering.hpp"
#include "deepclust/data/augment.hpp"
#include "deepclust/data/dataset.hpp"
#include "deepclust/data/sampler.hpp"
#include "deepclust/metrics.hpp"
#include "deepclust/nn/network.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace deepclust::engine {

using clustering::Labels;
using data::Image;
using data::ImageRecord;
using metrics::EpochMetrics;

struct RunConfig
{
  std::size_t       epochs{200};
  std::size_t       batch_size{256};
  nn::SgdConfig     sgd{};
  std::size_t       num_classes_hint{3};  // a user estimate when the class count is unknown
  std::size_t       oversegmentation_factor{8};
  std::size_t       k_override{0};  // 0: k = factor * hint
  std::uint64_t     seed{0};
  std::size_t       checkpoint_every{0};  // 0: only the final checkpoint
  nn::Architecture  arch{};
  std::size_t       kmeans_max_iters{20};
  std::size_t       epoch_size{0};  // sampler draws per epoch; 0: dataset size
  bool              export_assignments{false};

  std::size_t k() const
  {
    return k_override != 0 ? k_override : oversegmentation_factor * num_classes_hint;
  }

  void validate() const
  {
    if (epochs < 1)
      throw ValueError("run.epochs must be >= 1");
    if (batch_size < 1)
      throw ValueError("run.batch_size must be >= 1");
    if (k() < 2)
      throw ValueError("cluster count k must be >= 2, got " + std::to_string(k()));
    if (kmeans_max_iters < 1)
      throw ValueError("run.kmeans_max_iters must be >= 1");
    sgd.validate();
  }
};

struct RunState
{
  nn::Network<float>        net;
  std::vector<ImageRecord>  records;
  std::optional<Labels>     prev_assignments;
  std::vector<EpochMetrics> metrics_log;
  std::size_t               epoch{0};  // completed epochs
};

/// Fresh state for a dataset: network drawn from the run seed, no history.
inline RunState initial_state(RunConfig const &cfg, std::vector<ImageRecord> records)
{
  cfg.validate();
  if (records.size() < cfg.k())
    throw ValueError("dataset has " + std::to_string(records.size()) + " images but k = " + std::to_string(cfg.k()));
  return RunState{nn::Network<float>(cfg.arch, cfg.k(), derive_seed(cfg.seed, stream::kInit)), std::move(records),
                  std::nullopt, {}, 0};
}

/// Seed of the augmentation stream for one image view.
inline std::uint64_t view_seed(std::uint64_t run_seed, std::uint64_t tag, std::string const &id, std::size_t epoch,
                               std::size_t draw = 0)
{
  return derive_seed(run_seed, tag, hash_string(id), epoch, draw);
}

/// Augmented, z-scored view written into slot n of a (B, 1, S, S) batch.
inline void put_view(Tensor<float> &batch, std::size_t n, Image const &src, data::AugmentConfig const &aug,
                     std::uint64_t seed)
{
  Rng         rng(seed);
  Image const view = data::zscore(data::augment(src, aug, rng));
  std::copy(view.values().begin(), view.values().end(), batch.data() + n * view.size());
}

/**
 * Features of one augmented view per image, in record order.
 *
 * Batch norm runs in inference mode (running statistics) so every image is
 * embedded by the same function within an epoch.
 */
inline clustering::FeatureMatrix extract_features(nn::Network<float> &net, std::span<const ImageRecord> records,
                                                  data::AugmentConfig const &aug, std::uint64_t run_seed,
                                                  std::uint64_t stream_tag, std::size_t epoch,
                                                  std::size_t batch_size = 256)
{
  aug.validate();
  std::size_t const         n   = records.size();
  std::size_t const         dim = net.feature_dim();
  std::size_t const         s   = aug.output_size;
  clustering::FeatureMatrix out(n, dim);
  for (std::size_t start = 0; start < n; start += batch_size)
  {
    std::size_t const count = std::min(batch_size, n - start);
    Tensor<float>     batch(Shape{count, net.input_channels(), s, s});
    parallel_for(count, [&](std::size_t i) {
      auto const &rec = records[start + i];
      put_view(batch, i, rec.pixels, aug, view_seed(run_seed, stream_tag, rec.id, epoch));
    });
    auto const result = net.forward(batch, nn::Mode::infer);
    if (result.features.dim(1) != dim)
      throw DimensionError("feature width " + std::to_string(result.features.dim(1)) + " != expected " +
                           std::to_string(dim));
    for (std::size_t i = 0; i < count * dim; ++i)
      out.data[start * dim + i] = static_cast<double>(result.features[i]);
  }
  return out;
}

inline clustering::FeatureMatrix extract_features(RunState &state, data::AugmentConfig const &aug,
                                                  std::uint64_t run_seed, std::size_t batch_size = 256)
{
  return extract_features(state.net, state.records, aug, run_seed, stream::kClusterAug, state.epoch, batch_size);
}

/**
 * One pass of minibatch SGD over sampler-drawn indices against pseudo-labels.
 * Returns the mean loss per image.
 */
inline double train_epoch(nn::Network<float> &net, std::span<const ImageRecord> records, Labels const &targets,
                          std::vector<std::size_t> const &order, RunConfig const &cfg,
                          data::AugmentConfig const &aug, std::size_t epoch)
{
  std::size_t const s          = aug.output_size;
  double            loss_total = 0.0;
  for (std::size_t start = 0; start < order.size(); start += cfg.batch_size)
  {
    std::size_t const          count = std::min(cfg.batch_size, order.size() - start);
    Tensor<float>              batch(Shape{count, net.input_channels(), s, s});
    std::vector<std::uint32_t> labels(count);
    parallel_for(count, [&](std::size_t i) {
      auto const &rec = records[order[start + i]];
      put_view(batch, i, rec.pixels, aug, view_seed(cfg.seed, stream::kTrainAug, rec.id, epoch, start + i));
      labels[i] = targets[order[start + i]];
    });
    auto       fwd   = net.forward(batch, nn::Mode::train);
    auto const loss  = nn::cross_entropy_loss(fwd.logits, labels);
    auto const grads = net.backward(fwd.cache, loss.dlogits);
    nn::sgd_step(net, grads, cfg.sgd);
    loss_total += loss.loss * static_cast<double>(count);
  }
  return loss_total / static_cast<double>(order.size());
}

namespace detail {

template <typename Fn>
auto stage(char const *name, Fn &&fn) -> decltype(fn())
{
  try
  {
    return fn();
  }
  catch (StageError const &)
  {
    throw;
  }
  catch (std::exception const &e)
  {
    throw StageError(name, e.what());
  }
}

}  // namespace detail

/**
 * One alternation: embed, cluster, relabel, score, reset the head, then
 * train one epoch on balanced draws. On error the state is left as it was
 * after the previous completed epoch.
 */
inline EpochMetrics epoch_step(RunState &state, RunConfig const &cfg, data::AugmentConfig const &aug)
{
  std::size_t const  k     = cfg.k();
  std::size_t const  epoch = state.epoch;
  nn::Network<float> net   = state.net;

  auto features = detail::stage("extract", [&] {
    return extract_features(net, state.records, aug, cfg.seed, stream::kClusterAug, epoch, cfg.batch_size);
  });
  auto normalized = detail::stage("normalize", [&] { return clustering::l2_normalize(std::move(features)); });
  auto clusters   = detail::stage("kmeans", [&] {
    return clustering::kmeans(normalized, {k, derive_seed(cfg.seed, stream::kKMeans, epoch), cfg.kmeans_max_iters, 1});
  });
  Labels const &labels = clustering::pseudo_labels(clusters);

  EpochMetrics m;
  m.epoch = epoch;
  detail::stage("metrics", [&] {
    // Ground truth enters here and nowhere else.
    auto const truth = data::truth_labels(state.records);
    if (state.prev_assignments)
      m.nmi_prev = metrics::nmi(labels, *state.prev_assignments);
    m.nmi_labels = metrics::nmi(labels, truth);
    m.purity     = metrics::purity(labels, truth);
    m.sizes      = metrics::cluster_sizes(labels, k);
    return 0;
  });

  m.loss = detail::stage("train", [&] {
    net.reset_classifier(k, derive_seed(cfg.seed, stream::kHeadReset, epoch));
    Rng        sampler_rng(derive_seed(cfg.seed, stream::kSampler, epoch));
    auto const order = data::balanced_epoch_indices(labels, cfg.epoch_size != 0 ? cfg.epoch_size : labels.size(),
                                                    sampler_rng);
    return train_epoch(net, state.records, labels, order, cfg, aug, epoch);
  });
  if (!std::isfinite(m.loss))
    throw StageError("train", "training loss is not finite");

  state.net = std::move(net);
  for (std::size_t i = 0; i < state.records.size(); ++i)
    state.records[i].pseudo_label = labels[i];
  state.prev_assignments = labels;
  state.metrics_log.push_back(m);
  state.epoch = epoch + 1;
  return m;
}

inline Checkpoint make_checkpoint(RunState const &state, RunConfig const &cfg)
{
  return Checkpoint{state.net, cfg.seed, state.epoch, state.prev_assignments, state.metrics_log};
}

/// Restores a run from a checkpoint onto the same dataset.
inline RunState resume_state(Checkpoint ckpt, RunConfig const &cfg, std::vector<ImageRecord> records)
{
  cfg.validate();
  if (ckpt.run_seed != cfg.seed)
    throw ValueError("checkpoint was written with seed " + std::to_string(ckpt.run_seed) + ", run uses " +
                     std::to_string(cfg.seed));
  if (ckpt.prev_assignments && ckpt.prev_assignments->size() != records.size())
    throw DimensionError("checkpoint holds " + std::to_string(ckpt.prev_assignments->size()) +
                         " assignments but the dataset has " + std::to_string(records.size()) + " images");
  if (ckpt.prev_assignments)
    for (std::size_t i = 0; i < records.size(); ++i)
      records[i].pseudo_label = (*ckpt.prev_assignments)[i];
  return RunState{std::move(ckpt.net), std::move(records), std::move(ckpt.prev_assignments),
                  std::move(ckpt.metrics_log), ckpt.epoch};
}

inline void write_assignments(std::filesystem::path const &path, std::span<const ImageRecord> records,
                              Labels const &labels)
{
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out)
    throw IoError("cannot write " + path.string());
  out << "image_id,cluster\n";
  for (std::size_t i = 0; i < records.size(); ++i)
    out << records[i].id << ',' << labels[i] << '\n';
  if (!out.flush())
    throw IoError("write failed for " + path.string());
}

inline std::filesystem::path checkpoint_path(std::filesystem::path const &dir, std::size_t epoch)
{
  return dir / ("ckpt_" + std::to_string(epoch) + ".dcls");
}

struct RunOptions
{
  std::filesystem::path                                  out_dir;
  std::optional<std::filesystem::path>                   resume_from;
  std::function<void(EpochMetrics const &, RunState const &)> on_epoch;  // progress hook
};

/**
 * Runs cfg.epochs alternations with no early stopping.
 *
 * metrics.csv is appended and flushed after every epoch; checkpoints are
 * written every checkpoint_every epochs and after the last one.
 */
inline RunState run(RunConfig const &cfg, data::AugmentConfig const &aug, std::vector<ImageRecord> records,
                    RunOptions const &opts)
{
  cfg.validate();
  aug.validate();
  RunState state = opts.resume_from ? resume_state(load_checkpoint(*opts.resume_from), cfg, std::move(records))
                                    : initial_state(cfg, std::move(records));
  std::filesystem::create_directories(opts.out_dir);
  auto const    metrics_path = opts.out_dir / "metrics.csv";
  std::ofstream log(metrics_path, std::ios::binary | std::ios::trunc);
  if (!log)
    throw IoError("cannot write " + metrics_path.string());
  log << metrics::kMetricsHeader << '\n';
  for (auto const &m : state.metrics_log)
    log << metrics::to_csv_row(m) << '\n';
  log.flush();

  while (state.epoch < cfg.epochs)
  {
    auto const m = epoch_step(state, cfg, aug);
    log << metrics::to_csv_row(m) << '\n';
    if (!log.flush())
      throw IoError("write failed for " + metrics_path.string());
    if (cfg.export_assignments)
      write_assignments(opts.out_dir / ("assignments_" + std::to_string(m.epoch) + ".csv"), state.records,
                        *state.prev_assignments);
    bool const last = state.epoch == cfg.epochs;
    if (last || (cfg.checkpoint_every != 0 && state.epoch % cfg.checkpoint_every == 0))
      save_checkpoint(make_checkpoint(state, cfg), checkpoint_path(opts.out_dir, state.epoch));
    if (opts.on_epoch)
      opts.on_epoch(m, state);
  }
  return state;
}

/// Result of clustering a dataset with a trained network.
struct Evaluation
{
  Labels                assignments;
  double                nmi_labels{0.0};
  double                purity{0.0};
  std::optional<double> nmi_prev;  // against the checkpoint's last assignments, when present
  double                inertia{0.0};
};

/// Embeds every image once (fixed evaluation stream) and clusters with the head width as k.
inline Evaluation evaluate(Checkpoint &ckpt, std::span<const ImageRecord> records, data::AugmentConfig const &aug,
                           std::uint64_t seed, std::size_t kmeans_max_iters = 20)
{
  std::size_t const k = ckpt.net.output_width();
  if (records.size() < k)
    throw DimensionError("dataset has " + std::to_string(records.size()) + " images but the checkpoint expects k = " +
                         std::to_string(k));
  for (auto const &r : records)
  {
    if (r.pixels.rank() != 2)
      throw DimensionError("expected single-channel H x W images (network input channels " +
                           std::to_string(ckpt.net.input_channels()) + "), got " + shape_string(r.pixels.shape()));
  }
  auto const expected_dim = ckpt.net.classifier_layers().front().spec.in_channels;
  if (ckpt.net.feature_dim() != expected_dim)
    throw DimensionError("feature dimension mismatch: expected " + std::to_string(expected_dim) + ", actual " +
                         std::to_string(ckpt.net.feature_dim()));
  auto features = extract_features(ckpt.net, records, aug, seed, stream::kEvaluateAug, ckpt.epoch);
  auto const normalized = clustering::l2_normalize(std::move(features));
  auto const clusters   = clustering::kmeans(normalized, {k, derive_seed(seed, stream::kKMeans, ckpt.epoch), kmeans_max_iters, 1});
  auto const truth      = data::truth_labels(records);
  Evaluation ev;
  ev.assignments = clusters.assignments;
  ev.nmi_labels  = metrics::nmi(ev.assignments, truth);
  ev.purity      = metrics::purity(ev.assignments, truth);
  ev.inertia     = clusters.inertia;
  if (ckpt.prev_assignments && ckpt.prev_assignments->size() == records.size())
    ev.nmi_prev = metrics::nmi(ev.assignments, *ckpt.prev_assignments);
  return ev;
}

}  // namespace deepclust::engine
