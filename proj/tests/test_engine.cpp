#include "support.hpp"

#include "deepclust/engine.hpp"

#include <gtest/gtest.h>

using namespace deepclust;
using namespace deepclust::engine;

namespace {

std::vector<ImageRecord> small_dataset(std::size_t n = 150, std::uint64_t seed = 1)
{
  return data::generate_dataset(data::preset_config("balanced3", n, seed));
}

RunConfig small_config(std::uint64_t seed = 3)
{
  RunConfig cfg;
  cfg.epochs                  = 3;
  cfg.batch_size              = 64;
  cfg.oversegmentation_factor = 2;
  cfg.num_classes_hint        = 3;
  cfg.seed                    = seed;
  return cfg;
}

std::string csv_of(std::vector<metrics::EpochMetrics> const &log)
{
  std::string s;
  for (auto const &m : log)
    s += metrics::to_csv_row(m) + "\n";
  return s;
}

}  // namespace

TEST(Checkpoint, RoundTripIsBitExact)
{
  auto cfg   = small_config();
  auto state = initial_state(cfg, small_dataset());
  epoch_step(state, cfg, data::AugmentConfig{});
  auto const dir  = support::scratch_dir("ckpt_roundtrip");
  auto const path = dir / "a.dcls";
  save_checkpoint(make_checkpoint(state, cfg), path);
  auto const back = load_checkpoint(path);
  EXPECT_EQ(nn::checksum(back.net.feature_layers()), nn::checksum(state.net.feature_layers()));
  EXPECT_EQ(nn::checksum(back.net.classifier_layers()), nn::checksum(state.net.classifier_layers()));
  EXPECT_EQ(back.epoch, 1u);
  EXPECT_EQ(back.run_seed, cfg.seed);
  EXPECT_EQ(back.prev_assignments, state.prev_assignments);
  EXPECT_EQ(back.metrics_log, state.metrics_log);
  EXPECT_EQ(back.net.architecture().preset, "mini");
  EXPECT_EQ(encode_checkpoint(back), encode_checkpoint(make_checkpoint(state, cfg)));
  EXPECT_FALSE(std::filesystem::exists(dir / "a.dcls.tmp"));
}

TEST(Checkpoint, CorruptedByteFailsChecksum)
{
  auto       cfg   = small_config();
  auto const state = initial_state(cfg, small_dataset());
  auto       bytes = encode_checkpoint(make_checkpoint(state, cfg));
  bytes[bytes.size() / 2] ^= 0x40;
  try
  {
    decode_checkpoint(bytes);
    FAIL();
  }
  catch (FormatError const &e)
  {
    EXPECT_NE(std::string(e.what()).find("checksum"), std::string::npos) << e.what();
  }
  bytes.resize(bytes.size() / 3);
  EXPECT_THROW(decode_checkpoint(bytes), FormatError);
}

TEST(Checkpoint, FutureVersionNamesBothVersions)
{
  auto       cfg   = small_config();
  auto const state = initial_state(cfg, small_dataset());
  auto       bytes = encode_checkpoint(make_checkpoint(state, cfg));
  bytes[4]         = 7;
  bytes[5]         = 0;
  try
  {
    decode_checkpoint(bytes);
    FAIL();
  }
  catch (FormatError const &e)
  {
    std::string const msg = e.what();
    EXPECT_NE(msg.find('7'), std::string::npos) << msg;
    EXPECT_NE(msg.find(std::to_string(kCheckpointVersion)), std::string::npos) << msg;
  }
  bytes[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bytes), FormatError);
}

TEST(ExtractFeatures, ShapeAndDeterminism)
{
  auto       cfg   = small_config();
  auto       state = initial_state(cfg, small_dataset(90));
  auto const a     = extract_features(state, data::AugmentConfig{}, cfg.seed);
  auto const b     = extract_features(state, data::AugmentConfig{}, cfg.seed);
  EXPECT_EQ(a.rows, 90u);
  EXPECT_EQ(a.dim, state.net.feature_dim());
  EXPECT_EQ(a.data, b.data);
}

TEST(ExtractFeatures, RandomNetworkBeatsLargestClassBaseline)
{
  auto const  records = small_dataset(300, 5);
  auto const  truth   = data::truth_labels(records);
  std::size_t wins    = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed)
  {
    nn::Network<float> net(nn::Architecture{}, 3, derive_seed(seed, stream::kInit));
    auto f = extract_features(net, records, data::AugmentConfig{}, seed, stream::kClusterAug, 0);
    auto r = clustering::kmeans(clustering::l2_normalize(std::move(f)), 3, seed);
    wins += metrics::purity(r.assignments, truth) > 1.0 / 3.0 ? 1 : 0;
  }
  EXPECT_GE(wins, 8u);
}

TEST(EpochStep, FirstEpochHasNoPrevAndClustersAreFull)
{
  auto       cfg   = small_config();
  auto       state = initial_state(cfg, small_dataset());
  auto const m0    = epoch_step(state, cfg, data::AugmentConfig{});
  EXPECT_FALSE(m0.nmi_prev.has_value());
  EXPECT_EQ(state.epoch, 1u);
  std::vector<std::size_t> counts(cfg.k(), 0);
  for (auto const &r : state.records)
  {
    ASSERT_LT(r.pseudo_label, cfg.k());
    ++counts[r.pseudo_label];
  }
  for (auto c : counts)
    EXPECT_GT(c, 0u);
  auto const m1 = epoch_step(state, cfg, data::AugmentConfig{});
  ASSERT_TRUE(m1.nmi_prev.has_value());
  EXPECT_EQ(state.metrics_log.size(), 2u);
  EXPECT_TRUE(std::isfinite(m1.loss));
}

TEST(EpochStep, StageErrorLeavesStateUntouched)
{
  auto cfg   = small_config();
  auto state = initial_state(cfg, small_dataset());
  epoch_step(state, cfg, data::AugmentConfig{});
  auto const before = nn::checksum(state.net.feature_layers());
  auto const prev   = state.prev_assignments;
  state.records[7].pixels[0] = std::numeric_limits<float>::quiet_NaN();
  try
  {
    epoch_step(state, cfg, data::AugmentConfig{});
    FAIL();
  }
  catch (StageError const &e)
  {
    EXPECT_EQ(e.stage(), "extract");
  }
  EXPECT_EQ(state.epoch, 1u);
  EXPECT_EQ(state.metrics_log.size(), 1u);
  EXPECT_EQ(state.prev_assignments, prev);
  EXPECT_EQ(nn::checksum(state.net.feature_layers()), before);
}

TEST(Run, IdenticalSeedsGiveIdenticalBytes)
{
  auto const cfg = small_config();
  auto const a   = support::scratch_dir("run_a");
  auto const b   = support::scratch_dir("run_b");
  run(cfg, data::AugmentConfig{}, small_dataset(), {a, std::nullopt, {}});
  run(cfg, data::AugmentConfig{}, small_dataset(), {b, std::nullopt, {}});
  EXPECT_EQ(support::read_bytes(a / "metrics.csv"), support::read_bytes(b / "metrics.csv"));
  EXPECT_EQ(support::read_bytes(checkpoint_path(a, 3)), support::read_bytes(checkpoint_path(b, 3)));
}

TEST(Run, SingleEpochWritesOneRowAndOneCheckpoint)
{
  auto cfg   = small_config();
  cfg.epochs = 1;
  cfg.export_assignments = true;
  auto const dir = support::scratch_dir("run_one");
  run(cfg, data::AugmentConfig{}, small_dataset(), {dir, std::nullopt, {}});
  std::ifstream in(dir / "metrics.csv");
  std::string   line;
  std::size_t   lines = 0;
  while (std::getline(in, line))
    ++lines;
  EXPECT_EQ(lines, 2u);
  EXPECT_TRUE(std::filesystem::exists(checkpoint_path(dir, 1)));
  EXPECT_TRUE(std::filesystem::exists(dir / "assignments_0.csv"));
  std::size_t ckpts = 0;
  for (auto const &e : std::filesystem::directory_iterator(dir))
    ckpts += e.path().extension() == ".dcls" ? 1 : 0;
  EXPECT_EQ(ckpts, 1u);
}

TEST(Run, ResumeContinuesTheUninterruptedRun)
{
  auto cfg = small_config();
  cfg.epochs           = 4;
  cfg.checkpoint_every = 2;
  auto const full = support::scratch_dir("resume_full");
  auto const part = support::scratch_dir("resume_part");
  auto const straight = run(cfg, data::AugmentConfig{}, small_dataset(), {full, std::nullopt, {}});
  auto const resumed =
      run(cfg, data::AugmentConfig{}, small_dataset(), {part, checkpoint_path(full, 2), {}});
  ASSERT_EQ(resumed.metrics_log.size(), 4u);
  // nmi_prev at the first resumed epoch is measured against the restored assignments.
  ASSERT_TRUE(resumed.metrics_log[2].nmi_prev.has_value());
  EXPECT_NEAR(resumed.metrics_log[2].purity, straight.metrics_log[2].purity, 0.02);
  EXPECT_EQ(csv_of(resumed.metrics_log), csv_of(straight.metrics_log));
  EXPECT_EQ(support::read_bytes(checkpoint_path(full, 4)), support::read_bytes(checkpoint_path(part, 4)));

  auto wrong_seed = cfg;
  wrong_seed.seed = 99;
  EXPECT_THROW(resume_state(load_checkpoint(checkpoint_path(full, 2)), wrong_seed, small_dataset()), ValueError);
}

TEST(Run, TruthLabelsNeverReachTraining)
{
  auto const cfg      = small_config();
  auto       permuted = small_dataset();
  Rng        rng(1234);
  for (auto &r : permuted)
    r.truth_class = static_cast<std::uint32_t>(rng.below(3));
  auto const a  = support::scratch_dir("truth_a");
  auto const b  = support::scratch_dir("truth_b");
  auto const sa = run(cfg, data::AugmentConfig{}, small_dataset(), {a, std::nullopt, {}});
  auto const sb = run(cfg, data::AugmentConfig{}, permuted, {b, std::nullopt, {}});
  // Training outputs: parameters, optimizer slots, assignments and the truth-free log columns.
  auto const ca = load_checkpoint(checkpoint_path(a, 3));
  auto const cb = load_checkpoint(checkpoint_path(b, 3));
  EXPECT_EQ(nn::checksum(ca.net.feature_layers()), nn::checksum(cb.net.feature_layers()));
  EXPECT_EQ(nn::checksum(ca.net.classifier_layers()), nn::checksum(cb.net.classifier_layers()));
  EXPECT_EQ(ca.prev_assignments, cb.prev_assignments);
  for (std::size_t e = 0; e < 3; ++e)
  {
    EXPECT_EQ(sa.metrics_log[e].loss, sb.metrics_log[e].loss);
    EXPECT_EQ(sa.metrics_log[e].nmi_prev, sb.metrics_log[e].nmi_prev);
    EXPECT_EQ(sa.metrics_log[e].sizes, sb.metrics_log[e].sizes);
  }
}

TEST(Evaluate, AgreesWithTrainingLogAndRejectsMismatch)
{
  // Reference setting: k = 8 x 3 on balanced data.
  auto cfg                    = small_config();
  cfg.epochs                  = 2;
  cfg.oversegmentation_factor = 8;
  auto const dir   = support::scratch_dir("evaluate");
  auto const state = run(cfg, data::AugmentConfig{}, small_dataset(300), {dir, std::nullopt, {}});
  auto       ckpt  = load_checkpoint(checkpoint_path(dir, 2));
  auto const ev    = evaluate(ckpt, small_dataset(300), data::AugmentConfig{}, cfg.seed);
  EXPECT_EQ(ev.assignments.size(), 300u);
  EXPECT_NEAR(ev.purity, state.metrics_log.back().purity, 0.02);
  EXPECT_TRUE(ev.nmi_prev.has_value());

  Checkpoint untrained{nn::Network<float>(nn::Architecture{}, 6, 1), 0, 0, std::nullopt, {}};
  EXPECT_GT(evaluate(untrained, small_dataset(), data::AugmentConfig{}, 0).purity, 1.0 / 3.0);

  Rng  rng(1);
  auto features = ckpt.net.feature_layers();
  std::vector<nn::Layer<float>> head{nn::make_layer<float>(nn::LayerSpec::linear(64, 24), rng)};
  Checkpoint bad{nn::Network<float>(nn::Architecture{}, features, head, 1), 0, 0, std::nullopt, {}};
  try
  {
    evaluate(bad, small_dataset(), data::AugmentConfig{}, 0);
    FAIL();
  }
  catch (DimensionError const &e)
  {
    std::string const msg = e.what();
    EXPECT_NE(msg.find("expected 64"), std::string::npos) << msg;
    EXPECT_NE(msg.find("actual 128"), std::string::npos) << msg;
  }
}
