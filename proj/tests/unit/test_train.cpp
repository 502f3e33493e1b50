#include <gtest/gtest.h>

#include <sstream>

#include "oracles.hpp"

using namespace vfn;
using namespace vfn::testing;

namespace {

TrainConfig quick_config() {
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.warmup_epochs = 1;
  cfg.batch_size = 4;
  cfg.base_lr = 0.5;
  cfg.seed = 3;
  return cfg;
}

Dataset<double> small_set(std::size_t n, std::uint64_t seed) {
  SyntheticVideoTask task;
  task.frames = 4;
  task.speed = 2;
  Rng rng(seed);
  return make_synthetic_dataset<double>(task, n, rng);
}

NetworkConfig small_net() {
  auto cfg = tiny_network(DesignVariant::e_parallel, 4, 4);
  cfg.drop_path_rate = 0.1;
  return cfg;
}

}  // namespace

TEST(TrainConfig, ValidationAndPeakScaling) {
  TrainConfig cfg;
  EXPECT_NO_THROW(cfg.validate());
  EXPECT_DOUBLE_EQ(cfg.peak_lr(), 0.01 * 32 / 512);
  cfg.warmup_epochs = cfg.epochs;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = {};
  cfg.label_smoothing = 1.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = {};
  cfg.mixup_prob = 1.5;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(LrSchedule, WarmupPeakCosineAndContinuity) {
  const LrSchedule s{0.2, 10, 50};
  EXPECT_EQ(s.at(0), 0.0);
  EXPECT_DOUBLE_EQ(s.at(5), 0.1);
  EXPECT_DOUBLE_EQ(s.at(10), 0.2);
  EXPECT_NEAR(s.at(49), 0.0, 1e-18);
  EXPECT_NEAR(s.at(9), s.at(10), 0.2 / 10 + 1e-12);
  // The cosine side is continuous at the junction.
  const double eps_step = s.at(10) - s.at(11);
  EXPECT_GT(eps_step, 0.0);
  EXPECT_LT(eps_step, 1e-3);
  for (std::size_t t = 11; t < 50; ++t) EXPECT_LE(s.at(t), s.at(t - 1));
  // Midpoint of the cosine half is half the peak.
  const LrSchedule m{1.0, 0, 101};
  EXPECT_NEAR(m.at(50), 0.5, 1e-15);
}

TEST(Sgd, MomentumRecurrenceByHand) {
  auto p = Tensor<double>::of({2}, {1.0, -1.0});
  std::vector<Tensor<double>> params{p};
  std::vector<std::vector<double>> g{{0.5, 2.0}};
  SgdState<double> state;
  sgd_step(std::span<Tensor<double>>(params), std::span<const std::vector<double>>(g), 0.1, 0.9, state);
  EXPECT_DOUBLE_EQ(p[0], 1.0 - 0.1 * 0.5);
  sgd_step(std::span<Tensor<double>>(params), std::span<const std::vector<double>>(g), 0.1, 0.9, state);
  EXPECT_DOUBLE_EQ(p[0], 1.0 - 0.1 * 0.5 - 0.1 * (0.9 * 0.5 + 0.5));
  EXPECT_DOUBLE_EQ(p[1], -1.0 - 0.1 * 2.0 - 0.1 * (0.9 * 2.0 + 2.0));
  std::vector<std::vector<double>> bad{{1.0}};
  EXPECT_THROW(sgd_step(std::span<Tensor<double>>(params), std::span<const std::vector<double>>(bad), 0.1, 0.9, state),
               Error);
}

TEST(Sgd, ZeroLearningRateLeavesParametersUnchanged) {
  Rng rng(1);
  auto p = random_tensor({5}, rng);
  const auto before = p.clone();
  std::vector<Tensor<double>> params{p};
  std::vector<std::vector<double>> g{{1, 2, 3, 4, 5}};
  SgdState<double> state;
  for (int i = 0; i < 3; ++i)
    sgd_step(std::span<Tensor<double>>(params), std::span<const std::vector<double>>(g), 0.0, 0.9, state);
  EXPECT_TRUE(bit_equal(p, before));
}

TEST(Mixup, ConvexCombinationOfClipsAndTargets) {
  Rng rng(2);
  Batch<double> b{random_tensor({3, 2, 2, 2, 1}, rng), smoothed_targets<double>({0, 1, 2}, 4, 0.0)};
  const std::vector<std::size_t> perm{2, 0, 1};
  auto m = mixup(b, 0.3, perm);
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 8; ++j)
      EXPECT_NEAR(m.clips[i * 8 + j], 0.3 * b.clips[i * 8 + j] + 0.7 * b.clips[perm[i] * 8 + j], 1e-15);
    double s = 0;
    for (std::size_t k = 0; k < 4; ++k) s += m.targets[i * 4 + k];
    EXPECT_NEAR(s, 1.0, 1e-15);
  }
  EXPECT_DOUBLE_EQ(m.targets[0 * 4 + 0], 0.3);
  EXPECT_DOUBLE_EQ(m.targets[0 * 4 + 2], 0.7);
}

TEST(CutMix, PastesBoxOnEveryFrameAndWeighsTargetsByArea) {
  auto clips = Tensor<double>::zeros({2, 3, 4, 4, 1});
  for (std::size_t j = 48; j < 96; ++j) clips.mutable_data()[j] = 1.0;
  Batch<double> b{clips, smoothed_targets<double>({0, 1}, 2, 0.0)};
  const CutBox box{1, 3, 0, 2};
  const double kept = cutmix(b, box, {1, 0});
  EXPECT_DOUBLE_EQ(kept, 0.75);
  for (std::size_t t = 0; t < 3; ++t)
    for (std::size_t y = 0; y < 4; ++y)
      for (std::size_t x = 0; x < 4; ++x) {
        const bool inside = y >= 1 && y < 3 && x < 2;
        EXPECT_EQ(b.clips[((t * 4 + y) * 4 + x)], inside ? 1.0 : 0.0);
        EXPECT_EQ(b.clips[48 + ((t * 4 + y) * 4 + x)], inside ? 0.0 : 1.0);
      }
  EXPECT_DOUBLE_EQ(b.targets[0], 0.75);
  EXPECT_DOUBLE_EQ(b.targets[1], 0.25);
}

TEST(CutMix, BoxStaysInsideFrame) {
  Rng rng(3);
  for (int i = 0; i < 200; ++i) {
    const double lambda = rng.uniform(0.0, 1.0);
    const CutBox box = sample_cut_box(7, 9, lambda, rng);
    EXPECT_LE(box.y0, box.y1);
    EXPECT_LE(box.y1, 7u);
    EXPECT_LE(box.x0, box.x1);
    EXPECT_LE(box.x1, 9u);
  }
}

TEST(MixupCutmix, BatchOfOneIsSkippedWithWarning) {
  std::vector<std::string> seen;
  auto saved = warning_handler();
  warning_handler() = [&](const std::string& m) { seen.push_back(m); };
  Rng rng(4);
  TrainConfig cfg;
  cfg.mixup_prob = 1.0;
  Batch<double> b{random_tensor({1, 2, 2, 2, 1}, rng), smoothed_targets<double>({1}, 4, 0.1)};
  auto out = mixup_cutmix(b, cfg, rng);
  warning_handler() = saved;
  EXPECT_TRUE(bit_equal(out.clips, b.clips));
  EXPECT_EQ(seen.size(), 1u);
}

TEST(Flip, MirrorsEachFrameAndMapsHorizontalClasses) {
  SyntheticVideoTask task;
  task.noise_std = 0.0;
  Rng rng(5);
  auto clip = generate_clip<double>(task, static_cast<int>(Direction::right), rng);
  auto clips = reshape(clip.video, {1, 8, 32, 32, 1});
  auto flipped = clips.clone();
  hflip_clip(flipped, 0);
  for (std::size_t t = 0; t < 8; ++t)
    for (std::size_t y = 0; y < 32; ++y)
      for (std::size_t x = 0; x < 32; ++x)
        ASSERT_EQ(flipped[(t * 32 + y) * 32 + x], clips[(t * 32 + y) * 32 + 31 - x]);
  EXPECT_EQ(hflip_class(static_cast<int>(Direction::right)), static_cast<int>(Direction::left));
  EXPECT_EQ(hflip_class(static_cast<int>(Direction::up)), static_cast<int>(Direction::up));
}

TEST(Training, SeededRunsAreBitIdentical) {
  const auto data = small_set(10, 6), held = small_set(4, 7);
  std::ostringstream a, b;
  TrainHooks ha, hb;
  ha.log = &a;
  hb.log = &b;
  ha.flip_label = hb.flip_label = hflip_class;
  auto ra = train<double>(small_net(), quick_config(), data, held, ha);
  auto rb = train<double>(small_net(), quick_config(), data, held, hb);
  EXPECT_EQ(a.str(), b.str());
  EXPECT_EQ(ra.history.size(), 2u);
  auto na = ra.params.named(), nb = rb.params.named();
  for (std::size_t i = 0; i < na.size(); ++i) EXPECT_TRUE(bit_equal(na[i].second, nb[i].second)) << na[i].first;
}

TEST(Training, ZeroLearningRateKeepsInitialization) {
  auto cfg = quick_config();
  cfg.base_lr = 0.0;
  cfg.epochs = 1;
  cfg.warmup_epochs = 0;
  const auto data = small_set(6, 8);
  auto r = train<double>(small_net(), cfg, data, data);
  Rng rng(cfg.seed);
  auto fresh = init_network<double>(small_net(), rng);
  auto a = r.params.named(), b = fresh.named();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_TRUE(bit_equal(a[i].second, b[i].second)) << a[i].first;
}

TEST(Training, KeepsPartialLastBatchAndLogsMetricsLines) {
  auto cfg = quick_config();
  cfg.epochs = 1;
  cfg.warmup_epochs = 0;
  std::ostringstream log;
  TrainHooks hooks;
  hooks.log = &log;
  const auto data = small_set(5, 9);
  auto r = train<double>(small_net(), cfg, data, data, hooks);
  ASSERT_EQ(r.history.size(), 1u);
  EXPECT_EQ(log.str().rfind("epoch 1 loss ", 0), 0u);
  EXPECT_GT(r.history[0].loss, 0.0);
  EXPECT_EQ(r.history[0].lr, 0.0);  // one epoch: the last step is the end of the cosine
}

TEST(Training, ExplodingLearningRateRaisesNumericFault) {
  auto cfg = quick_config();
  cfg.base_lr = 1e30;
  cfg.mixup_prob = cfg.cutmix_prob = 0.0;
  cfg.epochs = 3;
  const auto data = small_set(8, 10);
  try {
    train<double>(small_net(), cfg, data, data);
    FAIL() << "expected a numeric fault";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("non-finite"), std::string::npos);
  }
}

TEST(Evaluate, ArgmaxTiesGoToLowestIndex) {
  auto scores = Tensor<double>::of({2, 3}, {1, 5, 5, 0, 0, 0});
  EXPECT_EQ(argmax_rows(scores), (std::vector<int>{1, 0}));
}
