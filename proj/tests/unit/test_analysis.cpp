#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "oracles.hpp"

using namespace vfn;
using namespace vfn::testing;

namespace {

std::filesystem::path fresh_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / name;
  std::filesystem::remove_all(dir);
  return dir;
}

}  // namespace

TEST(Heatmap, MinMaxNormalization) {
  auto v = min_max_normalize({2.0, 4.0, 3.0});
  EXPECT_EQ(v, (std::vector<double>{0.0, 1.0, 0.5}));
  EXPECT_EQ(min_max_normalize({7.0, 7.0}), (std::vector<double>{0.0, 0.0}));
  EXPECT_TRUE(min_max_normalize({}).empty());
}

TEST(Heatmap, ChannelMagnitudeIsL2OverChannels) {
  auto m = Tensor<double>::of({1, 1, 1, 2, 2}, {3, 4, 0, -2});
  EXPECT_EQ(channel_magnitude(m, 0), (std::vector<double>{5.0, 2.0}));
}

TEST(Heatmap, PgmRoundTripKeepsSixteenBitPrecision) {
  const auto dir = fresh_dir("vfn_unit_pgm");
  std::filesystem::create_directories(dir);
  Heatmap map{2, 3, {0.0, 0.25, 0.5, 0.75, 1.0, 0.123456}};
  write_pgm(dir / "m.pgm", map);
  auto back = read_pgm(dir / "m.pgm");
  EXPECT_EQ(back.height, 2u);
  EXPECT_EQ(back.width, 3u);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(back.values[i], map.values[i], 0.5 / 65535.0 + 1e-15);
  EXPECT_EQ(std::filesystem::file_size(dir / "m.pgm"), std::string("P5\n3 2\n65535\n").size() + 12);
  std::ofstream(dir / "bad.pgm") << "P2\n1 1\n255\n0\n";
  EXPECT_THROW(read_pgm(dir / "bad.pgm"), IoError);
  EXPECT_THROW(read_pgm(dir / "missing.pgm"), IoError);
}

TEST(ModulatorExport, WritesTwoImagesPerFrameInUnitRange) {
  auto cfg = tiny_network(DesignVariant::e_parallel, 4, 4);
  Rng rng(1);
  auto net = init_network<double>(cfg, rng);
  auto clip = random_tensor({4, 32, 32, 1}, rng);
  const auto dir = fresh_dir("vfn_unit_maps");
  auto paths = export_modulator_maps(net, clip, 0, 0, dir);
  ASSERT_EQ(paths.size(), 8u);
  for (const auto& p : paths) {
    ASSERT_TRUE(std::filesystem::exists(p)) << p;
    auto m = read_pgm(p);
    EXPECT_EQ(m.height, 8u);
    EXPECT_EQ(m.width, 8u);
    for (double v : m.values) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
  EXPECT_EQ(paths[0].filename(), "frame0_spatial.pgm");
  EXPECT_EQ(paths[1].filename(), "frame0_temporal.pgm");
  // The temporal modulator is constant over space, so its map is flat.
  for (double v : read_pgm(paths[1]).values) EXPECT_EQ(v, 0.0);
}

TEST(ModulatorExport, ConstantClipGivesFlatSpatialInterior) {
  auto cfg = tiny_network(DesignVariant::e_parallel, 4, 2);
  Rng rng(2);
  auto net = init_network<double>(cfg, rng);
  ModulatorProbe<double> probe{0, 0, {}};
  network_forward(Tensor<double>::full({1, 2, 32, 32, 1}, 0.3), net, {}, &probe);
  const auto maps = modulator_maps(probe.pair);
  // Kernels 3 and 5 reach 3 tokens; beyond that every token sees the same
  // neighbourhood.
  const auto& s = maps[0].first;
  const std::size_t r = 3;
  for (std::size_t y = r; y + r < s.height; ++y)
    for (std::size_t x = r; x + r < s.width; ++x)
      EXPECT_EQ(s.values[y * s.width + x], s.values[r * s.width + r]);
}

TEST(ModulatorExport, RejectsMissingBlocksAndBadClips) {
  auto cfg = tiny_network(DesignVariant::e_parallel, 4, 2);
  Rng rng(3);
  auto net = init_network<double>(cfg, rng);
  auto clip = random_tensor({2, 32, 32, 1}, rng);
  EXPECT_THROW(export_modulator_maps(net, clip, 4, 0, fresh_dir("vfn_unit_x")), ConfigError);
  EXPECT_THROW(export_modulator_maps(net, clip, 0, 3, fresh_dir("vfn_unit_x")), ConfigError);
  EXPECT_THROW(export_modulator_maps(net, random_tensor({2, 32, 32}, rng), 0, 0, fresh_dir("vfn_unit_x")),
               DimensionError);
}

TEST(ModulatorExport, SpatialOnlyVariantWritesEmptyTemporalMaps) {
  auto cfg = tiny_network(DesignVariant::a_spatial_avg, 4, 2);
  Rng rng(4);
  auto net = init_network<double>(cfg, rng);
  auto paths = export_modulator_maps(net, random_tensor({2, 32, 32, 1}, rng), 1, 0, fresh_dir("vfn_unit_a"));
  ASSERT_EQ(paths.size(), 4u);
  for (double v : read_pgm(paths[1]).values) EXPECT_EQ(v, 0.0);
}
