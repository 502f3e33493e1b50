#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "oracles.hpp"

using namespace vfn;

namespace {

ExperimentConfig parse(const std::string& text) {
  std::istringstream is(text);
  return parse_config(is, "test.ini");
}

}  // namespace

TEST(Config, DefaultsRoundTripThroughIni) {
  ExperimentConfig c;
  EXPECT_EQ(parse(to_ini(c)), c);
}

TEST(Config, NonDefaultValuesRoundTripExactly) {
  ExperimentConfig c;
  c.network.embed_dim = 32;
  c.network.blocks_per_stage = {1, 1, 2, 1};
  c.network.focal.variant = DesignVariant::c_factorized_encoder;
  c.network.focal.fusion = Fusion::learned_projection;
  c.network.embedding = Embedding::tubelet_2;
  c.network.drop_path_rate = 0.1 + 0.2;  // not exactly representable in short form
  c.train.base_lr = 1.0 / 3.0;
  c.train.clip_grad_norm = 2.5;
  c.precision = Precision::float32;
  c.data.task.noise_std = 0.0;
  c.data.train_clips = "clips.tensor";
  c.out_dir = "runs/x";
  EXPECT_EQ(parse(to_ini(c)), c);
}

TEST(Config, PresetLineSetsWidthAndDepth) {
  auto c = parse("[network]\npreset = S\n");
  EXPECT_EQ(c.network.embed_dim, 96u);
  EXPECT_EQ(c.network.blocks_per_stage, (std::array<std::size_t, 4>{2, 2, 18, 2}));
  c = parse("[network]\npreset = B\nembed_dim = 64\n");
  EXPECT_EQ(c.network.embed_dim, 64u);
}

TEST(Config, ErrorsNameFileAndLine) {
  try {
    parse("[train]\nepochs = 3\nlearning_rate = 0.1\n");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("test.ini:3"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("learning_rate"), std::string::npos);
  }
  EXPECT_THROW(parse("[nope]\n"), ConfigError);
  EXPECT_THROW(parse("epochs = 3\n"), ConfigError);
  EXPECT_THROW(parse("[train]\nepochs\n"), ConfigError);
  EXPECT_THROW(parse("[train]\nepochs = three\n"), ConfigError);
  EXPECT_THROW(parse("[network]\nblocks_per_stage = 1 2 3\n"), ConfigError);
  EXPECT_THROW(parse("[focal]\nvariant = z\n"), ConfigError);
  EXPECT_THROW(parse("[train]\nprecision = half\n"), ConfigError);
}

TEST(Config, CommentsAndBlankLinesAreIgnored) {
  auto c = parse("# header\n\n[train]  \n epochs = 7 ; trailing\n");
  EXPECT_EQ(c.train.epochs, 7u);
}

TEST(Config, ValidationChecksTaskAndClassCount) {
  ExperimentConfig c;
  c.network.height = c.network.width = 32;
  c.network.in_channels = 1;
  c.network.num_classes = 4;
  EXPECT_NO_THROW(c.validate());
  c.network.num_classes = 400;
  EXPECT_THROW(c.validate(), ConfigError);
  c.network.num_classes = 4;
  c.data.task.speed = 5;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Config, LoadReportsMissingFileAsIoError) {
  EXPECT_THROW(load_config("/nonexistent/vfn.ini"), IoError);
  const auto path = std::filesystem::temp_directory_path() / "vfn_unit_cfg.ini";
  std::ofstream(path) << "[output]\ndir = somewhere\n";
  EXPECT_EQ(load_config(path).out_dir, "somewhere");
}
