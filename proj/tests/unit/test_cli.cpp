#include <gtest/gtest.h>

#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "oracles.hpp"

namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string out;
};

Run vfn_cli(const std::string& args) {
  const std::string cmd = std::string(VFN_CLI_PATH) + " " + args + " 2>/dev/null";
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return {};
  Run r;
  std::array<char, 4096> buf;
  std::size_t n;
  while ((n = fread(buf.data(), 1, buf.size(), pipe)) > 0) r.out.append(buf.data(), n);
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

fs::path fresh_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  return dir;
}

// Seconds-scale synthetic run.
fs::path tiny_config(const fs::path& dir) {
  fs::create_directories(dir);
  const auto path = dir / "tiny.ini";
  std::ofstream(path) << "[network]\nblocks_per_stage = 1 1 1 1\nembed_dim = 4\nnum_classes = 4\n"
                         "in_channels = 1\nframes = 2\nheight = 32\nwidth = 32\ndrop_path_rate = 0\n"
                         "[train]\nbatch_size = 4\nepochs = 2\nwarmup_epochs = 1\nbase_lr = 0.5\n"
                         "[data]\ntrain_size = 8\ntest_size = 4\n"
                      << "[output]\ndir = " << (dir / "out").string() << "\n";
  return path;
}

std::size_t count_lines(const std::string& s, const std::string& prefix) {
  std::istringstream is(s);
  std::size_t n = 0;
  for (std::string line; std::getline(is, line);) n += line.rfind(prefix, 0) == 0;
  return n;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p);
  return {std::istreambuf_iterator<char>(is), {}};
}

}  // namespace

TEST(Cli, HelpAndUsageErrors) {
  EXPECT_EQ(vfn_cli("--help").code, 0);
  EXPECT_EQ(vfn_cli("").code, 2);
  EXPECT_EQ(vfn_cli("frobnicate").code, 2);
  EXPECT_EQ(vfn_cli("flops --frames x").code, 2);
  EXPECT_EQ(vfn_cli("--threads 0 make-data").code, 2);
}

TEST(Cli, ConfigAndIoErrorsMapToExitCodes) {
  const auto dir = fresh_dir("vfn_cli_err");
  fs::create_directories(dir);
  std::ofstream(dir / "bad.ini") << "[train]\nlearning_rate = 1\n";
  EXPECT_EQ(vfn_cli("--config " + (dir / "bad.ini").string() + " train").code, 2);
  EXPECT_EQ(vfn_cli("--config " + (dir / "missing.ini").string() + " train").code, 3);
  // The default configuration is paper scale and has no synthetic task.
  EXPECT_EQ(vfn_cli("train").code, 2);
  const auto cfg = tiny_config(dir);
  EXPECT_EQ(vfn_cli("--config " + cfg.string() + " eval " + (dir / "none.vfn").string()).code, 3);
}

TEST(Cli, FlopsPrintsPresetsAndCrossover) {
  const auto r = vfn_cli("flops");
  ASSERT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("model,params,flops\n"), std::string::npos);
  EXPECT_EQ(count_lines(r.out, "T,") + count_lines(r.out, "S,") + count_lines(r.out, "B,"), 3u);
  const auto at = r.out.find("attention_crossover_tokens,");
  ASSERT_NE(at, std::string::npos);
  EXPECT_LT(std::stoul(r.out.substr(at + 27)), 3136u);
}

TEST(Cli, FlopsWritesPerLayerCsvForConfiguredNetwork) {
  const auto dir = fresh_dir("vfn_cli_flops");
  const auto cfg = tiny_config(dir);
  ASSERT_EQ(vfn_cli("--config " + cfg.string() + " flops").code, 0);
  const auto csv = slurp(dir / "out" / "flops.csv");
  EXPECT_EQ(csv.rfind("layer,params,flops\n", 0), 0u);
  EXPECT_EQ(count_lines(csv, "total,"), 1u);
}

TEST(Cli, TrainEvalVisualizeRoundTrip) {
  const auto dir = fresh_dir("vfn_cli_train");
  const auto cfg = tiny_config(dir);
  const auto out = dir / "out";
  const auto r = vfn_cli("--config " + cfg.string() + " --seed 5 train");
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_EQ(count_lines(r.out, "epoch "), 2u);
  EXPECT_EQ(count_lines(slurp(out / "metrics.log"), "epoch "), 2u);
  ASSERT_TRUE(fs::exists(out / "checkpoint.vfn"));
  // The written config reproduces the run, seed override included.
  const auto written = vfn::load_config(out / "config.ini");
  EXPECT_EQ(written.train.seed, 5u);

  const auto ckpt = (out / "checkpoint.vfn").string();
  const auto e1 = vfn_cli("--config " + cfg.string() + " eval " + ckpt);
  ASSERT_EQ(e1.code, 0);
  EXPECT_NE(e1.out.find("views 1x1 clips 4 top1 "), std::string::npos) << e1.out;
  EXPECT_EQ(vfn_cli("--config " + cfg.string() + " eval " + ckpt + " --views 2x3").code, 0);
  EXPECT_EQ(vfn_cli("--config " + cfg.string() + " eval " + ckpt + " --views 0x3").code, 2);
  EXPECT_EQ(vfn_cli("--config " + cfg.string() + " eval " + ckpt + " --views many").code, 2);

  const auto v = vfn_cli("--config " + cfg.string() + " visualize " + ckpt + " --clip 1");
  ASSERT_EQ(v.code, 0);
  EXPECT_TRUE(fs::exists(out / "heatmaps" / "frame0_spatial.pgm"));
  EXPECT_TRUE(fs::exists(out / "heatmaps" / "frame1_temporal.pgm"));
  EXPECT_EQ(vfn_cli("--config " + cfg.string() + " visualize " + ckpt + " --clip 99").code, 2);
}

TEST(Cli, SeededTrainingRunsWriteIdenticalLogs) {
  const auto dir = fresh_dir("vfn_cli_seed");
  const auto cfg = tiny_config(dir);
  ASSERT_EQ(vfn_cli("--config " + cfg.string() + " --out " + (dir / "r1").string() + " train").code, 0);
  // A second worker thread must not change a single bit.
  ASSERT_EQ(vfn_cli("--config " + cfg.string() + " --threads 2 --out " + (dir / "r2").string() + " train").code, 0);
  EXPECT_EQ(slurp(dir / "r1" / "metrics.log"), slurp(dir / "r2" / "metrics.log"));
  EXPECT_EQ(slurp(dir / "r1" / "checkpoint.vfn"), slurp(dir / "r2" / "checkpoint.vfn"));
}

TEST(Cli, MakeDataWritesLoadableTensors) {
  const auto dir = fresh_dir("vfn_cli_data");
  const auto cfg = tiny_config(dir);
  ASSERT_EQ(vfn_cli("--config " + cfg.string() + " make-data").code, 0);
  const auto out = dir / "out";
  auto data = vfn::load_dataset<double>(out / "train_clips.tensor", out / "train_labels.txt");
  EXPECT_EQ(data.size(), 8u);
  EXPECT_EQ(data.clips.shape(), (vfn::Shape{8, 2, 32, 32, 1}));
  // The written files can be trained on directly.
  std::ofstream(dir / "files.ini") << slurp(cfg) << "[data]\ntrain_clips = " << (out / "train_clips.tensor").string()
                                   << "\ntrain_labels = " << (out / "train_labels.txt").string()
                                   << "\ntest_clips = " << (out / "test_clips.tensor").string()
                                   << "\ntest_labels = " << (out / "test_labels.txt").string() << "\n";
  EXPECT_EQ(vfn_cli("--config " + (dir / "files.ini").string() + " --out " + (dir / "f").string() + " train").code, 0);
}

TEST(Cli, GradcheckPasses) {
  const auto r = vfn_cli("gradcheck");
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("gradcheck passed"), std::string::npos);
  EXPECT_EQ(count_lines(r.out, "FAIL "), 0u);
}

TEST(Cli, AblateAndCompareWriteTables) {
  const auto dir = fresh_dir("vfn_cli_ablate");
  const auto cfg = tiny_config(dir);
  ASSERT_EQ(vfn_cli("--config " + cfg.string() + " ablate --axis fusion").code, 0);
  const auto csv = slurp(dir / "out" / "ablate.csv");
  EXPECT_EQ(count_lines(csv, "fusion="), 3u);
  EXPECT_EQ(vfn_cli("--config " + cfg.string() + " ablate --axis depth").code, 2);
  ASSERT_EQ(vfn_cli("--config " + cfg.string() + " compare-designs").code, 0);
  const auto table = slurp(dir / "out" / "compare_designs.csv");
  EXPECT_EQ(table.rfind("variant,params,flops,top1\n", 0), 0u);
  for (const char* v : {"a_", "b_", "c_", "d_", "e_"}) EXPECT_EQ(count_lines(table, v), 1u) << v;
}
