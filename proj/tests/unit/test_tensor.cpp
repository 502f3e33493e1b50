#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "oracles.hpp"

using namespace vfn;
using vfn::testing::random_tensor;

namespace {

std::filesystem::path temp_path(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "vfn_unit";
  std::filesystem::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST(Tensor, RejectsZeroDimensionsAndSizeMismatch) {
  EXPECT_THROW(Tensor<double>(Shape{2, 0}), DimensionError);
  EXPECT_THROW(Tensor<double>(Shape{2, 2}, std::vector<double>(3)), DimensionError);
  Tensor<double> t(Shape{2, 3});
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_THROW(t.item(), UsageError);
}

TEST(Tensor, CopiesShareStorageClonesDoNot) {
  auto a = Tensor<double>::full({3}, 1.0);
  Tensor<double> alias = a;
  Tensor<double> copy = a.clone();
  alias.mutable_data()[0] = 5.0;
  EXPECT_EQ(a[0], 5.0);
  EXPECT_EQ(copy[0], 1.0);
}

TEST(Errors, ExitCodesFollowCategories) {
  EXPECT_EQ(exit_code(ErrorKind::config), 2);
  EXPECT_EQ(exit_code(ErrorKind::dimension), 2);
  EXPECT_EQ(exit_code(ErrorKind::io), 3);
  EXPECT_EQ(exit_code(ErrorKind::numeric), 4);
}

TEST(TensorFile, RoundTripIsBitExact) {
  Rng rng(3);
  auto t = random_tensor({2, 3, 4}, rng);
  t.mutable_data()[0] = 0.1;  // not representable exactly in decimal
  std::stringstream ss;
  write_tensor(ss, t);
  auto back = read_tensor<double>(ss);
  EXPECT_TRUE(vfn::testing::bit_equal(t, back));
}

TEST(TensorFile, HeaderIsTextThenLittleEndianDoubles) {
  auto t = Tensor<double>::of({2}, {1.0, -2.0});
  std::stringstream ss;
  write_tensor(ss, t);
  const std::string s = ss.str();
  ASSERT_EQ(s.substr(0, 9), "shape: 2\n");
  ASSERT_EQ(s.size(), 9u + 16u);
  // 1.0 = 0x3FF0000000000000, little-endian: last byte 0x3F.
  EXPECT_EQ(static_cast<unsigned char>(s[9 + 7]), 0x3F);
  EXPECT_EQ(static_cast<unsigned char>(s[9 + 6]), 0xF0);
  EXPECT_EQ(static_cast<unsigned char>(s[9 + 0]), 0x00);
}

TEST(TensorFile, TruncatedOrMalformedInputIsAnIoError) {
  std::stringstream bad("shape: 4\nabc");
  EXPECT_THROW(read_tensor<double>(bad), IoError);
  std::stringstream nohdr("dims 4\n");
  EXPECT_THROW(read_tensor<double>(nohdr), IoError);
  EXPECT_THROW(load_tensor<double>("/nonexistent/file.tensor"), IoError);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  Rng rng(5);
  NamedTensors<double> params{{"a.weight", random_tensor({3, 4}, rng)}, {"b", random_tensor({7}, rng)}};
  const auto path = temp_path("roundtrip.vfn");
  save_checkpoint(path, params);
  auto back = load_checkpoint<double>(path);
  ASSERT_EQ(back.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(back[i].first, params[i].first);
    EXPECT_TRUE(vfn::testing::bit_equal(back[i].second, params[i].second));
  }
  // Re-saving the loaded tensors reproduces the file byte for byte.
  const auto again = temp_path("roundtrip2.vfn");
  save_checkpoint(again, back);
  std::ifstream a(path, std::ios::binary), b(again, std::ios::binary);
  std::string sa((std::istreambuf_iterator<char>(a)), {}), sb((std::istreambuf_iterator<char>(b)), {});
  EXPECT_EQ(sa, sb);
}

TEST(Checkpoint, RejectsGarbage) {
  const auto path = temp_path("garbage.vfn");
  std::ofstream(path) << "not a checkpoint\n";
  EXPECT_THROW(load_checkpoint<double>(path), IoError);
}

TEST(Autograd, NonScalarLossIsAUsageError) {
  Rng rng(1);
  auto x = random_tensor({2, 2}, rng, -1, 1, true);
  auto y = scale(x, 2.0);
  EXPECT_THROW(backward(y, {x}), UsageError);
}

TEST(Autograd, UnreachableParameterGetsZeros) {
  Rng rng(1);
  auto x = random_tensor({3}, rng, -1, 1, true);
  auto unused = random_tensor({2}, rng, -1, 1, true);
  auto g = backward(sum(mul(x, x)), {x, unused});
  for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(g[0][i], 2.0 * x[i]);
  EXPECT_EQ(g[1][0], 0.0);
  EXPECT_EQ(g[1][1], 0.0);
}

TEST(Autograd, FanOutAccumulates) {
  // f = sum(x*x + 3x): df/dx = 2x + 3, with x used three times.
  Rng rng(2);
  auto x = random_tensor({4}, rng, -1, 1, true);
  auto f = sum(add(mul(x, x), scale(x, 3.0)));
  auto g = backward(f, {x});
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(g[0][i], 2.0 * x[i] + 3.0, 1e-15);
}

TEST(Autograd, NoGradGuardRecordsNothing) {
  Rng rng(2);
  auto x = random_tensor({4}, rng, -1, 1, true);
  NoGradGuard guard;
  auto y = mul(x, x);
  EXPECT_FALSE(y.tracks_grad());
}

TEST(Autograd, RepeatedBackwardGivesSameGradients) {
  Rng rng(4);
  auto x = random_tensor({5}, rng, -1, 1, true);
  auto loss = sum(gelu(mul(x, x)));
  auto g1 = backward(loss, {x});
  auto g2 = backward(loss, {x});
  EXPECT_TRUE(vfn::testing::bit_equal(g1[0], g2[0]));
}
