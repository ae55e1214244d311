#include <gtest/gtest.h>

#include <bit>
#include <filesystem>
#include <sstream>

#include "bandmoe/rng.hpp"
#include "bandmoe/tensor_io.hpp"

#include <json.hpp>

using namespace bandmoe;

TEST(TensorIo, HeaderLineThenLittleEndianPayload) {
  std::ostringstream os;
  write_tensor(os, Tensor::from({1, 2}, {1.0, -2.0}));
  const std::string bytes = os.str();
  const auto nl = bytes.find('\n');
  ASSERT_NE(nl, std::string::npos);
  auto header = nlohmann::json::parse(bytes.substr(0, nl));
  EXPECT_EQ(header["shape"], nlohmann::json::array({1, 2}));
  EXPECT_EQ(header["dtype"], "f64");
  ASSERT_EQ(bytes.size(), nl + 1 + 16);
  // 1.0 = 0x3FF0000000000000, stored low byte first.
  const unsigned char* p = reinterpret_cast<const unsigned char*>(bytes.data()) + nl + 1;
  for (int i = 0; i < 6; ++i) EXPECT_EQ(p[i], 0x00);
  EXPECT_EQ(p[6], 0xF0);
  EXPECT_EQ(p[7], 0x3F);
}

TEST(TensorIo, RoundTripIsBitExact) {
  CounterRng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    Shape shape(1 + rng.below(4));
    for (auto& d : shape) d = 1 + rng.below(5);
    auto t = rng.normal_tensor(shape, 1e3);
    std::stringstream ss;
    write_tensor(ss, t);
    auto back = read_tensor(ss);
    ASSERT_EQ(back.shape(), shape);
    for (std::size_t i = 0; i < t.numel(); ++i) {
      EXPECT_EQ(std::bit_cast<std::uint64_t>(back[i]), std::bit_cast<std::uint64_t>(t[i]));
    }
  }
}

TEST(TensorIo, TruncatedPayloadIsInputError) {
  std::ostringstream os;
  write_tensor(os, Tensor::zeros({4}));
  std::istringstream is(os.str().substr(0, os.str().size() - 3));
  EXPECT_THROW(read_tensor(is), InputError);
}

TEST(TensorIo, WrongDtypeIsInputError) {
  std::istringstream is("{\"shape\":[1],\"dtype\":\"f32\"}\n1234");
  EXPECT_THROW(read_tensor(is), InputError);
}

TEST(TensorIo, BundleKeepsNamesAndExtraManifest) {
  auto dir = std::filesystem::temp_directory_path() / "bandmoe_bundle_test";
  std::filesystem::remove_all(dir);
  save_bundle(dir, {{"stage0.conv/w", Tensor::from({2}, {1, 2})}, {"b", Tensor::scalar(3)}}, R"({"kind":"demo"})");
  auto b = load_bundle(dir);
  EXPECT_EQ(b.at("stage0.conv/w")[1], 2.0);
  EXPECT_EQ(b.at("b").item(), 3.0);
  EXPECT_EQ(nlohmann::json::parse(b.extra_json)["kind"], "demo");
  EXPECT_THROW(b.at("missing"), InputError);
  std::filesystem::remove_all(dir);
}
