#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <sstream>

#include "phl/tensor.hpp"

using namespace phl;

namespace {

std::string bytes_of(const Tensor& t) {
  std::ostringstream os;
  write_tensor(os, t);
  return os.str();
}

}  // namespace

TEST(TensorFormat, HeaderAndRowMajorLittleEndianLayout) {
  Tensor t(2, 3);
  t << 1, 2, 3, 4, 5, 6;
  const std::string b = bytes_of(t);
  ASSERT_EQ(b.size(), 4u + 8u + 6u * 8u);
  EXPECT_EQ(b.substr(0, 4), "PHT1");
  const auto u = [&](std::size_t off) {
    return static_cast<unsigned>(static_cast<unsigned char>(b[off])) |
           static_cast<unsigned>(static_cast<unsigned char>(b[off + 1])) << 8;
  };
  EXPECT_EQ(u(4), 2u);
  EXPECT_EQ(u(8), 3u);
  // Second stored value is t(0, 1) = 2.0, whose IEEE bits are 0x4000000000000000.
  EXPECT_EQ(static_cast<unsigned char>(b[12 + 8 + 7]), 0x40);
  for (int i = 0; i < 7; ++i) EXPECT_EQ(static_cast<unsigned char>(b[12 + 8 + i]), 0);
}

TEST(TensorFormat, RoundTripIsBitExact) {
  Tensor t = Tensor::Random(7, 5);
  t(3, 2) = -0.0;
  t(0, 0) = 1e-310;
  std::istringstream is(bytes_of(t));
  const Tensor back = read_tensor(is);
  ASSERT_EQ(back.rows(), 7);
  ASSERT_EQ(back.cols(), 5);
  EXPECT_EQ(std::memcmp(back.data(), t.data(), sizeof(double) * t.size()), 0);
}

TEST(TensorFormat, EmptyTensorRoundTrips) {
  std::istringstream is(bytes_of(Tensor(0, 4)));
  const Tensor back = read_tensor(is);
  EXPECT_EQ(back.rows(), 0);
  EXPECT_EQ(back.cols(), 4);
}

TEST(TensorFormat, RejectsBadMagicAndTruncation) {
  std::string b = bytes_of(Tensor::Ones(2, 2));
  std::string bad = b;
  bad[0] = 'X';
  std::istringstream is1(bad);
  EXPECT_THROW(read_tensor(is1), FormatError);
  std::istringstream is2(b.substr(0, b.size() - 3));
  EXPECT_THROW(read_tensor(is2), FormatError);
}

TEST(TensorFormat, FileRoundTrip) {
  const auto path = std::filesystem::temp_directory_path() / "phl_tensor_roundtrip.pht";
  Tensor t = Tensor::Random(3, 4);
  save_tensor(path, t);
  EXPECT_EQ(load_tensor(path), t);
  std::filesystem::remove(path);
  EXPECT_THROW(load_tensor(path), FormatError);
}

TEST(TensorChecksum, SensitiveToValuesAndShape) {
  Tensor a = Tensor::Ones(2, 3);
  Tensor b = a;
  EXPECT_EQ(checksum(a), checksum(b));
  b(1, 2) = std::nextafter(1.0, 2.0);
  EXPECT_NE(checksum(a), checksum(b));
  EXPECT_NE(checksum(Tensor::Ones(2, 3)), checksum(Tensor::Ones(3, 2)));
}

TEST(TensorShape, RequireSameShapeThrows) {
  EXPECT_NO_THROW(require_same_shape(Tensor(2, 2), Tensor(2, 2), "t"));
  EXPECT_THROW(require_same_shape(Tensor(2, 2), Tensor(2, 3), "t"), ShapeError);
  EXPECT_EQ(shape_string(Tensor(2, 3)), "(2x3)");
}
